"""POD bases via the method of snapshots, plus supremizer enrichment."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as la

from .grid import GridSpec, diff_ops
from .minifom import SnapshotSet
from .snapshots import FormatError, field_weights

_KINDS = ("velocity", "pressure", "eddy_viscosity")
_FIELD_OF_KIND = {"velocity": "u", "pressure": "p", "eddy_viscosity": "nu_t"}


class RankDeficiencyError(ValueError):
    """More modes requested than the snapshot set supports."""

    def __init__(self, requested, usable):
        super().__init__(f"requested {requested} modes but snapshot rank is {usable}")
        self.usable_rank = usable


class DegenerateModeError(ValueError):
    """A supremizer candidate has (numerically) zero norm."""


@dataclass
class PodBasis:
    """Orthonormal spatial modes with their singular values.

    ``modes`` is dof x n_modes; velocity modes stack the two components.
    ``n_sup`` counts appended supremizer modes (velocity kind only).
    """

    modes: np.ndarray
    singular_values: np.ndarray
    kind: str
    n_sup: int = 0

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown basis kind {self.kind!r}")

    @property
    def n_modes(self) -> int:
        return self.modes.shape[1]

    @property
    def n_pod(self) -> int:
        return self.n_modes - self.n_sup

    @property
    def field_name(self) -> str:
        return _FIELD_OF_KIND[self.kind]

    def reconstruct(self, coeffs: np.ndarray) -> np.ndarray:
        """Field from reduced coefficients: modes @ coeffs."""
        coeffs = np.asarray(coeffs)
        return self.modes[:, : len(coeffs)] @ coeffs

    def truncated(self, n: int) -> "PodBasis":
        if self.n_sup:
            raise ValueError("cannot truncate an enriched basis")
        return PodBasis(self.modes[:, :n], self.singular_values[:n], self.kind)


def _fix_signs(modes: np.ndarray) -> np.ndarray:
    """Scale each mode so its entry of largest magnitude is positive."""
    idx = np.argmax(np.abs(modes), axis=0)
    signs = np.sign(modes[idx, np.arange(modes.shape[1])])
    signs[signs == 0] = 1.0
    return modes * signs


def pod(snapshots: SnapshotSet, kind: str, n: int, w: np.ndarray | None = None) -> PodBasis:
    """Method of snapshots: eigen-decompose the weighted Gramian of the frames."""
    if kind not in _KINDS:
        raise ValueError(f"unknown basis kind {kind!r}")
    S = snapshots.field_matrix(_FIELD_OF_KIND[kind])
    if w is None:
        w = snapshots.weights
    n_frames = S.shape[1]
    if not 1 <= n <= n_frames:
        raise ValueError(f"requested {n} modes from {n_frames} frames")
    wf = field_weights(w, S.shape[0])
    gram = S.T @ (S * wf[:, None])
    lam, V = la.eigh(gram)
    lam = lam[::-1]
    V = V[:, ::-1]
    lam = np.maximum(lam, 0.0)
    if lam[0] == 0.0:
        raise RankDeficiencyError(n, 0)
    usable = int(np.sum(lam > 1e-14 * lam[0]))
    if n > usable:
        raise RankDeficiencyError(n, usable)
    sigma = np.sqrt(lam[:n])
    modes = _fix_signs((S @ V[:, :n]) / sigma)
    return PodBasis(modes=modes, singular_values=sigma, kind=kind)


def supremizers(pressure: PodBasis, grid: GridSpec, w: np.ndarray,
                velocity: PodBasis | None = None) -> np.ndarray:
    """Velocity-space Riesz representers of the pressure-divergence pairing.

    For each pressure mode chi the raw supremizer solves the weighted identity
    M s = G^T chi, which on the uniform grid is the adjoint-gradient field
    (Dx^T chi, Dy^T chi) on fluid cells.  The returned modes are Gram-Schmidt
    orthonormalized against the velocity POD modes (if given) and each other.
    """
    if pressure.n_modes == 0:
        raise ValueError("pressure basis is empty")
    Dx, Dy = diff_ops(grid)
    fluid = grid.fluid
    wf = field_weights(w, 2 * grid.n_cells)
    prior = [] if velocity is None else [velocity.modes[:, i] for i in range(velocity.n_modes)]
    out = []
    for i in range(pressure.n_modes):
        chi = pressure.modes[:, i]
        su = np.where(fluid, Dx.T @ chi, 0.0)
        sv = np.where(fluid, Dy.T @ chi, 0.0)
        s = np.concatenate([su, sv])
        raw_norm = np.sqrt(np.dot(wf * s, s))
        chi_norm = np.sqrt(np.dot(w * chi, chi))
        if raw_norm <= 1e-12 * max(chi_norm, 1.0):
            raise DegenerateModeError(
                f"supremizer for pressure mode {i + 1} has zero norm "
                "(constant pressure on an enclosed region)"
            )
        for _ in range(2):  # twice-through modified Gram-Schmidt
            for m in prior + out:
                s = s - np.dot(wf * m, s) * m
        norm = np.sqrt(np.dot(wf * s, s))
        if norm <= 1e-10 * raw_norm:
            raise DegenerateModeError(
                f"supremizer for pressure mode {i + 1} is spanned by existing modes"
            )
        out.append(s / norm)
    return np.column_stack(out)


def enrich(velocity: PodBasis, sup_modes: np.ndarray | None) -> PodBasis:
    """Append supremizer modes to a velocity basis, recording their count."""
    if velocity.kind != "velocity":
        raise ValueError("only velocity bases can be enriched")
    if sup_modes is None or (hasattr(sup_modes, "shape") and sup_modes.shape[-1] == 0):
        return PodBasis(velocity.modes, velocity.singular_values, velocity.kind, velocity.n_sup)
    sup_modes = np.atleast_2d(sup_modes)
    modes = np.column_stack([velocity.modes, sup_modes])
    sv = np.concatenate([velocity.singular_values, np.zeros(sup_modes.shape[1])])
    return PodBasis(modes=modes, singular_values=sv, kind="velocity",
                    n_sup=velocity.n_sup + sup_modes.shape[1])


# ROMBAS v1 ------------------------------------------------------------------

_BAS_MAGIC = b"ROMBAS01"
_BAS_HEADER = struct.Struct("<4I")  # kind, n_modes, n_sup, n_dof


def write_basis(basis: PodBasis, path) -> None:
    with open(path, "wb") as fh:
        fh.write(_BAS_MAGIC)
        fh.write(_BAS_HEADER.pack(_KINDS.index(basis.kind), basis.n_modes,
                                  basis.n_sup, basis.modes.shape[0]))
        fh.write(np.ascontiguousarray(basis.singular_values, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(basis.modes.T, dtype="<f8").tobytes())


def read_basis(path) -> PodBasis:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != _BAS_MAGIC:
        raise FormatError(f"bad magic {data[:8]!r}, expected {_BAS_MAGIC!r}", byte_offset=0)
    kind_i, n_modes, n_sup, n_dof = _BAS_HEADER.unpack_from(data, 8)
    if kind_i >= len(_KINDS):
        raise FormatError(f"unknown kind tag {kind_i}", byte_offset=8)
    body = 8 + _BAS_HEADER.size
    expected = body + 8 * (n_modes + n_dof * n_modes)
    if len(data) != expected:
        raise FormatError(
            f"payload size mismatch: expected {expected} bytes, file has {len(data)}",
            byte_offset=min(len(data), expected),
        )
    payload = np.frombuffer(data, dtype="<f8", offset=body)
    sv = payload[:n_modes].copy()
    modes = payload[n_modes:].reshape(n_modes, n_dof).T.copy()
    return PodBasis(modes=modes, singular_values=sv, kind=_KINDS[kind_i], n_sup=n_sup)
