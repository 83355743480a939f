"""Assembly of all reduced Galerkin operators by discrete differentiation.

Index conventions for the order-3 tensors (contractions written as einsums):
``C[i,j,k]`` pairs mode i with the convective field of modes (j, k), so
``a^T C a = einsum('ijk,j,k->i', C, a, a)``; the turbulence tensors contract
as ``g^T CT a = einsum('ijk,j,k->i', CT, g, a)``.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from .grid import GridSpec, boundary_edges, diff_ops, inlet_edges
from .snapshots import FormatError, field_weights


def grad(f: np.ndarray, grid: GridSpec) -> tuple[np.ndarray, np.ndarray]:
    """Discrete gradient: central interior, one-sided at the domain boundary.

    Solid cells contribute their stored (zero) values to the stencils, the
    same convention used by the full-order solver.
    """
    Dx, Dy = diff_ops(grid)
    return Dx @ f, Dy @ f


def div(u: np.ndarray, v: np.ndarray, grid: GridSpec) -> np.ndarray:
    """Discrete divergence of a vector field."""
    Dx, Dy = diff_ops(grid)
    return Dx @ u + Dy @ v


@dataclass
class RomOperators:
    """All reduced matrices/tensors for a chosen (r, q, n_sup, n_nut)."""

    M: np.ndarray
    B: np.ndarray
    BT: np.ndarray
    H: np.ndarray
    P: np.ndarray
    C: np.ndarray
    Dk: list
    Ek: list
    D: np.ndarray
    G: np.ndarray
    N: np.ndarray
    L: np.ndarray
    CT1: np.ndarray
    CT2: np.ndarray
    CT3: np.ndarray
    CT4: np.ndarray
    r: int
    q: int
    n_sup: int
    n_nut: int
    n_bc: int
    tau: float = 1000.0

    def __post_init__(self):
        for name in ("M", "B", "BT", "H", "P", "C", "D", "G", "N", "L",
                     "CT1", "CT2", "CT3", "CT4"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"operator {name} has non-finite entries")


class _ModeFields:
    """Per-mode derivative fields shared across operator assembly."""

    def __init__(self, vel_modes, pres_modes, grid, w):
        Dx, Dy = diff_ops(grid)
        n = grid.n_cells
        self.n = n
        self.w = np.asarray(w)
        self.U = vel_modes[:n]
        self.V = vel_modes[n:]
        self.DxU, self.DyU = Dx @ self.U, Dy @ self.U
        self.DxV, self.DyV = Dx @ self.V, Dy @ self.V
        self.LapU = Dx @ self.DxU + Dy @ self.DyU
        self.LapV = Dx @ self.DxV + Dy @ self.DyV
        self.divV = self.DxU + self.DyV
        self.Chi = pres_modes
        self.DxChi, self.DyChi = Dx @ self.Chi, Dy @ self.Chi
        self.Dx, self.Dy = Dx, Dy

    def pair_vel(self, fx, fy):
        """(phi_i, (fx, fy))_w for all i."""
        return self.U.T @ (self.w * fx) + self.V.T @ (self.w * fy)

    def pair_gradp(self, fx, fy):
        """(grad chi_i, (fx, fy))_w for all i."""
        return self.DxChi.T @ (self.w * fx) + self.DyChi.T @ (self.w * fy)

    def conv_field(self, j, k):
        """Skew-symmetric convective field of the mode pair (j advects k).

        Half the sum of the conservative form div(phi_j (x) phi_k) and the
        advective form (phi_j . grad) phi_k.  The two coincide on discretely
        divergence-free fields; the skew average is what the full-order
        solver integrates, so the reduced operator inherits its energy
        behavior and stays consistent with the snapshots.
        """
        uj, vj = self.U[:, j], self.V[:, j]
        fx = 0.5 * (self.Dx @ (uj * self.U[:, k]) + self.Dy @ (vj * self.U[:, k])
                    + uj * self.DxU[:, k] + vj * self.DyU[:, k])
        fy = 0.5 * (self.Dx @ (uj * self.V[:, k]) + self.Dy @ (vj * self.V[:, k])
                    + uj * self.DxV[:, k] + vj * self.DyV[:, k])
        return fx, fy


def assemble_velocity_ops(vel_basis, pres_basis, grid: GridSpec, w: np.ndarray,
                          patches=None) -> dict:
    """Momentum-equation operators M, B, BT, C, H, P and boundary Dk, Ek."""
    if vel_basis.modes.shape[0] != 2 * grid.n_cells:
        raise ValueError("velocity basis does not match the grid")
    if patches is None:
        patches = [inlet_edges(grid)]
    mf = _ModeFields(vel_basis.modes, pres_basis.modes, grid, w)
    r = vel_basis.n_modes
    q = pres_basis.n_modes
    wU = mf.w[:, None] * mf.U
    wV = mf.w[:, None] * mf.V
    M = mf.U.T @ wU + mf.V.T @ wV
    B = mf.U.T @ (mf.w[:, None] * mf.LapU) + mf.V.T @ (mf.w[:, None] * mf.LapV)
    BT = mf.U.T @ (mf.w[:, None] * (mf.Dx @ mf.divV)) + mf.V.T @ (mf.w[:, None] * (mf.Dy @ mf.divV))
    H = mf.U.T @ (mf.w[:, None] * mf.DxChi) + mf.V.T @ (mf.w[:, None] * mf.DyChi)
    P = mf.Chi.T @ (mf.w[:, None] * mf.divV)
    C = np.empty((r, r, r))
    for j in range(r):
        for k in range(r):
            fx, fy = mf.conv_field(j, k)
            C[:, j, k] = mf.pair_vel(fx, fy)
    Dk, Ek = [], []
    for edges in patches:
        dvec = np.zeros(r)
        emat = np.zeros((r, r))
        for c, _nx, _ny, length in edges:
            dvec += length * mf.U[c]
            emat += length * (np.outer(mf.U[c], mf.U[c]) + np.outer(mf.V[c], mf.V[c]))
        Dk.append(dvec)
        Ek.append(emat)
    return {"M": M, "B": B, "BT": BT, "C": C, "H": H, "P": P, "Dk": Dk, "Ek": Ek}


def assemble_ppe_ops(vel_basis, pres_basis, grid: GridSpec, w: np.ndarray) -> dict:
    """Pressure-Poisson operators D, G, N and the (zero) boundary vector L."""
    mf = _ModeFields(vel_basis.modes, pres_basis.modes, grid, w)
    r = vel_basis.n_modes
    q = pres_basis.n_modes
    D = mf.DxChi.T @ (mf.w[:, None] * mf.DxChi) + mf.DyChi.T @ (mf.w[:, None] * mf.DyChi)
    G = np.empty((q, r, r))
    for j in range(r):
        for k in range(r):
            fx, fy = mf.conv_field(j, k)
            G[:, j, k] = mf.pair_gradp(fx, fy)
    # 2D boundary pairing: (n x grad chi) and the mode vorticity are both
    # out-of-plane scalars; edge-midpoint quadrature with edge length weight
    vort = mf.DxV - mf.DyU
    N = np.zeros((q, r))
    for c, nx_, ny_, length in boundary_edges(grid):
        n_cross_grad = nx_ * mf.DyChi[c] - ny_ * mf.DxChi[c]
        N += length * np.outer(n_cross_grad, vort[c])
    L = np.zeros(q)
    return {"D": D, "G": G, "N": N, "L": L}


def assemble_turb_tensors(vel_basis, pres_basis, nut_basis, grid: GridSpec,
                          w: np.ndarray) -> dict:
    """Eddy-viscosity tensors CT1..CT4 (eta enters pointwise)."""
    mf = _ModeFields(vel_basis.modes, pres_basis.modes, grid, w)
    r = vel_basis.n_modes
    q = pres_basis.n_modes
    n_nut = nut_basis.n_modes
    Eta = nut_basis.modes
    CT1 = np.empty((r, n_nut, r))
    CT2 = np.empty((r, n_nut, r))
    CT3 = np.empty((q, n_nut, r))
    CT4 = np.empty((q, n_nut, r))
    for j in range(n_nut):
        eta = Eta[:, j]
        for k in range(r):
            fx1 = eta * mf.LapU[:, k]
            fy1 = eta * mf.LapV[:, k]
            # div(eta (grad phi_k)^T): component b is sum_a d_a(eta d_b phi_a)
            fx2 = mf.Dx @ (eta * mf.DxU[:, k]) + mf.Dy @ (eta * mf.DxV[:, k])
            fy2 = mf.Dx @ (eta * mf.DyU[:, k]) + mf.Dy @ (eta * mf.DyV[:, k])
            CT1[:, j, k] = mf.pair_vel(fx1, fy1)
            CT2[:, j, k] = mf.pair_vel(fx2, fy2)
            CT3[:, j, k] = mf.pair_gradp(fx1, fy1)
            CT4[:, j, k] = mf.pair_gradp(fx2, fy2)
    return {"CT1": CT1, "CT2": CT2, "CT3": CT3, "CT4": CT4}


def assemble_operators(vel_basis, pres_basis, nut_basis, grid: GridSpec,
                       w: np.ndarray | None = None, patches=None,
                       tau: float = 1000.0) -> RomOperators:
    """Assemble the full operator set for one (basis, grid, bc) combination."""
    if w is None:
        w = grid.weights()
    vel = assemble_velocity_ops(vel_basis, pres_basis, grid, w, patches)
    ppe = assemble_ppe_ops(vel_basis, pres_basis, grid, w)
    turb = assemble_turb_tensors(vel_basis, pres_basis, nut_basis, grid, w)
    return RomOperators(
        **vel, **ppe, **turb,
        r=vel_basis.n_modes, q=pres_basis.n_modes,
        n_sup=vel_basis.n_sup, n_nut=nut_basis.n_modes,
        n_bc=len(vel["Dk"]), tau=tau,
    )


def slice_operators(ops: RomOperators, r: int, q: int) -> RomOperators:
    """Leading-index restriction of an operator set to (r, q) modes.

    Valid because POD bases are nested: the first r columns of the fine basis
    are the coarse basis, so every coarse operator entry is the corresponding
    fine entry.  Supremizer-enriched sets cannot be sliced this way (the
    enrichment modes sit at the end of the basis).
    """
    if ops.n_sup:
        raise ValueError("cannot slice supremizer-enriched operators")
    if not (1 <= r <= ops.r and 1 <= q <= ops.q):
        raise ValueError(f"requested ({r}, {q}) exceeds assembled ({ops.r}, {ops.q})")
    return RomOperators(
        M=ops.M[:r, :r], B=ops.B[:r, :r], BT=ops.BT[:r, :r],
        H=ops.H[:r, :q], P=ops.P[:q, :r], C=ops.C[:r, :r, :r],
        Dk=[dk[:r] for dk in ops.Dk], Ek=[ek[:r, :r] for ek in ops.Ek],
        D=ops.D[:q, :q], G=ops.G[:q, :r, :r], N=ops.N[:q, :r], L=ops.L[:q],
        CT1=ops.CT1[:r, :, :r], CT2=ops.CT2[:r, :, :r],
        CT3=ops.CT3[:q, :, :r], CT4=ops.CT4[:q, :, :r],
        r=r, q=q, n_sup=0, n_nut=ops.n_nut, n_bc=ops.n_bc, tau=ops.tau,
    )


# ROMOPS v1 cache --------------------------------------------------------------

_OPS_MAGIC = b"ROMOPS01"
_OPS_HEADER = struct.Struct("<5Id32s")

_OP_ORDER = ("M", "B", "BT", "H", "P", "C", "D", "G", "N", "L", "CT1", "CT2", "CT3", "CT4")


def content_hash(vel_basis, pres_basis, nut_basis, grid: GridSpec, patches, tau) -> bytes:
    """sha256 over basis modes, grid geometry/mask, boundary patches, penalty."""
    h = hashlib.sha256()
    for b in (vel_basis, pres_basis, nut_basis):
        h.update(np.ascontiguousarray(b.modes, dtype="<f8").tobytes())
        h.update(struct.pack("<I", b.n_sup))
    h.update(struct.pack("<2I2d", grid.nx, grid.ny, grid.lx, grid.ly))
    h.update(grid.fluid.tobytes())
    if patches is None:
        patches = [inlet_edges(grid)]
    for edges in patches:
        for e in edges:
            h.update(struct.pack("<i3d", int(e[0]), *e[1:]))
    h.update(struct.pack("<d", tau))
    return h.digest()


def write_operators(ops: RomOperators, path, digest: bytes = b"\0" * 32) -> None:
    with open(path, "wb") as fh:
        fh.write(_OPS_MAGIC)
        fh.write(_OPS_HEADER.pack(ops.r, ops.q, ops.n_sup, ops.n_nut, ops.n_bc,
                                  ops.tau, digest))
        for name in _OP_ORDER:
            fh.write(np.ascontiguousarray(getattr(ops, name), dtype="<f8").tobytes())
        for k in range(ops.n_bc):
            fh.write(np.ascontiguousarray(ops.Dk[k], dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(ops.Ek[k], dtype="<f8").tobytes())


def read_operators(path, expected_digest: bytes | None = None) -> RomOperators:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != _OPS_MAGIC:
        raise FormatError(f"bad magic {data[:8]!r}, expected {_OPS_MAGIC!r}", byte_offset=0)
    r, q, n_sup, n_nut, n_bc, tau, digest = _OPS_HEADER.unpack_from(data, 8)
    if expected_digest is not None and digest != expected_digest:
        raise FormatError("operator cache digest mismatch", byte_offset=8)
    shapes = {
        "M": (r, r), "B": (r, r), "BT": (r, r), "H": (r, q), "P": (q, r),
        "C": (r, r, r), "D": (q, q), "G": (q, r, r), "N": (q, r), "L": (q,),
        "CT1": (r, n_nut, r), "CT2": (r, n_nut, r),
        "CT3": (q, n_nut, r), "CT4": (q, n_nut, r),
    }
    off = 8 + _OPS_HEADER.size
    fields = {}
    for name in _OP_ORDER:
        count = int(np.prod(shapes[name]))
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=off)
        fields[name] = arr.reshape(shapes[name]).copy()
        off += 8 * count
    Dk, Ek = [], []
    for _ in range(n_bc):
        Dk.append(np.frombuffer(data, dtype="<f8", count=r, offset=off).copy())
        off += 8 * r
        Ek.append(np.frombuffer(data, dtype="<f8", count=r * r, offset=off).reshape(r, r).copy())
        off += 8 * r * r
    if off != len(data):
        raise FormatError(f"payload size mismatch: expected {off} bytes, file has {len(data)}",
                          byte_offset=min(off, len(data)))
    return RomOperators(**fields, Dk=Dk, Ek=Ek, r=r, q=q, n_sup=n_sup,
                        n_nut=n_nut, n_bc=n_bc, tau=tau)


def assemble_cached(vel_basis, pres_basis, nut_basis, grid: GridSpec,
                    cache_dir, w: np.ndarray | None = None, patches=None,
                    tau: float = 1000.0) -> RomOperators:
    """Assemble operators, reusing a cache file keyed by content hash."""
    import os

    digest = content_hash(vel_basis, pres_basis, nut_basis, grid, patches, tau)
    path = os.path.join(cache_dir, f"ops-{digest.hex()[:16]}.romops")
    if os.path.exists(path):
        return read_operators(path, expected_digest=digest)
    ops = assemble_operators(vel_basis, pres_basis, nut_basis, grid, w, patches, tau)
    os.makedirs(cache_dir, exist_ok=True)
    write_operators(ops, path, digest)
    return ops
