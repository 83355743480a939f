"""Snapshot file I/O, weighted inner products, and coefficient projections."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .grid import GridSpec
from .minifom import FieldFrame, SnapshotSet

MAGIC = b"ROMSNAP1"
_HEADER = struct.Struct("<4I4d")  # nx, ny, n_frames, n_fields, lx, ly, dt_snap, t0


class FormatError(ValueError):
    """Malformed snapshot/basis/model file."""

    def __init__(self, message, byte_offset=None):
        if byte_offset is not None:
            message = f"{message} (byte offset {byte_offset})"
        super().__init__(message)
        self.byte_offset = byte_offset


def grid_from_weights(nx: int, ny: int, lx: float, ly: float, weights: np.ndarray) -> GridSpec:
    """Reconstruct a grid whose fluid mask is implied by positive weights."""
    g = GridSpec.__new__(GridSpec)
    object.__setattr__(g, "nx", nx)
    object.__setattr__(g, "ny", ny)
    object.__setattr__(g, "lx", lx)
    object.__setattr__(g, "ly", ly)
    object.__setattr__(g, "obstacle_center", (0.0, 0.0))
    object.__setattr__(g, "obstacle_radius", 0.0)
    object.__setattr__(g, "fluid", weights > 0)
    return g


def write_snapshots(snapshots: SnapshotSet, path) -> None:
    """Write a SnapshotSet in ROMSNAP v1 format (binary, little-endian)."""
    grid = snapshots.grid
    frames = snapshots.frames
    t0 = frames[0].t if frames else 0.0
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(_HEADER.pack(grid.nx, grid.ny, len(frames), 4,
                              grid.lx, grid.ly, snapshots.dt_snap, t0))
        fh.write(np.ascontiguousarray(snapshots.weights, dtype="<f8").tobytes())
        for f in frames:
            for arr in (f.u, f.v, f.p, f.nu_t):
                fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_snapshots(path) -> SnapshotSet:
    """Read a ROMSNAP v1 file; round-trip with :func:`write_snapshots` is bit-exact."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != MAGIC:
        raise FormatError(f"bad magic {data[:8]!r}, expected {MAGIC!r}", byte_offset=0)
    try:
        nx, ny, n_frames, n_fields, lx, ly, dt_snap, t0 = _HEADER.unpack_from(data, 8)
    except struct.error:
        raise FormatError("truncated header", byte_offset=len(data)) from None
    if n_fields != 4:
        raise FormatError(f"expected 4 fields per frame, header says {n_fields}", byte_offset=16)
    n = nx * ny
    body = 8 + _HEADER.size
    expected = body + 8 * n * (1 + 4 * n_frames)
    if len(data) != expected:
        raise FormatError(
            f"payload size mismatch: expected {expected} bytes, file has {len(data)}",
            byte_offset=min(len(data), expected),
        )
    payload = np.frombuffer(data, dtype="<f8", offset=body)
    if np.isnan(payload).any():
        first = int(np.flatnonzero(np.isnan(payload))[0])
        raise FormatError("NaN in payload", byte_offset=body + 8 * first)
    weights = payload[:n].copy()
    grid = grid_from_weights(nx, ny, lx, ly, weights)
    frames = []
    off = n
    for j in range(n_frames):
        u, v, p, nu_t = (payload[off + k * n: off + (k + 1) * n].copy() for k in range(4))
        frames.append(FieldFrame(t=t0 + j * dt_snap, u=u, v=v, p=p, nu_t=nu_t))
        off += 4 * n
    return SnapshotSet(grid=grid, frames=frames, weights=weights)


def ip(f: np.ndarray, g: np.ndarray, w: np.ndarray) -> float:
    """Weighted discrete L2 inner product sum(w * f * g).

    For stacked vector fields of length ``2 * len(w)`` the weights are tiled
    over both components.
    """
    f = np.asarray(f)
    g = np.asarray(g)
    if f.shape != g.shape:
        raise ValueError(f"length mismatch: {f.shape} vs {g.shape}")
    if len(f) == 2 * len(w):
        w = np.tile(w, 2)
    elif len(f) != len(w):
        raise ValueError(f"weights length {len(w)} incompatible with fields of length {len(f)}")
    return float(np.dot(w * f, g))


def field_weights(w: np.ndarray, n_dof: int) -> np.ndarray:
    """Weight vector matching a field of ``n_dof`` entries (tiled for vector fields)."""
    if n_dof == 2 * len(w):
        return np.tile(w, 2)
    if n_dof == len(w):
        return np.asarray(w)
    raise ValueError(f"weights length {len(w)} incompatible with {n_dof} dofs")


@dataclass
class CoeffSeries:
    """Time series of reduced coefficients: values[j, i] = i-th coefficient at times[j]."""

    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.values = np.atleast_2d(np.asarray(self.values, dtype=float))
        if len(self.times) != self.values.shape[0]:
            raise ValueError("times and values row count differ")
        if len(self.times) > 1 and not np.all(np.diff(self.times) > 0):
            raise ValueError("times must be strictly increasing")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("coefficient values must be finite")

    @property
    def n_coeffs(self) -> int:
        return self.values.shape[1]

    def truncated(self, n: int) -> "CoeffSeries":
        return CoeffSeries(self.times, self.values[:, :n])

    def to_csv(self, path) -> None:
        header = "t," + ",".join(f"c{i+1}" for i in range(self.n_coeffs))
        with open(path, "w") as fh:
            fh.write(header + "\n")
            for t, row in zip(self.times, self.values):
                fh.write(",".join(f"{x:.17g}" for x in (t, *row)) + "\n")

    @classmethod
    def from_csv(cls, path) -> "CoeffSeries":
        data = np.genfromtxt(path, delimiter=",", skip_header=1)
        data = np.atleast_2d(data)
        return cls(data[:, 0], data[:, 1:])


def project_coeffs(snapshots: SnapshotSet, basis, n: int | None = None) -> CoeffSeries:
    """Project each snapshot onto the first ``n`` basis modes in the weighted product."""
    if n is None:
        n = basis.n_modes
    if not 1 <= n <= basis.n_modes:
        raise ValueError(f"requested {n} coefficients, basis has {basis.n_modes} modes")
    S = snapshots.field_matrix(basis.field_name)
    wf = field_weights(snapshots.weights, S.shape[0])
    coeffs = (basis.modes[:, :n] * wf[:, None]).T @ S
    return CoeffSeries(snapshots.times, coeffs.T)
