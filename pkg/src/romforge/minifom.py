"""Miniature full-order solver: 2D incompressible channel flow past a masked disk.

Collocated-grid Chorin projection: explicit second-order central advection in
skew-symmetric form, explicit diffusion, then an exact projection onto the
discretely divergence-free subspace of the central-difference divergence
operator (conjugate gradients on ``D D^T``).  The emitted pressure solves a
variational Poisson problem on each sampled state; eddy viscosity is computed
post hoc from the velocity frames with an algebraic Smagorinsky model.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .grid import ConfigurationError, GridSpec, diff_ops


class NumericalFailureError(RuntimeError):
    """Iterative solver failed to converge."""

    def __init__(self, message, iterations=None):
        super().__init__(message)
        self.iterations = iterations


@dataclass(frozen=True)
class FomConfig:
    """Solver parameters for :func:`run_fom`.

    ``sample_every`` undersamples the solver output; ``spin_up_fraction`` of
    the total solver steps is discarded before sampling starts.
    """

    nu: float
    u_in: float
    dt_fom: float
    sample_every: int
    n_samples: int
    smagorinsky_cs: float = 0.17
    spin_up_fraction: float = 0.25
    projection_tol: float = 1e-10
    perturbation: float = 0.05

    def __post_init__(self):
        if self.nu <= 0:
            raise ConfigurationError("viscosity must be positive")
        if self.dt_fom <= 0:
            raise ConfigurationError("time step must be positive")
        if self.sample_every < 1:
            raise ConfigurationError("sample_every must be >= 1")
        if self.n_samples < 1:
            raise ConfigurationError("n_samples must be >= 1")
        if not 0.0 <= self.spin_up_fraction < 1.0:
            raise ConfigurationError("spin_up_fraction must be in [0, 1)")

    def check_cfl(self, grid: GridSpec):
        h = min(grid.dx, grid.dy)
        cfl = self.u_in * self.dt_fom / h
        if cfl >= 0.5:
            raise ConfigurationError(
                f"advective CFL bound violated: u_in*dt/h = {cfl:.3f} >= 0.5"
            )


@dataclass
class FieldFrame:
    """One sampled full-order state: cell-centered velocity, pressure, eddy viscosity."""

    t: float
    u: np.ndarray
    v: np.ndarray
    p: np.ndarray
    nu_t: np.ndarray


@dataclass
class SnapshotSet:
    """Ordered, uniformly spaced frames on a grid with per-cell area weights."""

    grid: GridSpec
    frames: list[FieldFrame]
    weights: np.ndarray

    @property
    def times(self) -> np.ndarray:
        return np.array([f.t for f in self.frames])

    @property
    def dt_snap(self) -> float:
        t = self.times
        if len(t) < 2:
            return 0.0
        return float(t[1] - t[0])

    def field_matrix(self, name: str) -> np.ndarray:
        """Snapshot matrix (n_dof x n_frames) for ``u`` (stacked u,v), ``p`` or ``nu_t``."""
        if name == "u":
            return np.column_stack([np.concatenate([f.u, f.v]) for f in self.frames])
        if name == "p":
            return np.column_stack([f.p for f in self.frames])
        if name == "nu_t":
            return np.column_stack([f.nu_t for f in self.frames])
        raise ValueError(f"unknown field {name!r}")


def strain_rate_invariant(u: np.ndarray, v: np.ndarray, grid: GridSpec) -> np.ndarray:
    """Pointwise sqrt(2 S:S) of the discrete strain-rate tensor."""
    Dx, Dy = diff_ops(grid)
    s11 = Dx @ u
    s22 = Dy @ v
    s12 = 0.5 * (Dy @ u + Dx @ v)
    return np.sqrt(2.0 * (s11**2 + s22**2 + 2.0 * s12**2))


def eddy_viscosity_field(frame: FieldFrame, grid: GridSpec, cs: float) -> np.ndarray:
    """Smagorinsky eddy viscosity: (cs*Delta)^2 * sqrt(2 S:S), Delta = sqrt(cell area)."""
    if not (np.all(np.isfinite(frame.u)) and np.all(np.isfinite(frame.v))):
        raise ValueError("velocity field contains non-finite entries")
    delta = np.sqrt(grid.cell_area)
    nu_t = (cs * delta) ** 2 * strain_rate_invariant(frame.u, frame.v, grid)
    nu_t[~grid.fluid] = 0.0
    return nu_t


def _component_laplacian(grid: GridSpec, component: str) -> sp.csr_matrix:
    """Compact 5-point viscous Laplacian with boundary ghosts folded in.

    Solid neighbors contribute their stored zero value (no-slip).  Ghost rules:
    inflow/outflow zero-gradient in x; free-slip top/bottom means zero-gradient
    for ``u`` and mirrored (Dirichlet-0 at the wall face) for ``v``.
    """
    nx, ny = grid.nx, grid.ny
    fluid = grid.fluid
    dx2, dy2 = grid.dx**2, grid.dy**2
    rows, cols, vals = [], [], []
    for iy in range(ny):
        for ix in range(nx):
            c = iy * nx + ix
            if not fluid[c]:
                continue
            diag = 0.0
            # x-direction
            for dxi in (-1, 1):
                jx = ix + dxi
                if 0 <= jx < nx:
                    rows.append(c)
                    cols.append(iy * nx + jx)
                    vals.append(1.0 / dx2)
                    diag -= 1.0 / dx2
                # outside in x: zero-gradient ghost -> term drops
            # y-direction
            for dyi in (-1, 1):
                jy = iy + dyi
                if 0 <= jy < ny:
                    rows.append(c)
                    cols.append(jy * nx + ix)
                    vals.append(1.0 / dy2)
                    diag -= 1.0 / dy2
                else:
                    if component == "v":  # wall value 0 half a cell away
                        diag -= 2.0 / dy2
                    # free-slip: zero-gradient ghost for u -> term drops
            rows.append(c)
            cols.append(c)
            vals.append(diag)
    n = grid.n_cells
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))


class _Projector:
    """Exact projection onto the kernel of the central-difference divergence.

    Solves ``(A A^T) q = div(u*)`` by CG, where ``A`` is the divergence
    restricted to fluid rows and free velocity columns, then corrects the free
    velocity degrees of freedom by ``A^T q``.  The right-hand side is in the
    range of ``A`` by construction, so the system is always consistent.
    """

    def __init__(self, grid: GridSpec, free_u: np.ndarray, free_v: np.ndarray, tol: float):
        Dx, Dy = diff_ops(grid)
        self.fluid_idx = np.flatnonzero(grid.fluid)
        D = sp.hstack([Dx, Dy]).tocsr()[self.fluid_idx]
        free_cols = np.concatenate([np.flatnonzero(free_u), grid.n_cells + np.flatnonzero(free_v)])
        self.free_u = np.flatnonzero(free_u)
        self.free_v = np.flatnonzero(free_v)
        self.A = D[:, free_cols].tocsr()
        K = (self.A @ self.A.T).tocsc()
        self.tol = tol
        n = K.shape[0]
        # A A^T has a small left null space (checkerboard pressure modes); a
        # tiny diagonal shift makes the system SPD.  The shift perturbs the
        # post-projection divergence by ~shift*|q|, far below the tolerance.
        shift = 1e-12 * K.diagonal().max()
        self.K = (K + shift * sp.identity(n, format="csc")).tocsc()
        lu = spla.splu(self.K)
        self.M = spla.LinearOperator((n, n), lu.solve)
        self.q0 = np.zeros(n)
        self.Dx, self.Dy = Dx, Dy

    def divergence(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        return (self.Dx @ u + self.Dy @ v)[self.fluid_idx]

    def project(self, u: np.ndarray, v: np.ndarray, maxiter: int = 4000):
        """In-place projection; returns (q, n_iterations)."""
        b = self.divergence(u, v)
        bnorm = np.linalg.norm(b)
        if bnorm == 0.0:
            return np.zeros_like(self.q0), 0
        count = [0]

        def cb(_):
            count[0] += 1

        q, info = spla.cg(self.K, b, x0=self.q0, rtol=self.tol, atol=0.0,
                          maxiter=maxiter, M=self.M, callback=cb)
        if info != 0:
            raise NumericalFailureError(
                f"pressure projection CG did not converge (info={info})",
                iterations=count[0],
            )
        corr = self.A.T @ q
        u[self.free_u] -= corr[: len(self.free_u)]
        v[self.free_v] -= corr[len(self.free_u):]
        self.q0 = q
        return q, count[0]


class _PressurePoisson:
    """Variational recovery of the pressure from the projection force.

    The projection multiplier q of the wide-stencil divergence carries
    grid-scale oscillations that are invisible to the velocity update but
    dominate the gradient energy of -q/dt.  The emitted pressure is instead
    the potential of the force the projection actually applied: it solves,
    over cell indicator test functions chi,

        (grad chi, grad p) = (grad chi, F),   F = A^T q / dt,

    the weighted-L2-optimal gradient representation of that force.
    """

    def __init__(self, grid: GridSpec, weights: np.ndarray):
        Dx, Dy = diff_ops(grid)
        W = sp.diags(weights)
        K = (Dx.T @ W @ Dx + Dy.T @ W @ Dy).tocsc()
        n = grid.n_cells
        # singular up to the constant mode on fluid cells; shift and re-center
        shift = 1e-10 * K.diagonal().max()
        self._lu = spla.splu((K + shift * sp.identity(n, format="csc")).tocsc())
        self._Dx, self._Dy = Dx, Dy
        self._w = weights
        self._fluid = grid.fluid

    def solve(self, f_x: np.ndarray, f_y: np.ndarray) -> np.ndarray:
        Dx, Dy, w = self._Dx, self._Dy, self._w
        rhs = Dx.T @ (w * f_x) + Dy.T @ (w * f_y)
        p = self._lu.solve(rhs)
        p[~self._fluid] = 0.0
        p[self._fluid] -= p[self._fluid].mean()
        return p


def run_fom(grid: GridSpec, cfg: FomConfig) -> SnapshotSet:
    """Run the full-order solver and return uniformly sampled snapshots."""
    cfg.check_cfl(grid)
    n = grid.n_cells
    fluid = grid.fluid
    Dx, Dy = diff_ops(grid)
    Lu = _component_laplacian(grid, "u")
    Lv = _component_laplacian(grid, "v")

    inlet = np.zeros(n, dtype=bool)
    inlet[np.arange(grid.ny) * grid.nx] = True
    inlet &= fluid
    outflow = np.arange(grid.ny) * grid.nx + grid.nx - 1
    wall = np.zeros(n, dtype=bool)
    wall[: grid.nx] = True
    wall[-grid.nx:] = True
    free_u = fluid & ~inlet
    free_v = fluid & ~inlet & ~wall
    proj = _Projector(grid, free_u, free_v, cfg.projection_tol)

    xc, yc = grid.cell_centers()
    u = np.where(fluid, cfg.u_in, 0.0)
    amp = cfg.perturbation * cfg.u_in
    v = amp * (np.sin(3 * np.pi * xc / grid.lx) * np.sin(2 * np.pi * yc / grid.ly)
               + 0.6 * np.sin(2 * np.pi * xc / grid.lx) * np.sin(3 * np.pi * yc / grid.ly))
    v[~fluid] = 0.0

    def apply_fixed(u, v):
        u[~fluid] = 0.0
        v[~fluid] = 0.0
        # zero-gradient outflow, no-penetration at the slip walls
        u[outflow] = u[outflow - 1]
        v[outflow] = v[outflow - 1]
        v[wall] = 0.0
        u[inlet] = cfg.u_in
        v[inlet] = 0.0

    apply_fixed(u, v)
    proj.project(u, v)

    sampling_steps = cfg.n_samples * cfg.sample_every
    frac = cfg.spin_up_fraction
    spin_up = int(round(sampling_steps * frac / (1.0 - frac)))
    total = spin_up + sampling_steps
    dt = cfg.dt_fom

    frames: list[FieldFrame] = []
    psolve = _PressurePoisson(grid, grid.weights())
    for step in range(1, total + 1):
        # skew-symmetric central advection; on the discretely divergence-free
        # manifold this coincides with the conservative form used by the ROM
        dxu, dyu = Dx @ u, Dy @ u
        dxv, dyv = Dx @ v, Dy @ v
        adv_u = 0.5 * (Dx @ (u * u) + Dy @ (v * u) + u * dxu + v * dyu)
        adv_v = 0.5 * (Dx @ (u * v) + Dy @ (v * v) + u * dxv + v * dyv)
        u = u + dt * (-adv_u + cfg.nu * (Lu @ u))
        v = v + dt * (-adv_v + cfg.nu * (Lv @ v))
        apply_fixed(u, v)
        q, _ = proj.project(u, v)
        if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
            raise NumericalFailureError(f"solver diverged at step {step}")
        if step > spin_up and (step - spin_up) % cfg.sample_every == 0:
            corr = proj.A.T @ q
            f_x = np.zeros(n)
            f_y = np.zeros(n)
            f_x[proj.free_u] = corr[: len(proj.free_u)] / dt
            f_y[proj.free_v] = corr[len(proj.free_u):] / dt
            frame = FieldFrame(t=step * dt, u=u.copy(), v=v.copy(),
                               p=psolve.solve(f_x, f_y), nu_t=np.zeros(n))
            frame.nu_t = eddy_viscosity_field(frame, grid, cfg.smagorinsky_cs)
            frames.append(frame)

    return SnapshotSet(grid=grid, frames=frames, weights=grid.weights())


def lift_proxy(snapshots: SnapshotSet) -> np.ndarray:
    """Weighted integral of v over the wake region (x beyond the obstacle)."""
    grid = snapshots.grid
    xc, _ = grid.cell_centers()
    cx = grid.obstacle_center[0] + grid.obstacle_radius
    sel = (xc > cx) & grid.fluid
    w = snapshots.weights
    return np.array([float(np.sum(w[sel] * f.v[sel])) for f in snapshots.frames])


def max_divergence(snapshots: SnapshotSet) -> float:
    """Max over frames of the infinity norm of the solver's discrete divergence."""
    Dx, Dy = diff_ops(snapshots.grid)
    return max(float(np.max(np.abs(Dx @ f.u + Dy @ f.v))) for f in snapshots.frames)
