"""Error metrics, mode sweeps, and report artifacts (CSV tables, SVG plots).

Errors are measured against the fine d-mode reconstruction of the full-order
frames, in the weighted L2 norm, on the velocity vector field and the
pressure field, reported as percentages.  The vector norm (rather than the
norm of the speed field) keeps the projection trajectory an exact lower
bound for every reduced run, since the leading-n projection is the
L2-optimal element of the reduced space.
"""

from __future__ import annotations

import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .closure import default_ridge, fit_joint_ppe, _regressor
from .evmodel import train_mlp
from .galerkin import slice_operators
from .grid import ConfigurationError
from .romsolve import RomRunConfig, residual_corrections, run_rom
from .snapshots import CoeffSeries, ip, project_coeffs


@dataclass
class ErrorSeries:
    """Per-frame percentage errors of a reduced trajectory."""

    times: np.ndarray
    eps_u: np.ndarray
    eps_p: np.ndarray
    d: int

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.eps_u = np.asarray(self.eps_u, dtype=float)
        self.eps_p = np.asarray(self.eps_p, dtype=float)
        if not (len(self.times) == len(self.eps_u) == len(self.eps_p)):
            raise ValueError("times and error columns must have equal length")
        for name in ("eps_u", "eps_p"):
            vals = getattr(self, name)
            if not np.all(np.isfinite(vals)):
                raise ValueError(f"{name} contains non-finite entries")
            if np.any(vals < 0):
                raise ValueError(f"{name} contains negative entries")

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("t,eps_u,eps_p\n")
            for t, eu, ep in zip(self.times, self.eps_u, self.eps_p):
                fh.write(f"{t:.17g},{eu:.17g},{ep:.17g}\n")

    @classmethod
    def from_csv(cls, path, d: int = 0) -> "ErrorSeries":
        data = np.atleast_2d(np.genfromtxt(path, delimiter=",", skip_header=1))
        return cls(times=data[:, 0], eps_u=data[:, 1], eps_p=data[:, 2], d=d)


def _percent_error(approx: np.ndarray, reference: np.ndarray, w: np.ndarray) -> float:
    num = ip(approx - reference, approx - reference, w)
    den = ip(reference, reference, w)
    if den == 0.0:
        return 0.0 if num == 0.0 else 100.0
    return 100.0 * float(np.sqrt(num / den))


def error_series(traj, snapshots, vel_basis, pres_basis, d: int | None = None) -> ErrorSeries:
    """Percentage errors of a trajectory against the d-mode FOM reconstruction.

    Each trajectory time is matched to the nearest snapshot time; matching
    beyond half a snapshot interval is an error.
    """
    if d is None:
        d = vel_basis.n_modes
    snap_times = snapshots.times
    dt = snapshots.dt_snap
    if dt <= 0:
        raise ValueError("snapshot set has no time spacing")
    n = snapshots.grid.n_cells
    w = snapshots.weights
    a_d = project_coeffs(snapshots, vel_basis)
    b_d = project_coeffs(snapshots, pres_basis)
    q = traj.b.shape[1]
    eps_u = np.empty(len(traj.times))
    eps_p = np.empty(len(traj.times))
    for j, t in enumerate(traj.times):
        k = int(np.argmin(np.abs(snap_times - t)))
        if abs(snap_times[k] - t) > dt / 2:
            raise ValueError(
                f"trajectory time {t} is {abs(snap_times[k] - t):.3g} away from the "
                f"nearest snapshot, beyond dt/2 = {dt / 2:.3g}"
            )
        # supremizer coefficients participate in the reconstruction
        rec_v = vel_basis.modes[:, : traj.a.shape[1]] @ traj.a[j]
        ref_v = vel_basis.modes[:, :d] @ a_d.values[k, :d]
        wf = np.concatenate([w, w])
        eps_u[j] = _percent_error(rec_v, ref_v, wf)
        rec_p = pres_basis.modes[:, :q] @ traj.b[j]
        ref_p = pres_basis.modes[:, : min(d, pres_basis.n_modes)] @ b_d.values[k, : min(d, pres_basis.n_modes)]
        eps_p[j] = _percent_error(rec_p, ref_p, w)
    return ErrorSeries(times=np.array(traj.times), eps_u=eps_u, eps_p=eps_p, d=d)


def error_integral(series: ErrorSeries, t0: float, t1: float) -> tuple[float, float]:
    """Left-endpoint Riemann sums of the fractional errors over [t0, t1)."""
    t = series.times
    sel = (t >= t0 - 1e-12) & (t < t1 - 1e-12)
    if not np.any(sel):
        raise ValueError(f"no samples in window [{t0}, {t1})")
    if np.count_nonzero(sel) > 1:
        dt = float(np.diff(t[sel]).mean())
    else:
        dt = float(t[1] - t[0]) if len(t) > 1 else t1 - t0
    iu = float(np.sum(series.eps_u[sel] / 100.0) * dt)
    ipp = float(np.sum(series.eps_p[sel] / 100.0) * dt)
    return iu, ipp


CONFIGURATIONS = ("none", "correction", "eddy_viscosity", "hybrid")

_FLAGS = {
    "none": (0, 0, 0),
    "correction": (1, 1, 0),
    "eddy_viscosity": (0, 0, 1),
    "hybrid": (1, 1, 1),
}


@dataclass(frozen=True)
class SweepConfig:
    """Pipeline settings shared by all cells of a mode sweep."""

    nu: float
    u_bc: tuple = (1.0,)
    scheme: str = "order2"
    train_fraction: float = 0.25
    ridge_scale: float = 1e-4
    ev_epochs: int = 2000
    ev_lr: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.nu <= 0:
            raise ConfigurationError("viscosity must be positive")
        if not 0.0 < self.train_fraction <= 1.0:
            raise ConfigurationError("train_fraction must be in (0, 1]")
        if self.ridge_scale < 0:
            raise ConfigurationError("ridge_scale must be nonnegative")


@dataclass
class SweepResult:
    """Error integrals per mode count and configuration; NaN marks failures."""

    n_values: np.ndarray
    labels: tuple
    int_u: np.ndarray
    int_p: np.ndarray
    failures: dict = field(default_factory=dict)

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            cols = ",".join(f"{lab}_u,{lab}_p" for lab in self.labels)
            fh.write(f"n,{cols}\n")
            for i, n in enumerate(self.n_values):
                row = []
                for k in range(len(self.labels)):
                    row += [f"{self.int_u[k, i]:.4g}", f"{self.int_p[k, i]:.4g}"]
                fh.write(f"{n}," + ",".join(row) + "\n")

    @classmethod
    def from_csv(cls, path) -> "SweepResult":
        with open(path) as fh:
            names = fh.readline().strip().split(",")[1:]
        labels = tuple(s[:-2] for s in names[::2])
        data = np.atleast_2d(np.genfromtxt(path, delimiter=",", skip_header=1))
        int_u = data[:, 1::2].T.copy()
        int_p = data[:, 2::2].T.copy()
        return cls(n_values=data[:, 0].astype(int), labels=labels,
                   int_u=int_u, int_p=int_p)


def _sweep_cell(label, n, ops_n, cfg, dt, t0, ar, bq, times, ab, d, ev):
    """Fit (if needed) and run one sweep configuration at n modes."""
    c_u, c_p, c_t = _FLAGS[label]
    closure = None
    if c_u or c_p:
        base = RomRunConfig(formulation="ppe", nu=cfg.nu, dt=dt, n_steps=1,
                            u_bc=cfg.u_bc, scheme=cfg.scheme, t0=t0)
        corr = residual_corrections(ops_n, base, CoeffSeries(times, ar),
                                    CoeffSeries(times, bq), d=d,
                                    ev=ev if c_t else None)
        ridge = default_ridge(_regressor(ab.values)) * (cfg.ridge_scale / 1e-8)
        closure = fit_joint_ppe(corr, ab, ridge=ridge)
    rcfg = RomRunConfig(formulation="ppe", nu=cfg.nu, dt=dt, n_steps=len(times) - 1,
                        u_bc=cfg.u_bc, c_u=c_u, c_p=c_p, c_t=c_t,
                        scheme=cfg.scheme, t0=t0)
    traj = run_rom(ops_n, rcfg, ar[0], init_b=bq[0], closure=closure,
                   ev=ev if c_t else None)
    if traj.failed:
        raise RuntimeError(traj.message)
    return traj


def mode_sweep(snapshots, vel_basis, pres_basis, nut_basis, ops_fine,
               cfg: SweepConfig, n_range, configurations=CONFIGURATIONS) -> SweepResult:
    """Error-integral table over mode counts and closure configurations.

    Runs every configuration at every n over the training window, against the
    fine d-mode reference.  Individual cell failures are recorded (NaN in the
    table, message in ``failures``) and never abort the sweep.
    """
    if ops_fine.n_sup:
        raise ConfigurationError("mode sweep requires unenriched (ppe) operators")
    for lab in configurations:
        if lab not in _FLAGS:
            raise ConfigurationError(f"unknown configuration {lab!r}")
    n_values = np.array(sorted(set(int(n) for n in n_range)))
    if n_values[0] < 1 or n_values[-1] > min(ops_fine.r, ops_fine.q):
        raise ConfigurationError(
            f"mode counts must lie in [1, {min(ops_fine.r, ops_fine.q)}]")
    d = vel_basis.n_modes
    a_d = project_coeffs(snapshots, vel_basis)
    b_d = project_coeffs(snapshots, pres_basis)
    g_d = project_coeffs(snapshots, nut_basis)
    m_train = max(2, int(round(cfg.train_fraction * len(snapshots.frames))))
    dt = snapshots.dt_snap
    times = a_d.times[:m_train]
    t_end = times[-1] + dt

    labels = ("projection", *configurations)
    int_u = np.full((len(labels), len(n_values)), np.nan)
    int_p = np.full_like(int_u, np.nan)
    failures: dict = {}

    class _Frozen:
        """Coefficient series replayed as a trajectory for error evaluation."""

        def __init__(self, times, a, b):
            self.times, self.a, self.b = times, a, b

    for i, n in enumerate(n_values):
        proj = _Frozen(times, a_d.values[:m_train, :n], b_d.values[:m_train, :n])
        series = error_series(proj, snapshots, vel_basis, pres_basis, d=d)
        int_u[0, i], int_p[0, i] = error_integral(series, times[0], t_end)

    def run_cell(i, k, label):
        n = int(n_values[i])
        ops_n = slice_operators(ops_fine, n, n)
        ar = a_d.values[:m_train, :n]
        bq = b_d.values[:m_train, :n]
        ev = None
        if _FLAGS[label][2]:
            ev = train_mlp(CoeffSeries(times, ar),
                           CoeffSeries(times, g_d.values[:m_train]),
                           epochs=cfg.ev_epochs, lr=cfg.ev_lr, adam=True,
                           seed=cfg.seed)
        ab = CoeffSeries(times, np.hstack([ar, bq]))
        traj = _sweep_cell(label, n, ops_n, cfg, dt, times[0], ar, bq, times, ab, d, ev)
        series = error_series(traj, snapshots, vel_basis, pres_basis, d=d)
        return error_integral(series, times[0], t_end)

    with ThreadPoolExecutor(max_workers=4) as pool:
        futures = {}
        for i in range(len(n_values)):
            for k, label in enumerate(configurations):
                futures[(i, k + 1, label)] = pool.submit(run_cell, i, k, label)
        for (i, k, label), fut in futures.items():
            try:
                int_u[k, i], int_p[k, i] = fut.result()
            except Exception as exc:
                failures[(label, int(n_values[i]))] = str(exc)

    return SweepResult(n_values=n_values, labels=labels, int_u=int_u,
                       int_p=int_p, failures=failures)


def check_lower_bound(result: SweepResult, tol: float = 1e-9) -> bool:
    """Projection-row lower bound over all finite cells."""
    ok = True
    for arr in (result.int_u, result.int_p):
        finite = np.isfinite(arr[1:])
        ok &= bool(np.all(arr[1:][finite] >= (np.broadcast_to(arr[0], arr[1:].shape)[finite] - tol)))
    return ok


def _plot_sweep(result: SweepResult, arr: np.ndarray, ylabel: str, path) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    for k, lab in enumerate(result.labels):
        ax.semilogy(result.n_values, arr[k], marker="o", label=lab)
    ax.set_xlabel("modes n")
    ax.set_ylabel(ylabel)
    ax.legend(fontsize=8)
    ax.grid(True, which="both", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def emit_report(result, out_dir, prefix: str = "report") -> list:
    """Write CSV tables and SVG plots for a sweep result or an error series."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    if isinstance(result, SweepResult):
        if len(result.n_values) == 0:
            raise ValueError("empty sweep result")
        csv = os.path.join(out_dir, f"{prefix}_sweep.csv")
        result.to_csv(csv)
        paths.append(csv)
        for arr, tag in ((result.int_u, "eps_u"), (result.int_p, "eps_p")):
            svg = os.path.join(out_dir, f"{prefix}_sweep_{tag}.svg")
            _plot_sweep(result, arr, f"integrated {tag}", svg)
            paths.append(svg)
        if not check_lower_bound(result):
            warnings.warn("projection row is not a lower bound of the sweep table")
    elif isinstance(result, ErrorSeries):
        if len(result.times) == 0:
            raise ValueError("empty error series")
        csv = os.path.join(out_dir, f"{prefix}_series.csv")
        result.to_csv(csv)
        paths.append(csv)
        svg = os.path.join(out_dir, f"{prefix}_series.svg")
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.plot(result.times, result.eps_u, label="eps_u [%]")
        ax.plot(result.times, result.eps_p, label="eps_p [%]")
        ax.set_xlabel("t")
        ax.set_ylabel("error [%]")
        ax.legend(fontsize=8)
        ax.grid(True, alpha=0.3)
        fig.tight_layout()
        fig.savefig(svg, format="svg")
        plt.close(fig)
        paths.append(svg)
    else:
        raise TypeError(f"cannot report on {type(result).__name__}")
    return paths


def emit_heatmaps(snapshots, vel_basis, pres_basis, a: np.ndarray, b: np.ndarray,
                  frame_index: int, out_dir, prefix: str = "fields") -> str:
    """Side-by-side heatmaps of reconstructed |u| and p against the FOM frame."""
    os.makedirs(out_dir, exist_ok=True)
    grid = snapshots.grid
    n = grid.n_cells
    frame = snapshots.frames[frame_index]
    rec_v = vel_basis.modes[:, : len(a)] @ a
    rec_p = pres_basis.modes[:, : len(b)] @ b
    mag_rom = np.sqrt(rec_v[:n] ** 2 + rec_v[n:] ** 2)
    mag_fom = np.sqrt(frame.u**2 + frame.v**2)
    panels = [
        ("|u| ROM", mag_rom), ("|u| FOM", mag_fom),
        ("p ROM", rec_p), ("p FOM", frame.p),
    ]
    fig, axes = plt.subplots(2, 2, figsize=(9, 5))
    extent = (0.0, grid.lx, 0.0, grid.ly)
    for ax, (title, data) in zip(axes.ravel(), panels):
        img = np.where(grid.fluid, data, np.nan).reshape(grid.ny, grid.nx)
        im = ax.imshow(img, origin="lower", extent=extent, aspect="equal")
        ax.set_title(f"{title}  (t = {frame.t:.3g})", fontsize=9)
        fig.colorbar(im, ax=ax, shrink=0.8)
    fig.tight_layout()
    path = os.path.join(out_dir, f"{prefix}_heatmaps.svg")
    fig.savefig(path, format="svg")
    plt.close(fig)
    return path
