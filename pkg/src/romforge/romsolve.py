"""Implicit time integration of the reduced systems.

Both formulations solve a coupled nonlinear system in the stacked unknowns
(a, b) each step with a damped Newton iteration and a finite-difference
Jacobian.  The eddy-viscosity coefficients g are lagged explicitly: they are
evaluated from the previous accepted velocity state and held fixed during the
Newton solve.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as la

from .closure import CorrectionSnapshots, eval_closure, quad_form
from .evmodel import predict_g
from .grid import ConfigurationError
from .minifom import NumericalFailureError

_FORMULATIONS = ("sup", "ppe")
_SCHEMES = ("order1", "order2")


class StepFailureError(NumericalFailureError):
    """Newton iteration failed to converge within the allowed iterations."""

    def __init__(self, message, residual_norm, iterations=None):
        super().__init__(message, iterations=iterations)
        self.residual_norm = residual_norm


@dataclass(frozen=True)
class RomRunConfig:
    """Settings for one reduced-model trajectory."""

    formulation: str
    nu: float
    dt: float
    n_steps: int
    u_bc: tuple = (1.0,)
    c_u: int = 0
    c_p: int = 0
    c_t: int = 0
    scheme: str = "order2"
    newton_tol: float = 1e-10
    newton_max_iter: int = 25
    t0: float = 0.0

    def __post_init__(self):
        if self.formulation not in _FORMULATIONS:
            raise ConfigurationError(f"unknown formulation {self.formulation!r}")
        if self.scheme not in _SCHEMES:
            raise ConfigurationError(f"unknown scheme {self.scheme!r}")
        if self.formulation == "sup" and self.c_p:
            raise ConfigurationError("c_p applies only to the ppe formulation")
        for name in ("c_u", "c_p", "c_t"):
            if getattr(self, name) not in (0, 1):
                raise ConfigurationError(f"{name} must be 0 or 1")
        if self.dt <= 0 or self.n_steps < 1:
            raise ConfigurationError("dt must be positive and n_steps >= 1")
        if self.nu <= 0:
            raise ConfigurationError("viscosity must be positive")


def _penalty(ops, u_bc, a):
    """tau * sum_k (U_BCk * D^k - E^k a)."""
    out = np.zeros(len(a))
    for k in range(ops.n_bc):
        out += u_bc[k] * ops.Dk[k] - ops.Ek[k] @ a
    return ops.tau * out


def _closure_terms(closure, a, b, cfg):
    tau_u = np.zeros(len(a))
    tau_p = None
    if closure is not None and (cfg.c_u or cfg.c_p):
        if closure.variant == "ppe_joint":
            tau_u, tau_p = eval_closure(closure, a, b)
        else:
            tau_u, _ = eval_closure(closure, a)
    return tau_u, tau_p


def _momentum(a, b, adot, g, ops, cfg, tau_u):
    res = (ops.M @ adot
           - cfg.nu * ((ops.B + ops.BT) @ a)
           + quad_form(ops.C, a)
           + ops.H @ b
           - _penalty(ops, cfg.u_bc, a))
    if cfg.c_u:
        res -= tau_u
    if cfg.c_t:
        res -= np.einsum("ijk,j,k->i", ops.CT1 + ops.CT2, g, a)
    return res


def residual_sup(a, b, adot, g, ops, cfg, closure=None):
    """Stacked residual (momentum, P a) of the supremizer formulation."""
    tau_u, _ = _closure_terms(closure, a, b, cfg)
    mom = _momentum(a, b, adot, g, ops, cfg, tau_u)
    return np.concatenate([mom, ops.P @ a])


def residual_ppe(a, b, adot, g, ops, cfg, closure=None):
    """Stacked residual (momentum, pressure Poisson) of the PPE formulation."""
    tau_u, tau_p = _closure_terms(closure, a, b, cfg)
    mom = _momentum(a, b, adot, g, ops, cfg, tau_u)
    pres = ops.D @ b + quad_form(ops.G, a) - cfg.nu * (ops.N @ a) - ops.L
    if cfg.c_t:
        pres -= np.einsum("ijk,j,k->i", ops.CT3 + ops.CT4, g, a)
    if cfg.c_p:
        pres += tau_p
    return np.concatenate([mom, pres])


def _newton(fun, x0, tol, max_iter):
    """Damped Newton with central finite-difference Jacobian."""
    x = x0.copy()
    F = fun(x)
    rnorm = la.norm(F)
    for it in range(1, max_iter + 1):
        if rnorm <= tol:
            return x, it - 1, rnorm
        n = len(x)
        h = 1e-7 * (1.0 + la.norm(x))
        J = np.empty((n, n))
        for j in range(n):
            xp = x.copy()
            xm = x.copy()
            xp[j] += h
            xm[j] -= h
            J[:, j] = (fun(xp) - fun(xm)) / (2.0 * h)
        try:
            delta = la.solve(J, -F)
        except la.LinAlgError as exc:
            raise NumericalFailureError(f"singular Newton Jacobian: {exc}", iterations=it)
        step = 1.0
        for _ in range(8):
            x_new = x + step * delta
            F_new = fun(x_new)
            r_new = la.norm(F_new)
            if r_new < rnorm or not np.isfinite(r_new):
                break
            step *= 0.5
        x, F, rnorm = x_new, F_new, r_new
        if not np.isfinite(rnorm):
            raise StepFailureError("Newton residual became non-finite", rnorm, it)
    if rnorm <= tol:
        return x, max_iter, rnorm
    raise StepFailureError(
        f"Newton did not converge in {max_iter} iterations (residual {rnorm:.3e})",
        rnorm, max_iter,
    )


def step(a_n, b_n, a_nm1, g, ops, cfg, closure=None, order=None):
    """Advance one time level; returns (a, b, newton_iters, residual_norm).

    ``a_nm1 = None`` (or order=1) selects the backward-Euler stencil,
    otherwise BDF2.
    """
    r = len(a_n)
    resfun = residual_sup if cfg.formulation == "sup" else residual_ppe
    use_bdf2 = (order or (2 if cfg.scheme == "order2" else 1)) == 2 and a_nm1 is not None
    dt = cfg.dt

    def fun(x):
        a, b = x[:r], x[r:]
        if use_bdf2:
            adot = (3.0 * a - 4.0 * a_n + a_nm1) / (2.0 * dt)
        else:
            adot = (a - a_n) / dt
        return resfun(a, b, adot, g, ops, cfg, closure)

    x0 = np.concatenate([a_n, b_n])
    x, iters, rnorm = _newton(fun, x0, cfg.newton_tol, cfg.newton_max_iter)
    return x[:r], x[r:], iters, rnorm


@dataclass
class RomTrajectory:
    """Reduced trajectory with per-step Newton diagnostics."""

    times: np.ndarray
    a: np.ndarray
    b: np.ndarray
    g: np.ndarray
    newton_iters: np.ndarray
    residuals: np.ndarray
    failed: bool = False
    message: str = ""

    def to_csv(self, path) -> None:
        r, q, n = self.a.shape[1], self.b.shape[1], self.g.shape[1]
        header = ("t," + ",".join(f"a{i+1}" for i in range(r))
                  + ("," if q else "") + ",".join(f"b{i+1}" for i in range(q))
                  + ("," if n else "") + ",".join(f"g{i+1}" for i in range(n))
                  + ",newton_iters,residual")
        with open(path, "w") as fh:
            fh.write(header + "\n")
            for j, t in enumerate(self.times):
                row = [t, *self.a[j], *self.b[j], *self.g[j],
                       self.newton_iters[j], self.residuals[j]]
                fh.write(",".join(f"{x:.17g}" for x in row) + "\n")

    @classmethod
    def from_csv(cls, path) -> "RomTrajectory":
        with open(path) as fh:
            names = fh.readline().strip().split(",")
        data = np.atleast_2d(np.genfromtxt(path, delimiter=",", skip_header=1))
        r = sum(1 for s in names if s.startswith("a"))
        q = sum(1 for s in names if s.startswith("b"))
        n = sum(1 for s in names if s.startswith("g"))
        return cls(times=data[:, 0], a=data[:, 1:1 + r], b=data[:, 1 + r:1 + r + q],
                   g=data[:, 1 + r + q:1 + r + q + n],
                   newton_iters=data[:, -2].astype(int), residuals=data[:, -1])


def residual_corrections(ops, cfg, a_r, b_q, d, ev=None) -> CorrectionSnapshots:
    """Correction snapshots from the discrete residual at projected data.

    Evaluates the closure-off reduced equations on the projected coefficient
    series with the same time stencil the integrator uses, so that the
    projected trajectory is an exact solution of the corrected scheme when the
    fitted closure reproduces these targets.  With ``ev`` supplied the
    eddy-viscosity term is included (lagged, as in :func:`run_rom`), producing
    targets consistent with a hybrid run.
    """
    resfun = residual_sup if cfg.formulation == "sup" else residual_ppe
    A, Bq = np.asarray(a_r.values, dtype=float), np.asarray(b_q.values, dtype=float)
    m, r = A.shape
    q = Bq.shape[1]
    if m < 2:
        raise ConfigurationError("residual corrections need at least two samples")
    dt = cfg.dt
    base = RomRunConfig(formulation=cfg.formulation, nu=cfg.nu, dt=dt, n_steps=1,
                        u_bc=cfg.u_bc, c_t=1 if ev is not None else 0,
                        scheme=cfg.scheme, t0=cfg.t0)
    tau_u = np.zeros((m, r))
    tau_p = np.zeros((m, q))
    for j in range(1, m):
        if j >= 2 and cfg.scheme == "order2":
            adot = (3.0 * A[j] - 4.0 * A[j - 1] + A[j - 2]) / (2.0 * dt)
        else:
            adot = (A[j] - A[j - 1]) / dt
        g = _eval_g(ev, A[j - 1], ops)
        res = resfun(A[j], Bq[j], adot, g, ops, base)
        tau_u[j] = res[:r]
        if cfg.formulation == "ppe":
            tau_p[j] = -res[r:]
    tau_u[0] = tau_u[1]
    tau_p[0] = tau_p[1]
    return CorrectionSnapshots(times=np.asarray(a_r.times), tau_u=tau_u,
                               tau_p=tau_p, d=d, r=r, q=q)


def initial_pressure(a0, g0, ops, cfg) -> np.ndarray:
    """Initial b from the closure-off pressure Poisson block at a0."""
    rhs = cfg.nu * (ops.N @ a0) + ops.L - quad_form(ops.G, a0)
    if cfg.c_t:
        rhs += np.einsum("ijk,j,k->i", ops.CT3 + ops.CT4, g0, a0)
    return la.solve(ops.D, rhs)


def _eval_g(ev, a, ops):
    if ev is None:
        return np.zeros(ops.n_nut)
    # supremizer coefficients are stabilization artifacts, not model inputs
    return predict_g(ev, a[: len(a) - ops.n_sup])


def run_rom(ops, cfg: RomRunConfig, init_a, init_b=None, closure=None, ev=None) -> RomTrajectory:
    """Integrate the reduced system; returns a partial trajectory on failure."""
    if (cfg.c_u or cfg.c_p) and closure is None:
        raise ConfigurationError("c_u/c_p active but no closure model supplied")
    if cfg.c_t and ev is None:
        raise ConfigurationError("c_t active but no eddy-viscosity model supplied")
    r, q = ops.r, ops.q
    a = np.asarray(init_a, dtype=float)
    if len(a) != r:
        raise ConfigurationError(f"initial a has {len(a)} entries, operators expect {r}")
    g = _eval_g(ev, a, ops)
    if init_b is not None:
        b = np.asarray(init_b, dtype=float)
    elif cfg.formulation == "ppe":
        b = initial_pressure(a, g, ops, cfg)
    else:
        b = np.zeros(q)
    times = [cfg.t0]
    A, Bc, Gc = [a], [b], [g]
    iters, resids = [0], [0.0]
    a_prev = None
    failed = False
    message = ""
    for k in range(1, cfg.n_steps + 1):
        g = _eval_g(ev, A[-1], ops)
        order = 1 if (cfg.scheme == "order1" or a_prev is None) else 2
        try:
            a_new, b_new, nit, rn = step(A[-1], Bc[-1], a_prev, g, ops, cfg,
                                         closure=closure, order=order)
        except NumericalFailureError as exc:
            failed = True
            message = f"step {k}: {exc}"
            break
        a_prev = A[-1]
        times.append(cfg.t0 + k * cfg.dt)
        A.append(a_new)
        Bc.append(b_new)
        Gc.append(g)
        iters.append(nit)
        resids.append(rn)
    return RomTrajectory(times=np.array(times), a=np.array(A), b=np.array(Bc),
                         g=np.array(Gc), newton_iters=np.array(iters),
                         residuals=np.array(resids), failed=failed, message=message)
