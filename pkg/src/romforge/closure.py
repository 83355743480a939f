"""Exact correction-term snapshots and least-squares closure fits.

The exact corrections measure what the truncated quadratic (and, for the
pressure equation, linear) reduced operators miss relative to a finer
d-mode reference.  The fitted closures model those corrections with a
linear-plus-quadratic ansatz in the reduced coefficients.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as la

from .snapshots import CoeffSeries, FormatError

_VARIANTS = ("sup_unconstrained", "sup_constrained", "ppe_joint")


class IllPosednessError(ValueError):
    """Least-squares system is rank deficient; regularization required."""


class FitWarning(UserWarning):
    """Constrained fit stopped before reaching the requested tolerance."""


@dataclass
class CorrectionSnapshots:
    """Exact correction targets tau_u (M x r) and optionally tau_p (M x q)."""

    times: np.ndarray
    tau_u: np.ndarray
    tau_p: np.ndarray | None
    d: int
    r: int
    q: int = 0

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.tau_u = np.atleast_2d(np.asarray(self.tau_u, dtype=float))
        if self.tau_u.shape != (len(self.times), self.r):
            raise ValueError("tau_u shape does not match (n_times, r)")
        if not np.all(np.isfinite(self.tau_u)):
            raise ValueError("tau_u contains non-finite entries")
        if self.tau_p is not None:
            self.tau_p = np.atleast_2d(np.asarray(self.tau_p, dtype=float))
            if self.tau_p.shape != (len(self.times), self.q):
                raise ValueError("tau_p shape does not match (n_times, q)")
            if not np.all(np.isfinite(self.tau_p)):
                raise ValueError("tau_p contains non-finite entries")
        if self.d < self.r:
            raise ValueError(f"fine order d={self.d} below coarse order r={self.r}")


def quad_form(T: np.ndarray, x: np.ndarray, y: np.ndarray | None = None) -> np.ndarray:
    """Contraction (x^T T y)_i = sum_jk T_ijk x_j y_k."""
    if y is None:
        y = x
    return np.einsum("ijk,j,k->i", T, x, y)


def exact_velocity_correction(a_d: CoeffSeries, C_d: np.ndarray, C: np.ndarray) -> np.ndarray:
    """Rows tau_u(t_j) = a_r^T C a_r - first-r truncation of a_d^T C_d a_d.

    Both convective forms enter the momentum equation with a minus sign, so
    the correction is (coarse form) minus (truncated fine form).
    """
    r = C.shape[0]
    d = a_d.n_coeffs
    if d < r:
        raise ValueError(f"fine coefficient count {d} below coarse count {r}")
    if C_d.shape != (d, d, d) or C.shape != (r, r, r):
        raise ValueError("convective tensor shapes inconsistent with coefficient counts")
    out = np.empty((len(a_d.times), r))
    for j, ad in enumerate(a_d.values):
        out[j] = quad_form(C, ad[:r]) - quad_form(C_d, ad)[:r]
    return out


def exact_pressure_correction(a_d: CoeffSeries, b_d: CoeffSeries,
                              D_d: np.ndarray, D: np.ndarray,
                              G_d: np.ndarray, G: np.ndarray) -> np.ndarray:
    """Rows tau_p(t_j) = (D_d b_d)|_q - D b_q + (a_d^T G_d a_d)|_q - a_r^T G a_r."""
    q = D.shape[0]
    r = G.shape[1]
    d = a_d.n_coeffs
    dq = b_d.n_coeffs
    if dq < q or d < r:
        raise ValueError("fine coefficient counts below coarse counts")
    if D_d.shape != (dq, dq) or G_d.shape != (dq, d, d) or G.shape != (q, r, r):
        raise ValueError("pressure operator shapes inconsistent")
    if len(a_d.times) != len(b_d.times):
        raise ValueError("velocity and pressure series lengths differ")
    out = np.empty((len(a_d.times), q))
    for j in range(len(a_d.times)):
        ad = a_d.values[j]
        bd = b_d.values[j]
        out[j] = ((D_d @ bd)[:q] - D @ bd[:q]
                  + quad_form(G_d, ad)[:q] - quad_form(G, ad[:r]))
    return out


@dataclass
class ClosureModel:
    """Fitted correction operators.

    ``sup_*`` variants carry (A_tilde, B_tilde) acting on velocity
    coefficients; ``ppe_joint`` carries (J_A, J_B) acting on the concatenated
    (a, b) vector, with the output split into tau_u (first r) and tau_p
    (last q).  B-type tensors are stored symmetric in their last two indices.
    """

    variant: str
    r: int
    q: int = 0
    A_tilde: np.ndarray | None = None
    B_tilde: np.ndarray | None = None
    J_A: np.ndarray | None = None
    J_B: np.ndarray | None = None
    residual: float = 0.0
    iterations: int = 0
    converged: bool = True
    constraint_eig: float = 0.0
    constraint_sym: float = 0.0

    def __post_init__(self):
        if self.variant not in _VARIANTS:
            raise ValueError(f"unknown closure variant {self.variant!r}")

    @classmethod
    def zeros(cls, variant: str, r: int, q: int = 0) -> "ClosureModel":
        if variant == "ppe_joint":
            n = r + q
            return cls(variant, r, q, J_A=np.zeros((n, n)), J_B=np.zeros((n, n, n)))
        return cls(variant, r, q, A_tilde=np.zeros((r, r)), B_tilde=np.zeros((r, r, r)))


def eval_closure(model: ClosureModel, a: np.ndarray, b: np.ndarray | None = None):
    """Evaluate the closure: returns (tau_u, tau_p or None)."""
    a = np.asarray(a, dtype=float)
    if model.variant == "ppe_joint":
        if b is None:
            raise ValueError("ppe_joint closure requires pressure coefficients")
        x = np.concatenate([a, np.asarray(b, dtype=float)])
        if len(x) != model.r + model.q:
            raise ValueError(f"expected {model.r + model.q} coefficients, got {len(x)}")
        tot = model.J_A @ x + quad_form(model.J_B, x)
        return tot[: model.r], tot[model.r:]
    if len(a) != model.r:
        raise ValueError(f"expected {model.r} coefficients, got {len(a)}")
    tau = model.A_tilde @ a + quad_form(model.B_tilde, a)
    return tau, None


# regressor helpers -----------------------------------------------------------

def _sym_pairs(n: int):
    return [(j, k) for j in range(n) for k in range(j, n)]


def _regressor(values: np.ndarray) -> np.ndarray:
    """Rows [a, quadratic monomials a_j a_k (j<=k, off-diagonal doubled)]."""
    n = values.shape[1]
    pairs = _sym_pairs(n)
    quad = np.empty((values.shape[0], len(pairs)))
    for col, (j, k) in enumerate(pairs):
        quad[:, col] = values[:, j] * values[:, k] * (1.0 if j == k else 2.0)
    return np.hstack([values, quad])


def _unpack(theta: np.ndarray, n: int):
    """Split a per-output coefficient matrix into (A, B) with B sym in (j,k)."""
    n_out = theta.shape[1]
    A = theta[:n].T
    B = np.zeros((n_out, n, n))
    for col, (j, k) in enumerate(_sym_pairs(n)):
        B[:, j, k] = theta[n + col]
        B[:, k, j] = theta[n + col]
    return A, B


def _pack_B(B: np.ndarray) -> np.ndarray:
    n = B.shape[1]
    return np.column_stack([B[:, j, k] for (j, k) in _sym_pairs(n)]).T


def default_ridge(Phi: np.ndarray) -> float:
    """lambda = 1e-8 * trace(Phi^T Phi) / number of unknowns."""
    return 1e-8 * float(np.sum(Phi * Phi)) / Phi.shape[1]


def _solve_ridge(Phi: np.ndarray, Y: np.ndarray, lam: float) -> np.ndarray:
    if lam == 0.0:
        rank = np.linalg.matrix_rank(Phi)
        if rank < Phi.shape[1]:
            raise IllPosednessError(
                f"regressor rank {rank} < {Phi.shape[1]} unknowns; use ridge > 0"
            )
        theta, *_ = la.lstsq(Phi, Y)
        return theta
    G = Phi.T @ Phi + lam * np.eye(Phi.shape[1])
    return la.solve(G, Phi.T @ Y, assume_a="pos")


def _check_sample_count(n_rows: int, n_unknowns: int):
    if n_rows < n_unknowns / 2:
        warnings.warn(
            f"only {n_rows} correction samples for {n_unknowns} unknowns; "
            "fit may be dominated by the ridge term",
            FitWarning, stacklevel=3,
        )


def fit_unconstrained(corr: CorrectionSnapshots, a_r: CoeffSeries,
                      ridge: float | None = None) -> ClosureModel:
    """Least-squares fit of tau_u(a) = A a + a^T B a with B sym in (j, k)."""
    r = corr.r
    if a_r.n_coeffs < r:
        raise ValueError("coefficient series narrower than correction width")
    vals = a_r.values[:, :r]
    Phi = _regressor(vals)
    _check_sample_count(len(vals) * r, Phi.shape[1] * r)
    lam = default_ridge(Phi) if ridge is None else ridge
    theta = _solve_ridge(Phi, corr.tau_u, lam)
    A, B = _unpack(theta, r)
    resid = float(np.sum((corr.tau_u - Phi @ theta) ** 2))
    return ClosureModel("sup_unconstrained", r, A_tilde=A, B_tilde=B, residual=resid,
                        constraint_eig=_max_eig_sym(A), constraint_sym=_sym6_max(B))


def fit_joint_ppe(corr: CorrectionSnapshots, ab: CoeffSeries,
                  ridge: float | None = None) -> ClosureModel:
    """Single least squares over stacked (tau_u, tau_p) targets in (a, b)."""
    if corr.tau_p is None:
        raise ValueError("joint PPE fit requires pressure corrections")
    n = corr.r + corr.q
    if ab.n_coeffs != n:
        raise ValueError(f"expected {n} stacked coefficients, got {ab.n_coeffs}")
    Y = np.hstack([corr.tau_u, corr.tau_p])
    Phi = _regressor(ab.values)
    _check_sample_count(len(ab.values) * n, Phi.shape[1] * n)
    lam = default_ridge(Phi) if ridge is None else ridge
    theta = _solve_ridge(Phi, Y, lam)
    J_A, J_B = _unpack(theta, n)
    resid = float(np.sum((Y - Phi @ theta) ** 2))
    return ClosureModel("ppe_joint", corr.r, corr.q, J_A=J_A, J_B=J_B, residual=resid)


# constrained fit --------------------------------------------------------------

def sym6(B: np.ndarray) -> np.ndarray:
    """Full symmetrization of a cubic tensor over all six index permutations."""
    return (B + B.transpose(0, 2, 1) + B.transpose(1, 0, 2)
            + B.transpose(1, 2, 0) + B.transpose(2, 0, 1) + B.transpose(2, 1, 0)) / 6.0


def _max_eig_sym(A: np.ndarray) -> float:
    return float(la.eigvalsh(0.5 * (A + A.T))[-1])


def _sym6_max(B: np.ndarray) -> float:
    return float(np.max(np.abs(sym6(B))))


def _clip_nsd(A: np.ndarray) -> np.ndarray:
    """Project the symmetric part onto the negative-semidefinite cone."""
    S = 0.5 * (A + A.T)
    W = 0.5 * (A - A.T)
    lam, V = la.eigh(S)
    lam = np.minimum(lam, 0.0)
    return (V * lam) @ V.T + W


def _symfree_basis(r: int) -> np.ndarray:
    """Orthonormal basis of the sym23 B-parameter subspace with sym6(B) = 0."""
    pairs = _sym_pairs(r)
    n_par = r * len(pairs)

    def to_tensor(vec):
        theta = vec.reshape(r, len(pairs))
        B = np.zeros((r, r, r))
        for col, (j, k) in enumerate(pairs):
            B[:, j, k] = theta[:, col]
            B[:, k, j] = theta[:, col]
        return B

    # constraint matrix: rows = independent entries of sym6(B)
    cons = []
    for p in range(n_par):
        e = np.zeros(n_par)
        e[p] = 1.0
        cons.append(sym6(to_tensor(e)).ravel())
    Cmat = np.array(cons).T  # (r^3, n_par)
    _, s, Vt = la.svd(Cmat, full_matrices=True)
    rank = int(np.sum(s > 1e-12 * (s[0] if len(s) else 1.0)))
    return Vt[rank:].T  # columns span the null space


def fit_constrained(corr: CorrectionSnapshots, a_r: CoeffSeries,
                    ridge: float | None = None, max_iter: int = 5000,
                    tol: float = 1e-10) -> ClosureModel:
    """Constrained fit: sym(A) negative semidefinite, sym6(B) = 0.

    B is eliminated exactly on the symmetrization-free subspace; A is found by
    projected gradient descent with eigenvalue clipping and a backtracking
    line search.  Stops when the projected-gradient norm drops below ``tol``.
    """
    r = corr.r
    vals = a_r.values[:, :r]
    M = len(vals)
    tau = corr.tau_u
    Phi_lin = vals                       # (M, r): A-part regressor per output
    Phi_full = _regressor(vals)
    _check_sample_count(M * r, Phi_full.shape[1] * r)
    lam = default_ridge(Phi_full) if ridge is None else ridge

    pairs = _sym_pairs(r)
    Phi_quad = Phi_full[:, r:]           # (M, n_pairs)
    Z = _symfree_basis(r)                # (r * n_pairs, n_zdim)

    # quadratic-part design in the reduced coordinates zeta: rows are
    # vec over (output i, time j) of the B contribution
    n_pairs = len(pairs)
    # B contribution to tau[j, i] = sum_col theta_B[i*np + col] * Phi_quad[j, col]
    # stack as (M*r) x (r*n_pairs) block-diagonal in the output index
    PhiB = np.zeros((M * r, r * n_pairs))
    for i in range(r):
        PhiB[i * M:(i + 1) * M, i * n_pairs:(i + 1) * n_pairs] = Phi_quad
    PhiBZ = PhiB @ Z
    GB = PhiBZ.T @ PhiBZ + lam * np.eye(Z.shape[1])
    cho_B = la.cho_factor(GB)

    def solve_B(res_flat):
        zeta = la.cho_solve(cho_B, PhiBZ.T @ res_flat)
        return zeta

    def B_from_zeta(zeta):
        theta = (Z @ zeta).reshape(r, n_pairs)
        B = np.zeros((r, r, r))
        for col, (j, k) in enumerate(pairs):
            B[:, j, k] = theta[:, col]
            B[:, k, j] = theta[:, col]
        return B, theta

    GA = Phi_lin.T @ Phi_lin
    lipschitz = float(la.eigvalsh(GA)[-1]) + lam

    def objective(A, quadfit):
        misfit = tau - Phi_lin @ A.T - quadfit
        return float(np.sum(misfit ** 2)) + lam * float(np.sum(A ** 2))

    A = _clip_nsd(np.zeros((r, r)))
    zeta = solve_B((tau - Phi_lin @ A.T).T.ravel())
    it = 0
    pg_norm = np.inf
    for it in range(1, max_iter + 1):
        Bq = (PhiBZ @ zeta).reshape(r, M).T   # quadratic-part prediction
        misfit = tau - Phi_lin @ A.T - Bq
        grad = -2.0 * (misfit.T @ Phi_lin) + 2.0 * lam * A
        step = 1.0 / (2.0 * lipschitz)
        f0 = float(np.sum(misfit ** 2)) + lam * float(np.sum(A ** 2))
        A_new = _clip_nsd(A - step * grad)
        # backtracking on the A subproblem
        for _ in range(30):
            if objective(A_new, Bq) <= f0 + 1e-14 * max(f0, 1.0):
                break
            step *= 0.5
            A_new = _clip_nsd(A - step * grad)
        pg_norm = float(np.linalg.norm(A_new - A)) / step
        A = A_new
        zeta = solve_B((tau - Phi_lin @ A.T).T.ravel())
        if pg_norm < tol:
            break
    converged = pg_norm < tol
    if not converged:
        warnings.warn(
            f"constrained fit stopped after {it} iterations "
            f"(projected-gradient norm {pg_norm:.3e} > {tol:.1e})",
            FitWarning, stacklevel=2,
        )
    B, _ = B_from_zeta(zeta)
    Bq = (PhiBZ @ zeta).reshape(r, M).T
    resid = float(np.sum((tau - Phi_lin @ A.T - Bq) ** 2))
    return ClosureModel("sup_constrained", r, A_tilde=A, B_tilde=B, residual=resid,
                        iterations=it, converged=converged,
                        constraint_eig=_max_eig_sym(A), constraint_sym=_sym6_max(B))


# ROMCLS v1 --------------------------------------------------------------------

_CLS_MAGIC = b"ROMCLS01"
_CLS_HEADER = struct.Struct("<3I d I d d")  # variant, r, q, residual, iters, eig, sym


def write_closure(model: ClosureModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(_CLS_MAGIC)
        fh.write(_CLS_HEADER.pack(_VARIANTS.index(model.variant), model.r, model.q,
                                  model.residual, model.iterations,
                                  model.constraint_eig, model.constraint_sym))
        if model.variant == "ppe_joint":
            arrays = (model.J_A, model.J_B)
        else:
            arrays = (model.A_tilde, model.B_tilde)
        for arr in arrays:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_closure(path) -> ClosureModel:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != _CLS_MAGIC:
        raise FormatError(f"bad magic {data[:8]!r}, expected {_CLS_MAGIC!r}", byte_offset=0)
    var_i, r, q, resid, iters, ceig, csym = _CLS_HEADER.unpack_from(data, 8)
    if var_i >= len(_VARIANTS):
        raise FormatError(f"unknown variant tag {var_i}", byte_offset=8)
    variant = _VARIANTS[var_i]
    n = r + q if variant == "ppe_joint" else r
    body = 8 + _CLS_HEADER.size
    expected = body + 8 * (n * n + n * n * n)
    if len(data) != expected:
        raise FormatError(
            f"payload size mismatch: expected {expected} bytes, file has {len(data)}",
            byte_offset=min(len(data), expected),
        )
    payload = np.frombuffer(data, dtype="<f8", offset=body)
    Amat = payload[: n * n].reshape(n, n).copy()
    Bten = payload[n * n:].reshape(n, n, n).copy()
    kw = dict(residual=resid, iterations=iters, constraint_eig=ceig, constraint_sym=csym)
    if variant == "ppe_joint":
        return ClosureModel(variant, r, q, J_A=Amat, J_B=Bten, **kw)
    return ClosureModel(variant, r, q, A_tilde=Amat, B_tilde=Bten, **kw)
