"""Functional single index model Y = g(∫X β) + ε fitted by penalized least squares.

β(t) = ψ(t)'c and g(s) = φ(s)'d. The optimizer works on raw (d, c); c is
normalized to unit length and sign-fixed inside every objective evaluation.
"""
import logging
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import eigh, null_space
from scipy.optimize import OptimizeResult, line_search

from .basis import (
    BasisSystem,
    basis_spec,
    eval_basis,
    linear_coefficients,
    make_bspline_basis,
    penalty_matrix,
    penalty_null_space,
    trapezoid_weights,
)
from .errors import (
    DegenerateDataError,
    DegenerateSmootherError,
    IllConditionedError,
    InvalidArgumentError,
    JensenEffectError,
    NumericFailureError,
)
from .schemas import FitRecord
from .smoothing import DEGENERATE_TOL, penalized_solve

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class FsimDataset:
    """n responses with covariate curves sampled on a common grid"""
    t_grid: np.ndarray
    X: np.ndarray
    Y: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.t_grid, dtype=float).ravel()
        X = np.atleast_2d(np.asarray(self.X, dtype=float))
        Y = np.asarray(self.Y, dtype=float).ravel()
        if len(t) < 2 or np.any(np.diff(t) <= 0):
            raise InvalidArgumentError("t_grid needs at least 2 strictly increasing points")
        if X.shape != (len(Y), len(t)):
            raise InvalidArgumentError(f"X has shape {X.shape}, expected ({len(Y)}, {len(t)})")
        if len(Y) < 10:
            raise InvalidArgumentError(f"need at least 10 observations, got {len(Y)}")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Y))):
            raise InvalidArgumentError("dataset contains missing or non-finite values")
        object.__setattr__(self, "t_grid", t)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Y", Y)

    @property
    def n(self) -> int:
        return len(self.Y)

    def with_response(self, Y) -> "FsimDataset":
        return FsimDataset(self.t_grid, self.X, Y)


@dataclass(frozen=True)
class FsimBases:
    """β basis plus the template for g's B-spline basis (its domain depends on the data)"""
    beta: BasisSystem
    g_n_basis: int = 25
    g_order: int = 6

    def g_basis(self, S_range: float) -> BasisSystem:
        return make_bspline_basis((-S_range, S_range), self.g_n_basis, self.g_order)


@dataclass(frozen=True)
class FsimOptions:
    ftol: float = 1e-10
    gtol: float = 1e-8
    max_iter: int = 2000
    restarts: int = 1
    max_sweeps: int = 10
    sweep_tol: float = 0.01
    jobs: int = 1


@dataclass(frozen=True)
class IndexRange:
    S: float
    pca_bound: float
    norm_bound: float
    active: str  # "pca" or "norm"


@dataclass(frozen=True)
class FsimFit:
    c: np.ndarray
    d: np.ndarray
    lambda_g: float
    lambda_beta: float
    g_basis: BasisSystem
    beta_basis: BasisSystem
    Psi: np.ndarray
    Y: np.ndarray
    index: np.ndarray
    index_bar: float
    S_range: float
    sigma_hat: float
    objective: float
    converged: bool
    n_restarts_used: int
    n_iter: int
    n_clamped: int

    @property
    def n(self) -> int:
        return len(self.Y)

    @property
    def flagged(self) -> bool:
        return self.n_clamped > 0 or not self.converged

    @property
    def fitted(self) -> np.ndarray:
        s = np.clip(self.index, -self.S_range, self.S_range)
        return eval_basis(self.g_basis, s) @ self.d

    @property
    def residuals(self) -> np.ndarray:
        return self.Y - self.fitted


def functional_design(ds: FsimDataset, beta_basis: BasisSystem) -> np.ndarray:
    """Ψ_ij = ∫X_i ψ_j by the trapezoid rule on the sample grid."""
    t = ds.t_grid
    if t[0] < beta_basis.lower - 1e-12 * beta_basis.width or t[-1] > beta_basis.upper + 1e-12 * beta_basis.width:
        raise InvalidArgumentError(
            f"t_grid [{t[0]}, {t[-1]}] is not inside the beta basis domain {beta_basis.domain}")
    w = trapezoid_weights(t)
    B = eval_basis(beta_basis, t)
    return ds.X @ (w[:, None] * B)


def index_range_bounds(ds: FsimDataset) -> IndexRange:
    w = trapezoid_weights(ds.t_grid)
    K = ds.X @ (w[:, None] * ds.X.T)
    K = 0.5 * (K + K.T)
    norms = np.sqrt(np.clip(np.diag(K), 0.0, None))
    if norms.max() <= 0:
        raise InvalidArgumentError("all covariate curves are identically zero")
    n = K.shape[0]
    vals, vecs = eigh(K, subset_by_index=[n - 1, n - 1])
    # scores on the unit-norm leading component are sqrt(mu) * v
    pca = float(np.sqrt(max(vals[0], 0.0)) * np.abs(vecs[:, 0]).max())
    norm = float(norms.max())
    active = "pca" if pca >= norm * (1 - 1e-12) else "norm"
    return IndexRange(S=max(pca, norm), pca_bound=pca, norm_bound=norm, active=active)


def index_range(ds: FsimDataset) -> float:
    """Half-width S covering every |∫X_i β| with ‖β‖ = 1."""
    return index_range_bounds(ds).S


def index_clamp(s, S: float):
    """Clamp the index to [-S, S]; excess is how far it overshot."""
    s_arr = np.asarray(s, dtype=float)
    clamped = np.clip(s_arr, -S, S)
    excess = np.maximum(np.abs(s_arr) - S, 0.0)
    if np.ndim(s) == 0:
        return float(clamped), float(excess)
    return clamped, excess


def g_domain_half_width(ds: FsimDataset, beta_basis: BasisSystem) -> float:
    """index_range scaled so |∫X_i ψ'c| <= S_range whenever ‖c‖ = 1."""
    t = ds.t_grid
    w = trapezoid_weights(t)
    B = eval_basis(beta_basis, t)
    gram = B.T @ (w[:, None] * B)
    top = float(eigh(0.5 * (gram + gram.T), eigvals_only=True)[-1])
    return index_range(ds) * float(np.sqrt(max(top, 1.0 - 1e-9)))


def normalize_sign(c, psi_a: np.ndarray) -> np.ndarray:
    """Unit-norm c with β(a) = ψ(a)'c >= 0 (first nonzero coefficient breaks a zero tie)."""
    c = np.asarray(c, dtype=float)
    norm = np.linalg.norm(c)
    if not np.isfinite(norm) or norm <= 0:
        raise InvalidArgumentError("beta coefficients are zero and cannot be normalized")
    u = c / norm
    at_a = float(psi_a @ u)
    if abs(at_a) <= 1e-14 * max(np.linalg.norm(psi_a), 1.0):
        nz = np.flatnonzero(np.abs(u) > 1e-14)
        sign = np.sign(u[nz[0]])
    else:
        sign = np.sign(at_a)
    return sign * u


class PlsProblem:
    """Penalized least squares objective and gradient on the (d, c) vector.

    Objective = RSS + λ_g d'P_g d + λ_β c̃'P_β c̃ + Σ excess_i, where c̃ is the
    normalized, sign-fixed c and excess_i is the clamp overshoot of index i.
    """

    def __init__(self, ds: FsimDataset, bases: FsimBases, lambda_g: float, lambda_beta: float,
                 Psi: Optional[np.ndarray] = None, S_range: Optional[float] = None):
        if lambda_g < 0 or lambda_beta < 0:
            raise InvalidArgumentError("smoothing parameters must be nonnegative")
        self.ds = ds
        self.bases = bases
        self.lambda_g = float(lambda_g)
        self.lambda_beta = float(lambda_beta)
        self.Psi = functional_design(ds, bases.beta) if Psi is None else Psi
        self.S_range = g_domain_half_width(ds, bases.beta) if S_range is None else float(S_range)
        self.g_basis = bases.g_basis(self.S_range)
        self.P_g = penalty_matrix(self.g_basis, 2)
        self.P_beta = penalty_matrix(bases.beta, 2)
        self.psi_a = eval_basis(bases.beta, [bases.beta.lower])[0]
        self.K1 = self.g_basis.n_basis
        self.K2 = bases.beta.n_basis
        self._memo = None

    def with_lambdas(self, lambda_g: float, lambda_beta: float) -> "PlsProblem":
        other = object.__new__(PlsProblem)
        other.__dict__.update(self.__dict__)
        other.lambda_g = float(lambda_g)
        other.lambda_beta = float(lambda_beta)
        other._memo = None
        return other

    def pack(self, d, c) -> np.ndarray:
        return np.concatenate([np.asarray(d, dtype=float), np.asarray(c, dtype=float)])

    def unpack(self, theta) -> Tuple[np.ndarray, np.ndarray]:
        return theta[:self.K1], theta[self.K1:]

    def evaluate(self, theta: np.ndarray) -> Tuple[float, np.ndarray]:
        theta = np.asarray(theta, dtype=float)
        if self._memo is not None and np.array_equal(self._memo[0], theta):
            return self._memo[1], self._memo[2]
        d, c = self.unpack(theta)
        norm = np.linalg.norm(c)
        c_t = normalize_sign(c, self.psi_a)
        sign = float(np.sign(c_t @ c)) if norm > 0 else 1.0

        s = self.Psi @ c_t
        s_cl, excess = index_clamp(s, self.S_range)
        Phi = eval_basis(self.g_basis, s_cl)
        Phi1 = eval_basis(self.g_basis, s_cl, 1)
        r = self.ds.Y - Phi @ d
        Pd = self.P_g @ d
        Pc = self.P_beta @ c_t
        f = float(r @ r + self.lambda_g * d @ Pd + self.lambda_beta * c_t @ Pc + excess.sum())

        inside = np.abs(s) <= self.S_range
        df_ds = np.where(inside, -2.0 * r * (Phi1 @ d), np.sign(s))
        grad_d = -2.0 * Phi.T @ r + 2.0 * self.lambda_g * Pd
        grad_ct = self.Psi.T @ df_ds + 2.0 * self.lambda_beta * Pc
        # chain rule through c -> sign * c / ‖c‖
        grad_c = sign / norm * (grad_ct - c_t * (c_t @ grad_ct))
        grad = np.concatenate([grad_d, grad_c])
        self._memo = (theta.copy(), f, grad)
        return f, grad

    def objective(self, theta: np.ndarray) -> float:
        return self.evaluate(theta)[0]

    def gradient(self, theta: np.ndarray) -> np.ndarray:
        return self.evaluate(theta)[1].copy()


def pls_objective(c, d, ds: FsimDataset, bases: FsimBases, lambda_g: float, lambda_beta: float) -> float:
    problem = PlsProblem(ds, bases, lambda_g, lambda_beta)
    return problem.objective(problem.pack(d, c))


def pls_gradient(c, d, ds: FsimDataset, bases: FsimBases, lambda_g: float, lambda_beta: float) -> np.ndarray:
    """Gradient over the stacked vector (d, c)."""
    problem = PlsProblem(ds, bases, lambda_g, lambda_beta)
    return problem.gradient(problem.pack(d, c))


def _init_from_problem(problem: PlsProblem) -> Tuple[np.ndarray, np.ndarray]:
    ds = problem.ds
    Y = ds.Y
    Yc = Y - Y.mean()
    scale = float(np.abs(Y).max()) if np.abs(Y).max() > 0 else 1.0
    if np.abs(Yc).max() <= 1e-12 * scale:
        raise DegenerateDataError("response is constant; the functional regression has no direction")
    Psi_c = problem.Psi - problem.Psi.mean(axis=0)
    system = penalized_solve(Psi_c.T @ Psi_c, problem.P_beta, problem.lambda_beta,
                             penalty_null_space(problem.bases.beta, 2))
    c = system.solve(Psi_c.T @ Yc)
    if np.linalg.norm(c) <= 1e-300 or np.abs(Psi_c @ c).max() <= 1e-12 * np.abs(Yc).max():
        raise DegenerateDataError("functional linear regression returned a zero coefficient function")
    c0 = normalize_sign(c, problem.psi_a)
    s = problem.Psi @ c0
    A = np.column_stack([np.ones_like(s), s])
    (alpha, gamma), *_ = np.linalg.lstsq(A, Y, rcond=None)
    d0 = linear_coefficients(problem.g_basis, float(alpha), float(gamma))
    return c0, d0


def init_linear(ds: FsimDataset, bases: FsimBases, lambda_beta: float) -> Tuple[np.ndarray, np.ndarray]:
    """Linear ĝ and c from penalized functional linear regression.

    The regression includes an unpenalized intercept (Y and Ψ are centered),
    so c0 does not depend on the level of Y.

    Returns:
        (c0, d0) with ‖c0‖ = 1, ψ(a)'c0 >= 0 and d0 representing a line exactly
    """
    return _init_from_problem(PlsProblem(ds, bases, 0.0, lambda_beta))


def _armijo(fun, x, p, f0, slope, alpha=1.0, shrink=0.5, tries=40) -> Optional[float]:
    for _ in range(tries):
        f_new = fun(x + alpha * p)
        if np.isfinite(f_new) and f_new <= f0 + 1e-4 * alpha * slope:
            return alpha
        alpha *= shrink
    return None


def _bfgs_run(problem: PlsProblem, x0: np.ndarray, opts: FsimOptions) -> OptimizeResult:
    """One BFGS run from x0 with the inverse Hessian started at the identity."""
    fun, grad = problem.objective, problem.gradient
    x = np.asarray(x0, dtype=float).copy()
    f = fun(x)
    if not np.isfinite(f):
        raise NumericFailureError("objective is not finite at the starting point", last_iterate=x)
    g = grad(x)
    N = len(x)
    H = np.eye(N)
    identity_H = True
    converged = False
    first_update = True
    k = 0
    for k in range(1, opts.max_iter + 1):
        if np.linalg.norm(g) < opts.gtol * (1.0 + abs(f)):
            converged = True
            break
        p = -H @ g
        slope = float(g @ p)
        if slope >= 0:
            H = np.eye(N)
            identity_H = True
            p, slope = -g, -float(g @ g)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            alpha = line_search(fun, grad, x, p, gfk=g, old_fval=f, c1=1e-4, c2=0.9)[0]
        if alpha is None:
            alpha = _armijo(fun, x, p, f, slope)
        if alpha is None:
            if identity_H:
                logger.debug(f"⚠️ BFGS stalled at iteration {k}: no decrease along steepest descent")
                break
            # retry once along -g before giving up
            H = np.eye(N)
            identity_H = True
            first_update = True
            continue
        x_new = x + alpha * p
        f_new = fun(x_new)
        if not np.isfinite(f_new):
            raise NumericFailureError("objective became non-finite", last_iterate=x)
        g_new = grad(x_new)
        s, y = x_new - x, g_new - g
        decrease = f - f_new
        x, f, g = x_new, f_new, g_new
        if 0 <= decrease < opts.ftol * max(abs(f), 1e-300):
            converged = True
            break
        sy = float(s @ y)
        if sy > 1e-10 * np.linalg.norm(s) * np.linalg.norm(y):
            if first_update:
                H = (sy / float(y @ y)) * np.eye(N)
                first_update = False
            Hy = H @ y
            H += np.outer(s, s) * (sy + y @ Hy) / sy ** 2 - (np.outer(Hy, s) + np.outer(s, Hy)) / sy
            identity_H = False
    return OptimizeResult(x=x, fun=f, jac=g, nit=k, success=converged)


def _assemble_fit(problem: PlsProblem, theta: np.ndarray, converged: bool, n_restarts: int,
                  n_iter: int) -> FsimFit:
    d, c = problem.unpack(theta)
    c = normalize_sign(c, problem.psi_a)
    theta = problem.pack(d, c)
    index = problem.Psi @ c
    fit = FsimFit(
        c=c, d=d.copy(), lambda_g=problem.lambda_g, lambda_beta=problem.lambda_beta,
        g_basis=problem.g_basis, beta_basis=problem.bases.beta, Psi=problem.Psi,
        Y=problem.ds.Y, index=index, index_bar=float(index.mean()), S_range=problem.S_range,
        sigma_hat=float("nan"), objective=problem.objective(theta), converged=converged,
        n_restarts_used=n_restarts, n_iter=n_iter,
        n_clamped=int(np.sum(np.abs(index) > problem.S_range)),
    )
    try:
        fit = replace(fit, sigma_hat=fsim_sigma_hat(fit))
    except (DegenerateSmootherError, IllConditionedError) as e:
        logger.debug(f"⚠️ sigma-hat unavailable at (λ_g={problem.lambda_g:.3g}, λ_β={problem.lambda_beta:.3g}): {e}")
    if fit.n_clamped:
        logger.warning(f"⚠️ {fit.n_clamped} index value(s) clamped at S={problem.S_range:.4g}; fit flagged")
    return fit


def _fit_problem(problem: PlsProblem, init: Optional[Tuple[np.ndarray, np.ndarray]],
                 opts: FsimOptions) -> FsimFit:
    c0, d0 = _init_from_problem(problem) if init is None else init
    theta = problem.pack(d0, c0)
    best = _bfgs_run(problem, theta, opts)
    total_iter = best.nit
    converged = bool(best.success)
    restarts = 0
    for _ in range(opts.restarts):
        again = _bfgs_run(problem, best.x, opts)
        restarts += 1
        total_iter += again.nit
        logger.debug(f"🔄 BFGS restart {restarts}: {best.fun:.10g} -> {again.fun:.10g}")
        if again.fun < best.fun:
            best, converged = again, bool(again.success)
        elif again.fun == best.fun:
            # a restart that could not move keeps the verdict of the run it started from
            best, converged = again, converged or bool(again.success)
    if not converged:
        logger.warning(f"⚠️ BFGS did not converge at (λ_g={problem.lambda_g:.3g}, λ_β={problem.lambda_beta:.3g}) "
                       f"after {total_iter} iterations")
    return _assemble_fit(problem, best.x, converged, restarts, total_iter)


def fit_fsim(ds: FsimDataset, bases: FsimBases, lambda_g: float, lambda_beta: float,
             init: Optional[Tuple[np.ndarray, np.ndarray]] = None,
             opts: Optional[FsimOptions] = None) -> FsimFit:
    """Minimize the penalized least squares criterion with BFGS plus one Hessian-reset restart.

    Args:
        init: optional (c, d) starting point; defaults to init_linear
        opts: tolerances and iteration caps

    Raises:
        NumericFailureError: if the objective turns non-finite (carries the last finite iterate)
    """
    problem = PlsProblem(ds, bases, lambda_g, lambda_beta)
    return _fit_problem(problem, init, opts or FsimOptions())


# ---------------------------------------------------------------------------
# Linearization: sandwich covariance, smoother matrix, GCV, sigma-hat
# ---------------------------------------------------------------------------

def _linearization(fit: FsimFit, fix_beta: bool = False):
    """Working design Z = [Z_g, Z_β] and the expected Hessian H.

    Z_β is taken on the tangent space of the unit sphere at c (the radial
    direction is removed by the normalization); ``tangent`` maps back.
    """
    s = np.clip(fit.index, -fit.S_range, fit.S_range)
    Z_g = eval_basis(fit.g_basis, s)
    P_g = penalty_matrix(fit.g_basis, 2)
    if fix_beta:
        H = Z_g.T @ Z_g + fit.lambda_g * P_g
        return Z_g, H, None
    tangent = null_space(fit.c[None, :])
    Z_b = (eval_basis(fit.g_basis, s, 1) @ fit.d)[:, None] * (fit.Psi @ tangent)
    P_b = tangent.T @ penalty_matrix(fit.beta_basis, 2) @ tangent
    Z = np.hstack([Z_g, Z_b])
    K1 = Z_g.shape[1]
    H = Z.T @ Z
    H[:K1, :K1] += fit.lambda_g * P_g
    H[K1:, K1:] += fit.lambda_beta * P_b
    return Z, 0.5 * (H + H.T), tangent


def coef_covariance(fit: FsimFit, sigma: Optional[float] = None, fix_beta: bool = False) -> np.ndarray:
    """Sandwich covariance σ̂² H⁻¹ Z'Z H⁻¹ of (d, c).

    Args:
        sigma: residual scale; defaults to fit.sigma_hat
        fix_beta: treat c as known, returning only the d block

    Raises:
        IllConditionedError: if H stays singular after jitter escalation
    """
    sig = fit.sigma_hat if sigma is None else sigma
    if not np.isfinite(sig):
        raise DegenerateSmootherError("sigma-hat is not available for this fit")
    Z, H, tangent = _linearization(fit, fix_beta)
    system = penalized_solve(H, None, 0.0)
    Hinv = system.inverse()
    cov = sig ** 2 * Hinv @ (Z.T @ Z) @ Hinv
    if tangent is not None:
        K1 = fit.g_basis.n_basis
        T = np.zeros((K1 + len(fit.c), H.shape[0]))
        T[:K1, :K1] = np.eye(K1)
        T[K1:, K1:] = tangent
        cov = T @ cov @ T.T
    return 0.5 * (cov + cov.T)


def _smoother_traces(fit: FsimFit, fix_beta: bool = False) -> Tuple[float, float]:
    Z, H, _ = _linearization(fit, fix_beta)
    A = penalized_solve(H, None, 0.0).solve(Z.T @ Z)
    return float(np.trace(A)), float(np.sum(A * A.T))


def fsim_smoother_matrix(fit: FsimFit, fix_beta: bool = False) -> np.ndarray:
    """Approximate smoother S = Z H⁻¹ Z'."""
    Z, H, _ = _linearization(fit, fix_beta)
    S = Z @ penalized_solve(H, None, 0.0).solve(Z.T)
    return 0.5 * (S + S.T)


def fsim_gcv(fit: FsimFit) -> float:
    n = fit.n
    tr, _ = _smoother_traces(fit)
    resid_df = n - tr
    if resid_df <= DEGENERATE_TOL * n:
        raise DegenerateSmootherError(f"tr(S) = {tr:.6g} >= n = {n}")
    r = fit.residuals
    return float((r @ r / n) / (resid_df / n) ** 2)


def fsim_sigma_hat(fit: FsimFit) -> float:
    n = fit.n
    tr, tr2 = _smoother_traces(fit)
    df = n - 2.0 * tr + tr2
    if df <= DEGENERATE_TOL * n:
        raise DegenerateSmootherError(f"residual degrees of freedom {df:.6g} <= 0")
    r = fit.residuals
    return float(np.sqrt(r @ r / df))


def beta_values(fit: FsimFit, t) -> np.ndarray:
    return eval_basis(fit.beta_basis, t) @ fit.c


def g_values(fit: FsimFit, s, deriv: int = 0) -> np.ndarray:
    s_cl, _ = index_clamp(np.asarray(s, dtype=float), fit.S_range)
    return eval_basis(fit.g_basis, np.atleast_1d(s_cl), deriv) @ fit.d


def fit_to_record(fit: FsimFit, gcv_value: Optional[float] = None) -> FitRecord:
    return FitRecord(
        lambda_g=fit.lambda_g, lambda_beta=fit.lambda_beta,
        c=fit.c.tolist(), d=fit.d.tolist(),
        beta_basis=basis_spec(fit.beta_basis), g_basis=basis_spec(fit.g_basis),
        S_range=fit.S_range, index=fit.index.tolist(), index_bar=fit.index_bar,
        sigma_hat=fit.sigma_hat, objective=fit.objective, converged=fit.converged,
        n_restarts_used=fit.n_restarts_used, n_clamped=fit.n_clamped, flagged=fit.flagged,
        gcv=gcv_value,
    )


# ---------------------------------------------------------------------------
# Warm-started grid of smoothing parameters
# ---------------------------------------------------------------------------

@dataclass
class GridFits:
    """Fits over a rectangular (λ_g, λ_β) lattice flattened row-major (λ_g major)."""
    lambda_g: np.ndarray
    lambda_beta: np.ndarray
    fits: List[Optional[FsimFit]]
    failures: Dict[int, str] = field(default_factory=dict)
    first_pass_objectives: List[float] = field(default_factory=list)
    sweeps_run: int = 0
    last_improvement: float = 0.0
    gcv: List[float] = field(default_factory=list)
    gcv_cell: int = -1
    sigma_cell: int = -1

    @property
    def shape(self) -> Tuple[int, int]:
        return len(self.lambda_g), len(self.lambda_beta)

    def cell(self, i: int, j: int) -> int:
        return i * len(self.lambda_beta) + j

    def cell_lambdas(self, k: int) -> Tuple[float, float]:
        nb = len(self.lambda_beta)
        return float(self.lambda_g[k // nb]), float(self.lambda_beta[k % nb])

    def neighbors(self, k: int) -> List[int]:
        ng, nb = self.shape
        i, j = divmod(k, nb)
        out = []
        for di in (-1, 0, 1):
            for dj in (-1, 0, 1):
                if (di or dj) and 0 <= i + di < ng and 0 <= j + dj < nb:
                    out.append(self.cell(i + di, j + dj))
        return out


def select_sigma_cell(grid: GridFits) -> int:
    """Lowest finite GCV among fits with no clamped index values, else the GCV cell."""
    clean = [k for k, v in enumerate(grid.gcv)
             if np.isfinite(v) and grid.fits[k] is not None and grid.fits[k].n_clamped == 0]
    if not clean:
        logger.warning(f"⚠️ Every fitted cell has clamped index values; σ̂ taken at GCV cell {grid.gcv_cell}")
        return grid.gcv_cell
    return min(reversed(clean), key=lambda k: grid.gcv[k])


def _first_pass_cell(args) -> Tuple[int, Optional[FsimFit], Optional[str]]:
    k, problem, opts = args
    try:
        return k, _fit_problem(problem, None, opts), None
    except JensenEffectError as e:
        return k, None, f"{e.code}: {e.message}"


def refine_grid(grid: GridFits, problem: PlsProblem, opts: FsimOptions, max_sweeps: int) -> GridFits:
    """Neighbor re-initialization sweeps, keeping each cell's best objective."""
    for _ in range(max_sweeps):
        worst = 0.0
        for k in range(len(grid.fits)):
            lg, lb = grid.cell_lambdas(k)
            cell_problem = problem.with_lambdas(lg, lb)
            for nb in grid.neighbors(k):
                source = grid.fits[nb]
                if source is None:
                    continue
                try:
                    cand = _fit_problem(cell_problem, (source.c, source.d), opts)
                except JensenEffectError as e:
                    logger.debug(f"⚠️ cell {k} refit from {nb} failed: {e}")
                    continue
                current = grid.fits[k]
                if current is None:
                    grid.fits[k] = cand
                    grid.failures.pop(k, None)
                    worst = max(worst, 1.0)
                elif cand.objective < current.objective:
                    rel = (current.objective - cand.objective) / max(abs(current.objective), 1e-300)
                    worst = max(worst, rel)
                    grid.fits[k] = cand
        grid.sweeps_run += 1
        grid.last_improvement = worst
        logger.info(f"🔄 Warm-start sweep {grid.sweeps_run}: max relative improvement {worst:.4g}")
        if worst < opts.sweep_tol:
            break
    return grid


def warm_start_grid(ds: FsimDataset, bases: FsimBases, lambda_g: Sequence[float],
                    lambda_beta: Sequence[float], opts: Optional[FsimOptions] = None) -> GridFits:
    """Fit every cell, then re-fit from the 8 neighbors until improvements fall below sweep_tol.

    Every cell's sigma_hat is replaced by the one at select_sigma_cell: the GCV-minimizing
    cell unless its index needed clamping.
    """
    opts = opts or FsimOptions()
    lg = np.asarray(lambda_g, dtype=float).ravel()
    lb = np.asarray(lambda_beta, dtype=float).ravel()
    if lg.size == 0 or lb.size == 0:
        raise InvalidArgumentError("lambda grids must be nonempty")
    problem = PlsProblem(ds, bases, float(lg[0]), float(lb[0]))
    grid = GridFits(lambda_g=lg, lambda_beta=lb, fits=[None] * (lg.size * lb.size))

    tasks = [(k, problem.with_lambdas(*grid.cell_lambdas(k)), opts) for k in range(len(grid.fits))]
    if opts.jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=opts.jobs) as pool:
            results = list(pool.map(_first_pass_cell, tasks))
    else:
        results = [_first_pass_cell(t) for t in tasks]
    for k, fit, reason in results:
        grid.fits[k] = fit
        if reason is not None:
            grid.failures[k] = reason
            logger.warning(f"⚠️ Grid cell {k} failed on first pass: {reason}")
    grid.first_pass_objectives = [f.objective if f is not None else float("inf") for f in grid.fits]

    if len(grid.fits) > 1 and opts.max_sweeps > 0:
        refine_grid(grid, problem, opts, opts.max_sweeps)

    grid.gcv = []
    for f in grid.fits:
        try:
            grid.gcv.append(fsim_gcv(f) if f is not None else float("inf"))
        except (DegenerateSmootherError, IllConditionedError):
            grid.gcv.append(float("inf"))
    finite = [k for k, v in enumerate(grid.gcv) if np.isfinite(v)]
    if not finite:
        raise DegenerateSmootherError("no grid cell produced a usable GCV value")
    # ties go to the later (smoother) cell in row-major order
    grid.gcv_cell = min(reversed(finite), key=lambda k: grid.gcv[k])
    grid.sigma_cell = select_sigma_cell(grid)
    if grid.sigma_cell != grid.gcv_cell:
        logger.warning(f"⚠️ GCV cell {grid.gcv_cell} is clamped; σ̂ taken at cell {grid.sigma_cell}")
    sigma = fsim_sigma_hat(grid.fits[grid.sigma_cell])
    grid.fits = [replace(f, sigma_hat=sigma) if f is not None else None for f in grid.fits]
    logger.info(f"✅ Grid of {len(grid.fits)} cells fitted, GCV cell {grid.gcv_cell}, "
                f"σ̂={sigma:.4g} at cell {grid.sigma_cell}")
    return grid
