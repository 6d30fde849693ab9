"""Jensen Effect tests: δ = mean g(index_i) - g(mean index) scanned over smoothing parameters.

Both tests standardize δ̂ per smoothing-parameter cell, take the maximum, and
calibrate it against a Gaussian process whose correlation is built from the
linear weights u_λ with δ̂_λ = u_λ·Y.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.linalg import eigh

from .basis import BasisSystem, eval_basis, penalty_matrix, penalty_null_space
from .errors import (
    DegenerateFunctionalError,
    InvalidArgumentError,
    InvalidCorrelationError,
    JensenEffectError,
    SurfaceInvalidError,
)
from .fsim import FsimBases, FsimDataset, FsimFit, FsimOptions, coef_covariance, warm_start_grid
from .schemas import ALTERNATIVES, SigmaUsed, SurfaceEnvelope
from .smoothing import penalized_solve, select_lambda_gcv, sigma_hat

logger = logging.getLogger(__name__)

DEFAULT_NULL_DRAWS = 5000
DRAW_BLOCK = 1000
MAX_FAILED_FRACTION = 0.2
PSD_TOL = 1e-8
# standard errors and contrasts this small relative to |u|·max|Y| are rounding noise
ROUNDING_TOL = 1e-10


@dataclass(frozen=True)
class JensenSurface:
    """δ̂, sd and t over a grid of smoothing parameters plus the calibrated decision.

    Cells are flattened row-major (λ_g major). ``lambda_beta`` is None for Test 1.
    Failed cells carry NaN and are excluded from the max and from ``A``.
    """
    test: str
    lambda_g: np.ndarray
    lambda_beta: Optional[np.ndarray]
    grid_shape: Tuple[int, ...]
    delta: np.ndarray
    sd: np.ndarray
    t: np.ndarray
    A: np.ndarray
    T_obs: float
    crit: float
    alpha: float
    alternative: str
    seed: int
    n_null_draws: int
    reject: bool
    sign_summary: str
    sigma_used: SigmaUsed
    failure_reasons: Dict[int, str] = field(default_factory=dict)

    @property
    def valid(self) -> np.ndarray:
        return np.isfinite(self.delta) & ~np.isnan(self.t)

    @property
    def significant(self) -> np.ndarray:
        stat = _oriented(np.where(self.valid, self.t, 0.0), self.alternative)
        return self.valid & (stat > self.crit)

    @property
    def gcv_cell(self) -> int:
        return self.sigma_used.cell

    @property
    def argmax_delta_cell(self) -> int:
        return int(np.nanargmax(np.where(self.valid, self.delta, np.nan)))

    @property
    def argmin_delta_cell(self) -> int:
        return int(np.nanargmin(np.where(self.valid, self.delta, np.nan)))


def _oriented(t: np.ndarray, alternative: str) -> np.ndarray:
    if alternative == "two-sided":
        return np.abs(t)
    if alternative == "greater":
        return t
    if alternative == "less":
        return -t
    raise InvalidArgumentError(f"alternative must be one of {ALTERNATIVES}, got {alternative!r}")


def _t_values(delta: np.ndarray, sd: np.ndarray, ref: np.ndarray) -> np.ndarray:
    """delta / sd, with 0/0 -> 0 and x/0 -> ±inf relative to the reference scale."""
    t = np.empty_like(delta)
    for k, (dl, s, r) in enumerate(zip(delta, sd, ref)):
        if not np.isfinite(dl):
            t[k] = np.nan
        elif s > ROUNDING_TOL * r:
            t[k] = dl / s
        elif abs(dl) <= ROUNDING_TOL * r:
            t[k] = 0.0
        else:
            t[k] = np.sign(dl) * np.inf
    return t


def summarize_signs(delta: Sequence[float]) -> str:
    d = np.asarray(delta, dtype=float)
    d = d[np.isfinite(d)]
    if d.size and np.all(d >= 0) and np.any(d > 0):
        return "all-positive"
    if d.size and np.all(d <= 0) and np.any(d < 0):
        return "all-negative"
    return "mixed"


def delta_weights_t1(E, basis: BasisSystem, lam: float, penalty: Optional[np.ndarray] = None) -> np.ndarray:
    """Row vector u_λ with δ̂_λ = u_λ·Y for a known index E.

    u_λ = a'Φ⁺(Φ'Φ + λP)⁻¹Φ' where Φ⁺ stacks the evaluations at E and at
    mean(E) and a = (1/n, ..., 1/n, -1).
    """
    E = np.asarray(E, dtype=float).ravel()
    Phi = eval_basis(basis, E)
    at_mean = eval_basis(basis, [E.mean()])[0]
    P = penalty_matrix(basis, 2) if penalty is None else penalty
    system = penalized_solve(Phi.T @ Phi, P, lam, penalty_null_space(basis, 2))
    w = Phi.mean(axis=0) - at_mean
    return Phi @ system.solve(w)


def null_correlation(U) -> np.ndarray:
    """A_ij = <u_i, u_j> / (‖u_i‖ ‖u_j‖)."""
    U = np.atleast_2d(np.asarray(U, dtype=float))
    norms = np.linalg.norm(U, axis=1)
    if norms.size == 0:
        raise InvalidArgumentError("no weight vectors given")
    if np.any(norms <= 1e-14 * max(norms.max(), 1e-300)):
        bad = int(np.argmin(norms))
        raise DegenerateFunctionalError(f"weight vector {bad} has zero norm; δ is identically zero there")
    Un = U / norms[:, None]
    A = Un @ Un.T
    A = np.clip(0.5 * (A + A.T), -1.0, 1.0)
    np.fill_diagonal(A, 1.0)
    return A


def _psd_root(A: np.ndarray) -> np.ndarray:
    vals, vecs = eigh(A)
    if vals.min() < -PSD_TOL * max(1.0, float(np.abs(vals).max())):
        raise InvalidCorrelationError(f"correlation matrix has eigenvalue {vals.min():.3g} < 0")
    return vecs * np.sqrt(np.clip(vals, 0.0, None))


def simulate_max_null(A, n_draws: int = DEFAULT_NULL_DRAWS, alpha: float = 0.05, rng_seed: int = 0,
                      alternative: str = "two-sided") -> float:
    """(1 - alpha) quantile of the max statistic under N(0, A).

    Draws come in blocks of 1000 from child streams of one SeedSequence, so the
    result depends only on (A, n_draws, alpha, seed).
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    if n_draws < 1000:
        raise InvalidArgumentError(f"need at least 1000 null draws, got {n_draws}")
    if not 0 < alpha < 1:
        raise InvalidArgumentError(f"alpha must be in (0, 1), got {alpha}")
    root = _psd_root(A)
    m = A.shape[0]
    n_blocks = -(-n_draws // DRAW_BLOCK)
    children = np.random.SeedSequence(rng_seed).spawn(n_blocks)
    stats = []
    remaining = n_draws
    for child in children:
        size = min(DRAW_BLOCK, remaining)
        z = np.random.default_rng(child).standard_normal((size, m)) @ root.T
        stats.append(_oriented(z, alternative).max(axis=1))
        remaining -= size
    return float(np.quantile(np.concatenate(stats), 1.0 - alpha))


def _finish_surface(test: str, lambda_g: np.ndarray, lambda_beta: Optional[np.ndarray],
                    shape: Tuple[int, ...], delta: np.ndarray, sd: np.ndarray, t: np.ndarray,
                    U: List[np.ndarray], failures: Dict[int, str], alpha: float, n_draws: int,
                    seed: int, alternative: str, sigma_used: SigmaUsed) -> JensenSurface:
    m = len(delta)
    if len(failures) > MAX_FAILED_FRACTION * m:
        raise SurfaceInvalidError(f"{len(failures)} of {m} grid cells failed")
    valid = np.isfinite(delta) & ~np.isnan(t)
    A_valid = null_correlation(np.array([U[k] for k in range(m) if valid[k]]))
    crit = simulate_max_null(A_valid, n_draws, alpha, seed, alternative)
    T_obs = float(_oriented(t[valid], alternative).max())
    A = np.full((m, m), np.nan)
    idx = np.flatnonzero(valid)
    A[np.ix_(idx, idx)] = A_valid
    surface = JensenSurface(
        test=test, lambda_g=lambda_g, lambda_beta=lambda_beta, grid_shape=shape, delta=delta, sd=sd,
        t=t, A=A, T_obs=T_obs, crit=crit, alpha=alpha, alternative=alternative, seed=seed,
        n_null_draws=n_draws, reject=bool(T_obs > crit), sign_summary=summarize_signs(delta[valid]),
        sigma_used=sigma_used, failure_reasons=dict(failures),
    )
    logger.info(f"{'🎯' if surface.reject else '📊'} {test} test: T={T_obs:.4g}, crit={crit:.4g}, "
                f"reject={surface.reject}, signs {surface.sign_summary}")
    return surface


def jensen_test_t1(E, Y, basis: BasisSystem, lambda_grid: Sequence[float], alpha: float = 0.05,
                   n_draws: int = DEFAULT_NULL_DRAWS, seed: int = 0,
                   alternative: str = "two-sided") -> JensenSurface:
    """Test 1: known index E, penalized spline ĝ_λ for every λ on the grid.

    σ̂ is computed once at the GCV-selected λ and reused in every cell.
    """
    E = np.asarray(E, dtype=float).ravel()
    Y = np.asarray(Y, dtype=float).ravel()
    grid = np.asarray(lambda_grid, dtype=float).ravel()
    if grid.size == 0:
        raise InvalidArgumentError("lambda grid is empty")
    if len(E) != len(Y):
        raise InvalidArgumentError(f"E has {len(E)} values but Y has {len(Y)}")
    _oriented(np.zeros(1), alternative)
    lam_star, fit_star = select_lambda_gcv(E, Y, basis, grid)
    sig = sigma_hat(fit_star)
    gcv_cell = int(np.flatnonzero(grid == lam_star)[0])

    P = penalty_matrix(basis, 2)
    m = grid.size
    delta, sd, ref = np.full(m, np.nan), np.full(m, np.nan), np.ones(m)
    U: List[np.ndarray] = [np.zeros(len(Y))] * m
    failures: Dict[int, str] = {}
    y_scale = float(np.abs(Y).max()) or 1.0
    for k, lam in enumerate(grid):
        try:
            u = delta_weights_t1(E, basis, lam, P)
        except JensenEffectError as e:
            failures[k] = f"{e.code}: {e.message}"
            logger.warning(f"⚠️ λ={lam:.3g} cell failed: {e}")
            continue
        U[k] = u
        delta[k] = float(u @ Y)
        sd[k] = sig * float(np.linalg.norm(u))
        ref[k] = float(np.linalg.norm(u)) * y_scale
    t = _t_values(delta, sd, ref)
    return _finish_surface("t1", grid, None, (m,), delta, sd, t, U, failures, alpha, n_draws, seed,
                           alternative, SigmaUsed(sigma_hat=sig, cell=gcv_cell, lambda_g=float(lam_star)))


def _jensen_row(fit: FsimFit) -> np.ndarray:
    """a'φ(i): mean basis row at the indices minus the row at the mean index."""
    s = np.clip(fit.index, -fit.S_range, fit.S_range)
    Phi = eval_basis(fit.g_basis, s)
    at_bar = eval_basis(fit.g_basis, [np.clip(fit.index_bar, -fit.S_range, fit.S_range)])[0]
    return Phi.mean(axis=0) - at_bar


def delta_hat_fsim(fit: FsimFit) -> Tuple[float, float]:
    """δ̂ and its standard error from the d block of the sandwich covariance."""
    w = _jensen_row(fit)
    K1 = fit.g_basis.n_basis
    cov_d = coef_covariance(fit)[:K1, :K1]
    var = float(w @ cov_d @ w)
    if var <= 1e-28 * max(float(w @ w), 1e-300):
        raise DegenerateFunctionalError(f"sd(δ̂) is degenerate (variance {var:.3g})")
    return float(w @ fit.d), float(np.sqrt(var))


def delta_weights_fsim(fit: FsimFit) -> np.ndarray:
    """u_λ = a'φ(i)(Φ'Φ + λ_g P_g)⁻¹Φ' at this cell's fitted index."""
    s = np.clip(fit.index, -fit.S_range, fit.S_range)
    Phi = eval_basis(fit.g_basis, s)
    system = penalized_solve(Phi.T @ Phi, penalty_matrix(fit.g_basis, 2), fit.lambda_g,
                             penalty_null_space(fit.g_basis, 2))
    return Phi @ system.solve(_jensen_row(fit))


def jensen_test_fsim(ds: FsimDataset, bases: FsimBases, lambda_g: Sequence[float],
                     lambda_beta: Sequence[float], alpha: float = 0.05,
                     n_draws: int = DEFAULT_NULL_DRAWS, seed: int = 0,
                     opts: Optional[FsimOptions] = None, alternative: str = "two-sided") -> JensenSurface:
    """Test 2: functional single index fits over a (λ_g, λ_β) lattice.

    Raises:
        SurfaceInvalidError: if more than 20% of the cells fail
    """
    _oriented(np.zeros(1), alternative)
    grid = warm_start_grid(ds, bases, lambda_g, lambda_beta, opts)
    m = len(grid.fits)
    delta, sd, ref = np.full(m, np.nan), np.full(m, np.nan), np.ones(m)
    U: List[np.ndarray] = [np.zeros(ds.n)] * m
    failures = dict(grid.failures)
    y_scale = float(np.abs(ds.Y).max()) or 1.0
    for k, fit in enumerate(grid.fits):
        if fit is None:
            continue
        if fit.n_clamped:
            failures[k] = f"flagged: {fit.n_clamped} clamped index value(s)"
            continue
        try:
            dk, sk = delta_hat_fsim(fit)
            U[k] = delta_weights_fsim(fit)
        except JensenEffectError as e:
            failures[k] = f"{e.code}: {e.message}"
            logger.warning(f"⚠️ Cell {k} excluded: {e}")
            continue
        delta[k], sd[k] = dk, sk
        ref[k] = float(np.linalg.norm(U[k])) * y_scale
    t = _t_values(delta, sd, ref)
    sigma_fit = grid.fits[grid.sigma_cell]
    lg, lb = grid.cell_lambdas(grid.sigma_cell)
    sigma_used = SigmaUsed(sigma_hat=sigma_fit.sigma_hat, cell=grid.sigma_cell, lambda_g=lg, lambda_beta=lb)
    ng, nb = grid.shape
    return _finish_surface("fsim", np.repeat(grid.lambda_g, nb), np.tile(grid.lambda_beta, ng), (ng, nb),
                           delta, sd, t, U, failures, alpha, n_draws, seed, alternative, sigma_used)


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

SURFACE_COLUMNS = ["lambda_g", "lambda_beta", "delta", "sd", "t", "significant",
                   "gcv_cell", "argmax_delta", "argmin_delta", "failed"]


def surface_frame(surface: JensenSurface) -> pd.DataFrame:
    m = len(surface.delta)
    marker = lambda k: (np.arange(m) == k).astype(int)  # noqa: E731
    lb = surface.lambda_beta if surface.lambda_beta is not None else np.full(m, np.nan)
    return pd.DataFrame({
        "lambda_g": surface.lambda_g,
        "lambda_beta": lb,
        "delta": surface.delta,
        "sd": surface.sd,
        "t": surface.t,
        "significant": surface.significant.astype(int),
        "gcv_cell": marker(surface.gcv_cell),
        "argmax_delta": marker(surface.argmax_delta_cell),
        "argmin_delta": marker(surface.argmin_delta_cell),
        "failed": (~surface.valid).astype(int),
    }, columns=SURFACE_COLUMNS)


def surface_envelope(surface: JensenSurface, include_correlation: bool = True) -> SurfaceEnvelope:
    A = surface.A if include_correlation else np.zeros((0, 0))
    return SurfaceEnvelope(
        test=surface.test, T_obs=surface.T_obs, crit=surface.crit, alpha=surface.alpha,
        alternative=surface.alternative, seed=surface.seed, n_null_draws=surface.n_null_draws,
        reject=surface.reject, sign_summary=surface.sign_summary, sigma_used=surface.sigma_used,
        grid_shape=list(surface.grid_shape), failed_cells=sorted(surface.failure_reasons),
        failure_reasons={str(k): v for k, v in sorted(surface.failure_reasons.items())},
        gcv_cell=surface.gcv_cell, argmax_delta_cell=surface.argmax_delta_cell,
        argmin_delta_cell=surface.argmin_delta_cell,
        null_correlation=[[float(x) if np.isfinite(x) else 0.0 for x in row] for row in A],
    )


def write_surface(surface: JensenSurface, csv_path, json_path) -> None:
    surface_frame(surface).to_csv(csv_path, index=False, float_format="%.17g")
    with open(json_path, "w", encoding="utf-8") as f:
        f.write(surface_envelope(surface).model_dump_json(indent=2))


def read_surface_csv(path) -> pd.DataFrame:
    frame = pd.read_csv(path)
    missing = [c for c in SURFACE_COLUMNS if c not in frame.columns]
    if missing:
        raise InvalidArgumentError(f"surface file {path} is missing columns {missing}")
    return frame
