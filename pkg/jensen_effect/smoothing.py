"""Penalized spline smoothing of scalar pairs with GCV and residual scale estimates."""
import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve, qr

from .basis import BasisSystem, eval_basis, penalty_matrix, penalty_null_space
from .errors import DegenerateSmootherError, IllConditionedError, InvalidArgumentError

logger = logging.getLogger(__name__)

JITTER_START = 1e-10
JITTER_MAX = 1e-6
# Cholesky pivots below this fraction of the largest one count as a failed factorization
PIVOT_FLOOR = 1e-14
DEGENERATE_TOL = 1e-8


@dataclass(frozen=True)
class PenalizedSystem:
    """Factorization of ``gram + lam * penalty``.

    The penalty's null space is rotated into leading coordinates where the
    penalty block is exactly zero, then the matrix is diagonally equilibrated
    before the Cholesky factorization. Large ``lam`` therefore never multiplies
    the rounding error of the penalty on polynomials it cannot see.
    """
    rotation: np.ndarray
    scale: np.ndarray
    factor: Tuple[np.ndarray, bool]
    jitter: float

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        r = np.asarray(rhs, dtype=float)
        z = self.rotation.T @ r
        z = (self.scale * z.T).T
        z = cho_solve(self.factor, z)
        z = (self.scale * z.T).T
        return self.rotation @ z

    def inverse(self) -> np.ndarray:
        K = self.rotation.shape[0]
        inv = self.solve(np.eye(K))
        return 0.5 * (inv + inv.T)


def penalized_solve(gram: np.ndarray, penalty: Optional[np.ndarray], lam: float,
                    null_basis: Optional[np.ndarray] = None) -> PenalizedSystem:
    """Factor ``gram + lam * penalty`` with escalating jitter.

    Args:
        gram: symmetric PSD matrix (e.g. Phi'Phi)
        penalty: symmetric PSD penalty, or None for no penalty
        lam: nonnegative penalty weight
        null_basis: columns spanning the penalty's null space, if known

    Raises:
        IllConditionedError: if the factorization fails even with jitter 1e-6 x mean diagonal
    """
    G = np.asarray(gram, dtype=float)
    K = G.shape[0]
    if lam < 0:
        raise InvalidArgumentError(f"lambda must be nonnegative, got {lam}")
    if null_basis is not None and null_basis.shape[1] > 0:
        Q, _ = qr(null_basis, mode="full")
        m = null_basis.shape[1]
    else:
        Q, m = np.eye(K), 0
    M = Q.T @ G @ Q
    if penalty is not None and lam > 0:
        Pr = Q.T @ penalty @ Q
        Pr[:m, :] = 0.0
        Pr[:, :m] = 0.0
        M = M + lam * Pr
    M = 0.5 * (M + M.T)
    diag = np.diag(M).copy()
    diag[diag <= 0] = 1.0
    scale = 1.0 / np.sqrt(diag)
    Ms = scale[:, None] * M * scale[None, :]
    mean_diag = float(np.mean(np.diag(Ms)))

    jitter = 0.0
    while True:
        try:
            factor = cho_factor(Ms + jitter * mean_diag * np.eye(K), lower=True)
            pivots = np.abs(np.diag(factor[0]))
            if pivots.min() ** 2 < PIVOT_FLOOR * pivots.max() ** 2:
                raise LinAlgError("near-zero pivot")
            if jitter > 0:
                logger.debug(f"🔄 Factorization succeeded with jitter {jitter:.0e}")
            return PenalizedSystem(rotation=Q, scale=scale, factor=factor, jitter=jitter)
        except LinAlgError:
            jitter = JITTER_START if jitter == 0.0 else jitter * 10.0
            if jitter > JITTER_MAX * (1 + 1e-9):
                raise IllConditionedError(
                    f"penalized system of size {K} is singular even with jitter {JITTER_MAX:.0e}")
            logger.debug(f"⚠️ Cholesky failed, escalating jitter to {jitter:.0e}")


@dataclass(frozen=True)
class SmoothFit:
    basis: BasisSystem
    lam: float
    coef: np.ndarray
    x: np.ndarray
    y: np.ndarray
    Phi: np.ndarray
    hat_trace: float
    hat_trace2: float
    rss: float
    system: PenalizedSystem

    @property
    def n(self) -> int:
        return len(self.x)

    @property
    def fitted(self) -> np.ndarray:
        return self.Phi @ self.coef

    @property
    def df_res(self) -> float:
        return self.n - 2.0 * self.hat_trace + self.hat_trace2

    def predict(self, points, deriv: int = 0) -> np.ndarray:
        return eval_basis(self.basis, points, deriv) @ self.coef


def fit_smooth(x, y, basis: BasisSystem, lam: float, penalty: Optional[np.ndarray] = None,
               deriv: int = 2) -> SmoothFit:
    """Penalized least squares: coef = (Phi'Phi + lam P)^-1 Phi'y."""
    x = np.asarray(x, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    if len(x) != len(y):
        raise InvalidArgumentError(f"x has {len(x)} values but y has {len(y)}")
    if len(x) < 2:
        raise InvalidArgumentError("need at least 2 observations to smooth")
    if lam < 0:
        raise InvalidArgumentError(f"lambda must be nonnegative, got {lam}")
    Phi = eval_basis(basis, x)
    P = penalty_matrix(basis, deriv) if penalty is None else penalty
    G = Phi.T @ Phi
    system = penalized_solve(G, P, lam, penalty_null_space(basis, deriv))
    coef = system.solve(Phi.T @ y)
    # tr(S) = tr(M^-1 G), tr(SS') = tr((M^-1 G)^2)
    A = system.solve(G)
    resid = y - Phi @ coef
    return SmoothFit(basis=basis, lam=float(lam), coef=coef, x=x, y=y, Phi=Phi,
                     hat_trace=float(np.trace(A)), hat_trace2=float(np.sum(A * A.T)),
                     rss=float(resid @ resid), system=system)


def smoother_matrix(fit: SmoothFit) -> np.ndarray:
    S = fit.Phi @ fit.system.solve(fit.Phi.T)
    return 0.5 * (S + S.T)


def gcv(fit: SmoothFit) -> float:
    """GCV = (1/n)||(I - S)y||^2 / [(1/n) tr(I - S)]^2"""
    n = fit.n
    resid_df = n - fit.hat_trace
    if resid_df <= DEGENERATE_TOL * n:
        raise DegenerateSmootherError(f"tr(S) = {fit.hat_trace:.6g} >= n = {n}")
    return (fit.rss / n) / (resid_df / n) ** 2


def sigma_hat(fit: SmoothFit) -> float:
    """Residual scale with df_res = n - 2tr(S) + tr(SS')."""
    df = fit.df_res
    if df <= DEGENERATE_TOL * fit.n:
        raise DegenerateSmootherError(f"residual degrees of freedom {df:.6g} <= 0")
    return float(np.sqrt(fit.rss / df))


def lambda_log_grid(log10_min: float, log10_max: float, n: int) -> np.ndarray:
    if n < 1:
        raise InvalidArgumentError("lambda grid needs at least one point")
    if n == 1:
        return np.array([10.0 ** log10_min])
    return np.logspace(log10_min, log10_max, n)


def _gcv_table(x, y, basis: BasisSystem, lambda_grid: Sequence[float]) -> List[Tuple[float, Optional[SmoothFit], float]]:
    grid = np.asarray(lambda_grid, dtype=float).ravel()
    if grid.size == 0:
        raise InvalidArgumentError("lambda grid is empty")
    if np.any(grid < 0):
        raise InvalidArgumentError("lambda grid values must be nonnegative")
    P = penalty_matrix(basis, 2)
    rows = []
    for lam in np.unique(grid)[::-1]:
        try:
            fit = fit_smooth(x, y, basis, lam, penalty=P)
            rows.append((float(lam), fit, gcv(fit)))
        except (DegenerateSmootherError, IllConditionedError) as e:
            logger.debug(f"⚠️ lambda={lam:.3g} skipped: {e}")
            rows.append((float(lam), None, np.inf))
    return rows


def select_lambda_gcv(x, y, basis: BasisSystem, lambda_grid: Sequence[float]) -> Tuple[float, SmoothFit]:
    """Grid minimizer of GCV; ties go to the larger lambda."""
    best = None
    for lam, fit, score in _gcv_table(x, y, basis, lambda_grid):
        if fit is None:
            continue
        # rows arrive in decreasing lambda, so only a strict improvement moves the choice
        if best is None or score < best[2] - 1e-12 * abs(best[2]):
            best = (lam, fit, score)
    if best is None:
        raise DegenerateSmootherError("every lambda on the grid gave a degenerate smoother")
    return best[0], best[1]


def sigma_profile(x, y, basis: BasisSystem, lambda_grid: Sequence[float]) -> Dict[str, object]:
    """sigma-hat as a function of lambda, plus the GCV choice.

    Returns:
        Dict with increasing ``lambdas``, matching ``sigma`` and ``gcv`` lists
        (NaN where degenerate), and the GCV-selected ``lambda_gcv`` / ``sigma_gcv``
    """
    rows = sorted(_gcv_table(x, y, basis, lambda_grid), key=lambda r: r[0])
    sigmas = []
    for _, fit, _ in rows:
        try:
            sigmas.append(sigma_hat(fit) if fit is not None else float("nan"))
        except DegenerateSmootherError:
            sigmas.append(float("nan"))
    lam_star, fit_star = select_lambda_gcv(x, y, basis, lambda_grid)
    return {
        "lambdas": [r[0] for r in rows],
        "sigma": sigmas,
        "gcv": [r[2] if np.isfinite(r[2]) else float("nan") for r in rows],
        "lambda_gcv": lam_star,
        "sigma_gcv": sigma_hat(fit_star),
    }
