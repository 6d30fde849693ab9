"""Simulation designs, link registry, rejection-rate and power studies, curvature metrics."""
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import statsmodels.api as sm
from scipy.integrate import trapezoid

from .basis import (
    BasisSystem,
    eval_basis,
    linear_coefficients,
    make_bspline_basis,
    make_fourier_basis,
    trapezoid_weights,
)
from .errors import DegenerateSmootherError, IllConditionedError, InvalidArgumentError, JensenEffectError
from .fsim import (
    FsimBases,
    FsimDataset,
    FsimOptions,
    PlsProblem,
    _fit_problem,
    beta_values,
    fsim_sigma_hat,
    g_values,
    warm_start_grid,
)
from .jensen import jensen_test_fsim, jensen_test_t1
from .schemas import (
    CurvatureFit,
    CurvatureReport,
    LambdaGridSpec,
    LinkSpec,
    PowerPoint,
    ReplicateOutcome,
    StudyConfig,
    StudyResult,
)
from .smoothing import sigma_profile

logger = logging.getLogger(__name__)

SIM_P = 5
CURVE_GRID = 201
FOURIER_DIM = 25
APPENDIX_BETA_DIM = 9
T1_BASIS_DIM = 25
T1_BASIS_ORDER = 6

DEFAULT_T1_GRID = LambdaGridSpec(log10_min=-8.0, log10_max=4.0, n_points=41)
DEFAULT_LAMBDA_G_GRID = LambdaGridSpec(log10_min=-6.0, log10_max=2.0, n_points=5)
DEFAULT_LAMBDA_BETA_GRID = LambdaGridSpec(log10_min=-2.0, log10_max=6.0, n_points=5)


# ---------------------------------------------------------------------------
# Link registry
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LinkFunction:
    name: str
    value: Callable[[np.ndarray], np.ndarray]
    first: Callable[[np.ndarray], np.ndarray]
    second: Callable[[np.ndarray], np.ndarray]

    def derivative(self, s, k: int) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        return (self.value, self.first, self.second)[k](s)


def _power_family(eta: float) -> LinkFunction:
    return LinkFunction(
        name="power_family",
        value=lambda s: s + eta * np.exp(-s),
        first=lambda s: 1.0 - eta * np.exp(-s),
        second=lambda s: eta * np.exp(-s),
    )


LINKS: Dict[str, Callable[[float], LinkFunction]] = {
    "exp_pos": lambda eta: LinkFunction("exp_pos", np.exp, np.exp, np.exp),
    "exp_neg": lambda eta: LinkFunction("exp_neg", lambda s: np.exp(-s), lambda s: -np.exp(-s),
                                        lambda s: np.exp(-s)),
    "neg_square": lambda eta: LinkFunction("neg_square", lambda s: -s ** 2, lambda s: -2.0 * s,
                                           lambda s: np.full_like(s, -2.0)),
    "linear": lambda eta: LinkFunction("linear", lambda s: s, lambda s: np.ones_like(s),
                                       lambda s: np.zeros_like(s)),
    "power_family": _power_family,
}


def get_link(spec: LinkSpec) -> LinkFunction:
    if spec.name not in LINKS:
        raise InvalidArgumentError(f"unknown link {spec.name!r}; available: {sorted(LINKS)}")
    return LINKS[spec.name](spec.eta)


# ---------------------------------------------------------------------------
# Generators
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SimData:
    X: np.ndarray
    E: np.ndarray
    Y: np.ndarray
    beta: np.ndarray


@dataclass(frozen=True)
class GeneratedFsim:
    dataset: FsimDataset
    true_index: np.ndarray
    c_true: np.ndarray
    beta_basis: BasisSystem
    scores: np.ndarray
    noise_sd: float


def sim_index_half_width(p: int = SIM_P) -> float:
    return math.sqrt(p) / 2.0


def gen_sim_data(n: int, link: LinkSpec, sigma: float, seed: int) -> SimData:
    """Scalar single index design: 5 uniform covariates, β = 1/√5."""
    if n < 1:
        raise InvalidArgumentError("n must be positive")
    rng = np.random.default_rng(seed)
    X = rng.uniform(-0.5, 0.5, size=(n, SIM_P))
    beta = np.ones(SIM_P) / math.sqrt(SIM_P)
    E = X @ beta
    g = get_link(link)
    Y = g.value(E) + sigma * rng.standard_normal(n)
    return SimData(X=X, E=E, Y=Y, beta=beta)


def fourier_score_variances(n_basis: int = FOURIER_DIM) -> np.ndarray:
    return np.exp(-np.arange(n_basis) / 12.0)


def fsim_true_coefficients(n_basis: int = FOURIER_DIM) -> np.ndarray:
    c = np.zeros(n_basis)
    c[1:4] = [1.0, 1.0, 0.5]
    return c / np.linalg.norm(c)


def gen_fsim_data(n: int, link: LinkSpec, sigma: float, seed: int,
                  n_grid: int = CURVE_GRID) -> GeneratedFsim:
    """Functional design: curves in a 25-function Fourier basis with decaying score variances.

    The printed coefficient vector (0, 1, 1, 0.5, 0, ...) is normalized to unit length.
    """
    if n < 1:
        raise InvalidArgumentError("n must be positive")
    rng = np.random.default_rng(seed)
    basis = make_fourier_basis((0.0, 1.0), FOURIER_DIM)
    t = np.linspace(0.0, 1.0, n_grid)
    scores = rng.standard_normal((n, FOURIER_DIM)) * np.sqrt(fourier_score_variances())
    X = scores @ eval_basis(basis, t).T
    c = fsim_true_coefficients()
    g = get_link(link)
    index = _trapezoid_design(t, X, basis) @ c
    Y = g.value(index) + sigma * rng.standard_normal(n)
    ds = FsimDataset(t, X, Y) if n >= 10 else None
    return GeneratedFsim(dataset=ds, true_index=index, c_true=c, beta_basis=basis, scores=scores,
                         noise_sd=float(sigma))


def _trapezoid_design(t: np.ndarray, X: np.ndarray, basis: BasisSystem) -> np.ndarray:
    # same rule as functional_design, usable before a dataset exists
    w = trapezoid_weights(t)
    return X @ (w[:, None] * eval_basis(basis, t))


APPENDIX_GAMMA = np.array([1.0, 0.5, 0.25, 0.125])


def appendix_true_coefficients(n_basis: int = APPENDIX_BETA_DIM) -> np.ndarray:
    c = np.zeros(n_basis)
    c[1:5] = math.sqrt(2.0) * np.array([1 / math.sqrt(12), 1 / math.sqrt(12), 1 / math.sqrt(6), 1 / math.sqrt(6)])
    return c


def gen_appendixA_data(n: int, link: LinkSpec, seed: int, n_grid: int = CURVE_GRID) -> GeneratedFsim:
    """Mean curve t plus four harmonics with variances 1, 1/2, 1/4, 1/8; var(ε) = 0.1 var(g).

    β uses the printed weights on the unit-norm harmonics √2·sin / √2·cos so ‖β‖ = 1.
    """
    if n < 2:
        raise InvalidArgumentError("need n >= 2 to estimate the noise variance")
    rng = np.random.default_rng(seed)
    t = np.linspace(0.0, 1.0, n_grid)
    harmonics = np.vstack([np.sin(2 * np.pi * t), np.cos(2 * np.pi * t),
                           np.sin(4 * np.pi * t), np.cos(4 * np.pi * t)]) / math.sqrt(2.0)
    scores = rng.standard_normal((n, 4)) * np.sqrt(APPENDIX_GAMMA)
    X = t[None, :] + scores @ harmonics
    basis = make_fourier_basis((0.0, 1.0), APPENDIX_BETA_DIM)
    c = appendix_true_coefficients()
    index = _trapezoid_design(t, X, basis) @ c
    g = get_link(link)
    gv = g.value(index)
    noise_sd = math.sqrt(0.1 * float(np.var(gv)))
    Y = gv + noise_sd * rng.standard_normal(n)
    ds = FsimDataset(t, X, Y) if n >= 10 else None
    return GeneratedFsim(dataset=ds, true_index=index, c_true=c, beta_basis=basis, scores=scores,
                         noise_sd=noise_sd)


# ---------------------------------------------------------------------------
# Studies
# ---------------------------------------------------------------------------

def t1_basis() -> BasisSystem:
    h = sim_index_half_width()
    return make_bspline_basis((-h, h), T1_BASIS_DIM, T1_BASIS_ORDER)


def fsim_bases(design: str) -> FsimBases:
    n_beta = FOURIER_DIM if design == "fsim" else APPENDIX_BETA_DIM
    return FsimBases(beta=make_fourier_basis((0.0, 1.0), n_beta), g_n_basis=25, g_order=6)


def resolve_grids(cfg: StudyConfig) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    if cfg.design == "sim":
        return (cfg.lambda_grid or DEFAULT_T1_GRID).values(), None
    lg = (cfg.lambda_grid or DEFAULT_LAMBDA_G_GRID).values()
    lb = (cfg.lambda_beta_grid or DEFAULT_LAMBDA_BETA_GRID).values()
    return lg, lb


def _run_replicate(args) -> ReplicateOutcome:
    cfg, r = args
    seed = cfg.base_seed + r
    try:
        grid, grid_beta = resolve_grids(cfg)
        if cfg.design == "sim":
            data = gen_sim_data(cfg.n, cfg.link, cfg.sigma, seed)
            surface = jensen_test_t1(data.E, data.Y, t1_basis(), grid, cfg.alpha, cfg.n_null_draws, seed,
                                     cfg.alternative)
        else:
            if cfg.design == "fsim":
                gen = gen_fsim_data(cfg.n, cfg.link, cfg.sigma, seed)
            else:
                gen = gen_appendixA_data(cfg.n, cfg.link, seed)
            surface = jensen_test_fsim(gen.dataset, fsim_bases(cfg.design), grid, grid_beta, cfg.alpha,
                                       cfg.n_null_draws, seed, FsimOptions(), cfg.alternative)
        return ReplicateOutcome(replicate=r, seed=seed, reject=surface.reject, T_obs=surface.T_obs,
                                crit=surface.crit, sign_summary=surface.sign_summary,
                                sigma_hat=surface.sigma_used.sigma_hat)
    except JensenEffectError as e:
        logger.warning(f"⚠️ Replicate {r} (seed {seed}) failed: {e.code}: {e.message}")
        return ReplicateOutcome(replicate=r, seed=seed, failed=True, error=f"{e.code}: {e.message}")


def run_rejection_study(cfg: StudyConfig) -> StudyResult:
    """Run one Jensen test per replicate (seed base_seed + r) and report the rejection rate.

    Failed replicates count as non-rejections unless ``cfg.exclude_failures``.
    """
    tasks = [(cfg, r) for r in range(cfg.n_reps)]
    logger.info(f"🔄 {cfg.design} study: link={cfg.link.name} eta={cfg.link.eta} n={cfg.n} "
                f"sigma={cfg.sigma} reps={cfg.n_reps}")
    if cfg.jobs > 1 and cfg.n_reps > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            outcomes = list(pool.map(_run_replicate, tasks))
    else:
        outcomes = [_run_replicate(t) for t in tasks]
    n_failed = sum(o.failed for o in outcomes)
    n_rejected = sum(o.reject for o in outcomes)
    n_effective = cfg.n_reps - n_failed if cfg.exclude_failures else cfg.n_reps
    rate = n_rejected / n_effective if n_effective > 0 else 0.0
    logger.info(f"✅ Rejection rate {rate:.3f} ({n_rejected}/{n_effective}, {n_failed} failed)")
    return StudyResult(config=cfg, rate=rate, n_rejected=n_rejected, n_failed=n_failed,
                       n_effective=n_effective, per_seed=outcomes)


def run_power_curve(design: str, eta_grid: Sequence[float], n: int, sigma: float, n_reps: int,
                    base_seed: int, **study_kwargs) -> List[PowerPoint]:
    """Rejection rate for g(s) = s + η e^{-s} at each η (same seeds at every η)."""
    etas = [float(e) for e in eta_grid]
    if not etas:
        raise InvalidArgumentError("eta grid is empty")
    if any(b < a for a, b in zip(etas, etas[1:])):
        raise InvalidArgumentError("eta grid must be nondecreasing")
    points = []
    for eta in etas:
        cfg = StudyConfig(design=design, n=n, sigma=sigma, n_reps=n_reps, base_seed=base_seed,
                          link=LinkSpec(name="power_family", eta=eta), **study_kwargs)
        result = run_rejection_study(cfg)
        points.append(PowerPoint(eta=eta, rate=result.rate, n_reps=n_reps, n=n, sigma=sigma))
    return points


def power_frame(points: Sequence[PowerPoint]) -> pd.DataFrame:
    return pd.DataFrame([p.model_dump() for p in points], columns=["eta", "rate", "n_reps", "n", "sigma"])


def power_trend_slope(points: Sequence[PowerPoint]) -> float:
    """Slope of a binomial GLM (logit link) of rejection rate on η."""
    eta = np.array([p.eta for p in points])
    rate = np.array([p.rate for p in points])
    weights = np.array([p.n_reps for p in points], dtype=float)
    model = sm.GLM(rate, sm.add_constant(eta), family=sm.families.Binomial(), var_weights=weights)
    return float(model.fit().params[1])


# ---------------------------------------------------------------------------
# Curvature metrics and the initialization-sensitivity demonstration
# ---------------------------------------------------------------------------

def rse(beta_hat, beta_true, t_grid) -> float:
    """Root integrated squared error of β̂, minimized over the sign of the truth."""
    bh = np.asarray(beta_hat, dtype=float)
    bt = np.asarray(beta_true, dtype=float)
    t = np.asarray(t_grid, dtype=float)
    return float(min(np.sqrt(trapezoid((bh - bt) ** 2, t)), np.sqrt(trapezoid((bh + bt) ** 2, t))))


def rase_k(fit, link: LinkFunction, true_index, k: int) -> float:
    """Root average squared error of ĝ^(k) at the fitted index against g^(k) at the true index."""
    if k not in (0, 1, 2):
        raise InvalidArgumentError(f"k must be 0, 1 or 2, got {k}")
    est = g_values(fit, fit.index, k)
    truth = link.derivative(np.asarray(true_index, dtype=float), k)
    return float(np.sqrt(np.mean((est - truth) ** 2)))


def _truth_init(problem: PlsProblem, c_true: np.ndarray, link: LinkFunction) -> Tuple[np.ndarray, np.ndarray]:
    s = np.linspace(-problem.S_range, problem.S_range, 20 * problem.K1)
    B = eval_basis(problem.g_basis, s)
    d, *_ = np.linalg.lstsq(B, link.value(s), rcond=None)
    return c_true.copy(), d


def _equal_init(problem: PlsProblem) -> Tuple[np.ndarray, np.ndarray]:
    c = np.ones(problem.K2) / math.sqrt(problem.K2)
    s = problem.Psi @ c
    A = np.column_stack([np.ones_like(s), s])
    (a, b), *_ = np.linalg.lstsq(A, problem.ds.Y, rcond=None)
    return c, linear_coefficients(problem.g_basis, float(a), float(b))


def curvature_demo(seed: int, n: int = 100, link: Optional[LinkSpec] = None,
                   lambda_g: Optional[Sequence[float]] = None,
                   lambda_beta: Optional[Sequence[float]] = None,
                   opts: Optional[FsimOptions] = None) -> CurvatureReport:
    """Fit one instance from truth-based and equal-coefficient starts and compare curvature errors.

    The smoothing parameters come from GCV over a small grid (truth-initialized
    fits); both starts are then refit at the selected pair.
    """
    link = link or LinkSpec(name="exp_neg")
    opts = opts or FsimOptions(max_sweeps=1)
    g = get_link(link)
    gen = gen_appendixA_data(n, link, seed)
    bases = fsim_bases("appendixA")
    lg = np.asarray(lambda_g if lambda_g is not None else [1e-6, 1e-4, 1e-2])
    lb = np.asarray(lambda_beta if lambda_beta is not None else [1e-6, 1e-4, 1e-2])
    grid = warm_start_grid(gen.dataset, bases, lg, lb, opts)
    lam_g, lam_b = grid.cell_lambdas(grid.gcv_cell)
    problem = PlsProblem(gen.dataset, bases, lam_g, lam_b)

    t = gen.dataset.t_grid
    beta_true = eval_basis(bases.beta, t) @ gen.c_true
    s_dense = np.linspace(gen.true_index.min(), gen.true_index.max(), 400)
    fits, g2 = [], {}
    for name, init in (("truth", _truth_init(problem, gen.c_true, g)), ("equal", _equal_init(problem))):
        fit = _fit_problem(problem, init, opts)
        g2[name] = g_values(fit, s_dense, 2)
        fits.append(CurvatureFit(
            init=name,
            rse=rse(beta_values(fit, t), beta_true, t),
            rase=[rase_k(fit, g, gen.true_index, k) for k in (0, 1, 2)],
            objective=fit.objective,
            c_norm=float(np.linalg.norm(fit.c)),
            sup_abs_g2=float(np.abs(g2[name]).max()),
        ))
        logger.info(f"📊 {name} start: RSE={fits[-1].rse:.4f} RASE={['%.4f' % v for v in fits[-1].rase]}")

    def rel(a: float, b: float) -> float:
        return abs(a - b) / max(min(abs(a), abs(b)), 1e-300)

    return CurvatureReport(
        seed=seed, n=n, link=link, lambda_g=lam_g, lambda_beta=lam_b, fits=fits,
        sup_diff_g2=float(np.abs(g2["truth"] - g2["equal"]).max()),
        rase0_rel_diff=rel(fits[0].rase[0], fits[1].rase[0]),
        rase2_rel_diff=rel(fits[0].rase[2], fits[1].rase[2]),
        sup_g2_rel_diff=rel(fits[0].sup_abs_g2, fits[1].sup_abs_g2),
    )


def sigma_profiles(n: int, link: LinkSpec, sigma: float, base_seed: int, n_profiles: int = 10,
                   lambda_grid: Optional[LambdaGridSpec] = None) -> List[Dict[str, object]]:
    """σ̂ as a function of λ for the first replicates of the scalar single index design."""
    grid = (lambda_grid or DEFAULT_T1_GRID).values()
    basis = t1_basis()
    out = []
    for r in range(n_profiles):
        data = gen_sim_data(n, link, sigma, base_seed + r)
        profile = sigma_profile(data.E, data.Y, basis, grid)
        profile["seed"] = base_seed + r
        profile["design"] = "sim"
        out.append(profile)
    return out


def grid_sigma_profiles(design: str, n: int, link: LinkSpec, sigma: float, base_seed: int, n_profiles: int = 10,
                        lambda_g: Optional[Sequence[float]] = None,
                        lambda_beta: Optional[Sequence[float]] = None,
                        opts: Optional[FsimOptions] = None) -> List[Dict[str, object]]:
    """σ̂ as a function of λ_g for the first replicates of a functional design.

    Each profile reads the λ_β column of the warm-started lattice that holds the
    cell σ̂ is taken from; ``lambda_gcv`` and ``sigma_gcv`` describe that cell.
    """
    lg = np.asarray(lambda_g if lambda_g is not None else DEFAULT_LAMBDA_G_GRID.values(), dtype=float)
    lb = np.asarray(lambda_beta if lambda_beta is not None else DEFAULT_LAMBDA_BETA_GRID.values(), dtype=float)
    bases = fsim_bases(design)
    out = []
    for r in range(n_profiles):
        seed = base_seed + r
        gen = gen_fsim_data(n, link, sigma, seed) if design == "fsim" else gen_appendixA_data(n, link, seed)
        grid = warm_start_grid(gen.dataset, bases, lg, lb, opts or FsimOptions())
        j = grid.sigma_cell % len(lb)
        sigmas, gcvs = [], []
        for i in range(len(lg)):
            k = grid.cell(i, j)
            try:
                sigmas.append(fsim_sigma_hat(grid.fits[k]) if grid.fits[k] is not None else float("nan"))
            except (DegenerateSmootherError, IllConditionedError):
                sigmas.append(float("nan"))
            gcvs.append(grid.gcv[k] if np.isfinite(grid.gcv[k]) else float("nan"))
        out.append({
            "design": design, "seed": seed, "lambdas": [float(v) for v in lg], "lambda_beta": float(lb[j]),
            "sigma": sigmas, "gcv": gcvs, "lambda_gcv": grid.cell_lambdas(grid.sigma_cell)[0],
            "sigma_gcv": grid.fits[grid.sigma_cell].sigma_hat,
        })
    return out
