"""Field-record ingestion: irregular density and environment series to a functional dataset.

Environment series are smoothed per contiguous segment with penalized cubic
splines, windows of the smoothed series preceding each density observation
become covariate curves, and density changes between visits become responses.
"""
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import ValidationError

from .basis import BasisSystem, basis_from_spec, basis_spec, eval_basis, make_bspline_basis, trapezoid_weights
from .errors import DegenerateSmootherError, EmptyDatasetError, InvalidArgumentError, OutOfSupportError, SchemaError
from .fsim import FsimDataset
from .schemas import DatasetFile, LambdaGridSpec
from .smoothing import SmoothFit, fit_smooth, lambda_log_grid, select_lambda_gcv

logger = logging.getLogger(__name__)

SEGMENT_GAP_DAYS = 180.0
RESPONSE_MAX_GAP = 100.0
WINDOW_DAYS = 60.0
KNOTS_PER_YEAR = 21
DAYS_PER_YEAR = 365.0
SMOOTH_LAMBDA_GRID = (-4.0, 10.0, 57)

HISTORY_BETA_N_BASIS = 12
HISTORY_BETA_ORDER = 6
HISTORY_G_N_BASIS = 25
HISTORY_G_ORDER = 4
HISTORY_LAMBDA_G = LambdaGridSpec(log10_min=-6.0, log10_max=2.0, n_points=5)
HISTORY_LAMBDA_BETA = LambdaGridSpec(log10_min=-2.0, log10_max=6.0, n_points=5)

SERIES_COLUMNS = ("site_id", "time_days")


@dataclass(frozen=True)
class IrregularSeries:
    site_id: str
    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float).ravel()
        v = np.asarray(self.values, dtype=float).ravel()
        if len(t) != len(v):
            raise InvalidArgumentError(f"site {self.site_id}: {len(t)} times but {len(v)} values")
        if np.any(np.diff(t) <= 0):
            raise InvalidArgumentError(f"site {self.site_id}: times must be strictly increasing")
        if not (np.all(np.isfinite(t)) and np.all(np.isfinite(v))):
            raise InvalidArgumentError(f"site {self.site_id}: non-finite time or value")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "values", v)


@dataclass(frozen=True)
class SmoothedSegment:
    start: float
    end: float
    fit: SmoothFit

    def contains(self, lo: float, hi: float) -> bool:
        return self.start <= lo and hi <= self.end


@dataclass(frozen=True)
class SmoothedSeries:
    """Evaluable handle over the fitted segments of one series"""
    site_id: str
    segments: Tuple[SmoothedSegment, ...]
    skipped: Tuple[str, ...] = ()

    @property
    def support(self) -> List[Tuple[float, float]]:
        return [(s.start, s.end) for s in self.segments]

    def segment_for(self, lo: float, hi: float) -> Optional[SmoothedSegment]:
        for seg in self.segments:
            if seg.contains(lo, hi):
                return seg
        return None

    def covers(self, lo: float, hi: float) -> bool:
        return self.segment_for(lo, hi) is not None

    def __call__(self, times) -> np.ndarray:
        t = np.atleast_1d(np.asarray(times, dtype=float))
        out = np.empty_like(t)
        done = np.zeros(len(t), dtype=bool)
        for seg in self.segments:
            mask = (t >= seg.start) & (t <= seg.end) & ~done
            if mask.any():
                out[mask] = seg.fit.predict(t[mask])
                done |= mask
        if not done.all():
            bad = t[~done][0]
            raise OutOfSupportError(f"site {self.site_id}: time {bad} is outside every smoothed segment")
        return out


@dataclass(frozen=True)
class HistoryDataset:
    """Responses paired with environment histories on a daily grid (t = 0 is the oldest day)"""
    responses: np.ndarray
    histories: np.ndarray
    t_grid: np.ndarray
    site_ids: List[str]
    obs_times: np.ndarray

    @property
    def n(self) -> int:
        return len(self.responses)


@dataclass(frozen=True)
class AssembledDataset:
    history: HistoryDataset
    dataset: FsimDataset
    beta_basis: BasisSystem
    g_n_basis: int = HISTORY_G_N_BASIS
    g_order: int = HISTORY_G_ORDER
    lambda_g_grid: LambdaGridSpec = HISTORY_LAMBDA_G
    lambda_beta_grid: LambdaGridSpec = HISTORY_LAMBDA_BETA
    notes: Dict[str, object] = field(default_factory=dict)


def split_segments(s: IrregularSeries, max_gap: float = SEGMENT_GAP_DAYS) -> List[Tuple[np.ndarray, np.ndarray]]:
    breaks = np.flatnonzero(np.diff(s.times) > max_gap) + 1
    return list(zip(np.split(s.times, breaks), np.split(s.values, breaks)))


def smooth_series(s: IrregularSeries, knots_per_year: int = KNOTS_PER_YEAR,
                  lambda_grid: Optional[Sequence[float]] = None,
                  max_gap: float = SEGMENT_GAP_DAYS) -> SmoothedSeries:
    """Penalized cubic spline per contiguous segment with λ chosen by GCV.

    Segments are split at gaps longer than ``max_gap`` days; each gets
    max(1, ceil(knots_per_year * span / 365)) knot intervals.
    """
    grid = lambda_log_grid(*SMOOTH_LAMBDA_GRID) if lambda_grid is None else np.asarray(lambda_grid, dtype=float)
    segments, skipped = [], []
    for times, values in split_segments(s, max_gap):
        span = float(times[-1] - times[0]) if len(times) else 0.0
        if len(times) < 2 or span <= 0:
            reason = f"segment at day {times[0] if len(times) else 'n/a'}: {len(times)} point(s), need 2"
            logger.warning(f"⚠️ Site {s.site_id}: skipping {reason}")
            skipped.append(reason)
            continue
        intervals = max(1, math.ceil(knots_per_year * span / DAYS_PER_YEAR))
        basis = make_bspline_basis((times[0], times[-1]), intervals + 3, 4)
        try:
            lam, fit = select_lambda_gcv(times, values, basis, grid)
        except DegenerateSmootherError:
            # too few points for GCV: the penalty null space (a line) interpolates them
            lam = float(np.max(grid))
            fit = fit_smooth(times, values, basis, lam)
        logger.debug(f"Site {s.site_id}: segment [{times[0]}, {times[-1]}] λ={lam:.3g}, {basis.n_basis} functions")
        segments.append(SmoothedSegment(start=float(times[0]), end=float(times[-1]), fit=fit))
    return SmoothedSeries(site_id=s.site_id, segments=tuple(segments), skipped=tuple(skipped))


def build_responses(density: IrregularSeries, max_gap: float = RESPONSE_MAX_GAP,
                    log_density: bool = False) -> List[Tuple[float, float]]:
    """Per-day density change between consecutive visits less than ``max_gap`` days apart.

    Returns:
        list of (s_i, Y_i) keyed by the earlier visit time
    """
    d = density.values
    if log_density:
        if np.any(d <= 0):
            raise InvalidArgumentError(f"site {density.site_id}: log density needs positive densities")
        d = np.log(d)
    t = density.times
    out = []
    for i in range(len(t) - 1):
        gap = t[i + 1] - t[i]
        if gap < max_gap:
            out.append((float(t[i]), float((d[i + 1] - d[i]) / gap)))
    return out


def window_offsets(window: float, grid_step: float = 1.0) -> np.ndarray:
    """Offsets 0, step, ..., window on the history grid.

    Raises:
        InvalidArgumentError: if the window is not a positive whole number of steps
    """
    if not (window > 0 and grid_step > 0):
        raise InvalidArgumentError(f"window ({window}) and grid step ({grid_step}) must be positive")
    steps = int(round(window / grid_step))
    if steps < 1 or abs(steps * grid_step - window) > 1e-9 * window:
        raise InvalidArgumentError(f"window of {window} days is not a whole number of {grid_step}-day steps")
    return np.linspace(0.0, window, steps + 1)


def extract_histories(env: SmoothedSeries, obs_times: Sequence[float], window: float = WINDOW_DAYS,
                      grid_step: float = 1.0) -> Tuple[np.ndarray, np.ndarray]:
    """Environment values over the ``window`` days up to each observation time.

    Returns:
        (matrix with one row per covered time, indices of the kept obs_times)
    """
    offsets = window_offsets(window, grid_step)
    rows, kept = [], []
    for i, s in enumerate(obs_times):
        lo, hi = s - window, s
        seg = env.segment_for(lo, hi)
        if seg is None:
            logger.warning(f"⚠️ Site {env.site_id}: dropping day {s}, window [{lo}, {hi}] not covered by a segment")
            continue
        rows.append(seg.fit.predict(lo + offsets))
        kept.append(i)
    matrix = np.vstack(rows) if rows else np.zeros((0, len(offsets)))
    return matrix, np.asarray(kept, dtype=int)


def history_beta_basis(window: float = WINDOW_DAYS) -> BasisSystem:
    return make_bspline_basis((0.0, window), HISTORY_BETA_N_BASIS, HISTORY_BETA_ORDER)


def project_histories(histories: np.ndarray, t_grid: np.ndarray, basis: BasisSystem) -> np.ndarray:
    """Trapezoid-weighted least squares projection of each row onto the basis span."""
    w = trapezoid_weights(t_grid)
    B = eval_basis(basis, t_grid)
    gram = B.T @ (w[:, None] * B)
    coef = np.linalg.solve(gram, B.T @ (w[:, None] * histories.T))
    return (B @ coef).T


def collect_histories(sites: Sequence[Tuple[IrregularSeries, IrregularSeries]], window: float = WINDOW_DAYS,
                      max_gap: float = RESPONSE_MAX_GAP, log_density: bool = False,
                      knots_per_year: int = KNOTS_PER_YEAR, grid_step: float = 1.0) -> HistoryDataset:
    t_grid = window_offsets(window, grid_step)
    responses, rows, site_ids, times = [], [], [], []
    for density, env in sites:
        pairs = build_responses(density, max_gap, log_density)
        if not pairs:
            logger.warning(f"⚠️ Site {density.site_id}: no consecutive visits closer than {max_gap} days")
            continue
        smoothed = smooth_series(env, knots_per_year)
        obs = [p[0] for p in pairs]
        H, kept = extract_histories(smoothed, obs, window, grid_step)
        logger.info(f"📊 Site {density.site_id}: {len(kept)} of {len(pairs)} responses have covered windows")
        for row, k in zip(H, kept):
            responses.append(pairs[k][1])
            rows.append(row)
            site_ids.append(density.site_id)
            times.append(pairs[k][0])
    return HistoryDataset(
        responses=np.asarray(responses, dtype=float),
        histories=np.vstack(rows) if rows else np.zeros((0, len(t_grid))),
        t_grid=t_grid, site_ids=site_ids, obs_times=np.asarray(times, dtype=float),
    )


def assemble_dataset(sites: Sequence[Tuple[IrregularSeries, IrregularSeries]],
                     beta_basis: Optional[BasisSystem] = None, window: float = WINDOW_DAYS,
                     max_gap: float = RESPONSE_MAX_GAP, log_density: bool = False,
                     knots_per_year: int = KNOTS_PER_YEAR) -> AssembledDataset:
    """Pool (history, response) pairs over sites and project histories onto the β basis.

    Args:
        sites: (density, environment) series per site
        beta_basis: defaults to 12 order-6 B-splines on [0, window]

    Raises:
        EmptyDatasetError: if no site contributes a usable row
    """
    history = collect_histories(sites, window, max_gap, log_density, knots_per_year)
    if history.n == 0:
        raise EmptyDatasetError("no (history, response) pairs survived assembly")
    basis = beta_basis or history_beta_basis(window)
    X = project_histories(history.histories, history.t_grid, basis)
    ds = FsimDataset(history.t_grid, X, history.responses)
    logger.info(f"✅ Assembled {ds.n} rows from {len(set(history.site_ids))} site(s)")
    return AssembledDataset(history=history, dataset=ds, beta_basis=basis,
                            notes={"window_days": window, "max_gap_days": max_gap,
                                   "log_density": log_density, "knots_per_year": knots_per_year})


def assemble_by_site(sites: Sequence[Tuple[IrregularSeries, IrregularSeries]], **kwargs) -> Dict[str, AssembledDataset]:
    out = {}
    for density, env in sites:
        try:
            out[density.site_id] = assemble_dataset([(density, env)], **kwargs)
        except (EmptyDatasetError, InvalidArgumentError) as e:
            logger.warning(f"⚠️ Site {density.site_id} skipped: {e}")
    if not out:
        raise EmptyDatasetError("no site produced a usable dataset")
    return out


# ---------------------------------------------------------------------------
# Files
# ---------------------------------------------------------------------------

def read_series_csv(path, value_column: str) -> List[IrregularSeries]:
    """Read a (site_id, time_days, value) CSV into one series per site.

    Raises:
        SchemaError: with one message per offending row or column
    """
    try:
        frame = pd.read_csv(path, dtype={"site_id": str}, encoding="utf-8")
    except (OSError, pd.errors.ParserError, UnicodeDecodeError) as e:
        raise SchemaError(f"cannot read {path}: {e}")
    required = list(SERIES_COLUMNS) + [value_column]
    missing = [c for c in required if c not in frame.columns]
    if missing:
        raise SchemaError(f"{path}: missing column(s) {missing}",
                          [f"column {c}: required but absent" for c in missing])
    problems = []
    for col in ("time_days", value_column):
        numeric = pd.to_numeric(frame[col], errors="coerce")
        for idx in frame.index[~np.isfinite(numeric.to_numpy(dtype=float, na_value=np.nan))]:
            problems.append(f"row {idx + 2}, column {col}: {frame.at[idx, col]!r} is not a finite number")
        frame[col] = numeric
    for idx in frame.index[frame["site_id"].isna()]:
        problems.append(f"row {idx + 2}, column site_id: missing")
    dup = frame.duplicated(subset=["site_id", "time_days"], keep="first")
    for idx in frame.index[dup]:
        problems.append(f"row {idx + 2}, column time_days: duplicate time for site {frame.at[idx, 'site_id']}")
    if problems:
        raise SchemaError(f"{path}: {len(problems)} schema problem(s)", problems)
    series = []
    for site, group in frame.sort_values(["site_id", "time_days"], kind="mergesort").groupby("site_id", sort=True):
        series.append(IrregularSeries(site_id=str(site), times=group["time_days"].to_numpy(float),
                                      values=group[value_column].to_numpy(float)))
    return series


def pair_sites(densities: Sequence[IrregularSeries], envs: Sequence[IrregularSeries]) -> List[Tuple[IrregularSeries, IrregularSeries]]:
    env_by_site = {e.site_id: e for e in envs}
    pairs = []
    for d in densities:
        if d.site_id in env_by_site:
            pairs.append((d, env_by_site[d.site_id]))
        else:
            logger.warning(f"⚠️ Site {d.site_id} has densities but no environment series")
    return pairs


def write_dataset(path, assembled: AssembledDataset) -> None:
    h = assembled.history
    record = DatasetFile(
        t_grid=assembled.dataset.t_grid.tolist(), X=assembled.dataset.X.tolist(), Y=assembled.dataset.Y.tolist(),
        site_ids=list(h.site_ids), obs_times=h.obs_times.tolist(),
        beta_basis=basis_spec(assembled.beta_basis), g_n_basis=assembled.g_n_basis, g_order=assembled.g_order,
        lambda_g_grid=assembled.lambda_g_grid, lambda_beta_grid=assembled.lambda_beta_grid,
        notes=dict(assembled.notes),
    )
    Path(path).write_text(record.model_dump_json(indent=2), encoding="utf-8")


def read_dataset(path) -> Tuple[FsimDataset, DatasetFile]:
    try:
        record = DatasetFile.model_validate(json.loads(Path(path).read_text(encoding="utf-8")))
    except (OSError, json.JSONDecodeError) as e:
        raise SchemaError(f"cannot read dataset {path}: {e}")
    except ValidationError as e:
        raise SchemaError(f"dataset {path} does not match the schema",
                          [f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}" for err in e.errors()])
    return FsimDataset(np.array(record.t_grid), np.array(record.X), np.array(record.Y)), record


def dataset_beta_basis(record: DatasetFile) -> BasisSystem:
    if record.beta_basis is not None:
        return basis_from_spec(record.beta_basis)
    return make_bspline_basis((record.t_grid[0], record.t_grid[-1]), HISTORY_BETA_N_BASIS, HISTORY_BETA_ORDER)
