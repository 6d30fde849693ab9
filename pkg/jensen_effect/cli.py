"""Batch front end: simulation studies, ingestion, fitting, Jensen tests and checks.

Every subcommand writes plot-ready CSV/JSON into ``--out`` plus a manifest.json
holding the resolved configuration, input/output digests and timestamps.
Exit codes: 0 success, 1 runtime failure, 2 usage or schema error.
"""
import argparse
import hashlib
import json
import logging
import logging.handlers
import math
import os
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from dotenv import dotenv_values, load_dotenv
from pydantic import ValidationError

from . import __version__
from .errors import DegenerateSmootherError, InvalidArgumentError, JensenEffectError, SchemaError
from .fsim import FsimBases, FsimOptions, fit_fsim, fit_to_record, fsim_gcv, warm_start_grid
from .ingest import (
    HISTORY_LAMBDA_BETA,
    HISTORY_LAMBDA_G,
    RESPONSE_MAX_GAP,
    WINDOW_DAYS,
    assemble_by_site,
    assemble_dataset,
    dataset_beta_basis,
    pair_sites,
    read_dataset,
    read_series_csv,
    write_dataset,
)
from .jensen import jensen_test_fsim, write_surface
from .preset_manager import preset_manager
from .schemas import ALTERNATIVES, DESIGNS, LINK_NAMES, LambdaGridSpec, LinkSpec, RunManifest, StudyConfig
from .services.sigma_check_service import SigmaCheckService
from .simgen import curvature_demo, power_frame, power_trend_slope, run_power_curve, run_rejection_study

logger = logging.getLogger("jensen_effect.cli")

FLOAT_FORMAT = "%.10g"
BOOL_DESTS = {"exclude_failures", "log_density", "per_site", "validate"}
STUDY_FIELDS = {
    "design": "design",
    "n": "n",
    "sigma": "sigma",
    "reps": "n_reps",
    "seed": "base_seed",
    "null_draws": "n_null_draws",
    "alpha": "alpha",
    "alternative": "alternative",
    "jobs": "jobs",
    "lambda_grid": "lambda_grid",
    "lambda_beta_grid": "lambda_beta_grid",
}


def configure_logging() -> None:
    """Root logging from LOG_LEVEL / JENSEN_LOG_FILE (read from .env when present)"""
    load_dotenv()
    level = os.getenv("LOG_LEVEL", "INFO").upper()
    log_file = os.getenv("JENSEN_LOG_FILE", "jensen_effect.log")
    handlers: List[logging.Handler] = [logging.StreamHandler()]
    if log_file:
        handlers.insert(0, logging.handlers.RotatingFileHandler(
            log_file,
            maxBytes=5 * 1024 * 1024,  # 5MB per file
            backupCount=2,
            encoding="utf-8",
        ))
    logging.basicConfig(
        level=getattr(logging, level, logging.INFO),
        format="%(asctime)s - %(levelname)s - %(message)s",
        handlers=handlers,
    )


# ---------------------------------------------------------------------------
# Argument types
# ---------------------------------------------------------------------------

def parse_log_grid(text: str) -> LambdaGridSpec:
    """'lo:hi:n' -> n log10-spaced values from 10^lo to 10^hi"""
    parts = str(text).split(":")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected LOG10_MIN:LOG10_MAX:N, got {text!r}")
    try:
        return LambdaGridSpec(log10_min=float(parts[0]), log10_max=float(parts[1]), n_points=int(parts[2]))
    except (ValueError, ValidationError) as e:
        raise argparse.ArgumentTypeError(f"invalid grid {text!r}: {e}")


def parse_eta_grid(text: str) -> List[float]:
    """'start:stop:step' (stop inclusive) or a comma-separated list; may be empty"""
    text = str(text).strip()
    if not text:
        return []
    if ":" in text:
        parts = text.split(":")
        if len(parts) != 3:
            raise argparse.ArgumentTypeError(f"expected START:STOP:STEP, got {text!r}")
        try:
            start, stop, step = (float(p) for p in parts)
        except ValueError:
            raise argparse.ArgumentTypeError(f"non-numeric eta grid {text!r}")
        if step <= 0:
            raise argparse.ArgumentTypeError("eta grid step must be positive")
        if stop < start:
            return []
        count = int(math.floor((stop - start) / step + 1e-9)) + 1
        return [round(start + k * step, 12) for k in range(count)]
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"non-numeric eta grid {text!r}")


def _parse_bool(key: str, value: str) -> bool:
    lowered = str(value).strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off", ""):
        return False
    raise SchemaError(f"config key {key}: {value!r} is not a boolean", [f"key {key}: expected true/false"])


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

class _Command:
    """Subparser plus the destinations a config file may set"""

    def __init__(self, parser: argparse.ArgumentParser):
        self.parser = parser
        self.dests: List[str] = []

    def add(self, *flags, **kwargs) -> argparse.Action:
        action = self.parser.add_argument(*flags, **kwargs)
        self.dests.append(action.dest)
        return action


def _study_flags(cmd: _Command, with_link: bool = True) -> None:
    cmd.add("--preset", help="start from a named preset (see `presets`)")
    cmd.add("--design", choices=DESIGNS)
    if with_link:
        cmd.add("--link", choices=LINK_NAMES)
        cmd.add("--eta", type=float, help="power_family parameter")
    cmd.add("--n", type=int, help="sample size per replicate")
    cmd.add("--sigma", type=float, help="noise standard deviation")
    cmd.add("--reps", type=int, help="number of replicates")
    cmd.add("--seed", type=int, help="base seed; replicate r uses seed + r")
    cmd.add("--lambda-grid", type=parse_log_grid, help="LOG10_MIN:LOG10_MAX:N (λ, or λ_g for functional designs)")
    cmd.add("--lambda-beta-grid", type=parse_log_grid, help="LOG10_MIN:LOG10_MAX:N for λ_β")
    cmd.add("--null-draws", type=int, help="Monte Carlo draws for the critical value")
    cmd.add("--alpha", type=float)
    cmd.add("--alternative", choices=ALTERNATIVES)
    cmd.add("--exclude-failures", action="store_true", help="drop failed replicates from the denominator")


def _common_flags(cmd: _Command) -> None:
    cmd.add("--out", help="output directory")
    cmd.add("--jobs", type=int, help="worker processes")


def build_parser() -> Tuple[argparse.ArgumentParser, Dict[str, _Command]]:
    parser = argparse.ArgumentParser(prog="jensen_effect", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    subparsers = parser.add_subparsers(dest="command", required=True)
    commands: Dict[str, _Command] = {}

    def command(name: str, handler, help_text: str) -> _Command:
        sub = subparsers.add_parser(name, help=help_text)
        sub.add_argument("--config", help="flat KEY=VALUE file; flags override it")
        sub.set_defaults(handler=handler, command_parser=sub)
        commands[name] = _Command(sub)
        return commands[name]

    cmd = command("simulate", cmd_simulate, "rejection rate of a Jensen test over simulated replicates")
    _study_flags(cmd)
    _common_flags(cmd)

    cmd = command("power", cmd_power, "rejection rate along g(s) = s + η e^{-s}")
    _study_flags(cmd, with_link=False)
    cmd.add("--eta-grid", type=parse_eta_grid, help="START:STOP:STEP (inclusive) or a,b,c")
    _common_flags(cmd)

    cmd = command("ingest", cmd_ingest, "assemble field series into a functional dataset")
    cmd.add("--density", help="CSV with site_id,time_days,<density column>")
    cmd.add("--environment", help="CSV with site_id,time_days,<environment column>")
    cmd.add("--density-column", default="density")
    cmd.add("--env-column", default="temperature")
    cmd.add("--window", type=float, default=WINDOW_DAYS, help="history window in days")
    cmd.add("--max-gap", type=float, default=RESPONSE_MAX_GAP, help="max days between paired visits")
    cmd.add("--log-density", action="store_true", help="responses from log densities")
    cmd.add("--per-site", action="store_true", help="one dataset per site instead of a pooled one")
    _common_flags(cmd)

    cmd = command("fit", cmd_fit, "functional single index fit at given or GCV-selected smoothing parameters")
    cmd.add("--dataset", help="dataset JSON written by `ingest`")
    cmd.add("--lambda-g", type=float)
    cmd.add("--lambda-beta", type=float)
    cmd.add("--lambda-grid", type=parse_log_grid, help="λ_g grid when selecting by GCV")
    cmd.add("--lambda-beta-grid", type=parse_log_grid, help="λ_β grid when selecting by GCV")
    _common_flags(cmd)

    cmd = command("test", cmd_test, "Jensen surface over the (λ_g, λ_β) grid of a dataset")
    cmd.add("--dataset", help="dataset JSON written by `ingest`")
    cmd.add("--lambda-grid", type=parse_log_grid, help="λ_g grid")
    cmd.add("--lambda-beta-grid", type=parse_log_grid, help="λ_β grid")
    cmd.add("--alpha", type=float, default=0.05)
    cmd.add("--null-draws", type=int, default=5000)
    cmd.add("--alternative", choices=ALTERNATIVES, default="two-sided")
    cmd.add("--seed", type=int)
    _common_flags(cmd)

    cmd = command("curvature-demo", cmd_curvature_demo, "initialization sensitivity of curvature estimates")
    cmd.add("--seed", type=int)
    cmd.add("--n", type=int, default=100)
    cmd.add("--link", choices=LINK_NAMES, default="exp_neg")
    cmd.add("--eta", type=float, default=0.0)
    _common_flags(cmd)

    cmd = command("sigma-check", cmd_sigma_check, "σ̂ recovery at the GCV cell over simulated replicates")
    _study_flags(cmd)
    _common_flags(cmd)

    cmd = command("presets", cmd_presets, "list or validate the study presets")
    cmd.add("--validate", action="store_true")

    return parser, commands


def _load_config(path: str, cmd: _Command) -> Dict[str, Any]:
    config_path = Path(path)
    if not config_path.is_file():
        raise SchemaError(f"config file not found: {config_path}")
    values = dotenv_values(config_path)
    known = set(cmd.dests)
    problems, out = [], {}
    for key, value in values.items():
        dest = key.strip().lower().replace("-", "_")
        if dest not in known:
            problems.append(f"key {key}: not an option of this subcommand")
        elif value is None:
            problems.append(f"key {key}: missing value")
        elif dest in BOOL_DESTS:
            out[dest] = _parse_bool(key, value)
        else:
            out[dest] = value
    if problems:
        raise SchemaError(f"config file {config_path} has {len(problems)} problem(s)", problems)
    return out


def parse_arguments(argv: Optional[List[str]] = None) -> argparse.Namespace:
    """Parse flags, then re-parse with the config file's values installed as defaults"""
    parser, commands = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        cmd = commands[args.command]
        cmd.parser.set_defaults(**_load_config(args.config, cmd))
        args = parser.parse_args(argv)
    return args


# ---------------------------------------------------------------------------
# Run records
# ---------------------------------------------------------------------------

def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def sha256_file(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def _jsonable(value: Any) -> Any:
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if hasattr(value, "model_dump"):
        return value.model_dump(mode="json")
    if isinstance(value, np.ndarray):
        return _jsonable(value.tolist())
    if isinstance(value, (np.floating, float)):
        return float(value) if math.isfinite(value) else None
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, Path):
        return str(value)
    return value


class RunRecorder:
    """Tracks inputs and outputs of one subcommand and writes manifest.json"""

    def __init__(self, subcommand: str, out_dir, config: Dict[str, Any]):
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.manifest = RunManifest(subcommand=subcommand, version=__version__, config=_jsonable(config),
                                    started_at=_now())
        self._outputs: List[Path] = []

    def input(self, path) -> Path:
        path = Path(path)
        self.manifest.input_digests[path.name] = sha256_file(path)
        return path

    def output(self, name: str) -> Path:
        path = self.out_dir / name
        self._outputs.append(path)
        return path

    def write_json(self, name: str, payload: Any) -> Path:
        path = self.output(name)
        path.write_text(json.dumps(_jsonable(payload), indent=2, allow_nan=False), encoding="utf-8")
        return path

    def finish(self) -> Path:
        for path in self._outputs:
            self.manifest.output_digests[path.name] = sha256_file(path)
        self.manifest.finished_at = _now()
        path = self.out_dir / "manifest.json"
        path.write_text(self.manifest.model_dump_json(indent=2), encoding="utf-8")
        logger.info(f"✅ Wrote {len(self._outputs)} file(s) and manifest to {self.out_dir}")
        return path


def _resolved_args(args: argparse.Namespace) -> Dict[str, Any]:
    return {k: v for k, v in vars(args).items() if k not in ("handler", "command_parser", "config")}


def _require(args: argparse.Namespace, *dests: str) -> None:
    missing = [d for d in dests if getattr(args, d, None) is None]
    if missing:
        flags = ", ".join("--" + d.replace("_", "-") for d in missing)
        raise InvalidArgumentError(f"missing required option(s): {flags}")


def _study_config(args: argparse.Namespace, link: Optional[Dict[str, Any]] = None) -> StudyConfig:
    """Preset (if any) < config file < flags"""
    overrides = {field: getattr(args, dest) for dest, field in STUDY_FIELDS.items()
                 if getattr(args, dest, None) is not None}
    if getattr(args, "exclude_failures", False):
        overrides["exclude_failures"] = True
    if link is not None:
        overrides["link"] = link
    elif getattr(args, "link", None) is not None:
        overrides["link"] = {"name": args.link, "eta": args.eta or 0.0}
    elif getattr(args, "eta", None) is not None and args.preset:
        preset_link = preset_manager.get_raw_preset(args.preset).get("study", {}).get("link", {})
        overrides["link"] = {**preset_link, "eta": args.eta}

    if args.preset:
        return preset_manager.get_preset(args.preset, overrides)
    _require(args, "design", "seed")
    if "link" not in overrides:
        raise InvalidArgumentError("missing required option(s): --link")
    try:
        return StudyConfig.model_validate(overrides)
    except ValidationError as e:
        raise SchemaError("invalid study options",
                          [f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}" for err in e.errors()])


def _dataset_bases(record) -> FsimBases:
    return FsimBases(beta=dataset_beta_basis(record), g_n_basis=record.g_n_basis, g_order=record.g_order)


def _dataset_grids(args: argparse.Namespace, record) -> Tuple[np.ndarray, np.ndarray]:
    lg = args.lambda_grid or record.lambda_g_grid or HISTORY_LAMBDA_G
    lb = args.lambda_beta_grid or record.lambda_beta_grid or HISTORY_LAMBDA_BETA
    return lg.values(), lb.values()


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_simulate(args: argparse.Namespace) -> int:
    cfg = _study_config(args)
    _require(args, "out")
    rec = RunRecorder("simulate", args.out, {"args": _resolved_args(args), "study": cfg})
    result = run_rejection_study(cfg)
    rates = pd.DataFrame([{
        "design": cfg.design, "link": cfg.link.name, "eta": cfg.link.eta, "n": cfg.n, "sigma": cfg.sigma,
        "n_reps": cfg.n_reps, "rate": result.rate, "n_rejected": result.n_rejected,
        "n_failed": result.n_failed, "n_effective": result.n_effective,
    }])
    rates.to_csv(rec.output("rates.csv"), index=False, float_format=FLOAT_FORMAT)
    rec.output("per_seed.json").write_text(result.model_dump_json(indent=2), encoding="utf-8")
    rec.finish()
    print(f"rate={result.rate:.4f} rejected={result.n_rejected} failed={result.n_failed} "
          f"effective={result.n_effective}")
    return 0


def cmd_power(args: argparse.Namespace) -> int:
    eta_grid = args.eta_grid
    if eta_grid is None and args.preset:
        eta_grid = preset_manager.get_eta_grid(args.preset)
    if eta_grid is None:
        raise InvalidArgumentError("missing required option(s): --eta-grid")
    if not eta_grid:
        raise InvalidArgumentError("eta grid is empty")
    cfg = _study_config(args, link={"name": "power_family", "eta": 0.0})
    _require(args, "out")
    rec = RunRecorder("power", args.out, {"args": _resolved_args(args), "study": cfg, "eta_grid": eta_grid})
    points = run_power_curve(
        cfg.design, eta_grid, cfg.n, cfg.sigma, cfg.n_reps, cfg.base_seed,
        lambda_grid=cfg.lambda_grid, lambda_beta_grid=cfg.lambda_beta_grid, n_null_draws=cfg.n_null_draws,
        alpha=cfg.alpha, alternative=cfg.alternative, exclude_failures=cfg.exclude_failures, jobs=cfg.jobs,
    )
    power_frame(points).to_csv(rec.output("power.csv"), index=False, float_format=FLOAT_FORMAT)
    slope = None
    if len({p.eta for p in points}) > 1:
        try:
            slope = power_trend_slope(points)
        except Exception as e:  # statsmodels signals separation in several ways
            logger.warning(f"⚠️ Power trend fit failed: {e}")
    rates = [p.rate for p in points]
    violations = sum(1 for a, b in zip(rates, rates[1:]) if b < a)
    rec.write_json("power_summary.json", {"trend_slope": slope, "monotone_violations": violations,
                                          "rate_span": rates[-1] - rates[0]})
    rec.finish()
    for p in points:
        print(f"eta={p.eta:g} rate={p.rate:.4f}")
    return 0


def cmd_ingest(args: argparse.Namespace) -> int:
    _require(args, "density", "environment", "out")
    rec = RunRecorder("ingest", args.out, {"args": _resolved_args(args)})
    densities = read_series_csv(rec.input(args.density), args.density_column)
    envs = read_series_csv(rec.input(args.environment), args.env_column)
    sites = pair_sites(densities, envs)
    kwargs = {"window": args.window, "max_gap": args.max_gap, "log_density": args.log_density}
    if args.per_site:
        for site, assembled in sorted(assemble_by_site(sites, **kwargs).items()):
            write_dataset(rec.output(f"dataset_{site}.json"), assembled)
            print(f"site={site} rows={assembled.dataset.n}")
    else:
        assembled = assemble_dataset(sites, **kwargs)
        write_dataset(rec.output("dataset.json"), assembled)
        print(f"rows={assembled.dataset.n} sites={len(set(assembled.history.site_ids))}")
    rec.finish()
    return 0


def cmd_fit(args: argparse.Namespace) -> int:
    _require(args, "dataset", "out")
    if (args.lambda_g is None) != (args.lambda_beta is None):
        raise InvalidArgumentError("--lambda-g and --lambda-beta must be given together")
    rec = RunRecorder("fit", args.out, {"args": _resolved_args(args)})
    ds, record = read_dataset(rec.input(args.dataset))
    bases = _dataset_bases(record)
    opts = FsimOptions(jobs=args.jobs or 1)
    if args.lambda_g is not None:
        fit = fit_fsim(ds, bases, args.lambda_g, args.lambda_beta, opts=opts)
        try:
            gcv_value = fsim_gcv(fit)
        except DegenerateSmootherError as e:
            logger.warning(f"⚠️ GCV undefined at the requested cell: {e}")
            gcv_value = None
    else:
        lg, lb = _dataset_grids(args, record)
        grid = warm_start_grid(ds, bases, lg, lb, opts)
        rows = []
        for k, cell_fit in enumerate(grid.fits):
            lam_g, lam_b = grid.cell_lambdas(k)
            rows.append({
                "lambda_g": lam_g, "lambda_beta": lam_b,
                "objective": cell_fit.objective if cell_fit is not None else np.nan,
                "gcv": grid.gcv[k] if np.isfinite(grid.gcv[k]) else np.nan,
                "gcv_cell": int(k == grid.gcv_cell), "failed": int(cell_fit is None),
            })
        pd.DataFrame(rows).to_csv(rec.output("grid.csv"), index=False, float_format=FLOAT_FORMAT)
        fit, gcv_value = grid.fits[grid.gcv_cell], grid.gcv[grid.gcv_cell]
    rec.output("fit.json").write_text(fit_to_record(fit, gcv_value).model_dump_json(indent=2), encoding="utf-8")
    rec.finish()
    print(f"lambda_g={fit.lambda_g:g} lambda_beta={fit.lambda_beta:g} sigma_hat={fit.sigma_hat:.4g} "
          f"flagged={fit.flagged}")
    return 0


def cmd_test(args: argparse.Namespace) -> int:
    _require(args, "dataset", "seed", "out")
    rec = RunRecorder("test", args.out, {"args": _resolved_args(args)})
    ds, record = read_dataset(rec.input(args.dataset))
    lg, lb = _dataset_grids(args, record)
    surface = jensen_test_fsim(ds, _dataset_bases(record), lg, lb, args.alpha, args.null_draws, args.seed,
                               FsimOptions(jobs=args.jobs or 1), args.alternative)
    write_surface(surface, rec.output("surface.csv"), rec.output("surface.json"))
    rec.finish()
    print(f"T={surface.T_obs:.4g} crit={surface.crit:.4g} reject={surface.reject} signs={surface.sign_summary}")
    return 0


def cmd_curvature_demo(args: argparse.Namespace) -> int:
    _require(args, "seed", "out")
    link = LinkSpec(name=args.link, eta=args.eta)
    rec = RunRecorder("curvature-demo", args.out, {"args": _resolved_args(args)})
    report = curvature_demo(args.seed, n=args.n, link=link)
    rec.output("curvature.json").write_text(report.model_dump_json(indent=2), encoding="utf-8")
    rec.finish()
    for f in report.fits:
        print(f"init={f.init} rse={f.rse:.4g} rase={[round(v, 6) for v in f.rase]} sup|g''|={f.sup_abs_g2:.4g}")
    return 0


def cmd_sigma_check(args: argparse.Namespace) -> int:
    if not args.preset and args.design is None:
        args.preset = "fsim_sigma_check"
    cfg = _study_config(args)
    _require(args, "out")
    rec = RunRecorder("sigma-check", args.out, {"args": _resolved_args(args), "study": cfg})
    results = SigmaCheckService().run_checks(cfg)
    rows = []
    for profile in results["profiles"]:
        for lam, sig, gcv_value in zip(profile["lambdas"], profile["sigma"], profile["gcv"]):
            rows.append({"design": profile["design"], "seed": profile["seed"], "lambda": lam,
                         "lambda_beta": profile.get("lambda_beta", np.nan), "sigma_hat": sig, "gcv": gcv_value,
                         "gcv_selected": int(lam == profile["lambda_gcv"])})
    columns = ["design", "seed", "lambda", "lambda_beta", "sigma_hat", "gcv", "gcv_selected"]
    pd.DataFrame(rows, columns=columns).to_csv(
        rec.output("sigma_profiles.csv"), index=False, float_format=FLOAT_FORMAT)
    rec.write_json("sigma_check.json", {k: results[k] for k in ("all_passed", "design", "checks", "estimates")})
    rec.finish()
    for check in results["checks"]:
        icon = {"success": "✅", "warning": "⚠️"}.get(check["status"], "❌")
        print(f"{icon} {check['name']}: {check['message']}")
    return 0 if results["all_passed"] else 1


def cmd_presets(args: argparse.Namespace) -> int:
    if args.validate:
        registry = preset_manager._load_registry()
        report = {name: preset_manager.validate_preset(filename) for name, filename in registry.items()}
        print(json.dumps(report, indent=2))
        return 2 if any(report.values()) else 0
    print(json.dumps(preset_manager.list_available_presets(), indent=2))
    return 0


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def main(argv: Optional[List[str]] = None) -> int:
    configure_logging()
    try:
        args = parse_arguments(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else 2
    except SchemaError as e:
        _report_schema_error(e)
        return 2

    try:
        return args.handler(args)
    except SchemaError as e:
        _report_schema_error(e)
        return 2
    except InvalidArgumentError as e:
        logger.error(f"❌ {e.code}: {e.message}")
        sys.stderr.write(args.command_parser.format_usage())
        sys.stderr.write(f"{args.command}: error: {e.message}\n")
        return 2
    except JensenEffectError as e:
        logger.error(f"❌ {args.command} failed: {e.code}: {e.message}")
        return 1
    except Exception as e:
        logger.exception(f"❌ {args.command} failed unexpectedly: {e}")
        return 1


def _report_schema_error(e: SchemaError) -> None:
    logger.error(f"❌ {e.code}: {e.message}")
    for problem in e.problems:
        sys.stderr.write(f"  {problem}\n")
