"""Command-line interface: ``merf-sae {fit,estimate,mse,simulate}``.

Every command takes ``--seed`` (one root seed for all randomness of the
run), ``--threads`` (worker cap; never changes results), ``--config`` (JSON
file, see below) and ``--out`` (output directory). Command-line flags
override config-file values, which override the defaults.

Config file keys (all optional)::

    {"seed": 0, "threads": 1,
     "data":      {"response": "y", "area": "area", "covariates": ["x1", "x2"]},
     "forest":    {"n_trees": 500, "mtry": 1, "min_node_size": 5},
     "merf":      {"tolerance": 1e-5, "max_iter": 50, "bias_correction_B": 100},
     "bootstrap": {"B": 200, "refit_trees": null},
     "simulation": {"mode": "model-based", "scenario": "Normal", "M": 50, "T": 50,
                    "methods": ["merf", "linear_baseline"], "B": 0}}

Exit codes:

=====  ==========================================
0      success
1      unexpected internal error
2      command-line usage error
3      schema error (missing file/column, bad model file)
4      parse error (non-numeric response, missing values)
5      empty input
6      consistency error (areas/columns disagree)
7      configuration error
8      fit error
=====  ==========================================
"""

from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
import time
import warnings
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, replace
from importlib import metadata
from pathlib import Path

import numpy as np
import pandas as pd

from . import io
from .bootstrap import RebConfig, bootstrap_mse
from .data import index_from_sizes, load_census, load_survey
from .estimate import estimate_means
from .exceptions import (ConfigError, ConsistencyError, EmptyInputError, FitError, MerfError,
                         ParseError, SchemaError)
from .forest import ForestConfig
from .merf import ConvergenceWarning, LinearLearner, MerfConfig, fit_merf
from .scenarios import scenario
from .simulation import METHODS, SimConfig, compute_metrics, run_design_based, run_model_based

logger = logging.getLogger("merf_sae")

# most specific class first
EXIT_CODES = [
    (EmptyInputError, 5),
    (SchemaError, 3),
    (ParseError, 4),
    (ConsistencyError, 6),
    (ConfigError, 7),
    (FitError, 8),
    (MerfError, 8),
]
EXIT_USAGE = 2
EXIT_INTERNAL = 1


def exit_code(exc: BaseException) -> int:
    for cls, code in EXIT_CODES:
        if isinstance(exc, cls):
            return code
    return EXIT_INTERNAL


@dataclass
class RunReport:
    """Machine-readable summary of one invocation, written as JSON.

    ``warnings`` holds every warning logged during the run (they also go to
    stderr); ``timings`` are wall-clock seconds per phase.
    """

    command: str
    seed: int
    threads: int
    config: dict
    versions: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)
    counts: dict = field(default_factory=dict)
    outputs: list = field(default_factory=list)
    result: dict = field(default_factory=dict)

    @contextmanager
    def phase(self, name: str):
        start = time.perf_counter()
        try:
            yield
        finally:
            self.timings[name] = round(time.perf_counter() - start, 6)

    def write(self, path: Path) -> Path:
        self.outputs.append(str(path))
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True, default=_jsonable)
                        + "\n", encoding="utf-8")
        return path


def _jsonable(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.ndarray,)):
        return obj.tolist()
    if isinstance(obj, Path):
        return str(obj)
    return repr(obj)


class _Collector(logging.Handler):
    def __init__(self):
        super().__init__(level=logging.WARNING)
        self.messages: list[str] = []

    def emit(self, record):
        self.messages.append(f"{record.name}: {record.getMessage()}")


def _versions() -> dict:
    out = {"python": platform.python_version()}
    for name in ("numpy", "scipy", "pandas", "numba"):
        try:
            out[name] = metadata.version(name)
        except metadata.PackageNotFoundError:  # pragma: no cover
            out[name] = "unknown"
    try:
        out["merf_sae"] = metadata.version("artifact")
    except metadata.PackageNotFoundError:  # pragma: no cover
        from . import __version__
        out["merf_sae"] = __version__
    return out


# --------------------------------------------------------------------------
# configuration


def _load_config(path) -> dict:
    if path is None:
        return {}
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"no such config file: {path}")
    try:
        cfg = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("config file must hold a JSON object")
    return cfg


def _pick(flag, cfg: dict, section: str, key: str, default):
    if flag is not None:
        return flag
    return cfg.get(section, {}).get(key, default) if section else cfg.get(key, default)


def _forest_config(args, cfg, seed, threads) -> ForestConfig:
    try:
        return ForestConfig(
            n_trees=int(_pick(args.trees, cfg, "forest", "n_trees", 500)),
            mtry=int(_pick(args.mtry, cfg, "forest", "mtry", 1)),
            min_node_size=int(_pick(args.min_node_size, cfg, "forest", "min_node_size", 5)),
            seed=seed, n_jobs=threads)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid forest settings: {exc}") from exc


def _merf_config(args, cfg, seed, threads) -> MerfConfig:
    try:
        return MerfConfig(
            tolerance=float(_pick(args.tolerance, cfg, "merf", "tolerance", 1e-5)),
            max_iter=int(_pick(args.max_iter, cfg, "merf", "max_iter", 50)),
            bias_correction_B=int(_pick(args.bias_B, cfg, "merf", "bias_correction_B", 100)),
            forest=_forest_config(args, cfg, seed, threads), seed=seed)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid fit settings: {exc}") from exc


def _refit_forest(args, cfg, model_config: MerfConfig, threads) -> ForestConfig | None:
    trees = _pick(args.refit_trees, cfg, "bootstrap", "refit_trees", None)
    if trees is None:
        return replace(model_config.forest, n_jobs=threads)
    return replace(model_config.forest, n_trees=int(trees), n_jobs=threads)


def _covariates(value, cfg):
    if value is not None:
        return [c.strip() for c in value.split(",") if c.strip()]
    return cfg.get("data", {}).get("covariates")


# --------------------------------------------------------------------------
# commands


def cmd_fit(args, cfg, report: RunReport, out: Path) -> int:
    response = _pick(args.response, cfg, "data", "response", "y")
    area = _pick(args.area, cfg, "data", "area", "area")
    with report.phase("load"):
        survey = load_survey(args.survey, response, area, _covariates(args.covariates, cfg))
    config = _merf_config(args, cfg, report.seed, report.threads)
    learner = LinearLearner() if args.learner == "linear" else None
    report.config.update(merf=asdict(config), learner=args.learner, response=response,
                         area=area, columns=list(survey.columns))
    with report.phase("fit"):
        model = fit_merf(survey, learner, config, correct_bias=True)
    with report.phase("write"):
        path = io.save_model(model, out / "model.json")
    report.outputs.append(str(path))
    trace = model.trace
    report.counts.update(n=survey.n, areas=survey.n_areas, iterations=trace.n_iter,
                         oob_fallbacks=getattr(model.fitted, "oob_fallbacks", 0),
                         floored=int(bool(model.bias.floored)) if model.bias else 0)
    report.result = {"converged": trace.converged, "gll": trace.gll,
                     "rel_change": trace.rel_change, "vc": asdict(model.vc)}
    print(f"seed: {report.seed}")
    print(f"fitted {survey.n} units in {survey.n_areas} areas, p={survey.p}")
    shown = range(1, trace.n_iter + 1)
    if trace.n_iter > 10:
        shown = [*range(1, 4), *range(trace.n_iter - 4, trace.n_iter + 1)]
    for b in shown:
        if trace.n_iter > 10 and b == trace.n_iter - 4:
            print("  ...")
        change = f"{trace.rel_change[b - 2]:.3e}" if b > 1 else "-"
        print(f"  iteration {b:3d}  GLL {trace.gll[b - 1]:.10g}  rel. change {change}")
    state = "converged" if trace.converged else "NOT converged"
    print(f"{state} after {trace.n_iter} iterations (tolerance {trace.tolerance:g})")
    print(f"sigma2_v={model.vc.sigma2_v:.6g} sigma2_eps={model.vc.sigma2_eps:.6g} "
          f"sigma2_bc={model.vc.sigma2_bc:.6g}")
    print(f"model written to {path}")
    return 0


def _census_for(model, args, cfg):
    area = _pick(args.area, cfg, "data", "area", model.area_name)
    return load_census(args.census, area, columns=model.columns, encoding=model.encoding)


def cmd_estimate(args, cfg, report: RunReport, out: Path) -> int:
    with report.phase("load"):
        model = io.load_model(args.model)
        census = _census_for(model, args, cfg)
        index = index_from_sizes(census, model.area_sizes)
    with report.phase("estimate"):
        estimates = estimate_means(model, census, index)
    path = out / "estimates.csv"
    estimates.to_csv(path)
    report.outputs.append(str(path))
    report.counts.update(areas=index.D, in_sample=index.n_in_sample)
    print(f"seed: {report.seed}")
    print(f"{index.D} areas ({index.n_in_sample} in sample); estimates written to {path}")
    return 0


def cmd_mse(args, cfg, report: RunReport, out: Path) -> int:
    with report.phase("load"):
        model = io.load_model(args.model)
        response = _pick(args.response, cfg, "data", "response", model.response_name)
        area = _pick(args.area, cfg, "data", "area", model.area_name)
        sources = []
        for name in model.columns:
            head = name.split("=", 1)[0]
            src = head if "=" in name and head in model.encoding else name
            if src not in sources:
                sources.append(src)
        survey = load_survey(args.survey, response, area, sources)
        if list(survey.columns) != list(model.columns):
            raise ConsistencyError(f"survey columns {survey.columns} differ from model "
                                   f"{model.columns}")
        if survey.area_sizes() != model.area_sizes or survey.n != model.oob.shape[0]:
            raise ConsistencyError("survey does not match the sample the model was fitted on")
        census = load_census(args.census, area, columns=model.columns, encoding=model.encoding)
        index = index_from_sizes(census, model.area_sizes)
    B = int(_pick(args.B, cfg, "bootstrap", "B", 200))
    reb = RebConfig(B=B, seed=report.seed, n_jobs=report.threads,
                    refit_forest=_refit_forest(args, cfg, model.config, report.threads))
    report.config.update(bootstrap={"B": B, "refit_forest": asdict(reb.refit_forest)})
    with report.phase("estimate"):
        estimates = estimate_means(model, census, index)
    with report.phase("bootstrap"):
        boot = bootstrap_mse(model, survey, census, index, reb)
    estimates = estimates.with_mse(boot.mse_hat)
    path = out / "estimates.csv"
    estimates.to_csv(path)
    report.outputs.append(str(path))
    report.counts.update(B=B, failed_replicates=boot.n_failed, areas=index.D)
    print(f"seed: {report.seed}")
    print(f"bootstrap MSE with B={B} ({boot.n_failed} failed replicates); "
          f"estimates written to {path}")
    return 0


def _read_pattern(path) -> dict[str, int]:
    frame = pd.read_csv(path, dtype=str)
    if list(frame.columns[:2]) != ["area", "n_i"]:
        raise SchemaError("pattern file needs the columns area,n_i")
    try:
        return {str(a).strip(): int(n) for a, n in zip(frame["area"], frame["n_i"])}
    except ValueError as exc:
        raise ParseError(f"pattern sample sizes must be integers: {exc}") from exc


def cmd_simulate(args, cfg, report: RunReport, out: Path) -> int:
    sim = cfg.get("simulation", {})
    mode = args.mode or sim.get("mode", "model-based")
    methods = (args.methods.split(",") if args.methods else sim.get("methods",
                                                                     ["merf", "linear_baseline"]))
    methods = [m.strip() for m in methods]
    merf_config = _merf_config(args, cfg, report.seed, report.threads)
    B = int(args.B if args.B is not None else sim.get("B", 0))
    reb = None
    if B > 0:
        refit = _pick(args.refit_trees, cfg, "bootstrap", "refit_trees", None)
        reb = RebConfig(B=B, n_jobs=1, refit_forest=None if refit is None else replace(
            merf_config.forest, n_trees=int(refit), n_jobs=1))
    config = SimConfig(merf=merf_config, reb=reb, n_jobs=report.threads)
    if mode == "model-based":
        spec = scenario(args.scenario or sim.get("scenario", "Normal"))
        M = int(args.M if args.M is not None else sim.get("M", 50))
        report.config.update(mode=mode, scenario=spec.name, M=M, methods=methods, B=B)
        with report.phase("simulate"):
            result = run_model_based(spec, M, methods, config, seed=report.seed)
    elif mode == "design-based":
        if not args.census or not args.pattern:
            raise ConfigError("design-based mode needs --census and --pattern")
        response = _pick(args.response, cfg, "data", "response", "y")
        area = _pick(args.area, cfg, "data", "area", "area")
        census = load_census(args.census, area, response_column=response)
        pattern = _read_pattern(args.pattern)
        T = int(args.T if args.T is not None else sim.get("T", 50))
        report.config.update(mode=mode, T=T, methods=methods, B=B, census=str(args.census),
                             pattern=str(args.pattern))
        with report.phase("simulate"):
            result = run_design_based(census, pattern, T, methods, config, seed=report.seed)
    else:
        raise ConfigError(f"unknown mode {mode!r}")
    with report.phase("metrics"):
        table = compute_metrics(result)
    paths = [out / "simulation.csv", out / "metrics.csv", out / "fits.csv"]
    result.to_csv(paths[0])
    table.to_csv(paths[1])
    result.fits.to_csv(paths[2], index=False, float_format="%.17g")
    report.outputs.extend(str(p) for p in paths)
    report.counts.update(failures=result.failures,
                         not_converged=int((result.fits["converged"] == False).sum()))  # noqa: E712
    report.result = {"summary": table.summary.to_dict(orient="records")}
    print(f"seed: {report.seed}")
    print(table.summary.to_string(index=False))
    return 0


# --------------------------------------------------------------------------
# parser


def _common(p: argparse.ArgumentParser):
    p.add_argument("--seed", type=int, default=None, help="root seed (default 0)")
    p.add_argument("--threads", type=int, default=None, help="worker threads (default 1)")
    p.add_argument("--config", default=None, help="JSON config file")
    p.add_argument("--out", default=".", help="output directory (default: current)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")


def _fit_options(p: argparse.ArgumentParser):
    p.add_argument("--trees", type=int, default=None, help="trees per forest (500)")
    p.add_argument("--mtry", type=int, default=None, help="split candidates per node (1)")
    p.add_argument("--min-node-size", dest="min_node_size", type=int, default=None)
    p.add_argument("--tolerance", type=float, default=None, help="relative GLL change (1e-5)")
    p.add_argument("--max-iter", dest="max_iter", type=int, default=None)
    p.add_argument("--bias-B", dest="bias_B", type=int, default=None,
                   help="refits for the residual-variance correction (100)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="merf-sae",
                                     description="Mixed effects random forests for small "
                                                 "area estimation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit a model on a survey CSV")
    p.add_argument("survey")
    p.add_argument("--response", default=None, help="response column (y)")
    p.add_argument("--area", default=None, help="area column (area)")
    p.add_argument("--covariates", default=None, help="comma-separated covariates (all others)")
    p.add_argument("--learner", choices=["forest", "linear"], default="forest")
    _fit_options(p)
    _common(p)

    p = sub.add_parser("estimate", help="area means from a model and a census CSV")
    p.add_argument("model")
    p.add_argument("census")
    p.add_argument("--area", default=None, help="census area column (as in the survey)")
    _common(p)

    p = sub.add_parser("mse", help="bootstrap MSE of the area means")
    p.add_argument("model")
    p.add_argument("survey")
    p.add_argument("census")
    p.add_argument("--B", type=int, default=None, help="bootstrap replications (200)")
    p.add_argument("--refit-trees", dest="refit_trees", type=int, default=None,
                   help="trees of the bootstrap refits (model's own)")
    p.add_argument("--response", default=None)
    p.add_argument("--area", default=None)
    _common(p)

    p = sub.add_parser("simulate", help="model- or design-based simulation")
    p.add_argument("--mode", choices=["model-based", "design-based"], default=None)
    p.add_argument("--scenario", default=None,
                   help="Normal, Interaction, Normal-Par or Interaction-Par")
    p.add_argument("-M", type=int, default=None, help="model-based replications (50)")
    p.add_argument("-T", type=int, default=None, help="design-based replications (50)")
    p.add_argument("--methods", default=None,
                   help=f"comma-separated subset of {','.join(METHODS)}")
    p.add_argument("--census", default=None, help="census CSV with response (design-based)")
    p.add_argument("--pattern", default=None, help="CSV area,n_i (design-based)")
    p.add_argument("--response", default=None)
    p.add_argument("--area", default=None)
    p.add_argument("--B", type=int, default=None, help="inner bootstrap replications (0=off)")
    p.add_argument("--refit-trees", dest="refit_trees", type=int, default=None)
    _fit_options(p)
    _common(p)
    return parser


COMMANDS = {"fit": cmd_fit, "estimate": cmd_estimate, "mse": cmd_mse,
            "simulate": cmd_simulate}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    collector = _Collector()
    logger.addHandler(collector)
    try:
        cfg = _load_config(args.config)
        seed = int(args.seed if args.seed is not None else cfg.get("seed", 0))
        threads = int(args.threads if args.threads is not None else cfg.get("threads", 1))
        if seed < 0:
            raise ConfigError("--seed must be non-negative")
        if threads < 1:
            raise ConfigError("--threads must be positive")
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        report = RunReport(command=args.command, seed=seed, threads=threads,
                           config={"file": args.config}, versions=_versions())
        with warnings.catch_warnings():
            # convergence problems are logged (and so reported) already
            warnings.simplefilter("ignore", ConvergenceWarning)
            code = COMMANDS[args.command](args, cfg, report, out)
        report.warnings = list(collector.messages)
        report.counts["warnings"] = len(collector.messages)
        report.write(out / f"{args.command}_report.json")
        return code
    except MerfError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exit_code(exc)
    finally:
        logger.removeHandler(collector)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
