"""Command-line front end.

Every command resolves its settings from built-in defaults, an optional
JSON config (``--config``; a manifest written by an earlier run is accepted
too), the ``QALOPT_SEED`` environment variable and explicit flags, in that
order of increasing precedence.  The resolved settings are written to
``manifest.json`` next to the outputs, so a run can be repeated with
``--config manifest.json``.

Exit codes: 0 success, 2 configuration error, 3 data validation failure,
4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import jsonschema
import numpy as np
from scipy.optimize import isotonic_regression

from . import __version__
from .estimators import (BC, IPW, NoEffectiveObservations, RqalEvaluator, bootstrap_ci, cross_fit_factors,
                         default_LU)
from .hazards.fit import HalConfig, NuisanceRecipe, cumulative_factors, fit_hazards
from .hazards.risk import FeatureSpec
from .io import PanelFormatError, dump_json, file_digest, read_panel, write_panel
from .optimize import SearchConfig, SearchFailed, maximize, rqal_objective
from .panel import InvariantViolation, validate_panel
from .regimes import INTERCEPT, Regime
from .simgen.dgp import ConfigError, SimConfig, TruthHazards, dgp_summary, generate_panel
from .simgen.onestage import OneStageConfig, one_stage_study
from .simgen.study import PRESETS, StudyAborted, mc_study, preset, standard_method

log = logging.getLogger("qalopt")

CONFIG_ERROR, DATA_ERROR, NUMERIC_ERROR = 2, 3, 4


class DataError(Exception):
    """Input data failed validation; carries the path of the written report."""

    def __init__(self, message: str, report: Path | None = None):
        super().__init__(message)
        self.report = report


# ---------------------------------------------------------------------------
# settings


DATA_DEFAULTS = {
    "panel": None, "subjects": None, "out": ".", "nuisance": "logistic", "features": None,
    "censoring_features": None, "stage_degree": 3, "include_treatment": False, "per_stage": False,
    "tuning": "undersmooth", "regime": "custom", "eta": None, "regime_covariates": [INTERCEPT, "z1", "z2"],
    "mode": IPW, "nu": "auto", "l_u": None, "level": 0.95, "cross_fit": 0, "seed": 0,
    "plug_in_truth": False, "sim_manifest": None,
}

DEFAULTS = {
    "simulate": {"scenario": 1, "k": 6, "g": None, "n": 500, "seed": 0, "l_u": None, "censoring": True,
                 "observed_map": None, "out": "."},
    "validate": {"panel": None, "subjects": None, "report": None},
    "estimate": {**DATA_DEFAULTS, "isotonic": False, "bootstrap": 0},
    "optimize": {**DATA_DEFAULTS, "population": 60, "generations": 80, "mutation_scale": 0.2,
                 "polish": True, "objective": "rqal", "x": None},
    "mc-study": {"preset": None, "scenario": 2, "k": 6, "g": None, "n": 500, "seed": 0, "reps": 200,
                 "methods": ["hal:bc"], "population": 60, "generations": 80, "checkpoint_dir": None,
                 "oracle_mc_n": 100_000, "eval_mc_n": 20_000, "detail": False, "out": "."},
    "one-stage-study": {"n": 500, "reps": 200, "seed": 0, "out": "."},
}

_JSON_TYPES = {bool: "boolean", int: "integer", float: "number", str: "string", list: "array"}
_NULLABLE_TYPES = {"g": "integer", "features": "array", "censoring_features": "array", "eta": "array", "l_u": "number",
                   "x": "number", "observed_map": "string", "preset": "string", "checkpoint_dir": "string",
                   "sim_manifest": "string", "panel": "string", "subjects": "string", "report": "string"}
_ENUMS = {"nuisance": ["logistic", "hal"], "mode": [IPW, BC], "tuning": ["undersmooth", "cv"],
          "regime": ["custom", "always", "never"], "objective": ["rqal", "survival"], "scenario": [1, 2]}


def settings_schema(command: str) -> dict:
    props = {}
    for key, default in DEFAULTS[command].items():
        if key == "nu":
            props[key] = {"anyOf": [{"type": "number", "exclusiveMinimum": 0}, {"const": "auto"}]}
            continue
        t = _NULLABLE_TYPES.get(key) or _JSON_TYPES[type(default)]
        prop = {"type": [t, "null"] if key in _NULLABLE_TYPES else t}
        if key in _ENUMS:
            prop["enum"] = _ENUMS[key] + ([None] if key in _NULLABLE_TYPES else [])
        props[key] = prop
    return {"type": "object", "properties": props, "additionalProperties": False}


def load_config(path: str, command: str) -> dict:
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    if isinstance(data, dict) and "settings" in data and "command" in data:
        if data["command"] != command:
            raise ConfigError(f"manifest {path} is for '{data['command']}', not '{command}'")
        data = data["settings"]
    validator = jsonschema.Draft7Validator(settings_schema(command))
    errors = sorted(validator.iter_errors(data), key=lambda e: list(e.path))
    if errors:
        msgs = []
        for e in errors:
            where = ".".join(str(p) for p in e.path) or "(top level)"
            msgs.append(f"config field {where}: {e.message}")
        raise ConfigError("\n".join(msgs))
    return data


def resolve_settings(command: str, args: argparse.Namespace) -> dict:
    settings = dict(DEFAULTS[command])
    if args.config:
        settings.update(load_config(args.config, command))
    env_seed = os.environ.get("QALOPT_SEED")
    if env_seed is not None and "seed" in settings:
        try:
            settings["seed"] = int(env_seed)
        except ValueError:
            raise ConfigError(f"QALOPT_SEED must be an integer, got {env_seed!r}") from None
    for key in DEFAULTS[command]:
        v = getattr(args, key, None)
        if v is not None:
            settings[key] = v
    return settings


def settings_hash(command: str, settings: dict) -> str:
    blob = json.dumps({"command": command, "settings": settings}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()


def write_manifest(out: Path, command: str, settings: dict, outputs: list[Path], extra: dict | None = None) -> Path:
    manifest = {
        "command": command,
        "settings": settings,
        "config_hash": settings_hash(command, settings),
        "seed": settings.get("seed"),
        "version": __version__,
        "outputs": {p.name: file_digest(p) for p in outputs},
    }
    if extra:
        manifest.update(extra)
    path = out / "manifest.json"
    dump_json(manifest, path)
    return path


def _out_dir(settings: dict) -> Path:
    out = Path(settings["out"])
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out}: {exc.strerror}") from None
    if not os.access(out, os.W_OK):
        raise ConfigError(f"output directory {out} is not writable")
    return out


def _csv_list(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _float_list(text: str) -> list[float]:
    try:
        return [float(t) for t in _csv_list(text)]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _nu(text: str):
    if text == "auto":
        return "auto"
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError("--nu takes 'auto' or a positive number") from None
    if not v > 0:
        raise argparse.ArgumentTypeError("--nu must be positive")
    return v


# ---------------------------------------------------------------------------
# commands


def sim_config(settings: dict) -> SimConfig:
    if settings["scenario"] not in (1, 2):
        raise ConfigError(f"unknown scenario {settings['scenario']!r}; expected 1 or 2")
    return SimConfig(scenario=settings["scenario"], K=settings["k"], G=settings["g"], n=settings["n"],
                     seed=settings["seed"], L_U=settings.get("l_u"), censoring=settings.get("censoring", True),
                     observed_map=settings.get("observed_map"))


def cmd_simulate(settings: dict, threads: int) -> int:
    cfg = sim_config(settings)
    out = _out_dir(settings)
    panel = generate_panel(cfg)
    files = [out / "panel.csv", out / "subjects.csv"]
    write_panel(panel, *files)
    summary = dgp_summary(panel)
    write_manifest(out, "simulate", settings, files,
                   {"sim_config": cfg.to_dict(), "summary": summary,
                    "quality_clamps": panel.meta.get("quality_clamps", 0)})
    print(f"wrote {panel.n} subjects to {files[0]} and {files[1]}")
    print(", ".join(f"{k} {v:.3f}" for k, v in summary.items()))
    return 0


def load_validated(settings: dict, report_dir: Path):
    if not settings.get("panel") or not settings.get("subjects"):
        raise ConfigError("--panel and --subjects are required")
    for key in ("panel", "subjects"):
        if not Path(settings[key]).exists():
            raise ConfigError(f"{key} file {settings[key]} does not exist")
    try:
        panel = read_panel(settings["panel"], settings["subjects"])
    except (PanelFormatError, InvariantViolation) as exc:
        raise DataError(str(exc)) from None
    report = validate_panel(panel)
    if not report.ok:
        path = report_dir / "validation.json"
        dump_json({"ok": False, "n_subjects": report.n_subjects,
                   "violations": [{"subject_id": v.subject_id, "j": v.j, "message": v.message}
                                  for v in report.violations]}, path)
        raise DataError(report.summary(), path)
    return panel


def cmd_validate(settings: dict, threads: int) -> int:
    report_path = Path(settings["report"]) if settings.get("report") else None
    target = report_path.parent if report_path else Path(settings["panel"] or ".").parent
    try:
        load_validated(settings, target)
    except DataError as exc:
        if report_path and exc.report and exc.report != report_path:
            exc.report.replace(report_path)
            exc.report = report_path
        raise
    if report_path:
        dump_json({"ok": True, "violations": []}, report_path)
    print("panel is valid")
    return 0


def _truth_hazards(settings: dict) -> TruthHazards:
    path = Path(settings["sim_manifest"]) if settings.get("sim_manifest") else \
        Path(settings["panel"]).parent / "manifest.json"
    if not path.exists():
        raise ConfigError(f"--plug-in-truth needs the simulation manifest; {path} not found")
    data = json.loads(path.read_text())
    if "sim_config" not in data:
        raise ConfigError(f"{path} does not describe a simulation")
    return TruthHazards.from_config(SimConfig.from_dict(data["sim_config"]))


def nuisance_recipe(settings: dict, panel) -> NuisanceRecipe:
    feats = settings["features"] or [c for c in panel.covariate_names]
    cfeats = settings["censoring_features"] or feats
    for f in list(feats) + list(cfeats):
        if f not in panel.covariate_names:
            raise ConfigError(f"unknown feature {f!r}; panel covariates are {list(panel.covariate_names)}")
    deg = settings["stage_degree"]
    treat = FeatureSpec(tuple(feats), deg)
    cens = FeatureSpec(tuple(cfeats), deg, settings["include_treatment"])
    if settings["plug_in_truth"]:
        return NuisanceRecipe("truth", treat, cens, truth=_truth_hazards(settings))
    return NuisanceRecipe(settings["nuisance"], treat, cens, HalConfig(tuning=settings["tuning"]),
                          settings["per_stage"])


def regime_from(settings: dict, panel) -> Regime:
    if settings["regime"] == "always":
        return Regime(np.array([1.0]), (INTERCEPT,))
    if settings["regime"] == "never":
        return Regime(np.array([-1.0]), (INTERCEPT,))
    covs = tuple(settings["regime_covariates"])
    for c in covs:
        if c != INTERCEPT and c not in panel.covariate_names:
            raise ConfigError(f"unknown regime covariate {c!r}")
    if settings["eta"] is None:
        raise ConfigError("a custom regime needs --eta")
    try:
        return Regime(np.asarray(settings["eta"], dtype=float), covs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _factors(panel, recipe, settings):
    if settings["cross_fit"] and settings["cross_fit"] > 1:
        factors, fitted = cross_fit_factors(panel, recipe, settings["cross_fit"], settings["seed"])
        return factors, {"cross_fit_folds": settings["cross_fit"],
                         "folds": [{"treatment": f.treatment.records, "censoring": f.censoring.records}
                                   for f in fitted]}
    fits = fit_hazards(panel, recipe, seed=settings["seed"])
    return cumulative_factors(panel, fits), {"treatment": fits.treatment.records,
                                             "censoring": fits.censoring.records,
                                             "treatment_kind": fits.treatment.kind,
                                             "censoring_kind": fits.censoring.kind}


def _lu(settings, panel) -> float:
    if settings["l_u"] is not None:
        if not settings["l_u"] > 0:
            raise ConfigError("--lu must be positive")
        return float(settings["l_u"])
    try:
        return default_LU(panel)
    except ValueError as exc:
        raise ConfigError(f"{exc}; pass --lu") from None


def _write_curve(path: Path, curve, isotonic: bool) -> None:
    S = curve.S
    keep = np.diff(curve.grid) > 0
    if isotonic:
        S = S.copy()
        S[keep] = isotonic_regression(S[keep], weights=curve.weight_sum[keep], increasing=False).x
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "S", "effective_n"])
        for x, s, e in zip(curve.grid[:-1][keep], S[keep], curve.weight_sum[keep]):
            w.writerow([repr(float(x)), repr(float(s)), repr(float(e))])


def cmd_estimate(settings: dict, threads: int) -> int:
    out = _out_dir(settings)
    panel = load_validated(settings, out)
    recipe = nuisance_recipe(settings, panel)
    regime = regime_from(settings, panel)
    L_U = _lu(settings, panel)
    factors, records = _factors(panel, recipe, settings)
    ev = RqalEvaluator(panel, factors, L_U)
    est = ev.estimate(regime, settings["mode"], settings["nu"], recipe.kind, settings["level"])
    if est.note:
        print(f"note: {est.note}")
    result = {"estimate": est.to_dict(), "nuisance": records}
    if settings["bootstrap"]:
        def pipeline(p, seed):
            f, _ = _factors(p, recipe, {**settings, "seed": seed})
            return RqalEvaluator(p, f, L_U).value(regime, est.mode, est.nu)
        boot = bootstrap_ci(panel, pipeline, settings["bootstrap"], settings["seed"], settings["level"], threads)
        result["bootstrap"] = {"ci": list(boot.ci), "reps": boot.reps, "failures": boot.failures}
    files = [out / "results.json", out / "curve.csv"]
    dump_json(result, files[0])
    _write_curve(files[1], ev.curve(regime, est.mode, est.nu, with_ic=False), settings["isotonic"])
    write_manifest(out, "estimate", settings, files)
    print(f"RQAL {est.value:.2f} (SE {est.se:.2f}), {100 * settings['level']:.0f}% CI "
          f"[{est.ci[0]:.2f}, {est.ci[1]:.2f}], L_U {L_U:.2f}, mode {est.mode}")
    return 0


def cmd_optimize(settings: dict, threads: int) -> int:
    out = _out_dir(settings)
    panel = load_validated(settings, out)
    recipe = nuisance_recipe(settings, panel)
    covs = tuple(settings["regime_covariates"])
    for c in covs:
        if c != INTERCEPT and c not in panel.covariate_names:
            raise ConfigError(f"unknown regime covariate {c!r}")
    L_U = _lu(settings, panel)
    factors, records = _factors(panel, recipe, settings)
    ev = RqalEvaluator(panel, factors, L_U)
    try:
        search = SearchConfig(population=settings["population"], generations=settings["generations"],
                              mutation_scale=settings["mutation_scale"], seed=settings["seed"],
                              polish=settings["polish"], objective=settings["objective"], mode=settings["mode"],
                              x=settings["x"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if search.objective == "survival":
        from .optimize import survival_objective
        objective = survival_objective(panel, factors, search.x, search.mode, settings["nu"])
    else:
        objective = rqal_objective(ev, search.mode, settings["nu"])
    res = maximize(objective, covs, search)
    est = ev.estimate(res.regime, search.mode, settings["nu"], recipe.kind, settings["level"])
    files = [out / "eta.json", out / "trace.csv"]
    dump_json({"regime": res.regime.to_dict(), "objective": search.objective, "objective_value": res.value,
               "estimate": est.to_dict(), "evaluations": res.evaluations, "polished": res.polished,
               "nuisance": records}, files[0])
    res.write_trace(files[1])
    write_manifest(out, "optimize", settings, files)
    eta = ", ".join(f"{v:.3f}" for v in res.regime.eta)
    print(f"eta ({eta}) over {', '.join(covs)}: RQAL {est.value:.2f} (SE {est.se:.2f})")
    return 0


def _parse_method(spec: str) -> tuple[str, str]:
    kind, _, mode = spec.partition(":")
    mode = mode or IPW
    if kind not in ("logistic", "hal", "truth") or mode not in (IPW, BC):
        raise ConfigError(f"method {spec!r} must look like logistic:ipw, hal:bc or truth:ipw")
    return kind, mode


def cmd_mc_study(settings: dict, threads: int) -> int:
    out = _out_dir(settings)
    if settings["reps"] < 1:
        raise ConfigError("--reps must be >= 1")
    search = SearchConfig(population=settings["population"], generations=settings["generations"])
    if settings["preset"]:
        cfg, methods = preset(settings["preset"], settings["seed"], search)
    else:
        cfg = sim_config(settings)
        methods = [standard_method(cfg, *_parse_method(m), search) for m in settings["methods"]]
    report = mc_study(cfg, methods, settings["reps"], workers=threads, checkpoint_dir=settings["checkpoint_dir"],
                      oracle_mc_n=settings["oracle_mc_n"], eval_mc_n=settings["eval_mc_n"])
    files = [out / "report.csv", out / "report.json"]
    report.write_csv(files[0])
    dump_json(report.to_dict(detail=settings["detail"]), files[1])
    write_manifest(out, "mc-study", settings, files)
    print(f"target R(eta_opt) {report.target:.2f} (MC SE {report.target_mc_se:.3f}), {settings['reps']} replicates")
    print(report.table())
    return 0


def cmd_one_stage(settings: dict, threads: int) -> int:
    out = _out_dir(settings)
    try:
        cfg = OneStageConfig(n=settings["n"], seed=settings["seed"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if settings["reps"] < 1:
        raise ConfigError("--reps must be >= 1")
    report = one_stage_study(cfg, settings["reps"], workers=threads)
    files = [out / "one_stage.json"]
    dump_json(report.to_dict(), files[0])
    write_manifest(out, "one-stage-study", settings, files)
    print(report.table())
    return 0


COMMANDS = {"simulate": cmd_simulate, "validate": cmd_validate, "estimate": cmd_estimate,
            "optimize": cmd_optimize, "mc-study": cmd_mc_study, "one-stage-study": cmd_one_stage}


# ---------------------------------------------------------------------------
# parser


def _add_data_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--panel", help="long-format panel CSV")
    p.add_argument("--subjects", help="per-subject CSV")
    p.add_argument("--out", help="output directory")
    p.add_argument("--nuisance", choices=["logistic", "hal"], help="hazard model (default logistic)")
    p.add_argument("--features", type=_csv_list, help="hazard covariates, comma separated (default: all)")
    p.add_argument("--censoring-features", dest="censoring_features", type=_csv_list)
    p.add_argument("--stage-degree", dest="stage_degree", type=int, help="polynomial degree of stage terms")
    p.add_argument("--include-treatment", dest="include_treatment", action="store_const", const=True,
                   help="add current treatment to the censoring model")
    p.add_argument("--per-stage", dest="per_stage", action="store_const", const=True)
    p.add_argument("--tuning", choices=["undersmooth", "cv"], help="HAL penalty choice")
    p.add_argument("--mode", choices=[IPW, BC], help="hard (ipw) or smoothed (bc) compliance")
    p.add_argument("--nu", type=_nu, help="bandwidth for bc mode: 'auto' or a positive number")
    p.add_argument("--lu", dest="l_u", type=float, help="upper limit of the restricted mean")
    p.add_argument("--level", type=float, help="confidence level")
    p.add_argument("--cross-fit", dest="cross_fit", type=int, help="number of cross-fitting folds")
    p.add_argument("--seed", type=int)
    p.add_argument("--plug-in-truth", dest="plug_in_truth", action="store_const", const=True,
                   help="use the simulation's known hazards (needs its manifest)")
    p.add_argument("--sim-manifest", dest="sim_manifest", help="manifest of the simulate run")
    p.add_argument("--regime-covariates", dest="regime_covariates", type=_csv_list)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qalopt", description="Optimal treatment-length strategies "
                                     "for restricted quality-adjusted lifetime.")
    parser.add_argument("--version", action="version", version=f"qalopt {__version__}")
    parser.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    parser.add_argument("--threads", type=int, default=1, help="maximum worker processes")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON settings file or a previous run's manifest")
        return p

    p = command("simulate", "generate a simulated panel")
    p.add_argument("--scenario", type=int)
    p.add_argument("--k", type=int, help="number of landmarks after baseline")
    p.add_argument("--g", type=int, help="gap between landmarks (default 10, or 4 when k=25)")
    p.add_argument("--n", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--lu", dest="l_u", type=float)
    p.add_argument("--no-censoring", dest="censoring", action="store_const", const=False)
    p.add_argument("--observed-map", dest="observed_map", choices=["none", "shifted_squares", "exp_square"])
    p.add_argument("--out")

    p = command("validate", "check a panel against its structural invariants")
    p.add_argument("--panel")
    p.add_argument("--subjects")
    p.add_argument("--report", help="where to write the validation report")

    p = command("estimate", "estimate the survival curve and RQAL of a regime")
    _add_data_args(p)
    p.add_argument("--eta", type=_float_list, help="regime coefficients, comma separated")
    p.add_argument("--regime", choices=["custom", "always", "never"])
    p.add_argument("--isotonic", action="store_const", const=True, help="monotone projection of the curve CSV")
    p.add_argument("--bootstrap", type=int, help="number of bootstrap replicates for a percentile CI")

    p = command("optimize", "search for the regime maximizing estimated RQAL")
    _add_data_args(p)
    p.add_argument("--population", type=int)
    p.add_argument("--generations", type=int)
    p.add_argument("--mutation-scale", dest="mutation_scale", type=float)
    p.add_argument("--no-polish", dest="polish", action="store_const", const=False)
    p.add_argument("--objective", choices=["rqal", "survival"])
    p.add_argument("--x", type=float, help="target quality-adjusted time for the survival objective")

    p = command("mc-study", "run a replicate study of optimal-regime estimation")
    p.add_argument("--preset", help=f"one of {', '.join(sorted(PRESETS))}")
    p.add_argument("--scenario", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--g", type=int)
    p.add_argument("--n", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--reps", type=int)
    p.add_argument("--methods", type=_csv_list, help="e.g. logistic:ipw,hal:bc")
    p.add_argument("--population", type=int)
    p.add_argument("--generations", type=int)
    p.add_argument("--checkpoint-dir", dest="checkpoint_dir")
    p.add_argument("--oracle-mc-n", dest="oracle_mc_n", type=int)
    p.add_argument("--eval-mc-n", dest="eval_mc_n", type=int)
    p.add_argument("--detail", action="store_const", const=True, help="per-replicate records in the JSON")
    p.add_argument("--out")

    p = command("one-stage-study", "compare propensity models in the single-decision study")
    p.add_argument("--n", type=int)
    p.add_argument("--reps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return CONFIG_ERROR
    try:
        settings = resolve_settings(args.command, args)
        return COMMANDS[args.command](settings, args.threads)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return CONFIG_ERROR
    except KeyError as exc:
        print(f"error: {exc.args[0] if exc.args else exc}", file=sys.stderr)
        return CONFIG_ERROR
    except DataError as exc:
        print(f"error: panel failed validation\n{exc}", file=sys.stderr)
        if exc.report:
            print(f"report written to {exc.report}", file=sys.stderr)
        return DATA_ERROR
    except (NoEffectiveObservations, SearchFailed, StudyAborted, ArithmeticError, np.linalg.LinAlgError,
            ValueError, RuntimeError) as exc:
        print(f"error: numeric failure: {exc}", file=sys.stderr)
        return NUMERIC_ERROR
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return CONFIG_ERROR


if __name__ == "__main__":
    sys.exit(main())
