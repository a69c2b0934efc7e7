"""Command-line front end: ``spatial-mgiv {weights,estimate,impacts,simulate}``.

Parameters come from three layers, later ones winning: built-in defaults,
a TOML configuration file (``--config``, one table per subcommand plus an
optional ``[common]`` table) and command-line flags.  The resolved
parameters are embedded in every artifact.  A ``results.json``, ``report.csv``
or impacts CSV can itself be passed to ``--config`` to rerun it.

Exit codes: 0 success, 1 usage or configuration error, 2 data or numeric
error.  Logging goes to standard error; data goes only to named files.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from . import __version__
from .errors import ConfigError, SpatialMGIVError
from .estimators import estimate, resolve_instruments
from .factors import eigenvalue_ratio_count
from .impacts import HORIZONS, compute_impacts
from .montecarlo import MCConfig, run_experiment
from .panel_data import EMPIRICAL_MODEL, ModelSpec, load_panel_csv
from .parallel import resolve_workers
from .spatial_weights import (WeightMatrix, exp_decay, inverse_power, load_coords_csv, load_weights_csv,
                              rook_circular, row_normalize, save_weights_csv, validate)

logger = logging.getLogger("spatial_mgiv")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2

MODELS = {"basic": ModelSpec(), "durbin": EMPIRICAL_MODEL}

# name -> (default, accepted type); ``None`` defaults mark optional or required values
PARAMS = {
    "weights": {
        "recipe": (None, str), "out": (None, str), "n": (None, int), "coords": (None, str),
        "zeta": (0.02, float), "power": (2.0, float), "matrix": (None, str),
    },
    "estimate": {
        "panel": (None, str), "weights": (None, str), "unit_col": ("unit", str), "time_col": ("time", str),
        "y_col": ("y", str), "x_cols": (None, list), "r1": (2, int), "select_factors": (None, str),
        "instruments": ("z1", str), "model": ("basic", str), "ry": (None, int), "estimator": ("mgiv", str),
        "fixed_effects": (True, bool), "weighting": ("strict", str), "out": ("results.json", str),
        "dump_factors": (None, str),
    },
    "impacts": {
        "results": (None, str), "weights": (None, str), "horizon": ("long_run", str), "out": ("impacts.csv", str),
    },
    "simulate": {
        "case": ("III", str), "tau": (1, int), "piu": (0.75, float), "reps": (100, int), "seed": (0, int),
        "instruments": ("z1", str), "estimators": ("ivmg", str), "labeling": ("table", str),
        "out": ("report.csv", str),
    },
}
COMMON = {"threads": (None, int), "verbose": (0, int)}
REQUIRED = {"weights": ("recipe", "out"), "estimate": ("panel", "weights"), "impacts": ("results", "weights"),
            "simulate": ()}


class UsageError(Exception):
    """Bad command line; carries the usage text of the parser that failed."""

    def __init__(self, message: str, usage: str = ""):
        super().__init__(message)
        self.usage = usage


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message, self.format_usage())


@dataclass
class RunConfig:
    """Parameters read from a configuration file, keyed by subcommand (plus ``common``)."""

    sections: dict = field(default_factory=dict)
    source: str = ""
    version: str = __version__

    def section(self, name: str) -> dict:
        return dict(self.sections.get(name, {}))


def _check_type(section: str, key: str, value, kind):
    where = f"[{section}] {key}"
    if kind is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be true or false, got {value!r}")
    elif kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where} must be an integer, got {value!r}")
    elif kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} must be a number, got {value!r}")
        value = float(value)
    elif kind is list:
        if isinstance(value, str):
            value = _split(value)
        if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
            raise ConfigError(f"{where} must be a list of strings, got {value!r}")
    elif not isinstance(value, str):
        raise ConfigError(f"{where} must be a string, got {value!r}")
    return value


def _validate_sections(raw: dict, source: str) -> dict:
    if not isinstance(raw, dict):
        raise ConfigError(f"{source}: configuration must be a table of tables")
    out = {}
    for section, values in raw.items():
        schema = COMMON if section == "common" else PARAMS.get(section)
        if schema is None:
            raise ConfigError(f"{source}: unknown section [{section}]; expected one of "
                              f"{', '.join(['common', *PARAMS])}")
        if not isinstance(values, dict):
            raise ConfigError(f"{source}: [{section}] must be a table")
        clean = {}
        for key, value in values.items():
            if key not in schema:
                raise ConfigError(f"{source}: unknown key {key!r} in [{section}]")
            clean[key] = None if value is None else _check_type(section, key, value, schema[key][1])
        out[section] = clean
    return out


def _embedded_from_csv(path: Path) -> dict:
    for line in path.read_text(encoding="utf-8").splitlines():
        if not line.startswith("#"):
            break
        if line.startswith("# cli: "):
            return json.loads(line[len("# cli: "):])
    raise ConfigError(f"{path}: no embedded run configuration found")


def load_config(path) -> RunConfig:
    """Parse a TOML configuration file, or recover the configuration embedded in an artifact.

    Unknown sections and keys are errors so that typos do not pass silently.
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"configuration file not found: {path}")
    try:
        if path.suffix == ".json":
            embedded = json.loads(path.read_text(encoding="utf-8"))["cli"]
            raw = {embedded["subcommand"]: embedded["params"]}
        elif path.suffix == ".csv":
            embedded = _embedded_from_csv(path)
            raw = {embedded["subcommand"]: embedded["params"]}
        else:
            try:
                import tomllib
            except ModuleNotFoundError:  # Python < 3.11
                import tomli as tomllib
            with path.open("rb") as fh:
                raw = tomllib.load(fh)
    except ConfigError:
        raise
    except Exception as exc:
        raise ConfigError(f"cannot read configuration {path}: {exc}") from exc
    return RunConfig(_validate_sections(raw, str(path)), str(path))


def _split(text: str) -> list[str]:
    return [s.strip() for s in text.split(",") if s.strip()]


def build_parser() -> argparse.ArgumentParser:
    S = argparse.SUPPRESS
    common = _Parser(add_help=False)
    common.add_argument("--config", default=S, help="TOML configuration file (or a previous output artifact)")
    common.add_argument("--threads", type=int, default=S, help="worker cap (default: $SPATIAL_MGIV_THREADS or CPU count)")
    common.add_argument("-v", "--verbose", action="count", default=S, help="more logging on stderr (-v info, -vv debug)")

    parser = _Parser(prog="spatial-mgiv", description="Mean-group IV estimation for spatial dynamic panels.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, metavar="{weights,estimate,impacts,simulate}")
    sub.required = True

    p = sub.add_parser("weights", parents=[common], help="build a spatial weight matrix CSV",
                       argument_default=S)
    p.add_argument("--recipe", choices=["rook", "expdecay", "invpower", "file"])
    p.add_argument("--n", type=int, help="number of units (rook)")
    p.add_argument("--coords", help="CSV with id,lat,lon columns (expdecay, invpower)")
    p.add_argument("--zeta", type=float, help="distance decay per km (expdecay)")
    p.add_argument("--power", type=float, help="distance exponent (invpower)")
    p.add_argument("--matrix", help="existing N x N CSV to validate and row-normalise (file)")
    p.add_argument("--out", help="output CSV")

    p = sub.add_parser("estimate", parents=[common], help="estimate MGIV and/or 2SIV", argument_default=S)
    p.add_argument("--panel", help="long-format panel CSV")
    p.add_argument("--weights", help="N x N weight matrix CSV, rows in sorted unit-id order")
    p.add_argument("--unit-col", dest="unit_col")
    p.add_argument("--time-col", dest="time_col")
    p.add_argument("--y-col", dest="y_col")
    p.add_argument("--x-cols", dest="x_cols", type=_split, help="comma-separated covariates (default: all others)")
    p.add_argument("--r1", type=int, help="number of covariate factors")
    p.add_argument("--select-factors", dest="select_factors", metavar="er:RMAX",
                   help="choose r1 by the eigenvalue-ratio criterion with r_max = RMAX")
    p.add_argument("--instruments", help="z1, z2, empirical or a JSON spec file")
    p.add_argument("--model", choices=sorted(MODELS))
    p.add_argument("--ry", type=int, help="residual factors for 2SIV (default: r1)")
    p.add_argument("--estimator", choices=["mgiv", "2siv", "both"])
    p.add_argument("--weighting", choices=["strict", "pinv"],
                   help="per-unit weighting: inverse (strict) or generalized inverse (pinv) of Z'Z/T")
    p.add_argument("--no-fixed-effects", dest="fixed_effects", action="store_false")
    p.add_argument("--dump-factors", dest="dump_factors", help="write estimated factors to this CSV")
    p.add_argument("--out", help="output JSON (default results.json)")

    p = sub.add_parser("impacts", parents=[common], help="direct, indirect and total effects", argument_default=S)
    p.add_argument("--results", help="results.json from estimate")
    p.add_argument("--weights", help="the weight matrix used for estimation")
    p.add_argument("--horizon", choices=list(HORIZONS))
    p.add_argument("--out", help="output CSV (default impacts.csv)")

    p = sub.add_parser("simulate", parents=[common], help="Monte Carlo experiment", argument_default=S)
    p.add_argument("--case", choices=["I", "II", "III"])
    p.add_argument("--tau", type=int)
    p.add_argument("--piu", type=float)
    p.add_argument("--reps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--instruments", choices=["z1", "z2"])
    p.add_argument("--estimators", help="comma-separated subset of ivmg,2siv")
    p.add_argument("--labeling", choices=["table", "text"], help="case dimension labeling")
    p.add_argument("--out", help="output CSV (default report.csv)")
    return parser


def resolve(command: str, flags: dict, file_config: RunConfig | None) -> tuple[dict, dict]:
    """Merge defaults, file values and flags; returns ``(params, common)``."""
    params = {k: v[0] for k, v in PARAMS[command].items()}
    common = {k: v[0] for k, v in COMMON.items()}
    if file_config is not None:
        params.update(file_config.section(command))
        common.update(file_config.section("common"))
    for key, value in flags.items():
        if key in COMMON:
            common[key] = value
        elif key in params:
            params[key] = value
    return params, common


def _provenance(command: str, params: dict) -> dict:
    return {"subcommand": command, "params": params, "version": __version__}


def _cli_line(command: str, params: dict) -> str:
    return "cli: " + json.dumps(_provenance(command, params), sort_keys=True)


def _json_float(v):
    v = float(v)
    return v if np.isfinite(v) else None


# ---------------------------------------------------------------- subcommands

def cmd_weights(params: dict, workers: int) -> None:
    recipe = params["recipe"]
    if recipe == "rook":
        if params["n"] is None:
            raise UsageError("--n is required for the rook recipe")
        w = rook_circular(params["n"])
    elif recipe in ("expdecay", "invpower"):
        if params["coords"] is None:
            raise UsageError(f"--coords is required for the {recipe} recipe")
        ids, coords = load_coords_csv(params["coords"])
        order = sorted(range(len(ids)), key=lambda i: ids[i])
        coords = coords[order]
        w = exp_decay(coords, params["zeta"]) if recipe == "expdecay" else inverse_power(coords, params["power"])
    elif recipe == "file":
        if params["matrix"] is None:
            raise UsageError("--matrix is required for the file recipe")
        w = WeightMatrix(row_normalize(load_weights_csv(params["matrix"]).w), recipe="file", row_normalized=True)
    else:
        raise UsageError(f"unknown recipe {recipe!r}")
    diag = validate(w)
    logger.info("W: N=%d, ||W||_inf=%.6g, ||W||_1=%.6g", w.n, diag.row_norm, diag.col_norm)
    save_weights_csv(w, params["out"])


def _select_r(data, params: dict) -> int:
    spec = params["select_factors"]
    if not spec:
        return params["r1"]
    method, _, rmax = spec.partition(":")
    if method != "er" or not rmax.isdigit():
        raise UsageError(f"--select-factors expects er:RMAX, got {spec!r}")
    panels = data.x_window(0, demean=params["fixed_effects"]).transpose(2, 1, 0)
    r = eigenvalue_ratio_count(panels, int(rmax))
    logger.info("eigenvalue-ratio criterion selects r1 = %d", r)
    return r


def _coef_block(names, theta, se, t) -> dict:
    out = {}
    for name, b, s, z in zip(names, theta, se, t):
        p = 2 * stats.norm.sf(abs(z)) if np.isfinite(z) else 0.0
        out[name] = {"estimate": _json_float(b), "se": _json_float(s), "t": _json_float(z), "p": _json_float(p)}
    return out


def cmd_estimate(params: dict, workers: int) -> None:
    if params["estimator"] not in ("mgiv", "2siv", "both"):
        raise ConfigError(f"estimator must be mgiv, 2siv or both, got {params['estimator']!r}")
    if params["model"] not in MODELS:
        raise ConfigError(f"model must be one of {', '.join(sorted(MODELS))}, got {params['model']!r}")
    if params["weighting"] not in ("strict", "pinv"):
        raise ConfigError(f"weighting must be strict or pinv, got {params['weighting']!r}")
    spec = resolve_instruments(params["instruments"])
    model = MODELS[params["model"]]
    data = load_panel_csv(params["panel"], params["unit_col"], params["time_col"], params["y_col"],
                          params["x_cols"], presample=0)
    data = data.with_presample(max(spec.max_lag, model.max_lag))
    w = load_weights_csv(params["weights"])
    r = _select_r(data, params)
    r_y = params["ry"] if params["ry"] is not None else r
    res = estimate(data, w, r, spec, model, params["estimator"], r_y=r_y, fixed_effects=params["fixed_effects"],
                   workers=workers, unit_variances=True, pinv=params["weighting"] == "pinv")

    out = {
        "tool": "spatial-mgiv",
        "version": __version__,
        "cli": _provenance("estimate", params),
        "dimensions": {"N": data.n_units, "T": data.n_periods, "presample": data.presample, "k": data.k,
                       "n_instruments": res.n_instruments, "r1": r, "ry": r_y},
        "instruments": spec.to_dict(),
        "x_names": list(data.x_names),
        "coefficient_names": list(res.names),
    }
    if res.mg is not None:
        mg = res.mg
        out["mgiv"] = {"coefficients": _coef_block(res.names, mg.theta_mg, mg.se, mg.t_ratios),
                       "n_used": mg.n_used, "excluded": [[data.unit_ids[u], why] for u, why in mg.excluded]}
        table = []
        for u in mg.per_unit:
            row = {"unit": data.unit_ids[u.unit], "ok": u.ok}
            se = np.sqrt(np.clip(np.diag(u.variance), 0, None)) if u.variance is not None else np.full(len(res.names), np.nan)
            for name, b, s in zip(res.names, u.theta, se):
                row[name] = _json_float(b)
                row[f"se:{name}"] = _json_float(s)
            table.append(row)
        out["per_unit"] = table
    if res.pooled is not None:
        pr = res.pooled
        out["2siv"] = {"coefficients": _coef_block(res.names, pr.theta_tilde, pr.se, pr.t_ratios),
                       "j": {"stat": _json_float(pr.j_stat), "df": pr.j_df, "pvalue": _json_float(pr.j_pvalue)},
                       "ry": pr.r_y_used}
    Path(params["out"]).write_text(json.dumps(out, indent=2) + "\n", encoding="utf-8")

    if params["dump_factors"]:
        lines = ["lag,period," + ",".join(f"f{j + 1}" for j in range(r))]
        times = data.time_ids[data.presample:]
        for s, f in sorted(res.factors.items()):
            mat = np.asarray(getattr(f, "f_hat", f))
            for t_id, row in zip(times, mat):
                lines.append(f"{s},{t_id}," + ",".join(f"{v:.17g}" for v in row))
        Path(params["dump_factors"]).write_text("\n".join(lines) + "\n", encoding="utf-8")


def cmd_impacts(params: dict, workers: int) -> None:
    try:
        results = json.loads(Path(params["results"]).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise SpatialMGIVError(f"cannot read results {params['results']}: {exc}") from exc
    if "per_unit" not in results:
        raise SpatialMGIVError("results file has no per-unit table; estimate with --estimator mgiv or both")
    rows = [r for r in results["per_unit"] if r["ok"]]
    w = load_weights_csv(params["weights"])
    if len(results["per_unit"]) != w.n:
        raise SpatialMGIVError(f"results cover {len(results['per_unit'])} units but W is {w.n} x {w.n}")
    if len(rows) < len(results["per_unit"]):
        raise SpatialMGIVError("impacts need coefficients for every unit; some units were excluded")
    names = results["coefficient_names"]
    coefs = {name: np.array([r[name] for r in rows], dtype=float) for name in names}
    table = compute_impacts(coefs, results["x_names"], w, params["horizon"])
    table.to_csv(params["out"], header=(f"spatial-mgiv {__version__}", _cli_line("impacts", params)))


def cmd_simulate(params: dict, workers: int) -> None:
    cfg = MCConfig(case=params["case"], tau=params["tau"], pi_u=params["piu"], replications=params["reps"],
                   base_seed=params["seed"], instruments=params["instruments"],
                   estimators=tuple(_split(params["estimators"])), labeling=params["labeling"])
    report = run_experiment(cfg, workers)
    if report.n_failed:
        logger.warning("%d of %d replications failed", report.n_failed, cfg.replications)
    report.to_csv(params["out"], header=(_cli_line("simulate", params),))


COMMANDS = {"weights": cmd_weights, "estimate": cmd_estimate, "impacts": cmd_impacts, "simulate": cmd_simulate}


def _setup_logging(level: int) -> None:
    root = logging.getLogger("spatial_mgiv")
    root.handlers.clear()
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root.addHandler(handler)
    root.setLevel(logging.WARNING if level <= 0 else logging.INFO if level == 1 else logging.DEBUG)
    root.propagate = False


def main(argv=None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except UsageError as exc:
        sys.stderr.write(f"{exc.usage}spatial-mgiv: error: {exc}\n")
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)

    flags = vars(ns).copy()
    command = flags.pop("command")
    sub_parser = parser._subparsers._group_actions[0].choices[command]
    try:
        file_config = load_config(flags.pop("config")) if "config" in flags else None
        params, common = resolve(command, flags, file_config)
        _setup_logging(common["verbose"] or 0)
        missing = [k for k in REQUIRED[command] if params.get(k) in (None, "")]
        if missing:
            raise UsageError("missing required option(s): " + ", ".join("--" + k.replace("_", "-") for k in missing),
                             sub_parser.format_usage())
        workers = resolve_workers(common["threads"])
        COMMANDS[command](params, workers)
    except UsageError as exc:
        sys.stderr.write(f"{exc.usage or sub_parser.format_usage()}spatial-mgiv {command}: error: {exc}\n")
        return EXIT_USAGE
    except ConfigError as exc:
        sys.stderr.write(f"spatial-mgiv {command}: configuration error: {exc}\n")
        return EXIT_USAGE
    except (SpatialMGIVError, OSError, ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
        sys.stderr.write(f"spatial-mgiv {command}: error: {exc}\n")
        return EXIT_DATA
    except Exception as exc:  # never let a traceback escape the CLI
        logger.debug("unexpected failure", exc_info=True)
        sys.stderr.write(f"spatial-mgiv {command}: internal error: {type(exc).__name__}: {exc}\n")
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
