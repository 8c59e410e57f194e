"""Batch command line: simulate, fit, select, bootstrap and study.

Settings come from built-in defaults, then an optional INI config file
(sections ``[common]`` and ``[<command>]``), then ``--key value`` flags.
The merged configuration is written into every output.

Exit codes: 0 success, 2 configuration or usage error, 3 invalid data,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import logging
import sys
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import __version__, bspline, model, simlab
from .data import read_csv, write_csv
from .errors import ConfigurationError, DataValidationError, HivFitError
from .model import PARAM_NAMES
from .mssb import run_mssb
from .smoothing import KernelSpec
from .snls import (
    FitResult,
    SNLSSettings,
    bootstrap_ci,
    default_optimizer,
    fit_combined,
    fit_snls,
    fitted_trajectory,
    select_model,
)

log = logging.getLogger("hivfit")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
TRAJ_GRID_SIZE = 200


@dataclass(frozen=True)
class Option:
    type: Callable[[str], Any]
    default: Any
    help: str
    multi: bool = False


def _bool(text: str) -> bool:
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigurationError(f"not a boolean: {text!r}")


def _opt_float(text):
    return None if text in (None, "", "none", "None") else float(text)


COMMON = {
    "seed": Option(int, 0, "master random seed"),
    "output": Option(str, None, "output path (simulate) or output prefix"),
    "step": Option(float, model.DEFAULT_STEP, "RK4 step in days"),
    "log_level": Option(str, "warning", "logging level"),
}

_DATA = {
    "input": Option(str, None, "CSV with header t,cd4,viral_load"),
    "t_scale": Option(str, "raw", "fitting scale for CD4: raw or log10"),
    "v_scale": Option(str, "log10", "fitting scale for viral load: raw or log10"),
    "t0": Option(_opt_float, None, "time of the initial state (default: first observation)"),
    "fix": Option(str, [], "hold a parameter fixed, name=value (repeatable)", multi=True),
    "kernel": Option(str, "epanechnikov", "smoothing kernel"),
    "bandwidth": Option(_opt_float, None, "smoothing bandwidth in days (default: cross-validated)"),
}

_OPTIM = {
    "de_generations": Option(int, 400, "differential-evolution generations"),
    "epochs": Option(int, 4, "hybrid epochs"),
    "refine_budget": Option(int, 2000, "evaluations per local refinement"),
    "refine_starts": Option(int, 8, "local refinements per epoch"),
    "warm_policy": Option(str, "seed-only", "how MSSB results bound SNLS: seed-only, stage2 or all"),
    "range_factor": Option(float, 5.0, "MSSB search-range factor"),
}

COMMANDS: dict[str, dict[str, Option]] = {
    "simulate": {
        "scenario": Option(str, "n200-20-100", "scenario key"),
        "n": Option(int, None, "override the number of observations"),
        "sigma1_sq": Option(float, None, "override the CD4 noise variance"),
        "sigma2_sq": Option(float, None, "override the viral-load noise variance"),
        "run": Option(int, 0, "run index within the scenario"),
        "eta_coeffs": Option(str, None, "comma-separated spline coefficients for a spline truth"),
        "order": Option(int, 2, "spline order of a spline truth"),
        "control_points": Option(int, 3, "control points of a spline truth"),
        "spacing": Option(str, "linear", "control-point spacing of a spline truth"),
    },
    "fit": {
        **_DATA,
        "method": Option(str, "combined", "mssb, snls or combined"),
        "order": Option(int, 2, "spline order"),
        "control_points": Option(int, 3, "number of control points"),
        "spacing": Option(str, "log", "control-point spacing: log or linear"),
        **_OPTIM,
    },
    "select": {
        **_DATA,
        "grid": Option(str, "2:3-5,3:3-10,4:3-10", "candidate grid as order:controls items"),
        "spacing": Option(str, "log", "control-point spacing: log or linear"),
        **_OPTIM,
    },
    "bootstrap": {
        "fit": Option(str, None, "fit JSON written by the fit or select command"),
        "input": Option(str, None, "data CSV (default: the one recorded in the fit file)"),
        "replicates": Option(int, 100, "bootstrap replicates B"),
        "refit": Option(str, "local", "replicate refit: local or hybrid"),
        "refine_budget": Option(int, 3000, "evaluations per replicate refinement"),
    },
    "study": {
        "scenario": Option(str, "n200-20-100", "scenario key"),
        "runs": Option(int, 50, "Monte Carlo runs"),
        "methods": Option(str, "both", "mssb, snls or both"),
        "spacing": Option(str, "linear", "control-point spacing"),
        "fix_initial": Option(_bool, True, "hold the initial state at its true value"),
        **{k: v for k, v in _OPTIM.items() if k != "range_factor"},
    },
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hivfit", description="HIV dynamic-model estimation")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, opts in COMMANDS.items():
        p = sub.add_parser(name, help=f"{name} command")
        p.add_argument("--config", help="INI file with [common] and [%s] sections" % name)
        for key, opt in {**COMMON, **opts}.items():
            flag = "--" + key.replace("_", "-")
            if opt.multi:
                p.add_argument(flag, dest=key, action="append", default=argparse.SUPPRESS, help=opt.help)
            else:
                p.add_argument(flag, dest=key, default=argparse.SUPPRESS, help=f"{opt.help} (default: {opt.default})")
    return parser


def _convert(key: str, opt: Option, raw):
    try:
        if opt.multi:
            items = raw if isinstance(raw, list) else [x for x in str(raw).split(",") if x.strip()]
            return [str(x).strip() for x in items]
        return opt.type(raw) if raw is not None else None
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"--{key.replace('_', '-')}: invalid value {raw!r} ({exc})") from None


def merge_config(command: str, args: argparse.Namespace) -> dict[str, Any]:
    """Defaults, then the config file, then flags."""
    schema = {**COMMON, **COMMANDS[command]}
    cfg = {k: (list(o.default) if o.multi else o.default) for k, o in schema.items()}
    path = getattr(args, "config", None)
    if path:
        parser = configparser.ConfigParser()
        try:
            with open(path, encoding="utf-8") as fh:
                parser.read_file(fh)
        except (OSError, configparser.Error) as exc:
            raise ConfigurationError(f"--config: cannot read {path}: {exc}") from None
        for section in ("common", command):
            if not parser.has_section(section):
                continue
            for raw_key, value in parser.items(section):
                key = raw_key.replace("-", "_")
                if key not in schema:
                    raise ConfigurationError(f"config [{section}]: unknown key {raw_key!r}")
                cfg[key] = _convert(key, schema[key], value)
    for key, opt in schema.items():
        if hasattr(args, key):
            cfg[key] = _convert(key, opt, getattr(args, key))
    return cfg


def _require(cfg: dict, key: str) -> Any:
    if cfg.get(key) in (None, ""):
        raise ConfigurationError(f"missing required setting --{key.replace('_', '-')}")
    return cfg[key]


def parse_fixed(items) -> dict[str, float]:
    fixed = {}
    for item in items:
        name, sep, value = item.partition("=")
        if not sep:
            raise ConfigurationError(f"--fix expects name=value, got {item!r}")
        try:
            fixed[name.strip()] = float(value)
        except ValueError:
            raise ConfigurationError(f"--fix {name}: {value!r} is not a number") from None
    return fixed


def parse_grid(text: str) -> list[tuple[int, int]]:
    """``"2:3-5,3:4"`` -> ``[(2,3), (2,4), (2,5), (3,4)]``."""
    grid = []
    for item in (x.strip() for x in text.split(",")):
        if not item:
            continue
        try:
            order, _, span = item.partition(":")
            lo, _, hi = span.partition("-")
            for s in range(int(lo), int(hi or lo) + 1):
                grid.append((int(order), s))
        except ValueError:
            raise ConfigurationError(f"--grid: cannot parse {item!r}") from None
    if not grid:
        raise ConfigurationError("--grid: the candidate grid is empty")
    return grid


def snls_settings(cfg: dict) -> SNLSSettings:
    opt = default_optimizer(cfg["seed"])
    opt = replace(
        opt,
        de=replace(opt.de, max_generations=cfg["de_generations"]),
        epochs=cfg["epochs"],
        refine_budget=cfg["refine_budget"],
        refine_starts=cfg["refine_starts"],
    )
    return SNLSSettings(
        step=cfg["step"],
        optimizer=opt,
        warm_policy=cfg["warm_policy"],
        range_factor=cfg.get("range_factor", 5.0),
    )


def _kernel(cfg: dict) -> KernelSpec:
    return KernelSpec(cfg["kernel"], cfg["bandwidth"])


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, default=_json_default), encoding="utf-8")
    log.info("wrote %s", path)


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def _write_table(path: Path, header, rows, cfg: dict) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        fh.write("# config: " + json.dumps(cfg, sort_keys=True) + "\n")
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow(["" if v is None else (repr(float(v)) if isinstance(v, (float, np.floating)) else v) for v in row])
    log.info("wrote %s", path)


def _prefix(cfg: dict) -> Path:
    out = Path(_require(cfg, "output"))
    if out.parent and not out.parent.exists():
        raise ConfigurationError(f"--output: directory {out.parent} does not exist")
    return out


def _export_fit(prefix: Path, fit: FitResult, obs, cfg: dict, extra: dict | None = None) -> None:
    payload = {"config": cfg, **fit.to_dict(), **(extra or {})}
    _write_json(Path(f"{prefix}.fit.json"), payload)
    dense = np.linspace(fit.t0, obs.t_end, TRAJ_GRID_SIZE)
    times = np.union1d(np.union1d(obs.t_times, obs.v_times), dense)
    times = times[times >= fit.t0]
    sol = fitted_trajectory(fit, times)
    _write_table(Path(f"{prefix}.traj.csv"), ("t", "T_fit", "V_fit"), zip(times, sol.total, sol.v), cfg)
    _write_table(Path(f"{prefix}.eta.csv"), ("t", "eta"), zip(fit.eta_times, fit.eta_curve), cfg)


# -- commands -----------------------------------------------------------------


def cmd_simulate(cfg: dict) -> int:
    out = _prefix(cfg)
    overrides = {k: cfg[k] for k in ("n", "sigma1_sq", "sigma2_sq") if cfg[k] is not None}
    overrides["seed"] = cfg["seed"]
    if cfg["eta_coeffs"]:
        coeffs = tuple(float(x) for x in cfg["eta_coeffs"].split(","))
        overrides.update(
            eta_coeffs=coeffs, order_k=cfg["order"], n_control=cfg["control_points"], spacing=cfg["spacing"]
        )
    scenario = simlab.get_scenario(cfg["scenario"], **overrides)
    obs = simlab.generate_dataset(scenario, cfg["run"])
    write_csv(out, obs, comment="config: " + json.dumps(cfg, sort_keys=True))
    truth = simlab.true_trajectory(scenario)
    record = {
        "config": cfg,
        "scenario": scenario.to_dict(),
        "constants": dict(zip(PARAM_NAMES, scenario.truth)),
        "initial_state": dict(zip(("T_U0", "T_I0", "V0"), scenario.initial_state)),
        "t0": 0.0,
        "eta": (
            {"kind": "closed-form", "formula": "9e-5*(1-0.9*cos(pi*t/1000))"}
            if scenario.eta_coeffs is None
            else {"kind": "spline", "coeffs": list(scenario.eta_coeffs), "spline": scenario.spline_spec.to_dict()}
        ),
        "truth_columns": {"t": truth.times, "cd4": truth.total, "viral_load": truth.v},
    }
    _write_json(out.with_name(out.stem + ".truth.json"), record)
    return EXIT_OK


def _load(cfg: dict):
    path = Path(_require(cfg, "input"))
    if not path.exists():
        raise ConfigurationError(f"--input: file {path} not found")
    return read_csv(path, cfg["t_scale"], cfg["v_scale"])


def cmd_fit(cfg: dict) -> int:
    prefix = _prefix(cfg)
    obs = _load(cfg)
    method = cfg["method"]
    if method not in ("mssb", "snls", "combined"):
        raise ConfigurationError(f"--method must be mssb, snls or combined, got {method!r}")
    t0 = obs.t_start if cfg["t0"] is None else cfg["t0"]
    spec = bspline.make_spec(cfg["order"], cfg["control_points"], (t0, obs.t_end), cfg["spacing"])
    fixed = parse_fixed(cfg["fix"])
    if method == "mssb":
        mssb_fixed = {k: v for k, v in fixed.items() if k in ("delta", "c")}
        est = run_mssb(obs, spec, _kernel(cfg), fixed=mssb_fixed, range_factor=cfg["range_factor"], t0=t0)
        _export_mssb(prefix, est, obs, cfg, t0)
        return EXIT_OK
    settings = snls_settings(cfg)
    if method == "snls":
        fit = fit_snls(obs, spec, None, settings, fixed=fixed, t0=t0)
    else:
        _, fit = fit_combined(obs, spec, settings, fixed=fixed, t0=t0, kernel=_kernel(cfg))
    _export_fit(prefix, fit, obs, cfg)
    return EXIT_OK


def _export_mssb(prefix: Path, est, obs, cfg: dict, t0: float) -> None:
    payload = {"config": cfg, "method": "mssb", **est.to_dict()}
    payload["estimates"] = payload["constants"]
    for j, a in enumerate(est.eta_coeffs, start=1):
        payload["estimates"][f"a{j}"] = float(a)
    eta_t = np.linspace(obs.t_start, obs.t_end, TRAJ_GRID_SIZE)
    eta = est.eta(eta_t)
    traj_note = None
    if est.initial_state is not None and est.constants.is_positive():
        times = np.union1d(np.union1d(obs.t_times, obs.v_times), np.linspace(t0, obs.t_end, TRAJ_GRID_SIZE))
        times = times[times >= t0]
        try:
            sol = model.integrate(est.initial_state, est.constants, model.SplineEta(est.spline_spec, est.eta_coeffs), times, cfg["step"], t0=t0)
            _write_table(Path(f"{prefix}.traj.csv"), ("t", "T_fit", "V_fit"), zip(times, sol.total, sol.v), cfg)
        except HivFitError as exc:
            traj_note = f"trajectory not written: {exc}"
    else:
        traj_note = "trajectory not written: estimates not all positive"
    if traj_note:
        log.warning(traj_note)
        payload["trajectory_note"] = traj_note
    _write_json(Path(f"{prefix}.fit.json"), payload)
    _write_table(Path(f"{prefix}.eta.csv"), ("t", "eta"), zip(eta_t, eta), cfg)


def cmd_select(cfg: dict) -> int:
    prefix = _prefix(cfg)
    grid = parse_grid(cfg["grid"])
    obs = _load(cfg)
    result = select_model(
        obs,
        grid,
        None,
        snls_settings(cfg),
        spacing=cfg["spacing"],
        fixed=parse_fixed(cfg["fix"]),
        t0=cfg["t0"],
        kernel=_kernel(cfg),
    )
    best = result.best
    rows = []
    for c in result.candidates:
        if c.available:
            rows.append((c.model, c.order_k, c.n_control, c.aic, c.bic, c.aicc, ""))
        else:
            rows.append((c.model, c.order_k, c.n_control, "-", "-", "-", c.note))
    _write_table(
        Path(f"{prefix}.select.csv"),
        ("Model", "order", "control points", "AIC", "BIC", "AICc", "note"),
        rows,
        cfg,
    )
    _export_fit(prefix, best, obs, cfg, {"selected": {"order": best.spec.order_k, "control_points": best.spec.n_control}})
    return EXIT_OK


def cmd_bootstrap(cfg: dict) -> int:
    prefix = _prefix(cfg)
    fit_path = Path(_require(cfg, "fit"))
    if not fit_path.exists():
        raise ConfigurationError(f"--fit: file {fit_path} not found")
    try:
        payload = json.loads(fit_path.read_text(encoding="utf-8"))
        fit = FitResult.from_dict(payload)
    except (ValueError, KeyError, TypeError) as exc:
        raise ConfigurationError(f"--fit: {fit_path} is not a fit result ({exc})") from None
    fit_cfg = payload.get("config", {})
    data_path = cfg["input"] or fit_cfg.get("input")
    if not data_path:
        raise ConfigurationError("missing required setting --input")
    scales = fit.provenance.get("scales", {})
    obs_cfg = {"input": data_path, "t_scale": scales.get("cd4", "raw"), "v_scale": scales.get("viral_load", "log10")}
    obs = _load(obs_cfg)
    settings = SNLSSettings(step=cfg["step"], optimizer=default_optimizer(cfg["seed"]))
    boot = bootstrap_ci(
        obs, fit, cfg["replicates"], cfg["seed"], settings, refit=cfg["refit"], refine_budget=cfg["refine_budget"]
    )
    _write_json(Path(f"{prefix}.boot.json"), {"config": cfg, "fit_file": str(fit_path), **boot.to_dict()})
    _write_table(
        Path(f"{prefix}.eta.csv"),
        ("t", "eta", "lo95", "hi95"),
        zip(fit.eta_times, fit.eta_curve, boot.eta_lower, boot.eta_upper),
        cfg,
    )
    if boot.unreliable:
        log.warning("%d of %d replicates failed; intervals flagged unreliable", boot.dropped, boot.B)
    return EXIT_OK


def cmd_study(cfg: dict) -> int:
    prefix = _prefix(cfg)
    scenario = simlab.get_scenario(
        cfg["scenario"], runs=cfg["runs"], seed=cfg["seed"], spacing=cfg["spacing"], fix_initial=cfg["fix_initial"]
    )
    settings = snls_settings(cfg)
    report = simlab.run_study(
        scenario,
        cfg["methods"],
        settings,
        progress=lambda o: log.info("run %d done%s", o.run, f" ({o.errors})" if o.errors else ""),
    )
    rows = report.rows()
    _write_table(Path(f"{prefix}.are.csv"), list(rows[0]), (list(r.values()) for r in rows), cfg)
    _write_json(Path(f"{prefix}.are.json"), {"config": cfg, **report.to_dict()})
    return EXIT_OK


HANDLERS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "select": cmd_select,
    "bootstrap": cmd_bootstrap,
    "study": cmd_study,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse usage errors already exit with 2
        return int(exc.code or 0)
    try:
        cfg = merge_config(args.command, args)
        logging.basicConfig(
            level=getattr(logging, str(cfg["log_level"]).upper(), logging.WARNING),
            format="%(levelname)s %(name)s: %(message)s",
            stream=sys.stderr,
        )
        cfg = {"command": args.command, "version": __version__, **cfg}
        return HANDLERS[args.command](cfg)
    except DataValidationError as exc:
        print(f"hivfit: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ConfigurationError as exc:
        print(f"hivfit: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except HivFitError as exc:
        print(f"hivfit: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
