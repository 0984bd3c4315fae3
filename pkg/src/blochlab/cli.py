"""Command-line entry point: scenario configs in, CSV/JSON reports out.

Subcommands cover the pipeline pieces: cell solves, germ analytics, band
structure, operator-norm error studies, sharpness probes, Cauchy runs, and
regime classification.  Every invocation writes a manifest (config hash,
grids, wall time) next to its reports; identical config and inputs give
byte-identical CSV.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .cell import (solve_corrector, solve_second_corrector, voigt_reuss,
                   weighted_corrector)
from .coefficients import (CoefficientError, ModelValidationError,
                           OperatorModel, PeriodicMatrixFunction, SymbolB,
                           validate_model)
from .germ import (GermError, band_fit_expansion, fourth_order_operator,
                   germ_matrix, regime_classify, third_order_matrix,
                   diagonal_part)
from .lattice import GridSpecError, LatticeError, build_lattice, unit_directions
from .scenarios import Scenario, ScenarioError, builtin
from .study import (CauchyData, KGridSpec, StudyError, cauchy_solve,
                    leapfrog_oracle, operator_error_study, rate_fit,
                    sharpness_probe)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3

_FLOAT_FMT = "%.17g"


class ConfigError(ValueError):
    """Malformed scenario config; the message carries the JSON path."""


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return _FLOAT_FMT % value
    return str(value)


def write_csv(path: Path, columns, rows):
    lines = [",".join(columns)]
    for row in rows:
        lines.append(",".join(_fmt(row.get(c)) for c in columns))
    path.write_text("\n".join(lines) + "\n")


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialize {type(obj)}")


def write_json(path: Path, payload):
    path.write_text(json.dumps(payload, indent=2, sort_keys=True,
                               default=_json_default) + "\n")


# ---------------------------------------------------------------------------
# config parsing
# ---------------------------------------------------------------------------

def _expect(cond, path, msg):
    if not cond:
        raise ConfigError(f"{path}: {msg}")


def _parse_matrix(entry, path, shape=None):
    _expect(isinstance(entry, dict) and "real" in entry, path,
            "expected an object with 'real' (and optional 'imag') matrices")
    real = np.asarray(entry["real"], dtype=float)
    imag = np.asarray(entry.get("imag", np.zeros_like(real)), dtype=float)
    _expect(real.shape == imag.shape, path, "real/imag shapes differ")
    if shape is not None:
        _expect(real.shape == shape, path,
                f"expected shape {shape}, got {real.shape}")
    return real + 1j * imag


def _parse_field(entry, path, dimension) -> PeriodicMatrixFunction:
    _expect(isinstance(entry, dict), path, "expected an object")
    for key in ("rows", "cols", "coefficients"):
        _expect(key in entry, path, f"missing '{key}'")
    rows, cols = int(entry["rows"]), int(entry["cols"])
    coeffs = {}
    for i, item in enumerate(entry["coefficients"]):
        ipath = f"{path}.coefficients[{i}]"
        _expect(isinstance(item, dict) and "multi_index" in item, ipath,
                "expected an object with 'multi_index'")
        m = tuple(int(x) for x in item["multi_index"])
        _expect(len(m) == dimension, ipath,
                f"multi_index must have length {dimension}")
        coeffs[m] = _parse_matrix(item, ipath, (rows, cols))
    try:
        return PeriodicMatrixFunction(rows, cols, dimension, coeffs,
                                      hermitian=bool(entry.get("hermitian", False)))
    except CoefficientError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def parse_config(payload: dict, name: str = "config") -> Scenario:
    """Parse and validate a scenario config into a Scenario."""
    _expect(isinstance(payload, dict), name, "top level must be an object")
    _expect("lattice" in payload, f"{name}.lattice", "missing")
    basis = payload["lattice"].get("basis")
    _expect(basis is not None, f"{name}.lattice.basis", "missing")
    try:
        lattice = build_lattice(basis)
    except LatticeError as exc:
        raise ConfigError(f"{name}.lattice.basis: {exc}") from exc

    _expect("symbol" in payload, f"{name}.symbol", "missing")
    mats = [_parse_matrix(e, f"{name}.symbol[{i}]")
            for i, e in enumerate(payload["symbol"])]
    _expect(len(mats) == lattice.dimension, f"{name}.symbol",
            f"need {lattice.dimension} symbol blocks")
    try:
        symbol = SymbolB(mats)
    except CoefficientError as exc:
        raise ConfigError(f"{name}.symbol: {exc}") from exc

    _expect("g" in payload, f"{name}.g", "missing")
    g = _parse_field(payload["g"], f"{name}.g", lattice.dimension)
    q = None
    if "Q" in payload:
        q = _parse_field(payload["Q"], f"{name}.Q", lattice.dimension)
    try:
        model = OperatorModel(lattice, symbol, g, Q=q)
        validate_model(model)
    except (CoefficientError, ModelValidationError) as exc:
        raise ConfigError(f"{name}: {exc}") from exc

    kgrid = KGridSpec()
    if "kgrid" in payload:
        kg = payload["kgrid"]
        _expect(isinstance(kg, dict), f"{name}.kgrid", "expected an object")
        known = {"per_axis", "radial_per_direction", "directions",
                 "radial_depth", "bundle_points", "bundle_span"}
        for key in kg:
            _expect(key in known, f"{name}.kgrid.{key}", "unknown grid field")
        kwargs = dict(kg)
        if "bundle_span" in kwargs:
            kwargs["bundle_span"] = tuple(kwargs["bundle_span"])
        kgrid = KGridSpec(**kwargs)

    cauchy = None
    if "cauchy" in payload:
        cpath = f"{name}.cauchy"
        cc = payload["cauchy"]
        _expect(isinstance(cc, dict), cpath, "expected an object")
        def coeff_map(key):
            if key not in cc:
                return None
            out = {}
            for i, item in enumerate(cc[key]):
                ip = f"{cpath}.{key}[{i}]"
                _expect("multi_index" in item and "value" in item, ip,
                        "need 'multi_index' and 'value'")
                m = tuple(int(x) for x in item["multi_index"])
                out[m] = [complex(v[0], v[1]) if isinstance(v, (list, tuple))
                          else complex(v) for v in np.atleast_1d(item["value"])]
            return out
        cauchy = CauchyData(phi=coeff_map("phi"), psi=coeff_map("psi"),
                            rho=coeff_map("rho"))

    cutoff = int(payload.get("cutoff", max(8, 2 * g.bandwidth() + 4)))
    return Scenario(
        name=str(payload.get("name", name)),
        model=model,
        expected_regime=str(payload.get("expected_regime", "")),
        cutoff=cutoff,
        band_cutoff=int(payload.get("band_cutoff", cutoff)),
        eps_ladder=[float(e) for e in payload.get("eps", [2.0 ** (-j) for j in range(4, 9)])],
        taus=[float(t) for t in payload.get("taus", [1.0])],
        ss=[float(s) for s in payload.get("ss", [1.0])],
        kgrid=kgrid,
        theta_count=int(payload.get("theta_count",
                                    2 if lattice.dimension == 1 else 16)),
        cauchy=cauchy,
        cauchy_eps=[float(e) for e in payload.get("cauchy_eps", [])],
    )


def load_scenario(args) -> tuple[Scenario, dict]:
    """Scenario plus the exact payload that was hashed into the manifest."""
    if args.builtin:
        scenario = builtin(args.builtin)
        payload = scenario.to_config()
    else:
        path = Path(args.scenario)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"{path}: cannot read config ({exc})") from exc
        try:
            payload = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(
                f"{path}:{exc.lineno}:{exc.colno}: invalid JSON ({exc.msg})") from exc
        scenario = parse_config(payload, name=str(path))
    overrides = {
        "cutoff": args.cutoff, "eps": args.eps, "taus": args.tau, "ss": args.s,
    }
    if args.cutoff is not None:
        scenario.cutoff = args.cutoff
        scenario.band_cutoff = args.cutoff
    if args.eps is not None:
        scenario.eps_ladder = args.eps
    if args.tau is not None:
        scenario.taus = args.tau
    if args.s is not None:
        scenario.ss = args.s
    if args.kgrid is not None:
        scenario.kgrid = KGridSpec(per_axis=args.kgrid[0],
                                   radial_per_direction=args.kgrid[1])
    payload = dict(payload)
    payload["_overrides"] = {k: v for k, v in overrides.items() if v is not None}
    return scenario, payload


def _manifest(out: Path, payload: dict, started: float, extra: dict):
    canonical = json.dumps(payload, sort_keys=True, default=_json_default)
    manifest = {
        "config_sha256": hashlib.sha256(canonical.encode()).hexdigest(),
        "wall_time_s": time.time() - started,
        "version": __version__,
        **extra,
    }
    write_json(out / "manifest.json", manifest)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_cell(scenario: Scenario, args, out: Path) -> dict:
    cell = solve_corrector(scenario.model, scenario.cutoff)
    g_mean, g_harm, margins = voigt_reuss(scenario.model, cell)
    payload = cell.to_dict()
    payload.update(margins)
    write_json(out / "cell.json", payload)
    return {"cutoff": scenario.cutoff}


def cmd_germ(scenario: Scenario, args, out: Path) -> dict:
    model = scenario.model
    cell = solve_corrector(model, scenario.cutoff)
    thetas = unit_directions(model.lattice.dimension,
                             args.thetas or scenario.theta_count)
    q_mean = model.q_mean() if model.weighted else None
    rows = []
    for theta in thetas:
        fit = band_fit_expansion(model, cell, theta,
                                 cutoff=scenario.band_cutoff,
                                 weighted=model.weighted)
        germ = germ_matrix(cell, model, theta, q_mean=q_mean)
        row = fit.to_row()
        row["gamma_formula"] = [float(x) for x in germ.gamma]
        rows.append(row)
    write_json(out / "germ.json", rows)
    csv_rows = [{"theta": ";".join(_FLOAT_FMT % x for x in r["theta"]),
                 "gamma": ";".join(_FLOAT_FMT % x for x in r["gamma"]),
                 "mu": ";".join(_FLOAT_FMT % x for x in r["mu"]),
                 "nu": ";".join(_FLOAT_FMT % x for x in r["nu"])}
                for r in rows]
    write_csv(out / "germ.csv", ["theta", "gamma", "mu", "nu"], csv_rows)
    return {"thetas": len(thetas)}


def cmd_bands(scenario: Scenario, args, out: Path) -> dict:
    from .fiber import lowest_bands

    model = scenario.model
    rep = model.require_validation()
    thetas = unit_directions(model.lattice.dimension,
                             args.thetas or scenario.theta_count)
    count = args.points or 48
    ts = np.linspace(model.lattice.r0 / count, model.lattice.r0, count)
    rows = []
    for theta in thetas:
        for t in ts:
            vals, _ = lowest_bands(model, t * theta, scenario.cutoff,
                                   model.symbol.n, weighted=model.weighted)
            row = {"theta": ";".join(_FLOAT_FMT % x for x in theta),
                   "t": float(t)}
            for j in range(model.symbol.n):
                row[f"E{j + 1}"] = float(vals[j])
            rows.append(row)
    cols = ["theta", "t"] + [f"E{j + 1}" for j in range(model.symbol.n)]
    write_csv(out / "bands.csv", cols, rows)
    return {"points": len(rows), "t0": rep.t0}


def _germs_for_study(scenario: Scenario, cell) -> dict:
    germs = {}
    for theta in scenario.directions():
        fit = band_fit_expansion(scenario.model, cell, theta,
                                 cutoff=scenario.band_cutoff,
                                 weighted=scenario.model.weighted)
        germs[tuple(float(x) for x in theta)] = fit
    return germs


def cmd_error_study(scenario: Scenario, args, out: Path) -> dict:
    model = scenario.model
    cell = solve_corrector(model, scenario.cutoff)
    germs = _germs_for_study(scenario, cell)
    regime = regime_classify(model, cell).regime
    report = operator_error_study(
        model, cell, scenario.eps_ladder, scenario.taus, scenario.ss,
        args.variant, kgrid=scenario.kgrid, cutoff=scenario.cutoff,
        germs=germs, threads=args.threads, scenario=scenario.name,
        regime=regime)
    rows = report.rows()
    for row in rows:
        row["kmax_at"] = ";".join(_FLOAT_FMT % x for x in row["kmax_at"])
    write_csv(out / "error_study.csv",
              ["scenario", "variant", "eps", "tau", "s", "error", "kmax_at",
               "slope", "r2"], rows)
    write_json(out / "error_study.json", {
        "scenario": scenario.name, "variant": args.variant,
        "regime": regime, "grid": report.grid, "cutoff": report.cutoff,
        "slopes": {f"tau={t},s={s}": None if f is None else
                   {"slope": f.slope, "r2": f.r_squared, "reliable": f.reliable}
                   for (t, s), f in report.slopes.items()},
    })
    return {"variant": args.variant, "cells": len(rows), "regime": regime}


def cmd_sharpness(scenario: Scenario, args, out: Path) -> dict:
    model = scenario.model
    cell = solve_corrector(model, scenario.cutoff)
    theta = unit_directions(model.lattice.dimension, 2)[0]
    fit = band_fit_expansion(model, cell, theta, cutoff=scenario.band_cutoff)
    eps = args.eps or scenario.eps_ladder
    trace = sharpness_probe(model, cell, fit, args.branch, theta,
                            args.tau[0] if args.tau else 1.0,
                            eps, args.order, args.s[0] if args.s else 1.0,
                            cutoff=scenario.cutoff)
    rows = [{"eps": float(e), "t": float(t), "value": float(v)}
            for e, t, v in zip(trace.eps, trace.t_of_eps, trace.values)]
    write_csv(out / "sharpness.csv", ["eps", "t", "value"], rows)
    write_json(out / "sharpness.json", {
        "order": trace.order, "s": trace.s, "tau": trace.tau,
        "branch": trace.branch, "ratio": trace.ratio,
    })
    return {"ratio": trace.ratio}


def cmd_cauchy(scenario: Scenario, args, out: Path) -> dict:
    model = scenario.model
    cell = solve_corrector(model, scenario.cutoff)
    data = scenario.cauchy
    if data is None:
        raise ConfigError("scenario has no Cauchy data preset")
    eps_list = args.eps or scenario.cauchy_eps or [1 / 8, 1 / 16, 1 / 32]
    taus = args.tau or [0.25, 0.5, 0.75, 1.0]
    rows = []
    series = {}
    for eps in eps_list:
        M = round(1.0 / eps)
        res = cauchy_solve(model, cell, eps, data, taus,
                           box_cutoff=max(8 * M, 64))
        for name, values in res.norms.items():
            val = float(np.max(values))
            rows.append({"eps": eps, "norm": name, "value": val,
                         "energy_drift": res.energy_drift})
            series.setdefault(name, []).append((eps, val))
    fits = {}
    for name, pairs in series.items():
        try:
            fit = rate_fit(pairs)
            fits[name] = {"slope": fit.slope, "r2": fit.r_squared}
        except StudyError:
            fits[name] = None
    write_csv(out / "cauchy.csv", ["eps", "norm", "value", "energy_drift"], rows)
    write_json(out / "cauchy.json", fits)
    return {"eps_count": len(eps_list)}


def cmd_regimes(scenario: Scenario, args, out: Path) -> dict:
    model = scenario.model
    cell = solve_corrector(model, scenario.cutoff)
    second = solve_second_corrector(model, cell)
    wc = weighted_corrector(model, cell) if model.weighted else None
    report = regime_classify(model, cell, second=second, weighted=wc)
    payload = report.to_dict()
    payload["expected_regime"] = scenario.expected_regime
    write_json(out / "regimes.json", payload)
    return payload


def cmd_builtin(scenario: Scenario, args, out: Path) -> dict:
    write_json(out / f"{scenario.name}.json", scenario.to_config())
    return {"name": scenario.name}


def run_check(scenario: Scenario, out: Path) -> int:
    """Per-scenario acceptance-style property checks; one line each."""
    failures = 0

    def check(label, ok):
        nonlocal failures
        print(f"[{'PASS' if ok else 'FAIL'}] {scenario.name}: {label}")
        if not ok:
            failures += 1

    model = scenario.model
    cell = solve_corrector(model, scenario.cutoff)
    _, _, margins = voigt_reuss(model, cell)
    check("solver residual < 1e-12", cell.residual_norm < 1e-12)
    check("bracketing upper margin >= -1e-10", margins["upper_margin"] >= -1e-10)
    check("bracketing lower margin >= -1e-10", margins["lower_margin"] >= -1e-10)
    reg = regime_classify(model, cell)
    check(f"regime matches expected ({scenario.expected_regime})",
          reg.regime == scenario.expected_regime)
    q_mean = model.q_mean() if model.weighted else None
    worst = 0.0
    for theta in scenario.directions():
        fit = band_fit_expansion(model, cell, theta,
                                 cutoff=scenario.band_cutoff,
                                 weighted=model.weighted)
        germ = germ_matrix(cell, model, theta, q_mean=q_mean)
        worst = max(worst, float(np.max(np.abs(fit.gamma - germ.gamma)
                                        / germ.gamma)))
    check(f"band-fit gamma matches germ to 1e-6 (worst {worst:.2e})",
          worst <= 1e-6)
    return failures


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="blochlab",
        description="numerical laboratory for periodic homogenization of "
                    "hyperbolic systems")
    sub = parser.add_subparsers(dest="command", required=True)
    commands = {
        "cell": "solve the cell problem and report effective matrices",
        "germ": "direction-resolved threshold coefficients (two routes)",
        "bands": "band values along radial directions",
        "error-study": "sup-over-k operator error rates",
        "sharpness": "critical-scaling sharpness probe",
        "cauchy": "torus Cauchy problems with corrector comparisons",
        "regimes": "vanishing verdicts and regime classification",
        "builtin": "serialize a builtin scenario config",
    }
    for cmd, help_text in commands.items():
        p = sub.add_parser(cmd, help=help_text)
        src = p.add_mutually_exclusive_group(required=True)
        src.add_argument("--scenario", help="path to a scenario config (JSON)")
        src.add_argument("--builtin", help="builtin scenario name")
        p.add_argument("--variant", default="J1_cos")
        p.add_argument("--eps", type=_float_list, default=None,
                       help="comma-separated epsilon ladder")
        p.add_argument("--tau", type=_float_list, default=None)
        p.add_argument("--s", type=_float_list, default=None)
        p.add_argument("--cutoff", type=int, default=None)
        p.add_argument("--kgrid", type=_int_pair, default=None,
                       help="per-axis,radial-per-direction")
        p.add_argument("--threads", type=int, default=None)
        p.add_argument("--out", default="out")
        p.add_argument("--check", action="store_true",
                       help="run the per-scenario property checks")
        p.add_argument("--thetas", type=int, default=None)
        p.add_argument("--points", type=int, default=None)
        p.add_argument("--order", default="cubic",
                       choices=["cubic", "quadratic"])
        p.add_argument("--branch", type=int, default=0)
    return parser


def _float_list(text: str):
    return [float(x) for x in text.split(",") if x]


def _int_pair(text: str):
    parts = [int(x) for x in text.split(",") if x]
    if len(parts) != 2:
        raise argparse.ArgumentTypeError("expected two comma-separated integers")
    return parts


_HANDLERS = {
    "cell": cmd_cell,
    "germ": cmd_germ,
    "bands": cmd_bands,
    "error-study": cmd_error_study,
    "sharpness": cmd_sharpness,
    "cauchy": cmd_cauchy,
    "regimes": cmd_regimes,
    "builtin": cmd_builtin,
}


def run_cli(argv=None) -> int:
    args = make_parser().parse_args(argv)
    # BHL_THREADS overrides --threads when set
    env_threads = os.environ.get("BHL_THREADS")
    if env_threads is not None:
        args.threads = int(env_threads)
    elif args.threads is None:
        args.threads = 1
    started = time.time()
    try:
        scenario, payload = load_scenario(args)
    except (ConfigError, ScenarioError, LatticeError, GridSpecError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        if args.check:
            failures = run_check(scenario, out)
            _manifest(out, payload, started, {"command": "check",
                                              "failures": failures})
            return EXIT_OK if failures == 0 else EXIT_NUMERICAL
        extra = _HANDLERS[args.command](scenario, args, out)
        _manifest(out, payload, started, {"command": args.command, **extra})
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (StudyError, GermError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


def main():  # pragma: no cover - thin wrapper
    sys.exit(run_cli())
