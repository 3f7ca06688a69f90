"""Batch front end: ``wienerldp run config.json [--seed N] [--out DIR] [--threads N] [--speed eps|eps2]``.

Stages run in order build -> checks -> rates -> scan -> probe; only the
blocks present in the config are executed. Exit status: 0 success,
2 invalid configuration, 3 numerical failure in a stage, 4 output directory
not writable. A machine-readable error object goes to stderr.
"""
from __future__ import annotations

import argparse
import copy
import json
import math
import sys
from pathlib import Path

import jsonschema
import numpy as np

from . import report
from .applications import adapted_kernels, exponential_functional_kernels, skorohod_equation_kernels
from .assembly import ChaosSpec
from .grid import ConfigError, GridFn, GridMismatchError, SiteSet, build_grid
from .kernels import (KernelFamily, ModulusSpec, SeparableSum, check_exponential_type, modulus_profile,
                      series_bound)
from .ldp import EventSpec, convergence_probe, ldp_scan
from .noise import Control, default_threads
from .rate import rate_path, rate_pointwise

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
STAGES = ("build", "checks", "rates", "scan", "probe")

_num = {"type": "number"}
_fn = {
    "oneOf": [
        {"type": "object", "properties": {"constant": _num}, "required": ["constant"], "additionalProperties": False},
        {"type": "object", "properties": {"indicator": {"type": "array", "items": _num, "minItems": 2, "maxItems": 2}},
         "required": ["indicator"], "additionalProperties": False},
        {"type": "object", "properties": {"values": {"type": "array", "items": _num, "minItems": 1}},
         "required": ["values"], "additionalProperties": False},
    ]
}
_sites = {"type": "array", "minItems": 1, "items": {"type": "number", "minimum": 0, "maximum": 1}}
_eps_list = {"type": "array", "minItems": 1, "items": {"type": "number", "exclusiveMinimum": 0}}

SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["grid", "model"],
    "additionalProperties": False,
    "properties": {
        "seed": {"type": "integer", "minimum": 0},
        "output_dir": {"type": "string"},
        "threads": {"type": "integer", "minimum": 1},
        "grid": {
            "type": "object", "required": ["time_cells"], "additionalProperties": False,
            "properties": {
                "time_cells": {"type": "integer", "minimum": 1},
                "t_max": {"type": "number", "exclusiveMinimum": 0},
                "space_cells": {"type": "array", "items": {"type": "integer", "minimum": 1}, "maxItems": 2},
                "density": {"oneOf": [{"type": "number", "exclusiveMinimum": 0},
                                      {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}}]},
            },
        },
        "model": {
            "type": "object", "required": ["builder"],
            "properties": {
                "builder": {"enum": ["chaos", "exponential_functional", "adapted", "skorohod_linear"]},
                "sites": _sites,
                "f0": _num,
                "n_max": {"type": "integer", "minimum": 0},
                "terms": {"type": "array", "items": {
                    "type": "object", "required": ["order", "factor"], "additionalProperties": False,
                    "properties": {"order": {"type": "integer", "minimum": 1}, "coef": _num, "factor": _fn}}},
                "h": _fn,
                "constants": {"type": "array", "items": _num},
                "a": _num,
                "x0": _num,
            },
            "additionalProperties": False,
        },
        "checks": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "kappa": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}},
                "modulus": {"type": "object", "required": ["C", "gamma", "alpha0"], "additionalProperties": False,
                            "properties": {"C": _num, "gamma": _num, "alpha0": _num, "q": _num,
                                           "kappa": {"type": "number", "exclusiveMinimum": 0}}},
            },
        },
        "rates": {"type": "array", "items": {
            "oneOf": [
                {"type": "object", "required": ["site", "r"], "additionalProperties": False,
                 "properties": {"site": {"type": "integer", "minimum": 0}, "r": _num}},
                {"type": "object", "required": ["path"], "additionalProperties": False,
                 "properties": {"path": {"type": "array", "items": _num, "minItems": 1}}},
            ]}},
        "ldp_scan": {
            "type": "object", "required": ["event", "eps"], "additionalProperties": False,
            "properties": {
                "event": {"oneOf": [
                    {"type": "object", "required": ["kind", "level"], "additionalProperties": False,
                     "properties": {"kind": {"const": "site_threshold"}, "site": {"type": "integer", "minimum": 0},
                                    "level": _num, "direction": {"enum": [">=", "<="]}}},
                    {"type": "object", "required": ["kind", "center", "radius"], "additionalProperties": False,
                     "properties": {"kind": {"const": "sup_ball"}, "center": {"type": "array", "items": _num},
                                    "radius": {"type": "number", "exclusiveMinimum": 0}}},
                ]},
                "eps": _eps_list,
                "N": {"type": "integer", "minimum": 100},
                "speed": {"enum": ["eps", "eps2"]},
            },
        },
        "probe": {
            "type": "object", "required": ["control", "eps"], "additionalProperties": False,
            "properties": {"control": _fn, "eps": _eps_list, "N": {"type": "integer", "minimum": 2}},
        },
    },
}


class StageFailure(Exception):
    def __init__(self, stage: str, status: int, exc: BaseException):
        super().__init__(str(exc))
        self.stage, self.status, self.exc = stage, status, exc


# ---------------------------------------------------------------------------
# builders


def grid_fn(grid, spec: dict) -> GridFn:
    if "constant" in spec:
        return GridFn.constant(grid, spec["constant"])
    if "indicator" in spec:
        lo, hi = spec["indicator"]
        return GridFn.indicator(grid, lo, hi)
    return GridFn(grid, np.asarray(spec["values"], dtype=float))


def build_model(cfg: dict):
    g = cfg["grid"]
    grid = build_grid(g["time_cells"], g.get("space_cells"), g.get("density"), g.get("t_max", 1.0))
    m = cfg["model"]
    kind = m["builder"]
    sites = SiteSet(np.asarray(m.get("sites", [0.0]), dtype=float))
    if kind == "exponential_functional":
        fam = exponential_functional_kernels(grid_fn(grid, m.get("h", {"constant": 1.0})), m.get("n_max", 12), sites)
        return grid, ChaosSpec(fam)
    if kind == "chaos":
        terms = m.get("terms", [])
        n_max = m.get("n_max", max((t["order"] for t in terms), default=0))
        if any(t["order"] > n_max for t in terms):
            raise ConfigError("term order exceeds n_max")
        acc = {n: SeparableSum.zero(grid, n) for n in range(1, n_max + 1)}
        for t in terms:
            n = t["order"]
            g1 = grid_fn(grid, t["factor"])
            k = acc[n]
            acc[n] = SeparableSum(grid, n, np.append(k.coefs, t.get("coef", 1.0)),
                                  np.concatenate([k.factors, np.tile(g1.values, (1, n, 1))]))
        row = [acc[n] for n in range(1, n_max + 1)]
        if n_max == 0:
            raise ConfigError("the chaos builder needs at least one term")
        fam = KernelFamily(sites, np.full(len(sites), float(m.get("f0", 0.0))), [row] * len(sites))
        return grid, ChaosSpec(fam, finite=True)
    if kind == "adapted":
        consts = m.get("constants", [])
        if not consts:
            raise ConfigError("the adapted builder needs constants")
        fam = adapted_kernels([m.get("f0", 0.0), *consts], sites, grid)
        return grid, ChaosSpec(fam, finite=True)
    if "a" not in m or "x0" not in m:
        raise ConfigError("skorohod_linear needs a and x0")
    fam = skorohod_equation_kernels(float(m["a"]), float(m["x0"]), m.get("n_max", 12), sites, grid)
    return grid, ChaosSpec(fam)


def family_summary(spec: ChaosSpec) -> dict:
    return {"n_sites": len(spec.sites), "sites": spec.sites.points, "n_max": spec.n_max,
            "cells": spec.family.grid.size, "f0": spec.family.f0, "norms": spec.family.norms,
            "finite": spec.finite, "delta": spec.delta}


def run_checks(spec: ChaosSpec, block: dict) -> dict:
    delta, ok = check_exponential_type(spec.family)
    out = {"delta_fit": delta, "exponential_type": ok, "series_bound": []}
    for kappa in block.get("kappa", [1.0, 2.0, 4.0]):
        b = series_bound(spec.family, kappa, delta=spec.delta, finite=spec.finite)
        out["series_bound"].append({"kappa": kappa, "bound": b, "finite": math.isfinite(b)})
    if "modulus" in block:
        mb = block["modulus"]
        prof = modulus_profile(spec.family, mb.get("kappa", 1.0), ModulusSpec(mb["C"], mb["gamma"], mb["alpha0"]),
                               mb.get("q"))
        out["modulus"] = {"passed": prof.passed, "exponent": prof.exponent, "worst_margin": prof.worst_margin,
                          "distance": prof.distance, "lhs": prof.lhs}
    return out


def rate_entry(res, query: dict) -> dict:
    return {"query": query, "lambda": res.lam, "infinite": res.is_infinite, "converged": res.converged,
            "residual": res.residual, "iterations": res.iterations, "certificate": res.certificate,
            "method": res.method, "alternatives": len(res.alternatives),
            "u_star_norm": None if res.u_star is None else math.sqrt(res.u_star.norm_sq)}


def make_event(block: dict) -> EventSpec:
    if block["kind"] == "site_threshold":
        return EventSpec.site_threshold(block.get("site", 0), block["level"], block.get("direction", ">="))
    return EventSpec.sup_ball(block["center"], block["radius"])


# ---------------------------------------------------------------------------
# orchestration


def _error(kind: str, message: str, **extra) -> None:
    sys.stderr.write(json.dumps({"error": kind, "message": message, **extra}, sort_keys=True) + "\n")


def run_config(cfg: dict, out_dir, threads: int | None = None) -> int:
    """Validate, execute and write all outputs. Returns the exit status."""
    try:
        jsonschema.validate(cfg, SCHEMA)
    except jsonschema.ValidationError as exc:
        _error("schema_violation", exc.message, path=[str(p) for p in exc.absolute_path])
        return EXIT_CONFIG
    seed = int(cfg.get("seed", 0))
    echo = {k: v for k, v in copy.deepcopy(cfg).items() if k not in ("output_dir", "threads")}
    echo["seed"] = seed
    threads = threads if threads is not None else cfg.get("threads", default_threads())

    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        probe_file = out_dir / ".write_test"
        probe_file.write_text("")
        probe_file.unlink()
    except OSError as exc:
        _error("output_unwritable", str(exc), path=str(out_dir))
        return EXIT_IO

    results: dict = {}
    done: list = []
    files: dict = {}
    failure = None
    spec = None
    wanted = {"build": True, "checks": "checks" in cfg, "rates": "rates" in cfg,
              "scan": "ldp_scan" in cfg, "probe": "probe" in cfg}
    for stage in STAGES:
        if not wanted[stage]:
            continue
        try:
            if stage == "build":
                _, spec = build_model(cfg)
                results["build"] = family_summary(spec)
            elif stage == "checks":
                results["checks"] = run_checks(spec, cfg["checks"])
            elif stage == "rates":
                entries = []
                for q in cfg["rates"]:
                    res = rate_pointwise(spec, q["site"], q["r"]) if "site" in q else rate_path(spec, q["path"])
                    entries.append(rate_entry(res, q))
                results["rates"] = entries
            elif stage == "scan":
                blk = cfg["ldp_scan"]
                rep = ldp_scan(spec, make_event(blk["event"]), blk["eps"], blk.get("speed", "eps2"),
                               blk.get("N", 10**5), seed, threads=threads)
                files["ldp_scan.csv"] = report.csv_text(report.LDP_COLUMNS, report.ldp_rows(rep))
                files["ldp_scan.json"] = report.dumps(report.ldp_json(rep, echo, seed))
                results["scan"] = {"theory_rate": rep.theory, "theory_rate_infinite": math.isinf(rep.theory),
                                   "rows": len(rep.rows), "speed": rep.speed}
            elif stage == "probe":
                blk = cfg["probe"]
                u = Control(grid_fn(spec.family.grid, blk["control"]))
                pr = convergence_probe(spec, u, blk["eps"], blk.get("N", 10**4), seed, threads)
                files["probe.csv"] = report.csv_text(report.PROBE_COLUMNS, [vars(r) for r in pr.rows])
                results["probe"] = {"slope": pr.slope, "rows": [vars(r) for r in pr.rows]}
            done.append(stage)
        except (ConfigError, GridMismatchError) as exc:
            failure = StageFailure(stage, EXIT_CONFIG, exc)
            break
        except (ArithmeticError, RuntimeError, np.linalg.LinAlgError, ValueError) as exc:
            failure = StageFailure(stage, EXIT_NUMERIC, exc)
            break

    status = EXIT_OK if failure is None else failure.status
    files["summary.json"] = report.dumps({"config": echo, "seed": seed, "stages": results})
    manifest = {
        "status": status,
        "complete": done,
        "incomplete": [s for s in STAGES if wanted[s] and s not in done],
        "files": sorted(list(files) + ["manifest.json"]),
    }
    if failure is not None:
        manifest["error"] = {"stage": failure.stage, "type": type(failure.exc).__name__, "message": str(failure.exc)}
    files["manifest.json"] = report.dumps(manifest)
    try:
        for name, text in files.items():
            (out_dir / name).write_text(text)
    except OSError as exc:
        _error("output_unwritable", str(exc), path=str(out_dir))
        return EXIT_IO
    if failure is not None:
        _error("stage_failed", str(failure.exc), stage=failure.stage, type=type(failure.exc).__name__)
    return status


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="wienerldp", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="execute a JSON run configuration")
    run.add_argument("config")
    run.add_argument("--seed", type=int, help="override the master seed")
    run.add_argument("--out", help="output directory (overrides output_dir)")
    run.add_argument("--threads", type=int, help="worker threads for sampling")
    run.add_argument("--speed", choices=["eps", "eps2"], help="LDP speed convention for the scan")
    args = ap.parse_args(argv)

    try:
        cfg = json.loads(Path(args.config).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        _error("config_unreadable", str(exc), path=args.config)
        return EXIT_CONFIG
    if not isinstance(cfg, dict):
        _error("schema_violation", "config must be a JSON object", path=[])
        return EXIT_CONFIG
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.speed is not None and isinstance(cfg.get("ldp_scan"), dict):
        cfg["ldp_scan"]["speed"] = args.speed
    if args.threads is not None and args.threads < 1:
        _error("bad_argument", "--threads must be >= 1")
        return EXIT_CONFIG
    out = args.out or cfg.get("output_dir")
    if out is None:
        _error("bad_argument", "no output directory (use --out or output_dir)")
        return EXIT_CONFIG
    return run_config(cfg, out, args.threads)


if __name__ == "__main__":
    sys.exit(main())
