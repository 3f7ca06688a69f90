"""Deterministic CSV/JSON writers.

Floats are written with 17 significant digits in CSV (``format(x, ".17g")``)
and as Python's shortest round-trip repr in JSON; both are locale-free and
reproduce the binary value exactly. JSON has no infinity, so non-finite
numbers become ``null`` and callers add an explicit flag next to them.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

LDP_COLUMNS = ("epsilon", "estimate", "stderr", "empirical_rate", "theory_rate", "tilt_norm", "ess")
PROBE_COLUMNS = ("epsilon", "rms", "stderr")


def fmt_float(x) -> str:
    x = float(x)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return format(x, ".17g")


def clean(obj):
    """Recursively convert numpy scalars/arrays and non-finite floats for JSON."""
    if isinstance(obj, dict):
        return {str(k): clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [clean(v) for v in obj.tolist()]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else None
    return obj


def dumps(obj) -> str:
    return json.dumps(clean(obj), sort_keys=True, indent=2, allow_nan=False) + "\n"


def csv_text(columns: Sequence[str], rows: Iterable[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([fmt_float(row[c]) for c in columns])
    return buf.getvalue()


def ldp_rows(report) -> list:
    return [asdict(r) for r in report.rows] if report is not None else []


def ldp_json(report, config_echo: dict, seed: int) -> dict:
    rows = ldp_rows(report)
    for r in rows:
        r["empirical_rate_infinite"] = math.isinf(r["empirical_rate"])
        r["theory_rate_infinite"] = math.isinf(r["theory_rate"])
    out = {"config": config_echo, "seed": seed, "rows": rows}
    if report is not None:
        out.update(theory_rate=report.theory, theory_rate_infinite=math.isinf(report.theory),
                   speed=report.speed, certificate=report.certificate,
                   solver_converged=report.solver_converged, alternatives=report.alternatives)
    return out


def emit_report(report, out_dir, fmt: str, config_echo: dict | None = None, seed: int | None = None,
                stem: str = "ldp_scan") -> Path:
    """Write an LdpReport (or None for an empty one) as ``<stem>.csv`` or ``<stem>.json``."""
    out_dir = Path(out_dir)
    if fmt == "csv":
        path = out_dir / f"{stem}.csv"
        path.write_text(csv_text(LDP_COLUMNS, ldp_rows(report)))
    elif fmt == "json":
        path = out_dir / f"{stem}.json"
        path.write_text(dumps(ldp_json(report, config_echo or {}, seed)))
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    return path
