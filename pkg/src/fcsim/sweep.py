"""Filter-cache size and associativity sweeps with CSV output."""

from __future__ import annotations

import io
from concurrent.futures import ProcessPoolExecutor

from . import config as config_mod
from .errors import BadParamsError
from .machine import Machine
from .trace import format_trace, parse_trace, run_trace

AXES = ("l0_size", "l0_ways")

CSV_COLUMNS = [
    "axis", "value", "ticks",
    "l0d_lookups", "l0d_hits", "l0d_misses", "l0d_hit_rate", "l0d_uncommitted_drops",
    "l1d_hits", "l1d_misses", "l2_hits", "l2_misses", "prefetches_issued",
]


def _sweep_point(cfg_dict: dict, trace_text: str) -> dict:
    cfg = config_mod.from_dict(cfg_dict)
    machine = Machine(cfg)
    stats = run_trace(machine, parse_trace(trace_text))
    l0d = stats["caches"].get("l0d", {})
    lookups = l0d.get("lookups", 0)
    return {
        "ticks": stats["ticks"],
        "l0d_lookups": lookups,
        "l0d_hits": l0d.get("hits", 0),
        "l0d_misses": l0d.get("misses", 0),
        "l0d_hit_rate": round(l0d.get("hits", 0) / lookups, 6) if lookups else 0.0,
        "l0d_uncommitted_drops": l0d.get("uncommitted_drops", 0),
        "l1d_hits": stats["caches"]["l1d"]["hits"],
        "l1d_misses": stats["caches"]["l1d"]["misses"],
        "l2_hits": stats["caches"]["l2"]["hits"],
        "l2_misses": stats["caches"]["l2"]["misses"],
        "prefetches_issued": stats["prefetch"]["issued"],
    }


def run_sweep(base_cfg, axis: str, values: list[int], records, jobs: int = 1) -> list[dict]:
    if axis not in AXES:
        raise BadParamsError(f"unknown sweep axis {axis!r} (choose from {AXES})")
    if list(values) != sorted(values):
        raise BadParamsError("sweep values must be sorted ascending")
    if not values:
        raise BadParamsError("sweep needs at least one value")
    trace_text = format_trace(records)
    points = []
    for value in values:
        cfg = base_cfg.copy()
        if axis == "l0_size":
            cfg.filter.size_bytes = value
            if cfg.filter.num_lines < cfg.filter.ways:
                cfg.filter.ways = max(1, cfg.filter.num_lines)
        else:
            cfg.filter.ways = value
        cfg.validate()
        points.append(config_mod.to_dict(cfg))

    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_sweep_point, points, [trace_text] * len(points)))
    else:
        results = [_sweep_point(p, trace_text) for p in points]

    rows = []
    for value, result in zip(values, results):
        row = {"axis": axis, "value": value}
        row.update(result)
        rows.append(row)
    return rows


def to_csv(rows: list[dict]) -> str:
    out = io.StringIO()
    out.write(",".join(CSV_COLUMNS) + "\n")
    for row in rows:
        out.write(",".join(str(row[c]) for c in CSV_COLUMNS) + "\n")
    return out.getvalue()
