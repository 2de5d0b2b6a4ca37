"""Experiment-grid records, aggregate summaries and figure-analogue series.

Record layout (schema version 1)
--------------------------------
runs      one row per simulated trial: the grid key, the trial seed, coop
          runtime, baseline runtime, slowdown, barrier episodes, final
          group count and rejected launches.
launches  one row per completed non-cooperative launch: the grid key plus
          gather, exec and period times (virtual ms; period is blank for the
          first launch of a trial).

Both tables are written either as CSV (``runs.csv``/``launches.csv``) or as
a single ``records.json``.  ``summary.{csv,json}`` holds mean/median/max
per grid point.
"""

from __future__ import annotations

import csv
import io
import json
import os
import statistics
from typing import Optional

from .errors import MissingData
from .workloads import FRACTIONS, PRESETS

SCHEMA_VERSION = 1
KEY = ("program", "input", "workload", "fraction", "barrier")
RUN_FIELDS = KEY + ("trial", "seed", "runtime_ms", "baseline_ms", "slowdown", "episodes", "final_groups",
                    "launches", "rejected")
LAUNCH_FIELDS = KEY + ("trial", "index", "units", "gather_ms", "exec_ms", "period_ms")
STATS = ("gather_ms", "exec_ms", "period_ms", "slowdown")
FIGURES = {
    "gather": "gather_ms",
    "exec": "exec_ms",
    "period": "period_ms",
    "slowdown": "slowdown",
}
BARRIERS = ("naive", "query")
PERIOD_TOLERANCE = 1.05


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(round(v, 6))
    return str(v)


def _num(s):
    if s == "" or s is None:
        return None
    try:
        return int(s)
    except ValueError:
        return float(s)


def sort_key(row):
    frac = FRACTIONS.index(row["fraction"]) if row["fraction"] in FRACTIONS else len(FRACTIONS)
    return (row["program"], row["input"], row["workload"], frac, row["fraction"], row["barrier"],
            row.get("trial", 0), row.get("index", 0))


def rows_from_record(key: dict, trial: int, seed: int, metrics: dict):
    coop = metrics["coop"]
    run = dict(key)
    run.update(
        trial=trial,
        seed=seed,
        runtime_ms=coop["runtime_ms"],
        baseline_ms=coop.get("baseline_runtime_ms"),
        slowdown=coop.get("slowdown"),
        episodes=coop["episodes"],
        final_groups=coop["final_groups"],
        launches=len(metrics["launches"]),
        rejected=metrics["rejected_launches"],
    )
    launches = []
    for L in metrics["launches"]:
        row = dict(key)
        row.update(trial=trial, index=L["index"], units=L["units"], gather_ms=L["gather_ms"],
                   exec_ms=L["exec_ms"], period_ms=L["period_ms"])
        launches.append(row)
    return run, launches


def to_csv(rows, fields) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(fields)
    for r in rows:
        w.writerow([_fmt(r.get(f)) for f in fields])
    return buf.getvalue()


def _stats(vals):
    vals = [v for v in vals if v is not None]
    if not vals:
        return {"n": 0, "mean": None, "median": None, "max": None}
    return {"n": len(vals), "mean": round(statistics.fmean(vals), 6), "median": round(statistics.median(vals), 6),
            "max": round(max(vals), 6)}


def summarise(runs, launches) -> list:
    """Aggregate per grid point; recomputable from the per-trial rows alone."""
    groups: dict = {}
    for r in runs:
        groups.setdefault(tuple(r[k] for k in KEY), ([], []))[0].append(r)
    for L in launches:
        groups.setdefault(tuple(L[k] for k in KEY), ([], []))[1].append(L)
    out = []
    for key, (rs, ls) in groups.items():
        row = dict(zip(KEY, key))
        row["trials"] = len(rs)
        for f in ("gather_ms", "exec_ms", "period_ms"):
            for s, v in _stats([L[f] for L in ls]).items():
                if s != "n":
                    row[f"{f}_{s}"] = v
        for s, v in _stats([r["slowdown"] for r in rs]).items():
            if s != "n":
                row[f"slowdown_{s}"] = v
        P = PRESETS.get(row["workload"], (None,))[0]
        row["period_target_ms"] = P
        med = row["period_ms_median"]
        row["meets_period"] = None if (P is None or med is None) else med <= PERIOD_TOLERANCE * P
        out.append(row)
    out.sort(key=sort_key)
    return out


SUMMARY_FIELDS = KEY + ("trials",) + tuple(
    f"{f}_{s}" for f in STATS for s in ("mean", "median", "max")
) + ("period_target_ms", "meets_period")


def write_outputs(out_dir, runs, launches, fmt="csv", meta: Optional[dict] = None):
    os.makedirs(out_dir, exist_ok=True)
    runs = sorted(runs, key=sort_key)
    launches = sorted(launches, key=sort_key)
    summary = summarise(runs, launches)
    files = []

    def put(name, text):
        path = os.path.join(out_dir, name)
        with open(path, "w", newline="") as f:
            f.write(text)
        files.append(path)

    if fmt == "json":
        put("records.json", json.dumps({"schema": SCHEMA_VERSION, "runs": runs, "launches": launches},
                                       indent=1, sort_keys=True) + "\n")
        put("summary.json", json.dumps({"schema": SCHEMA_VERSION, "summary": summary}, indent=1, sort_keys=True) + "\n")
    else:
        put("runs.csv", to_csv(runs, RUN_FIELDS))
        put("launches.csv", to_csv(launches, LAUNCH_FIELDS))
        put("summary.csv", to_csv(summary, SUMMARY_FIELDS))
    if meta is not None:
        put("manifest.json", json.dumps(dict(meta, schema=SCHEMA_VERSION), indent=1, sort_keys=True) + "\n")
    return files, summary


def _read_csv(path, fields):
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    out = []
    for r in rows:
        out.append({k: (r[k] if k in KEY else _num(r[k])) for k in fields})
    return out


def load_records(out_dir):
    """(runs, launches) from either output format."""
    js = os.path.join(out_dir, "records.json")
    rc = os.path.join(out_dir, "runs.csv")
    if os.path.exists(js):
        with open(js) as f:
            data = json.load(f)
        return data["runs"], data["launches"]
    if os.path.exists(rc):
        runs = _read_csv(rc, RUN_FIELDS)
        lp = os.path.join(out_dir, "launches.csv")
        launches = _read_csv(lp, LAUNCH_FIELDS) if os.path.exists(lp) else []
        return runs, launches
    raise MissingData(f"no run records in {out_dir!r}")


def figure_series(runs, launches, figure: str) -> list:
    """Rows of (program, input, workload, fraction, naive, query): means over
    trials (and launches for the per-launch figures)."""
    field = FIGURES[figure]
    src = runs if field == "slowdown" else launches
    cells: dict = {}
    for r in src:
        k = (r["program"], r["input"], r["workload"], r["fraction"])
        cells.setdefault(k, {}).setdefault(r["barrier"], []).append(r[field])
    # the grid comes from the runs, so a point with no launches is still seen
    for r in runs:
        k = (r["program"], r["input"], r["workload"], r["fraction"])
        cells.setdefault(k, {}).setdefault(r["barrier"], [])
    if not cells:
        raise MissingData(f"no data for the {figure} figure")
    rows = []
    for k, by in cells.items():
        row = dict(zip(("program", "input", "workload", "fraction"), k))
        for b in BARRIERS:
            vals = [v for v in by.get(b, []) if v is not None]
            if not vals:
                raise MissingData(f"{figure}: no {b} values for {'/'.join(k)}")
            row[b] = round(statistics.fmean(vals), 6)
        rows.append(row)
    rows.sort(key=lambda r: sort_key(dict(r, barrier="")))
    return rows


def write_figures(out_dir, dest=None, figures=tuple(FIGURES)) -> list:
    runs, launches = load_records(out_dir)
    if not runs:
        raise MissingData(f"no run records in {out_dir!r}")
    dest = dest or out_dir
    os.makedirs(dest, exist_ok=True)
    written = []
    for fig in figures:
        rows = figure_series(runs, launches, fig)
        path = os.path.join(dest, f"{fig}_vs_fraction.csv")
        with open(path, "w", newline="") as f:
            f.write(to_csv(rows, ("program", "input", "workload", "fraction") + BARRIERS))
        written.append(path)
    return written
