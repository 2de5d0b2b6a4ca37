"""coopkernels command line: run experiment grids, check kernels, build report series.

Exit codes: 0 success, 1 counterexample found, 2 invalid configuration,
3 exploration budget exhausted, 4 deadlock during simulation, 5 other
runtime failure.
"""

from __future__ import annotations

import argparse
import configparser
import itertools
import json
import os
import random
import sys
from concurrent.futures import ProcessPoolExecutor

from . import checker as ck
from . import graphs
from . import program as pm
from . import report
from . import sim
from . import workloads as wl
from .errors import ConfigError, CoopError, DeadlockDetected, ExecutionError, MissingData, ValidationError
from .scheduler import make_policy

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_BUDGET, EXIT_DEADLOCK, EXIT_RUNTIME = 0, 1, 2, 3, 4, 5
PROGRAMS = ("bfs", "ws")


def _csv_list(s):
    return [x.strip() for x in str(s).split(",") if x.strip()]


def read_config(path) -> dict:
    """``key = value`` lines (``#`` comments); keys are flag names with
    dashes or underscores, list values are comma separated."""
    cp = configparser.ConfigParser(interpolation=None, comment_prefixes=("#",), inline_comment_prefixes=("#",))
    try:
        with open(path) as f:
            cp.read_string("[run]\n" + f.read())
    except (OSError, configparser.Error) as e:
        raise ConfigError(f"cannot read config {path!r}: {e}") from None
    return {k.replace("-", "_"): v for k, v in cp["run"].items()}


# run -----------------------------------------------------------------------------


def parse_script(text):
    """``t_ms:demand[:grant]`` items, comma separated."""
    events = []
    for item in _csv_list(text or ""):
        parts = item.split(":")
        try:
            t = round(float(parts[0]) * 1_000_000)
            demand = int(parts[1]) if len(parts) > 1 else 0
            grant = int(parts[2]) if len(parts) > 2 else 0
        except ValueError:
            raise ConfigError(f"bad script event {item!r}; expected t_ms:demand[:grant]") from None
        events.append((t, demand, grant))
    return tuple(events)


def build_workload(program, inp):
    """(Program, args, normalise) for a bundled workload and input spec."""
    if program == "bfs":
        g = graphs.parse_input(inp)
        return wl.make_graph_program(g), None
    if program in ("ws", "workstealing"):
        parts = inp.split(":")
        if parts[0] != "tree" or len(parts) not in (3, 4):
            raise ConfigError(f"work-stealing input must be tree:depth:branching[:queues], got {inp!r}")
        try:
            depth, branch = int(parts[1]), int(parts[2])
            queues = int(parts[3]) if len(parts) == 4 else 8
        except ValueError:
            raise ConfigError(f"bad tree spec {inp!r}") from None
        prog, tq = wl.make_workstealing_program(depth, branch, queues)
        return prog, wl.workstealing_args(depth, branch, tq)
    raise ConfigError(f"unknown program {program!r}; expected one of {', '.join(PROGRAMS)}")


def trial_seed(seed, trial):
    return random.Random(f"{seed}:{trial}").randrange(2**31)


def _sim_config(job, policy, seed):
    return sim.SimConfig(
        units=job["units"],
        wgsize=job["wgsize"],
        mode=job["mode"],
        quantum=job["quantum"],
        seed=seed,
        policy=policy,
        barrier=job["barrier"],
        max_steps=job["max_steps"],
        costs=job["costs"],
    )


def run_job(job):
    """One grid point for one trial; returns (run row, launch rows)."""
    prog, args = build_workload(job["program"], job["input"])
    spec = pm.LaunchSpec(prog, job["groups"], job["wgsize"])
    seed = trial_seed(job["seed"], job["trial"])
    base = sim.run(_sim_config(job, make_policy("never"), seed), spec, None, args)
    stream = None
    if job["workload"] != "none":
        stream = wl.make_synthetic_noncoop(job["workload"], job["units"], job["fraction"])
    policy = make_policy(job["policy"], job["script"])
    res = sim.run(_sim_config(job, policy, seed), spec, stream, args)
    key = {k: job[k] for k in report.KEY}
    return report.rows_from_record(key, job["trial"], seed, res.metrics(baseline=base.runtime))


def _job_or_error(job):
    try:
        return ("ok", run_job(job))
    except DeadlockDetected as e:
        return ("deadlock", f"{job_label(job)}: {e}")
    except (ExecutionError, ValidationError) as e:
        return ("error", f"{job_label(job)}: {type(e).__name__}: {e}")


def job_label(job):
    return "/".join(str(job[k]) for k in report.KEY) + f"/trial{job['trial']}"


def expand_grid(ns) -> list:
    programs = _csv_list(ns.program)
    inputs = _csv_list(ns.input) if ns.input else None
    workloads = _csv_list(ns.workload)
    fractions = _csv_list(ns.fraction)
    barriers = _csv_list(ns.barrier)
    for w in workloads:
        if w != "none" and w not in wl.PRESETS:
            raise ConfigError(f"unknown workload {w!r}; expected one of {', '.join(wl.PRESETS)} or none")
    for f in fractions:
        wl.fraction_groups(f, ns.units)
    for b in barriers:
        if b not in ("naive", "query"):
            raise ConfigError(f"unknown barrier {b!r}")
    costs = {}
    for item in _csv_list(ns.costs or ""):
        k, _, v = item.partition("=")
        try:
            costs[k.strip()] = int(v)
        except ValueError:
            raise ConfigError(f"bad cost {item!r}; expected class=int") from None
    if ns.trials < 1:
        raise ConfigError("trials must be at least 1")
    script = parse_script(ns.script)
    if (ns.policy in ("scripted", "scripted-trace")) != bool(script):
        raise ConfigError("--script goes with --policy scripted, and only with it")
    make_policy(ns.policy, script)
    jobs = []
    for prog in programs:
        if prog not in PROGRAMS:
            raise ConfigError(f"unknown program {prog!r}; expected one of {', '.join(PROGRAMS)}")
        ins = inputs or (["chain:300"] if prog == "bfs" else ["tree:4:3"])
        for inp, w, f, b, t in itertools.product(ins, workloads, fractions, barriers, range(ns.trials)):
            build_workload(prog, inp)
            jobs.append(dict(
                program=prog, input=inp, workload=w, fraction=f, barrier=b, trial=t, seed=ns.seed,
                units=ns.units, wgsize=ns.wgsize, groups=ns.groups or ns.units, mode=ns.mode,
                quantum=ns.quantum, policy=ns.policy, script=script, max_steps=ns.max_steps, costs=costs,
            ))
    # fail fast on bad simulator settings
    _sim_config(jobs[0], make_policy(ns.policy, script), 0)
    return jobs


def cmd_run(ns) -> int:
    jobs = expand_grid(ns)
    if ns.jobs > 1:
        with ProcessPoolExecutor(max_workers=ns.jobs) as ex:
            results = list(ex.map(_job_or_error, jobs))
    else:
        results = [_job_or_error(j) for j in jobs]
    runs, launches = [], []
    code = EXIT_OK
    for status, payload in results:
        if status == "ok":
            r, ls = payload
            runs.append(r)
            launches.extend(ls)
        else:
            print(payload, file=sys.stderr)
            code = max(code, EXIT_DEADLOCK if status == "deadlock" else EXIT_RUNTIME)
    meta = {
        "program": ns.program, "input": ns.input, "workload": ns.workload, "fraction": ns.fraction,
        "barrier": ns.barrier, "policy": ns.policy, "script": ns.script, "trials": ns.trials, "seed": ns.seed,
        "units": ns.units, "wgsize": ns.wgsize, "groups": ns.groups or ns.units, "mode": ns.mode,
        "quantum": ns.quantum, "costs": sim.SimConfig(costs=jobs[0]["costs"]).costs,
        "ns_per_unit": sim.DEFAULT_NS_PER_UNIT,
    }
    files, summary = report.write_outputs(ns.out_dir, runs, launches, ns.format, meta)
    for row in summary:
        key = "/".join(str(row[k]) for k in report.KEY)
        med = row["period_ms_median"]
        meets = row["meets_period"]
        extra = "" if med is None else f" period median {med} ms (P={row['period_target_ms']}, {'meets' if meets else 'misses'})"
        print(f"{key}: slowdown median {row['slowdown_median']} gather mean {row['gather_ms_mean']} ms{extra}")
    print(f"wrote {len(files)} files to {ns.out_dir}")
    return code


# check -----------------------------------------------------------------------------


def _parse_bound(text):
    # name[i]=lo:hi
    try:
        lhs, rhs = text.split("=")
        name, idx = lhs.rstrip("]").split("[")
        lo, hi = rhs.split(":")
        return (name, int(idx), int(lo), int(hi))
    except ValueError:
        raise ConfigError(f"bad bound {text!r}; expected buffer[index]=low:high") from None


def load_check_program(name, inp):
    if name in ("mutex", "barrier", "resize"):
        return wl.load_kernel(name), None
    if name in PROGRAMS:
        return build_workload(name, inp or ("chain:3" if name == "bfs" else "tree:1:2:2"))
    if os.path.exists(name):
        with open(name) as f:
            return pm.assemble(f.read()), None
    raise ConfigError(f"unknown program {name!r}")


def cmd_check(ns) -> int:
    prog, args = load_check_program(ns.program, ns.input)
    bounds = [_parse_bound(b) for b in ns.bound]
    if ns.program == "mutex" and not ns.bound:
        bounds = [("inside", 0, 0, 1)]
    n = ns.n or prog.groups or 2
    if ns.replay:
        with open(ns.replay) as f:
            data = json.load(f)
        states = ck.replay(prog, n, ns.d, data["trace"], initial_m=ns.initial_m, args=args)
        last = states[-1]
        print(f"replayed {len(states) - 1} transitions: M={last.M} terminated={last.terminated()}")
        return EXIT_OK
    cfg = ck.ExplorationConfig(
        max_states=ns.max_states,
        max_depth=ns.max_depth,
        fork_cap=ns.fork_cap,
        fairness=ns.fairness == "on",
        units=ns.units,
        initial_m=ns.initial_m,
        cell_bounds=tuple(bounds),
    )
    rep = ck.explore(prog, n, ns.d, cfg, args=args)
    if ns.json:
        print(json.dumps(rep.to_json(), indent=1, sort_keys=True))
    else:
        print(rep.table())
    failed = rep.failed()
    if failed and ns.trace_out:
        ck.dump_trace(rep.verdicts[failed[0]], ns.trace_out)
        print(f"{failed[0]} counterexample written to {ns.trace_out}")
    return rep.exit_code()


# report -------------------------------------------------------------------------------


def cmd_report(ns) -> int:
    figs = _csv_list(ns.figures)
    for f in figs:
        if f not in report.FIGURES:
            raise ConfigError(f"unknown figure {f!r}; expected some of {', '.join(report.FIGURES)}")
    for path in report.write_figures(ns.out_dir, ns.dest, tuple(figs)):
        print(path)
    return EXIT_OK


# parser -----------------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="coopkernels", description="Cooperative GPU kernel simulator and checker")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="simulate an experiment grid")
    r.add_argument("--config", help="key = value file mirroring these flags")
    r.add_argument("--program", default="bfs", help="bfs, ws or a comma list")
    r.add_argument("--input", help="graph kind:size[:seed] or CSR file; tree:depth:branching for ws")
    r.add_argument("--units", type=int, default=8)
    r.add_argument("--wgsize", type=int, default=1)
    r.add_argument("--groups", type=int, help="workgroups requested by the cooperative kernel (default: units)")
    r.add_argument("--workload", default="heavy", help="light, medium, heavy, none or a comma list")
    r.add_argument("--fraction", default="half", help="one, quarter, half, allbutone or a comma list")
    r.add_argument("--barrier", default="query", help="naive, query or both comma separated")
    r.add_argument("--policy", default="target", help="target, never or scripted")
    r.add_argument("--script", help="scripted events t_ms:demand[:grant], comma separated")
    r.add_argument("--trials", type=int, default=1)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--mode", default="fair", choices=sim.MODES)
    r.add_argument("--quantum", type=int, default=64)
    r.add_argument("--costs", help="cost overrides such as primitive=0,atomic=8")
    r.add_argument("--max-steps", type=int, default=20_000_000)
    r.add_argument("--out-dir", default="runs")
    r.add_argument("--format", default="csv", choices=("csv", "json"))
    r.add_argument("--jobs", type=int, default=1, help="parallel trial workers")
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("check", help="explore every interleaving of a small kernel")
    c.add_argument("--program", required=True, help="mutex, barrier, resize, bfs, ws or a .cka file")
    c.add_argument("--input", help="input for bfs/ws")
    c.add_argument("--n", type=int, help="maximum workgroups N (default: the kernel's .groups)")
    c.add_argument("--d", type=int, default=1)
    c.add_argument("--initial-m", type=int)
    c.add_argument("--units", type=int, help="occupancy-bound execution on this many units")
    c.add_argument("--max-states", type=int, default=200_000)
    c.add_argument("--max-depth", type=int)
    c.add_argument("--fork-cap", type=int, default=2)
    c.add_argument("--fairness", default="on", choices=("on", "off"))
    c.add_argument("--bound", action="append", default=[], help="buffer[index]=low:high, repeatable")
    c.add_argument("--trace-out", help="write the first counterexample as JSON")
    c.add_argument("--replay", help="replay a trace file instead of exploring")
    c.add_argument("--json", action="store_true")
    c.set_defaults(func=cmd_check)

    s = sub.add_parser("report", help="figure-analogue CSV series from a run directory")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--dest", help="where to write the series (default: out-dir)")
    s.add_argument("--figures", default=",".join(report.FIGURES))
    s.set_defaults(func=cmd_report)
    return p


def parse_args(argv):
    parser = build_parser()
    ns = parser.parse_args(argv)
    if getattr(ns, "config", None):
        try:
            values = read_config(ns.config)
        except ConfigError as e:
            parser.exit(EXIT_CONFIG, f"error: {e}\n")
        sub = parser._subparsers._group_actions[0].choices[ns.command]
        known = {a.dest: a for a in sub._actions}
        unknown = sorted(set(values) - set(known))
        if unknown:
            parser.exit(EXIT_CONFIG, f"error: unknown config keys {', '.join(unknown)}\n")
        # explicit flags win over the file
        defaults = {}
        for k, v in values.items():
            a = known[k]
            try:
                defaults[k] = a.type(v) if a.type else v
            except ValueError:
                parser.exit(EXIT_CONFIG, f"error: bad value {v!r} for config key {k}\n")
        sub.set_defaults(**defaults)
        ns = parser.parse_args(argv)
    return ns


def main(argv=None) -> int:
    ns = parse_args(sys.argv[1:] if argv is None else argv)
    try:
        return ns.func(ns)
    except (ConfigError, ValidationError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingData as e:
        print(f"error: missing data: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DeadlockDetected as e:
        print(f"deadlock: {e}", file=sys.stderr)
        return EXIT_DEADLOCK
    except CoopError as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
