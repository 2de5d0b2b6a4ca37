"""Acceptance criteria, one test each.

Every test records a ``PASS``/``FAIL`` line that the terminal summary prints
(see conftest.py).  Running this file directly prints the same lines.
"""

import csv
import random
import statistics
import time
from collections import Counter

import pytest

from coopkernels import checker as ck
from coopkernels import cli, graphs, sim
from coopkernels import program as pm
from coopkernels import workloads as wl
from coopkernels.errors import DeadlockDetected
from coopkernels.scheduler import ScriptedTrace

RESULTS: list = []


def record(n, title, ok, detail):
    RESULTS.append(f"{'PASS' if ok else 'FAIL'} criterion {n} ({title}): {detail}")
    assert ok, detail


def timed(fn):
    t = time.time()
    out = fn()
    return out, time.time() - t


# 1 ------------------------------------------------------------------------------------


def test_criterion_1_preemption_model():
    table = {(70, 3): 1.04, (40, 3): 1.08, (40, 10): 1.33}
    expect = {(70, 3): 1.045, (40, 3): 1.081, (40, 10): 1.333}
    got = {k: round(sim.preemption_model_overhead(*k), 3) for k in table}
    ok = all(got[k] == expect[k] and abs(got[k] - table[k]) <= 0.005 + 1e-9 for k in table)
    record(1, "preemption model", ok, ", ".join(f"P={p} D={d}: {v}" for (p, d), v in got.items()))


# 2 ------------------------------------------------------------------------------------


def test_criterion_2_starvation_demonstration():
    prog = wl.load_kernel("barrier")

    def go():
        occ = ck.explore(prog, N=3, config=ck.ExplorationConfig(units=2))
        fair = ck.explore(prog, N=3, config=ck.ExplorationConfig())
        spec = pm.LaunchSpec(prog, 3, 1)
        try:
            sim.run(sim.SimConfig(units=2, mode="occupancy"), spec)
            sim_deadlock = False
        except DeadlockDetected:
            sim_deadlock = True
        sim_fair = sim.run(sim.SimConfig(units=2, mode="fair"), spec).state.terminated()
        return occ, fair, sim_deadlock, sim_fair

    (occ, fair, sim_deadlock, sim_fair), secs = timed(go)
    ok = (
        not occ.completion_possible
        and isinstance(occ.verdicts["deadlock"], ck.Counterexample)
        and fair.completion_possible
        and not fair.failed()
        and sim_deadlock
        and sim_fair
        and secs < 1.0
    )
    record(2, "starvation demonstration", ok,
           f"occupancy completes={occ.completion_possible} deadlock found={not isinstance(occ.verdicts['deadlock'], ck.Pass)}, "
           f"fair completes={fair.completion_possible}, sim occupancy deadlock={sim_deadlock}, "
           f"sim fair completes={sim_fair}, {secs:.2f}s")


# 3 ------------------------------------------------------------------------------------


def test_criterion_3_semantics_conformance():
    props = ("m_bounds", "contiguity", "survivor_prefix", "kill_order", "transmit_completeness")
    rep, secs = timed(lambda: ck.explore(wl.load_kernel("resize"), N=3, d=1, config=ck.ExplorationConfig(fork_cap=2)))
    ok = all(isinstance(rep.verdicts[p], ck.Pass) for p in props) and not rep.exhausted and secs < 30
    record(3, "semantics conformance", ok,
           f"{rep.states} states, {rep.transitions} transitions, failed={rep.failed()}, {secs:.1f}s")


# 4 ------------------------------------------------------------------------------------


def resize_trace(rng, N):
    t, events = 0, []
    for _ in range(rng.randint(1, 5)):
        t += rng.randint(20_000, 400_000)
        events.append((t, rng.randint(0, N - 1), rng.randint(0, N)))
    return tuple(events)


def test_criterion_4_output_invariance():
    N = 6
    start = time.time()
    bfs_ok = ws_ok = 0
    for i in range(20):
        rng = random.Random(i)
        g = graphs.generate_graph(rng.choice(["chain", "random", "grid", "deep", "star", "wide"]), rng.randint(20, 120), i)
        cfg = sim.SimConfig(units=4, policy=ScriptedTrace(resize_trace(rng, N)), barrier=("naive", "query")[i % 2],
                            initial_groups=rng.randint(1, N), seed=i)
        res = sim.run(cfg, pm.LaunchSpec(wl.make_graph_program(g), N, 1))
        bfs_ok += sim.user_buffers(res.state)["levels"] == graphs.bfs_levels(g)
    for i in range(20):
        rng = random.Random(1000 + i)
        depth, branching = rng.randint(0, 4), rng.randint(1, 3)
        prog, tq = wl.make_workstealing_program(depth, branching, queues=N)
        cfg = sim.SimConfig(units=4, policy=ScriptedTrace(resize_trace(rng, N)), barrier=("naive", "query")[i % 2],
                            initial_groups=rng.randint(1, N), seed=i)
        res = sim.run(cfg, pm.LaunchSpec(prog, N, 1), args=wl.workstealing_args(depth, branching, tq))
        got = wl.processed_tasks(sim.user_buffers(res.state)["done"])
        ws_ok += got == Counter(wl.expand_tree(depth, branching))
    secs = time.time() - start
    record(4, "output invariance", bfs_ok == 20 and ws_ok == 20 and secs < 60,
           f"bfs {bfs_ok}/20, work stealing {ws_ok}/20, {secs:.1f}s")


# 5 ------------------------------------------------------------------------------------


def test_criterion_5_query_barrier_advantage():
    N = 8
    g = graphs.generate_graph("random", 300, 1)
    spec = pm.LaunchSpec(wl.make_graph_program(g), N, 1)
    base = sim.run(sim.SimConfig(units=N), spec).runtime
    start = time.time()
    medians, problems = {}, []
    for demand in (1, N // 4, N // 2, N - 1):
        naive = []
        for seed in range(10):
            posted = random.Random(seed).randint(base // 20, base // 2)
            got = {}
            for barrier in ("naive", "query"):
                cfg = sim.SimConfig(units=N, policy=ScriptedTrace(((posted, demand, 0),)), barrier=barrier, seed=seed)
                (got[barrier],) = sim.run(cfg, spec).demands
            q, n = got["query"], got["naive"]
            if n["gather_ns"] is None or q["gather_ns"] is None:
                problems.append(f"demand {demand} seed {seed} unsatisfied")
                continue
            if not q["within_one_episode"]:
                problems.append(f"demand {demand} seed {seed}: query needed more than one episode")
            if q["gather_ns"] > n["gather_ns"]:
                problems.append(f"demand {demand} seed {seed}: query {q['gather_ns']} > naive {n['gather_ns']}")
            naive.append(n["gather_ns"])
        medians[demand] = statistics.median(naive) if naive else float("nan")
    seq = [medians[d] for d in sorted(medians)]
    monotone = all(a <= b for a, b in zip(seq, seq[1:]))
    secs = time.time() - start
    ok = not problems and monotone and secs < 300
    detail = "naive median gather ms " + ", ".join(f"D={d}: {v / 1e6:.3f}" for d, v in sorted(medians.items()))
    if problems:
        detail += "; " + "; ".join(problems[:3])
    record(5, "query barrier advantage", ok, f"{detail}; {secs:.1f}s")


# 6 ------------------------------------------------------------------------------------


def test_criterion_6_period_attainment(tmp_path):
    out = tmp_path / "periods"
    start = time.time()
    rc = cli.main(["run", "--input", "chain:300", "--workload", "heavy", "--fraction", "half,one",
                   "--barrier", "query", "--trials", "3", "--seed", "1", "--out-dir", str(out)])
    with open(out / "summary.csv", newline="") as f:
        rows = {r["fraction"]: r for r in csv.DictReader(f)}
    secs = time.time() - start
    half, one = rows["half"], rows["one"]
    ok = rc == 0 and half["meets_period"] == "True" and one["meets_period"] == "False" and secs < 300
    record(6, "period attainment", ok,
           f"median period half={half['period_ms_median']} ms (meets), one={one['period_ms_median']} ms "
           f"(misses), P={half['period_target_ms']} ms, {secs:.1f}s")


# 7 ------------------------------------------------------------------------------------


def test_criterion_7_overhead_sanity():
    g = graphs.generate_graph("random", 300, 1)
    bfs = wl.make_graph_program(g)
    ws, tq = wl.make_workstealing_program(4, 3, queues=8)
    ws_args = wl.workstealing_args(4, 3, tq)
    kernels = {
        "bfs": (bfs, None, lambda st: sim.user_buffers(st)["levels"]),
        "ws": (ws, ws_args, lambda st: sorted(wl.processed_tasks(sim.user_buffers(st)["done"]).elements())),
    }
    ratios, free = {}, {}
    for name, (prog, args, norm) in kernels.items():
        plain = pm.strip_cooperative(prog)
        for units in (4, 8):
            ratios[name, units] = sim.measure_overhead(prog, plain, sim.SimConfig(units=units), args=args, normalise=norm)
            free[name, units] = sim.measure_overhead(prog, plain, sim.SimConfig(units=units, costs={"primitive": 0}),
                                                     args=args, normalise=norm)
    ok = all(1.0 <= r <= 1.25 for r in ratios.values()) and all(r == 1.0 for r in free.values())
    record(7, "overhead sanity", ok,
           ", ".join(f"{k}@{u}: {r:.3f}" for (k, u), r in ratios.items())
           + "; primitive cost 0: " + ", ".join(str(r) for r in free.values()))


# 8 ------------------------------------------------------------------------------------


def test_criterion_8_determinism(tmp_path):
    base = ["run", "--program", "bfs,ws", "--workload", "heavy", "--fraction", "quarter,half",
            "--barrier", "naive,query", "--trials", "2", "--seed", "7"]
    start = time.time()
    cli.main(base + ["--out-dir", str(tmp_path / "a")])
    cli.main(base + ["--out-dir", str(tmp_path / "b"), "--jobs", "2"])
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    same = [(tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes() for n in names]
    secs = time.time() - start
    record(8, "determinism", names and all(same) and secs < 60,
           f"{sum(same)}/{len(names)} files byte-identical ({', '.join(names)}), serial vs 2 workers, {secs:.1f}s")


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-q"]))
