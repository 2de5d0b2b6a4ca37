import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coopkernels import graphs
from coopkernels import program as pm
from coopkernels import semantics as sm
from coopkernels import workloads as wl
from coopkernels.errors import (
    BarrierDivergence,
    DivergentWorkgroupOp,
    ForkBoundExceeded,
    NonUniformReach,
    UninitialisedRead,
)


def launch(src, N, d=1, M=None, **kw):
    return sm.KernelState.launch(pm.assemble(src), N=N, d=d, M=M, **kw)


def run_to_primitive(st, wg):
    """Step every thread of ``wg`` until it sits at a non-step instruction."""
    code = st.kernel.code
    for tid in range(st.d):
        t = st.thread(wg, tid)
        while t.pc < len(code) and code[t.pc][0] not in ("kill", "fork", "bar"):
            sm.step_thread_inplace(st, wg, tid)
    return st


def test_arithmetic_step():
    st = launch("x := add 1 2\ny := 0", N=1)
    st2 = sm.step_thread(st, 0, 0)
    assert st2.thread(0, 0).env == {"x": 3}
    assert st2.thread(0, 0).pc == 1
    assert st.thread(0, 0).pc == 0  # pure


def test_num_groups_reports_m():
    st = launch("n := get_num_groups", N=4, M=2)
    assert sm.step_thread(st, 1, 0).thread(1, 0).env["n"] == 2


def test_wraparound_is_64_bit():
    st = launch(f"x := add {2**63 - 1} 1", N=1)
    assert sm.step_thread(st, 0, 0).thread(0, 0).env["x"] == -(2**63)


def test_forked_thread_reading_untransmitted_variable():
    st = launch(".transmit a\na := 7\nb := 1\nrequest_fork\nc := add b a\n", N=2, M=1)
    run_to_primitive(st, 0)
    st = sm.apply_request_fork(st, 0, 1)
    assert st.thread(1, 0).env == {"a": 7}
    with pytest.raises(UninitialisedRead):
        sm.step_thread(st, 1, 0)
    # the forker still has b
    assert sm.step_thread(st, 0, 0).thread(0, 0).env["c"] == 8


KILL = "offer_kill\nx := 1\n"


@pytest.mark.parametrize(
    "M,wg,accept,M_after",
    [(4, 3, True, 3), (4, 1, True, 4), (1, 0, True, 1), (4, 3, False, 4)],
)
def test_offer_kill(M, wg, accept, M_after):
    st = launch(KILL, N=4, M=M)
    out = sm.apply_offer_kill(st, wg, accept)
    assert out.M == M_after
    if M_after < M:
        assert out.slots[wg] is None
    else:
        assert out.thread(wg, 0).pc == 1


def test_offer_kill_non_uniform_reach():
    st = launch("l := get_local_id\nif eq l 0\n    y := 1\nend\noffer_kill\n", N=2, d=2)
    sm.step_thread_inplace(st, 0, 0)
    with pytest.raises(NonUniformReach):
        sm.apply_offer_kill(st, 0, False)


def test_divergent_workgroup_op_on_thread_step():
    st = launch("l := get_local_id\nif eq l 0\n    offer_kill\nend\n", N=1, d=2)
    run_to_primitive(st, 0)
    with pytest.raises(DivergentWorkgroupOp):
        sm.step_thread(st, 0, 0)


FORK = ".transmit level\nlevel := 5\nrequest_fork\nx := add level 1\n"


def test_fork_copies_transmit_from_thread_zero():
    st = launch(FORK, N=4, M=2, d=2)
    run_to_primitive(st, 0)
    st.thread(0, 1).env["level"] = 99  # thread 1 differs; thread 0 is the source
    out = sm.apply_request_fork(st, 0, 2)
    assert out.M == 4
    for g in (2, 3):
        for t in out.slots[g].threads:
            assert t.env == {"level": 5}
            assert t.pc == out.thread(0, 0).pc


def test_fork_zero_only_advances():
    st = run_to_primitive(launch(FORK, N=4, M=2), 0)
    out = sm.apply_request_fork(st, 0, 0)
    assert out.M == 2
    assert out.thread(0, 0).pc == st.thread(0, 0).pc + 1
    assert out.thread(0, 0).env == st.thread(0, 0).env


def test_fork_beyond_limit():
    st = run_to_primitive(launch(FORK, N=2, M=2), 0)
    with pytest.raises(ForkBoundExceeded):
        sm.apply_request_fork(st, 0, 1)


def test_forked_local_memory_is_zeroed():
    src = ".local scratch 2\nlstore scratch 0 9\nrequest_fork\n"
    st = launch(src, N=2, M=1)
    run_to_primitive(st, 0)
    out = sm.apply_request_fork(st, 0, 1)
    assert out.shared.local_mem[0]["scratch"] == [9, 0]
    assert out.shared.local_mem[1]["scratch"] == [0, 0]


def test_barrier_releases_everyone():
    st = launch("global_barrier\nx := 1\n", N=2, d=2)
    out = sm.apply_global_barrier(st)
    assert all(t.pc == 1 for w in out.active() for t in w.threads)


def test_two_barriers_compose():
    st = launch("global_barrier\nglobal_barrier\n", N=2)
    once = sm.apply_global_barrier(st)
    twice = sm.apply_global_barrier(once)
    assert twice.terminated()


def test_barrier_divergence():
    st = launch("g := get_group_id\nif eq g 0\n    global_barrier\nelse\n    global_barrier\nend\n", N=2)
    for g in range(2):
        run_to_primitive(st, g)
    with pytest.raises(BarrierDivergence):
        sm.barrier_status(st)


def test_early_termination_blocks_barrier():
    st = launch("g := get_group_id\nif eq g 1\n    halt\nend\nglobal_barrier\n", N=2)
    for g in range(2):
        run_to_primitive(st, g)
    assert not st.terminated()
    assert sm.enabled_transitions(st) == []
    assert "terminated" in sm.stuck_reason(st)


def test_enabled_transitions_examples():
    st = launch("x := 1", N=1)
    assert sm.enabled_transitions(st) == [sm.Transition("step", 0, 0)]
    done = sm.step_thread(st, 0, 0)
    assert sm.enabled_transitions(done) == []
    kill = launch(KILL, N=3)
    rules = [(t.rule, t.wg, t.choice) for t in sm.enabled_transitions(kill) if t.rule == "kill"]
    assert ("kill", 2, True) in rules and ("kill", 2, False) in rules
    assert ("kill", 1, True) not in rules and ("kill", 1, False) in rules


def test_fork_enumeration_respects_cap():
    st = run_to_primitive(launch(FORK, N=5, M=1), 0)
    ks = [t.choice for t in sm.enabled_transitions(st, fork_cap=2) if t.rule == "fork"]
    assert ks == [0, 1, 2]


# resizing barrier desugaring --------------------------------------------------------------

RESIZE = """
.param out
.buffer out 4
.transmit v
v := 3
resizing_global_barrier
n := get_num_groups
g := get_group_id
store out g n
"""


def drive(st, kill=lambda g: False, fork=0):
    """Run to completion picking steps in slot order and the given scheduler."""
    fork_left = [fork]
    for _ in range(10_000):
        trs = sm.enabled_transitions(st)
        if not trs:
            return st
        steps = [t for t in trs if t.rule == "step"]
        if steps:
            sm.apply_transition_inplace(st, steps[0])
            continue
        eligible = [t for t in trs if t.rule == "kill" and t.wg == st.M - 1]
        tr = eligible[0] if eligible else trs[0]
        if tr.rule == "kill":
            tr = sm.Transition("kill", tr.wg, None, kill(tr.wg) and tr.wg == st.M - 1 and st.M > 1)
        elif tr.rule == "fork":
            k, fork_left[0] = min(fork_left[0], st.N - st.M), 0
            tr = sm.Transition("fork", tr.wg, None, k)
        sm.apply_transition_inplace(st, tr)
    raise AssertionError("did not terminate")


def test_resizing_barrier_without_changes_equals_plain_barrier():
    prog = pm.assemble(RESIZE)
    plain = pm.strip_cooperative(prog)
    a = drive(sm.KernelState.launch(prog, N=3))
    b = drive(sm.KernelState.launch(plain, N=3))
    assert a.buffer("out") == b.buffer("out") == [3, 3, 3, 0]


def test_resizing_barrier_shrinks_to_one():
    st = drive(sm.KernelState.launch(pm.assemble(RESIZE), N=3), kill=lambda g: True)
    assert st.M == 1
    assert st.buffer("out")[0] == 1


def test_resizing_barrier_grows_with_transmit():
    prog = pm.assemble(RESIZE.replace("store out g n", "store out g v"))
    st = drive(sm.KernelState.launch(prog, N=4, M=2), fork=2)
    assert st.M == 4
    assert st.buffer("out") == [3, 3, 3, 3]


def test_desugar_uses_group_zero_as_forker():
    prog = sm.desugar_resizing_barrier(pm.assemble(RESIZE))
    master = [s for s in pm.walk(prog.body) if isinstance(s, pm.If)][0]
    then_ops = [getattr(s, "op", type(s).__name__) for s in master.then]
    else_ops = [getattr(s, "op", type(s).__name__) for s in master.orelse]
    assert then_ops == ["GlobalBarrier", "request_fork", "GlobalBarrier", "GlobalBarrier"]
    assert else_ops == ["GlobalBarrier", "GlobalBarrier", "offer_kill", "GlobalBarrier"]
    assert master.cond.args[1] == 0


# random walks -------------------------------------------------------------------------


def random_walk(st, rng, limit=5000):
    trace = []
    for _ in range(limit):
        trs = sm.enabled_transitions(st, fork_cap=3)
        if not trs:
            break
        tr = rng.choice(trs)
        before = st.clone()
        sm.apply_transition_inplace(st, tr)
        trace.append((before, tr, st.clone()))
    return trace


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 3))
def test_walk_preserves_bounds_contiguity_and_kill_order(seed, m0):
    state = sm.KernelState.launch(wl.load_kernel("resize"), N=3, M=m0)
    transmit = state.kernel.transmit
    for before, tr, after in random_walk(state, random.Random(seed)):
        assert 1 <= after.M <= after.N
        assert all(s is not None for s in after.slots[: after.M])
        assert all(s is None for s in after.slots[after.M :])
        assert after.slots[0] is not None
        if tr.rule == "kill" and after.M < before.M:
            assert tr.wg == before.M - 1 and before.M > 1
        if tr.rule == "fork":
            # framing: pre-existing environments are untouched
            for g in range(before.M):
                for t0, t1 in zip(before.slots[g].threads, after.slots[g].threads):
                    assert t0.env == t1.env
            for g in range(before.M, after.M):
                for t in after.slots[g].threads:
                    assert set(t.env) == set(transmit)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_transitions_are_deterministic(seed):
    state = sm.KernelState.launch(wl.load_kernel("resize"), N=3)
    for before, tr, after in random_walk(state, random.Random(seed), limit=200):
        assert sm.apply_transition(before, tr).freeze() == after.freeze()


@settings(max_examples=20, deadline=None)
@given(st.sampled_from(["chain", "star", "random", "grid"]), st.integers(1, 9), st.integers(0, 1000))
def test_bfs_under_random_schedules_matches_oracle(kind, size, seed):
    g = graphs.generate_graph(kind, size, seed)
    prog = wl.make_graph_program(g)
    state = sm.KernelState.launch(prog, N=3, M=1 + seed % 3)
    random_walk(state, random.Random(seed), limit=200_000)
    assert state.terminated()
    assert state.buffer("levels") == graphs.bfs_levels(g)
