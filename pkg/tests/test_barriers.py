import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coopkernels import barriers as br
from coopkernels import program as pm
from coopkernels import semantics as sm
from coopkernels.checker import ExplorationConfig, Pass, explore
from coopkernels.errors import CoopError


def test_naive_kills_only_one_when_slots_arrive_in_order():
    state = br.barrier_state("naive", M=5, N=8)
    out, log = br.barrier_naive_resize(state, br.CountingScheduler(demand=2))
    assert log.kills <= 2
    assert log.killed == [4]
    assert out.M == 4


def test_query_claims_whole_demand_in_one_episode():
    state = br.barrier_state("query", M=8, N=8)
    out, log = br.barrier_query_resize(state, br.CountingScheduler(demand=3))
    # slot 7 may already go at its entry offer, the tail claims the rest
    assert log.W in (2, 3)
    assert log.killed == [7, 6, 5]
    assert out.M == 5


@pytest.mark.parametrize("mode", ["naive", "query"])
def test_no_demand_no_grant_is_plain(mode):
    state = br.barrier_state(mode, M=4, N=4)
    run = br.barrier_naive_resize if mode == "naive" else br.barrier_query_resize
    out, log = run(state, br.CountingScheduler())
    assert (out.M, log.kills, log.forks) == (4, 0, 0)
    assert out.terminated()


@pytest.mark.parametrize("mode", ["naive", "query"])
def test_grant_forks_new_slaves(mode):
    state = br.barrier_state(mode, M=2, N=5)
    run = br.barrier_naive_resize if mode == "naive" else br.barrier_query_resize
    out, log = run(state, br.CountingScheduler(grant=3))
    assert log.forks == 3 and out.M == 5
    assert out.terminated()


def test_wrong_kernel_rejected():
    with pytest.raises(CoopError):
        br.barrier_query_resize(br.barrier_state("naive", 2, 2), br.CountingScheduler())


def test_lowering_tags_resize_additions_as_coop():
    plain = br.barrier_code("plain")
    for mode in ("naive", "query"):
        body = br.barrier_code(mode)
        untagged = [s for s in pm.walk(body) if not getattr(s, "coop", False)]
        assert len(untagged) == len(list(pm.walk(plain)))


def test_lowering_rewrites_every_barrier():
    prog = pm.Program("k", body=(pm.Primitive("resizing_global_barrier"), pm.GlobalBarrier()))
    assert pm.validate(prog).ok
    low = br.lower_barriers(prog, "query")
    assert br.BAR in low.params
    assert "__bg" in low.transmit
    assert not any(isinstance(s, pm.GlobalBarrier) for s in pm.walk(low.body))
    assert br.lower_barriers(pm.Program("none"), "query") == pm.Program("none")


@settings(max_examples=30, deadline=None)
@given(st.sampled_from(["naive", "query"]), st.integers(1, 6), st.integers(0, 6), st.integers(0, 4))
def test_survivor_prefix_and_demand_bound(mode, M, demand, grant):
    N = 6
    state = br.barrier_state(mode, M=M, N=N)
    run = br.barrier_naive_resize if mode == "naive" else br.barrier_query_resize
    out, log = run(state, br.CountingScheduler(demand=demand, grant=grant))
    assert 1 <= out.M <= N
    assert log.kills <= demand
    if mode == "query":
        assert log.kills == min(demand, M + log.forks - 1)
    assert out.M == M + log.forks - log.kills
    # killed groups are always the highest ids of the moment
    if not log.forks:
        assert all(g >= out.M for g in log.killed)
    assert log.killed == sorted(log.killed, reverse=True)


@pytest.mark.parametrize("mode", ["naive", "query"])
def test_lowered_protocol_is_safe_under_all_interleavings(mode):
    prog = br.barrier_kernel(mode)
    cfg = ExplorationConfig(max_states=200_000, fork_cap=1, honour_claims=True)
    rep = explore(prog, N=2, d=1, config=cfg)
    assert all(isinstance(v, Pass) for v in rep.verdicts.values()), rep.table()
    assert rep.completion_possible


def test_query_protocol_starves_if_claims_are_refused():
    prog = br.barrier_kernel("query")
    rep = explore(prog, N=2, d=1, config=ExplorationConfig(max_states=200_000, fork_cap=1))
    cx = rep.verdicts["starvation"]
    assert rep.failed() == ["starvation"]
    cycle = cx.trace[cx.loop_start:]
    assert any(t.rule == "kill" and t.choice is False for t in cycle)


def test_num_groups_constant_between_resizing_barriers():
    src = """
    .param out
    .buffer out 8
    .transmit i
    i := 0
    while lt i 2
        resizing_global_barrier
        a := get_num_groups
        x := add a 0
        b := get_num_groups
        g := get_group_id
        d := sub b a
        k := mul g 2
        store out k d
        i := add i 1
    end
    """
    prog = pm.assemble(src)
    rep = explore(prog, N=3, config=ExplorationConfig(max_states=100_000, fork_cap=2,
                                                      cell_bounds=tuple(("out", i, 0, 0) for i in range(8))))
    assert isinstance(rep.verdicts["cell_bounds"], Pass), rep.table()
    state = sm.KernelState.launch(prog, N=3)
    assert state.M == 3


@pytest.mark.parametrize("mode", ["naive", "query"])
def test_lowered_num_groups_constant_between_barriers(mode):
    src = """
    .param diff
    .buffer diff 3
    resizing_global_barrier
    a := get_num_groups
    g := get_group_id
    b := get_num_groups
    c := sub b a
    store diff g c
    resizing_global_barrier
    """
    prog = br.lower_barriers(pm.assemble(src), mode)
    cfg = ExplorationConfig(max_states=200_000, fork_cap=1, honour_claims=True,
                            cell_bounds=tuple(("diff", i, 0, 0) for i in range(3)))
    rep = explore(prog, N=2, config=cfg)
    assert all(isinstance(v, Pass) for v in rep.verdicts.values()), rep.table()


def test_group_count_reads_use_published_copy():
    prog = pm.assemble("n := get_num_groups\nresizing_global_barrier\ns := get_global_size\n")
    low = br.lower_barriers(prog, "naive")
    user = [s for s in pm.walk(low.body) if isinstance(s, pm.Assign) and s.dst in ("n", "s")]
    assert [(s.op, s.args) for s in user] == [("mov", ("__bk",)), ("mul", ("__bk", "__ls"))]
    # programs that resize outside barriers keep the live intrinsic
    live = pm.assemble("offer_kill\nn := get_num_groups\nresizing_global_barrier\n")
    ops = [s.op for s in pm.walk(br.lower_barriers(live, "query").body) if isinstance(s, pm.Assign) and s.dst == "n"]
    assert ops == ["get_num_groups"]
