import random
from collections import Counter

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coopkernels import graphs
from coopkernels import program as pm
from coopkernels import semantics as sm
from coopkernels import workloads as wl
from coopkernels.errors import ConfigError


def test_chain_and_star_shapes():
    chain = graphs.generate_graph("chain", 1000)
    assert chain.m == 999
    assert graphs.level_count(chain) == 1000
    assert graphs.level_count(graphs.generate_graph("star", 1000)) == 2


def test_generators_are_deterministic():
    a = graphs.dumps_csr(graphs.generate_graph("random", 1000, 7))
    b = graphs.dumps_csr(graphs.generate_graph("random", 1000, 7))
    assert a == b
    assert a != graphs.dumps_csr(graphs.generate_graph("random", 1000, 8))


def test_wide_is_shallower_than_deep():
    wide = graphs.level_count(graphs.generate_graph("wide", 500, 1))
    deep = graphs.level_count(graphs.generate_graph("deep", 500, 1))
    assert wide * 5 < deep


@pytest.mark.parametrize("kind", ["chain", "star", "grid", "random", "deep"])
def test_every_node_reached(kind):
    g = graphs.generate_graph(kind, 50, 3)
    assert min(graphs.bfs_levels(g)) == 0


def test_csr_round_trip_and_errors(tmp_path):
    g = graphs.generate_graph("grid", 16)
    path = tmp_path / "g.csr"
    path.write_text("# a grid\n" + graphs.dumps_csr(g))
    assert graphs.parse_input(str(path)) == g
    with pytest.raises(ConfigError):
        graphs.loads_csr("csr 2 1 0\n0 1 1\n5\n")
    with pytest.raises(ConfigError):
        graphs.parse_input("chain:x")
    with pytest.raises(ConfigError):
        graphs.parse_input(str(tmp_path / "missing"))


def test_levels_oracle_small_cases():
    g = graphs.generate_graph("chain", 5)
    assert graphs.bfs_levels(g) == [0, 1, 2, 3, 4]
    assert graphs.bfs_levels(graphs.generate_graph("star", 6)) == [0, 1, 1, 1, 1, 1]
    unreachable = graphs.from_adjacency([[1], [], []])
    assert graphs.bfs_levels(unreachable) == [0, 1, -1]


def run_semantics(prog, N, rng, args=None, m0=None):
    st = sm.KernelState.launch(prog, N=N, M=m0, args=args)
    for _ in range(2_000_000):
        trs = sm.enabled_transitions(st, fork_cap=N)
        if not trs:
            break
        sm.apply_transition_inplace(st, rng.choice(trs))
    assert st.terminated()
    return st


def test_graph_program_examples():
    rng = random.Random(0)
    g = graphs.generate_graph("chain", 5)
    st = run_semantics(wl.make_graph_program(g), 2, rng)
    assert st.buffer("levels") == [0, 1, 2, 3, 4]
    star = graphs.generate_graph("star", 7)
    st = run_semantics(wl.make_graph_program(star), 3, rng)
    assert st.buffer("levels") == [0] + [1] * 6


@pytest.mark.parametrize("depth,branching,total", [(3, 2, 15), (0, 3, 1), (2, 3, 13)])
def test_tree_sizes(depth, branching, total):
    assert wl.tree_size(depth, branching) == total
    assert len(wl.expand_tree(depth, branching)) == total


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 3), st.integers(1, 3), st.integers(1, 3), st.integers(0, 10_000))
def test_workstealing_matches_expansion_under_random_schedules(depth, branching, m0, seed):
    prog, tq = wl.make_workstealing_program(depth, branching, queues=3)
    args = wl.workstealing_args(depth, branching, tq)
    st = run_semantics(prog, 3, random.Random(seed), args, m0=m0)
    assert wl.processed_tasks(st.buffer("done")) == Counter(wl.expand_tree(depth, branching))
    assert st.buffer("pending") == [0]
    # every lock released at quiescence
    assert all(st.buffer("queues")[c] == 0 for c in tq.lock_cells())


def test_workstealing_program_shape():
    prog, tq = wl.make_workstealing_program(3, 2)
    assert pm.validate(prog).ok
    assert prog.transmit == ()
    assert tq.stride == 15 + 3
    with pytest.raises(ConfigError):
        wl.make_workstealing_program(-1, 2)


def test_presets_and_synthetic_scaling():
    s = wl.make_synthetic_noncoop("light", 8)
    assert (s.period_ns, s.duration_ns) == (70_000_000, 3_000_000)
    heavy = wl.make_synthetic_noncoop("heavy", 8)
    k = heavy.kernel()
    assert k.duration(4) == 2 * k.duration(8)
    assert k.duration(8) == 10_000_000
    medium = wl.make_synthetic_noncoop("medium", 8)
    assert len(medium.launch_times(400_000_000)) == 10
    with pytest.raises(ConfigError):
        wl.make_synthetic_noncoop("extreme", 8)


def test_synthetic_steps_are_ceiling():
    k = wl.SyntheticKernel(work_ns=10_500, groups=2, step_ns=1000)
    assert k.steps_per_thread(2) == 6
    assert k.duration(2) == 6000


@pytest.mark.parametrize("fraction,expected", [("one", 1), ("quarter", 2), ("half", 4), ("allbutone", 7)])
def test_fractions(fraction, expected):
    assert wl.fraction_groups(fraction, 8) == expected


def test_unknown_fraction():
    with pytest.raises(ConfigError):
        wl.fraction_groups("most", 8)
