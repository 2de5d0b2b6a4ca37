import json
import time

import pytest

from coopkernels import checker as ck
from coopkernels import program as pm
from coopkernels import workloads as wl
from coopkernels.errors import CoopError


def passes(rep, props=ck.ALL_PROPERTIES):
    return all(isinstance(rep.verdicts[p], ck.Pass) for p in props)


def test_mutex_is_safe_and_fair():
    rep = ck.explore(wl.load_kernel("mutex"), N=2, config=ck.ExplorationConfig(cell_bounds=(("inside", 0, 0, 1),)))
    assert passes(rep), rep.table()
    assert rep.completion_possible and rep.exit_code() == 0


def test_mutex_starves_without_fairness_and_the_lasso_replays():
    prog = wl.load_kernel("mutex")
    rep = ck.explore(prog, N=2, config=ck.ExplorationConfig(fairness=False))
    cx = rep.verdicts["starvation"]
    assert isinstance(cx, ck.Counterexample)
    assert 0 <= cx.loop_start < len(cx.trace)
    states = ck.replay(prog, 2, 1, cx.trace)
    assert states[cx.loop_start].freeze() == states[-1].freeze()
    # the JSON form replays the same way
    again = ck.replay(prog, 2, 1, cx.to_json()["trace"])
    assert again[-1].freeze() == states[-1].freeze()
    assert rep.exit_code() == 1


def test_barrier_kernel_deadlocks_on_two_units():
    prog = wl.load_kernel("barrier")
    rep = ck.explore(prog, N=3, config=ck.ExplorationConfig(units=2))
    assert not rep.completion_possible
    cx = rep.verdicts["deadlock"]
    assert isinstance(cx, ck.Counterexample)
    assert "[2]" in cx.message
    fair = ck.explore(prog, N=3, config=ck.ExplorationConfig())
    assert passes(fair) and fair.completion_possible


def test_resize_micro_kernel_conforms():
    t = time.time()
    rep = ck.explore(wl.load_kernel("resize"), N=3, d=1, config=ck.ExplorationConfig(fork_cap=2))
    assert passes(rep), rep.table()
    assert not rep.exhausted
    assert time.time() - t < 30


def test_resize_micro_kernel_from_every_start_size():
    for m in (1, 2):
        rep = ck.explore(wl.load_kernel("resize"), N=3, config=ck.ExplorationConfig(initial_m=m))
        assert passes(rep), (m, rep.table())


def test_budget_exhaustion_is_reported():
    rep = ck.explore(wl.load_kernel("resize"), N=3, config=ck.ExplorationConfig(max_states=50))
    assert rep.exhausted
    assert isinstance(rep.verdicts["deadlock"], ck.BudgetExhausted)
    assert rep.exit_code() == 3


def test_larger_fork_cap_never_shrinks_the_state_space():
    prog = wl.load_kernel("resize")
    counts = [ck.explore(prog, N=3, config=ck.ExplorationConfig(fork_cap=k, initial_m=1)).states for k in (0, 1, 2)]
    assert counts == sorted(counts)
    assert counts[0] < counts[2]


def test_cell_bound_violation_has_a_trace():
    src = """
    .param out
    .buffer out 1
    g := get_group_id
    store out 0 g
    """
    prog = pm.assemble(src)
    rep = ck.explore(prog, N=3, config=ck.ExplorationConfig(cell_bounds=(("out", 0, 0, 1),)))
    cx = rep.verdicts["cell_bounds"]
    assert isinstance(cx, ck.Counterexample)
    last = ck.replay(prog, 3, 1, cx.trace)[-1]
    assert last.buffer("out")[0] == 2


def test_runtime_errors_are_properties():
    prog = pm.assemble(".param out\n.buffer out 1\nx := load out 5\n")
    rep = ck.explore(prog, N=1)
    assert rep.failed() == ["runtime_errors"]


def test_report_json_round_trips(tmp_path):
    rep = ck.explore(wl.load_kernel("mutex"), N=2, config=ck.ExplorationConfig(fairness=False))
    doc = json.loads(json.dumps(rep.to_json()))
    assert doc["verdicts"]["starvation"]["verdict"] == "counterexample"
    path = tmp_path / "cx.json"
    ck.dump_trace(rep.verdicts["starvation"], path)
    assert json.loads(path.read_text())["loop_start"] == rep.verdicts["starvation"].loop_start


def test_config_validation():
    with pytest.raises(CoopError):
        ck.ExplorationConfig(max_states=0)
    with pytest.raises(CoopError):
        ck.ExplorationConfig(properties=("liveness",))
