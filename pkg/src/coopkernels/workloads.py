"""Bundled cooperative kernels, the synthetic non-cooperative task and oracles."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, replace
from functools import lru_cache
from importlib import resources

from . import program as pm
from .errors import ConfigError
from .graphs import FrontierGraph

BUNDLED = ("bfs", "workstealing", "mutex", "barrier", "resize")

# (period P, duration E) in virtual milliseconds
PRESETS = {"light": (70, 3), "medium": (40, 3), "heavy": (40, 10)}
FRACTIONS = ("one", "quarter", "half", "allbutone")


@lru_cache(maxsize=None)
def kernel_source(name: str) -> str:
    if name not in BUNDLED:
        raise ConfigError(f"unknown bundled kernel {name!r}")
    return resources.files("coopkernels.kernels").joinpath(f"{name}.cka").read_text()


def load_kernel(name: str) -> pm.Program:
    return pm.assemble(kernel_source(name))


# frontier traversal -------------------------------------------------------------


def make_graph_program(graph: FrontierGraph) -> pm.Program:
    """The traversal kernel with the graph and frontier buffers attached."""
    prog = load_kernel("bfs")
    levels = [-1] * graph.n
    levels[graph.source] = 0
    cap = graph.n + 1
    bufs = (
        pm.BufferDecl("offsets", len(graph.offsets), tuple(graph.offsets)),
        pm.BufferDecl("edges", max(1, graph.m), tuple(graph.edges)),
        pm.BufferDecl("levels", graph.n, tuple(levels)),
        pm.BufferDecl("na", cap, (1, graph.source)),
        pm.BufferDecl("nb", cap, (0,)),
    )
    return replace(prog, buffers=bufs)


# work stealing ---------------------------------------------------------------


def tree_size(depth: int, branching: int) -> int:
    return sum(branching**i for i in range(depth + 1))


@dataclass(frozen=True)
class TaskQueueSet:
    """Layout of the per-slot task queues in global memory."""

    queues: int
    capacity: int

    @property
    def stride(self) -> int:
        return self.capacity + 3

    def initial(self, root_task: int = 0) -> list:
        data = [0] * (self.queues * self.stride)
        data[2] = 1  # queue 0: head 0, tail 1
        data[3] = root_task
        return data

    def lock_cells(self) -> list:
        return [q * self.stride for q in range(self.queues)]


def make_workstealing_program(tree_depth: int, branching: int, queues: int = 8, task_work: int = 8):
    """Work-stealing kernel expanding a complete ``branching``-ary tree.

    Returns (Program, TaskQueueSet).  Every processed task is appended to
    the ``done`` buffer after a counter in cell 0.
    """
    if tree_depth < 0 or branching < 1:
        raise ConfigError("need depth >= 0 and branching >= 1")
    if tree_depth >= 64:
        raise ConfigError("tree depth must stay below 64")
    total = tree_size(tree_depth, branching)
    tq = TaskQueueSet(queues, total)
    prog = load_kernel("workstealing")
    bufs = (
        pm.BufferDecl("queues", queues * tq.stride, tuple(tq.initial())),
        pm.BufferDecl("pending", 1, (1,)),
        pm.BufferDecl("done", total + 1),
    )
    return replace(prog, buffers=bufs), tq


def workstealing_args(tree_depth, branching, tq: TaskQueueSet, task_work=8) -> dict:
    return {
        "depth": tree_depth,
        "branch": branching,
        "work": task_work,
        "qstride": tq.stride,
        "nq": tq.queues,
    }


def expand_tree(depth: int, branching: int) -> list:
    """Sequential oracle: every task of the tree, encoded as id*64 + depth."""
    out = []
    stack = [(0, 0)]
    while stack:
        tid, dep = stack.pop()
        out.append(tid * 64 + dep)
        if dep < depth:
            for c in range(branching):
                stack.append((tid * branching + 1 + c, dep + 1))
    return sorted(out)


def processed_tasks(done: list) -> Counter:
    return Counter(done[1 : 1 + done[0]])


# synthetic non-cooperative task ------------------------------------------------------


@dataclass(frozen=True)
class SyntheticKernel:
    """Abstract spin work: ``work_ns`` of compute spread over the granted groups."""

    work_ns: int
    groups: int
    step_ns: int = 1000

    def steps_per_thread(self, granted: int) -> int:
        return math.ceil(self.work_ns / granted / self.step_ns)

    def duration(self, granted: int) -> int:
        return self.steps_per_thread(granted) * self.step_ns


@dataclass(frozen=True)
class SyntheticStream:
    """A non-cooperative kernel requested every ``period_ns``."""

    preset: str
    period_ns: int
    duration_ns: int
    units: int
    groups: int

    def kernel(self) -> SyntheticKernel:
        return SyntheticKernel(self.duration_ns * self.units, self.groups)

    def launch_spec(self) -> pm.LaunchSpec:
        prog = pm.Program(f"synthetic_{self.preset}")
        return pm.LaunchSpec(prog, self.groups, 1, cooperative=False)

    def launch_times(self, horizon_ns: int) -> list:
        """Request times if every launch completes within its period."""
        return list(range(0, horizon_ns, self.period_ns))


def fraction_groups(fraction: str, units: int) -> int:
    if fraction == "one":
        return 1
    if fraction == "quarter":
        return max(1, units // 4)
    if fraction == "half":
        return max(1, units // 2)
    if fraction == "allbutone":
        return max(1, units - 1)
    raise ConfigError(f"unknown fraction {fraction!r}; expected one of {', '.join(FRACTIONS)}")


def make_synthetic_noncoop(preset: str, units: int, fraction: str = "one") -> SyntheticStream:
    if preset not in PRESETS:
        raise ConfigError(f"unknown workload {preset!r}; expected one of {', '.join(PRESETS)}")
    P, E = PRESETS[preset]
    return SyntheticStream(preset, P * 1_000_000, E * 1_000_000, units, fraction_groups(fraction, units))
