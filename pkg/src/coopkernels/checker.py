"""Explicit-state exploration of the kernel transition system.

States are explored breadth first over every interleaving and every
scheduler choice (kill accept/reject, fork count, query answer).  Safety
properties are checked on every state and transition; deadlocks are states
with no enabled transition that have not terminated; starvation is a
reachable cycle of non-terminated states that is fair (strong fairness per
thread) when fairness is on, or any such cycle when it is off.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from typing import Optional

from . import semantics as sm
from .barriers import TAIL_LINE
from .errors import CoopError, ExecutionError

SAFETY = (
    "m_bounds",
    "contiguity",
    "kill_order",
    "survivor_prefix",
    "transmit_completeness",
    "cell_bounds",
    "runtime_errors",
)
PROGRESS = ("deadlock", "starvation")
ALL_PROPERTIES = SAFETY + PROGRESS


@dataclass
class ExplorationConfig:
    max_states: int = 200_000
    max_depth: Optional[int] = None
    fork_cap: int = 2
    query_cap: Optional[int] = None
    fairness: bool = True
    units: Optional[int] = None  # occupancy-bound execution on this many units
    initial_m: Optional[int] = None
    properties: tuple = ALL_PROPERTIES
    cell_bounds: tuple = ()  # (buffer, index, low, high)
    # the scheduler keeps the promise made by query: claim-loop offers by the
    # eligible group are always accepted
    honour_claims: bool = False

    def __post_init__(self):
        if self.max_states < 1 or (self.max_depth is not None and self.max_depth < 1):
            raise CoopError("exploration caps must be positive")
        if self.fork_cap < 0:
            raise CoopError("fork cap must be non-negative")
        unknown = set(self.properties) - set(ALL_PROPERTIES)
        if unknown:
            raise CoopError(f"unknown properties {sorted(unknown)}")


@dataclass
class Pass:
    def to_json(self):
        return {"verdict": "pass"}


@dataclass
class Counterexample:
    message: str
    trace: list
    loop_start: Optional[int] = None  # index into trace where the lasso's cycle begins

    def to_json(self):
        d = {"verdict": "counterexample", "message": self.message, "trace": [t.to_json() for t in self.trace]}
        if self.loop_start is not None:
            d["loop_start"] = self.loop_start
        return d


@dataclass
class BudgetExhausted:
    states: int
    frontier: int
    depth: int

    def to_json(self):
        return {"verdict": "budget_exhausted", "states": self.states, "frontier": self.frontier, "depth": self.depth}


@dataclass
class Report:
    verdicts: dict
    states: int
    transitions: int
    terminal_states: int
    exhausted: bool
    meta: dict = field(default_factory=dict)

    @property
    def completion_possible(self) -> bool:
        return self.terminal_states > 0

    def failed(self):
        return [p for p, v in self.verdicts.items() if isinstance(v, Counterexample)]

    def exit_code(self) -> int:
        if self.failed():
            return 1
        if any(isinstance(v, BudgetExhausted) for v in self.verdicts.values()):
            return 3
        return 0

    def to_json(self):
        return {
            "states": self.states,
            "transitions": self.transitions,
            "terminal_states": self.terminal_states,
            "exhausted": self.exhausted,
            "meta": self.meta,
            "verdicts": {p: v.to_json() for p, v in self.verdicts.items()},
        }

    def table(self) -> str:
        rows = [f"{'property':24} verdict"]
        for p, v in self.verdicts.items():
            if isinstance(v, Pass):
                s = "pass"
            elif isinstance(v, Counterexample):
                s = f"FAIL ({len(v.trace)} steps): {v.message}"
            else:
                s = f"budget exhausted ({v.states} states, frontier {v.frontier})"
            rows.append(f"{p:24} {s}")
        rows.append(f"states={self.states} transitions={self.transitions} terminal={self.terminal_states}")
        return "\n".join(rows)


def occupancy_filter(units):
    """Only the ``units`` lowest-id groups that have not finished may run."""

    def make(st):
        end = st.kernel.end
        occ = set()
        for g in range(st.M):
            if len(occ) >= units:
                break
            if not all(t.pc >= end for t in st.slots[g].threads):
                occ.add(g)
        return lambda g: g in occ

    return make


def _actors(st, tr):
    if tr.rule == "step":
        return ((tr.wg, tr.tid),)
    if tr.rule in ("kill", "fork"):
        return tuple((tr.wg, i) for i in range(st.d))
    return tuple((g, i) for g in range(st.M) for i in range(st.d))


def _refused_claim(st, tr):
    if tr.rule != "kill" or tr.choice or tr.wg != st.M - 1 or st.M <= 1:
        return False
    ins = st.kernel.code[st.slots[tr.wg].threads[0].pc]
    return ins[2] == TAIL_LINE


def _episode_ids(kernel):
    starts, ends = {}, {}
    for label, bid in kernel.barrier_labels.items():
        if label.startswith("__rb"):
            n, part = label[4:].split(".")
            (starts if part == "a" else ends if part == "c" else {})[bid] = n
    return starts, ends


def explore(program, N, d=1, config: Optional[ExplorationConfig] = None, args=None, buffers=None) -> Report:
    cfg = config or ExplorationConfig()
    init = sm.KernelState.launch(program, N=N, d=d, M=cfg.initial_m, args=args, buffers=buffers)
    props = set(cfg.properties)
    verdicts: dict = {p: None for p in cfg.properties}
    runnable_for = occupancy_filter(cfg.units) if cfg.units is not None else None
    ep_start, ep_end = _episode_ids(init.kernel)
    transmit = init.kernel.transmit
    bounds = [(init.kernel.buffer_names.index(b), i, lo, hi, b) for b, i, lo, hi in cfg.cell_bounds]

    keys: dict = {}
    parents: list = []  # (parent id, transition)
    states: list = []  # kept only for unexpanded states
    succ: list = []  # per state: list of (child id, actors)
    enabled_actors: list = []
    depth: list = []
    terminal = 0
    transitions = 0

    def key_of(st, ghost):
        return (st.freeze(), ghost)

    def add(st, ghost, parent, tr, dep):
        k = key_of(st, ghost)
        sid = keys.get(k)
        if sid is not None:
            return sid, False
        sid = len(parents)
        keys[k] = sid
        parents.append((parent, tr))
        states.append((st, ghost))
        succ.append(None)
        enabled_actors.append(None)
        depth.append(dep)
        return sid, True

    def trace_to(sid):
        out = []
        while sid is not None:
            p, tr = parents[sid]
            if tr is not None:
                out.append(tr)
            sid = p
        out.reverse()
        return out

    def fail(prop, msg, sid, extra=None):
        if prop in props and verdicts.get(prop) is None:
            tr = trace_to(sid) + ([extra] if extra is not None else [])
            verdicts[prop] = Counterexample(msg, tr)

    def check_state(st, sid):
        if not (1 <= st.M <= st.N):
            fail("m_bounds", f"M={st.M} outside [1, {st.N}]", sid)
        if any(s is None for s in st.slots[: st.M]) or any(s is not None for s in st.slots[st.M :]):
            fail("contiguity", "active slots are not exactly [0, M-1]", sid)
        for h, i, lo, hi, name in bounds:
            v = st.shared.global_mem[h][i]
            if not lo <= v <= hi:
                fail("cell_bounds", f"{name}[{i}] = {v} outside [{lo}, {hi}]", sid)

    first, _ = add(init, None, None, None, 0)
    check_state(init, first)
    queue = deque([first])
    exhausted = False
    max_depth_seen = 0

    while queue:
        sid = queue.popleft()
        st, ghost = states[sid]
        states[sid] = None
        if cfg.max_depth is not None and depth[sid] >= cfg.max_depth:
            exhausted = True
            continue
        runnable = runnable_for(st) if runnable_for else None
        trs = sm.enabled_transitions(st, fork_cap=cfg.fork_cap, query_cap=cfg.query_cap, runnable=runnable)
        if cfg.honour_claims:
            trs = [t for t in trs if not _refused_claim(st, t)]
        acts = set()
        for tr in trs:
            acts.update(_actors(st, tr))
        enabled_actors[sid] = frozenset(acts)
        edges = []
        if not trs:
            if st.terminated():
                terminal += 1
            else:
                why = sm.stuck_reason(st)
                if runnable is not None:
                    res = [g for g in range(st.M) if runnable(g)]
                    out = [g for g in range(st.M) if not runnable(g) and not all(t.pc >= st.kernel.end for t in st.slots[g].threads)]
                    if out:
                        why = f"resident groups {res} wait at a barrier for non-resident groups {out}"
                fail("deadlock", f"deadlock: {why}", sid)
        for tr in trs:
            transitions += 1
            child = st.clone()
            try:
                sm.apply_transition_inplace(child, tr)
            except ExecutionError as e:
                fail("runtime_errors", f"{type(e).__name__}: {e}", sid, tr)
                continue
            g2 = ghost
            if tr.rule == "kill" and tr.choice:
                if not (tr.wg == st.M - 1 and st.M > 1 and child.M == st.M - 1):
                    fail("kill_order", f"group {tr.wg} killed with M={st.M}", sid, tr)
            if tr.rule == "fork" and tr.choice:
                src = st.slots[tr.wg].threads[0].env
                for g in range(st.M, child.M):
                    for t in child.slots[g].threads:
                        if set(t.env) != set(transmit) or any(t.env[v] != src.get(v) for v in t.env):
                            fail("transmit_completeness", f"forked group {g} starts with {sorted(t.env)}", sid, tr)
            if tr.rule == "barrier":
                bid = st.slots[0].threads[0].blocked_on
                if bid in ep_start:
                    g2 = (st.M, st.M)
                elif bid in ep_end and ghost is not None:
                    m_a, m_min = ghost
                    if m_min < min(m_a, child.M):
                        fail("survivor_prefix", f"group {m_min} killed although M went {m_a} -> {child.M}", sid, tr)
                    g2 = None
            if g2 is not None and tr.rule in ("kill", "fork"):
                g2 = (g2[0], min(g2[1], child.M))
            cid, new = add(child, g2, sid, tr, depth[sid] + 1)
            edges.append((cid, _actors(st, tr), tr))
            if new:
                check_state(child, cid)
                max_depth_seen = max(max_depth_seen, depth[cid])
                if len(parents) >= cfg.max_states:
                    exhausted = True
                else:
                    queue.append(cid)
        succ[sid] = edges
        if exhausted and len(parents) >= cfg.max_states:
            break

    frontier = sum(1 for s in succ if s is None)
    if "starvation" in props:
        lasso = _find_lasso(succ, enabled_actors, cfg.fairness)
        if lasso is not None:
            prefix_to, cycle = lasso
            pre = trace_to(prefix_to)
            verdicts["starvation"] = Counterexample(
                "non-terminating execution" + (" under fair scheduling" if cfg.fairness else ""),
                pre + cycle,
                loop_start=len(pre),
            )
    for p in cfg.properties:
        if verdicts[p] is None:
            verdicts[p] = BudgetExhausted(len(parents), frontier, max_depth_seen) if exhausted else Pass()
    meta = {"N": N, "d": d, "initial_m": init.M, "fairness": cfg.fairness, "units": cfg.units, "fork_cap": cfg.fork_cap}
    return Report(verdicts, len(parents), transitions, terminal, exhausted, meta)


# -- lasso search ------------------------------------------------------------------


def _tarjan(nodes, succ_of):
    """Strongly connected components of the subgraph induced by ``nodes``."""
    index, low, on, stack, out = {}, {}, set(), [], []
    counter = [0]
    for root in nodes:
        if root in index:
            continue
        work = [(root, iter(succ_of(root)))]
        index[root] = low[root] = counter[0]
        counter[0] += 1
        stack.append(root)
        on.add(root)
        while work:
            v, it = work[-1]
            advanced = False
            for w in it:
                if w not in nodes:
                    continue
                if w not in index:
                    index[w] = low[w] = counter[0]
                    counter[0] += 1
                    stack.append(w)
                    on.add(w)
                    work.append((w, iter(succ_of(w))))
                    advanced = True
                    break
                if w in on:
                    low[v] = min(low[v], index[w])
            if advanced:
                continue
            work.pop()
            if work:
                u = work[-1][0]
                low[u] = min(low[u], low[v])
            if low[v] == index[v]:
                comp = set()
                while True:
                    w = stack.pop()
                    on.discard(w)
                    comp.add(w)
                    if w == v:
                        break
                out.append(comp)
    return out


def _find_lasso(succ, enabled, fairness):
    expanded = {i for i, s in enumerate(succ) if s is not None and s}

    def succ_of(v):
        return [e[0] for e in succ[v]]

    work = [expanded]
    while work:
        nodes = work.pop()
        for comp in _tarjan(sorted(nodes), succ_of):
            inner = [(v, c, a) for v in comp for c, a, _ in succ[v] if c in comp]
            if not inner:
                continue
            if not fairness:
                return _lasso_path(succ, comp, inner)
            taken = set()
            for _, _, a in inner:
                taken.update(a)
            en = set()
            for v in comp:
                en |= enabled[v]
            unfair = en - taken
            if not unfair:
                return _lasso_path(succ, comp, inner)
            sub = {v for v in comp if not (enabled[v] & unfair)}
            if sub:
                work.append(sub)
    return None


def _lasso_path(succ, comp, inner):
    """A cycle through every edge-actor of ``comp`` returned as transitions.

    The prefix is the BFS-tree path to the entry state; the cycle is built by
    chaining shortest in-component paths through each inner edge."""
    entry = min(comp)
    # shortest paths inside the component
    def path(a, b):
        if a == b:
            return []
        prev = {a: None}
        q = deque([a])
        while q:
            v = q.popleft()
            for i, (c, _, _) in enumerate(succ[v]):
                if c in comp and c not in prev:
                    prev[c] = (v, i)
                    if c == b:
                        q.clear()
                        break
                    q.append(c)
        out = []
        v = b
        while prev[v] is not None:
            u, i = prev[v]
            out.append((u, i))
            v = u
        out.reverse()
        return out

    steps = []
    cur = entry
    seen_edges = set()
    for v, c, _ in inner:
        if (v, c) in seen_edges:
            continue
        steps += path(cur, v)
        i = next(i for i, e in enumerate(succ[v]) if e[0] == c)
        steps.append((v, i))
        seen_edges.add((v, c))
        cur = c
    steps += path(cur, entry)
    return entry, [succ[v][i][2] for v, i in steps]


# replay -----------------------------------------------------------------------------


def replay(program, N, d, trace, initial_m=None, args=None, buffers=None):
    """Re-execute a counterexample trace; returns the list of visited states."""
    st = sm.KernelState.launch(program, N=N, d=d, M=initial_m, args=args, buffers=buffers)
    out = [st]
    for tr in trace:
        if isinstance(tr, dict):
            tr = sm.Transition.from_json(tr)
        st = sm.apply_transition(st, tr)
        out.append(st)
    return out


def dump_trace(cx: Counterexample, path):
    with open(path, "w") as f:
        json.dump(cx.to_json(), f, indent=1, sort_keys=True)
        f.write("\n")
