"""Master/slave inter-workgroup barriers lowered into kernel code.

The simulator does not treat barriers as magic: every ``global_barrier`` and
``resizing_global_barrier`` is rewritten into ordinary instructions working
on a reserved three-cell buffer ``__bar``:

    cell 0  arrival counter (slave threads that reached the barrier)
    cell 1  generation, bumped by the master to release everybody
    cell 2  claim threshold: after release, groups with id >= it surrender

Workgroup 0 is the master.  Slaves remember the generation seen on entry
and spin until it changes, so the counter never needs per-slot flags and
workgroups forked mid-protocol cannot observe a stale release.

The resizing variants only add ``@coop`` statements to the plain skeleton:

* naive: slaves ``offer_kill`` on entry, the master forks after everyone
  arrived, forked groups join the wait;
* query: as naive, and the master also calls ``query`` before releasing and
  publishes ``M - W`` so the top W groups spin on ``offer_kill`` until the
  scheduler has claimed them; the survivors wait for those claims before
  leaving the barrier.

Every group leaves a resizing barrier holding the new group count in
``__bk``.  Unless the program also resizes outside barriers, user reads of
``get_num_groups`` and ``get_global_size`` are rewritten to use that copy, so
the count a program sees only changes at resizing barriers, even when a
naive slave is killed on entry while others are still finishing the
previous phase.

Sharing one skeleton keeps a naive run and a query run with identical
schedules indistinguishable until the first demand arrives.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from . import program as pm
from .errors import CoopError, DeadlockDetected

BAR = "__bar"
TAIL_LINE = 0  # line tag of the claim-loop offer_kill (parsed code starts at line 1)
MODES = ("plain", "naive", "query")


def _a(dst, op, *args, coop=False):
    if op not in pm.KEYWORDS:
        return pm.Assign(dst, "mov", (op,), coop)
    return pm.Assign(dst, op, tuple(args), coop)


def _spin_generation(coop=False):
    # while atomic_load(__bar[1]) == __bg: spin
    return pm.While((_a("__bs", "atomic_load", BAR, 1, coop=coop),), pm.Cond("eq", ("__bs", "__bg")), (), coop)


def barrier_code(resize: str = "plain") -> tuple:
    """Statements implementing one barrier.  ``resize`` is plain, naive or query."""
    if resize not in MODES:
        raise CoopError(f"unknown barrier mode {resize!r}")
    r = resize != "plain"
    C = dict(coop=True)

    master_wait = pm.While(
        (
            _a("__bn", "get_num_groups"),
            _a("__bt", "sub", "__bn", 1),
            _a("__bt", "mul", "__bt", "__ls"),
            _a("__bc", "atomic_load", BAR, 0),
        ),
        pm.Cond("lt", ("__bc", "__bt")),
        (),
    )
    release = [pm.Store("atomic_store", (BAR, 0, 0))]
    if r:
        release = [
            _a("__bq", "query", **C) if resize == "query" else _a("__bq", 0, **C),
            _a("__bn", "get_num_groups", **C),
            _a("__bk", "sub", "__bn", "__bq", **C),
            _a("__bk", "max", "__bk", 1, **C),
            pm.Store("atomic_store", (BAR, 2, "__bk"), True),
        ] + release
    release += [_a("__bg", "add", "__bg", 1), pm.Store("atomic_store", (BAR, 1, "__bg"))]

    master = [master_wait]
    if r:
        master += [pm.Primitive("request_fork", True), _a("__bw", "get_group_id", **C)]
    master += [
        _a("__bl", "get_local_id"),
        _a("__bm", "or", "__bw", "__bl"),
        pm.If(pm.Cond("eq", ("__bm", 0)), tuple(release), (_spin_generation(),)),
    ]

    slave = []
    if r:
        slave.append(pm.Primitive("offer_kill", True))
    slave += [_a("__bx", "atomic_add", BAR, 0, 1), _spin_generation()]

    out = [
        _a("__ls", "get_local_size"),
        _a("__bg", "atomic_load", BAR, 1),
        _a("__bw", "get_group_id"),
        pm.If(pm.Cond("eq", ("__bw", 0)), tuple(master), tuple(slave)),
    ]
    if r:
        out += [
            _a("__bk", "atomic_load", BAR, 2, **C),
            _a("__ls", "get_local_size", **C),
            _a("__bw", "get_group_id", **C),
            pm.If(
                pm.Cond("ge", ("__bw", "__bk")),
                (pm.While((), pm.Cond("mov", (1,)), (pm.Primitive("offer_kill", True, TAIL_LINE),), True),),
                # survivors hold until the claimed groups are gone
                (pm.While((_a("__bn", "get_num_groups", **C),), pm.Cond("gt", ("__bn", "__bk")), (), True),),
                True,
            ),
        ]
    return tuple(out)


def lower_barriers(prog: pm.Program, resize: str = "query") -> pm.Program:
    """Replace every barrier of ``prog`` by its master/slave implementation.

    Plain barriers always use the plain skeleton; resizing barriers use the
    ``resize`` variant.
    """
    if resize not in MODES:
        raise CoopError(f"unknown barrier mode {resize!r}")
    found = [False]
    ops = {s.op for s in pm.walk(prog.body) if isinstance(s, pm.Primitive)}
    cached = resize != "plain" and "resizing_global_barrier" in ops and not ops & {"offer_kill", "request_fork"}

    def block(stmts):
        out = []
        for s in stmts:
            if cached and isinstance(s, pm.Assign) and s.op == "get_num_groups":
                out.append(replace(s, op="mov", args=("__bk",)))
            elif cached and isinstance(s, pm.Assign) and s.op == "get_global_size":
                out.append(replace(s, op="mul", args=("__bk", "__ls")))
            elif isinstance(s, pm.GlobalBarrier):
                found[0] = True
                out.extend(barrier_code("plain"))
            elif isinstance(s, pm.Primitive) and s.op == "resizing_global_barrier":
                found[0] = True
                out.extend(barrier_code(resize))
            elif isinstance(s, pm.If):
                out.append(replace(s, then=tuple(block(s.then)), orelse=tuple(block(s.orelse))))
            elif isinstance(s, pm.While):
                out.append(replace(s, header=tuple(block(s.header)), body=tuple(block(s.body))))
            else:
                out.append(s)
        return out

    body = tuple(block(prog.body))
    if not found[0]:
        return prog
    init = (pm.Assign("__bg", "mov", (0,)),)
    if cached:
        init += (_a("__bk", "get_num_groups", coop=True), _a("__ls", "get_local_size", coop=True))
    transmit = prog.transmit if "__bg" in prog.transmit else prog.transmit + ("__bg",)
    return replace(
        prog,
        body=init + body,
        params=prog.params + (BAR,),
        buffers=prog.buffers + (pm.BufferDecl(BAR, 3),),
        transmit=transmit,
    )


# ---------------------------------------------------------------------------
# stand-alone protocol runs


@dataclass
class EpisodeLog:
    m_before: int
    m_after: int = 0
    forks: int = 0
    kills: int = 0
    W: int = 0
    duration: int = 0
    killed: list = field(default_factory=list)


def barrier_kernel(resize: str) -> pm.Program:
    """A kernel consisting of a single resizing barrier."""
    prog = pm.Program(f"resize_once_{resize}", body=(pm.Primitive("resizing_global_barrier"),))
    return lower_barriers(prog, resize)


def _run_protocol(state, sched, max_steps=200_000) -> EpisodeLog:
    """Step every thread round-robin, one instruction at a time, until all
    have left the barrier.  ``sched`` answers on_offer_kill(wg),
    on_request_fork(wg) and query()."""
    from . import semantics as sm

    code = state.kernel.code
    end = len(code)
    log = EpisodeLog(state.M)
    steps = 0
    while not state.terminated():
        progressed = False
        for g in range(state.N):
            if g >= state.M:
                break
            w = state.slots[g]
            pcs = {t.pc for t in w.threads}
            if len(pcs) == 1:
                pc = pcs.pop()
                if pc < end and code[pc][0] == "kill":
                    ok = g == state.M - 1 and state.M > 1 and sched.on_offer_kill(g)
                    sm.apply_offer_kill_inplace(state, g, ok)
                    if ok:
                        log.kills += 1
                        log.killed.append(g)
                    progressed = True
                    continue
                if pc < end and code[pc][0] == "fork":
                    k = min(sched.on_request_fork(g), state.N - state.M)
                    sm.apply_request_fork_inplace(state, g, k)
                    log.forks += k
                    progressed = True
                    continue
            for tid, t in enumerate(w.threads):
                if t.pc < end and code[t.pc][0] not in ("kill", "fork", "bar"):
                    q = 0
                    if code[t.pc][0] == "set" and code[t.pc][4] == "query":
                        q = sched.query()
                        log.W = q
                    sm.exec_instr(state, g, tid, t, code[t.pc], q)
                    progressed = True
        steps += 1
        if not progressed or steps > max_steps:
            raise DeadlockDetected("barrier protocol made no progress")
    log.m_after = state.M
    log.duration = steps
    return log


def _expect(state, mode):
    if state.kernel.program.name != f"resize_once_{mode}":
        raise CoopError(f"state does not hold a {mode} resizing-barrier kernel; use barrier_state()")


def barrier_naive_resize(state, sched):
    """Run one naive resizing-barrier episode; returns (state, EpisodeLog)."""
    _expect(state, "naive")
    st = state.clone()
    return st, _run_protocol(st, sched)


def barrier_query_resize(state, sched):
    """Run one query-based resizing-barrier episode; returns (state, EpisodeLog)."""
    _expect(state, "query")
    st = state.clone()
    return st, _run_protocol(st, sched)


def barrier_state(resize: str, M: int, N: int, d: int = 1):
    """Initial kernel state for a single barrier episode with M of N groups."""
    from . import semantics as sm

    return sm.KernelState.launch(barrier_kernel(resize), N=N, d=d, M=M)


class CountingScheduler:
    """Minimal scheduler for protocol runs: a kill demand and a fork grant."""

    def __init__(self, demand=0, grant=0):
        self.demand = demand
        self.grant = grant

    def on_offer_kill(self, wg):
        if self.demand > 0:
            self.demand -= 1
            return True
        return False

    def on_request_fork(self, wg):
        if self.demand > 0:
            return 0  # same rule as the real scheduler: no growth while reclaiming
        k, self.grant = self.grant, 0
        return k

    def query(self):
        return self.demand
