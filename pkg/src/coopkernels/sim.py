"""Discrete-event simulator binding kernels, the scheduler and compute units.

Every thread keeps its own virtual clock (integer nanoseconds).  The thread
with the smallest clock runs next; ties break on (kind, group, thread) so a
run is a pure function of its configuration.  Barriers are lowered into
spin code on global memory (see ``barriers``), so a group that never gets a
compute unit really does hold everybody else up.

Spinning is not simulated instruction by instruction forever: when a thread
returns to a loop head with the same environment, without having written
anything, and none of the cells it read changed meanwhile, the next
iteration would repeat exactly, so the thread is parked on the cells it
read and woken by the next write to one of them.  It resumes at the later
of the write and the start of its last iteration, since that iteration
was spent waiting anyway.
"""

from __future__ import annotations

import heapq
import json
import random
from dataclasses import asdict, dataclass, field
from typing import Optional

from . import barriers as br
from . import program as pm
from . import semantics as sm
from .errors import (
    ConfigError,
    CoopError,
    DeadlockDetected,
    InvalidInterval,
    MismatchedOutputs,
    NonUniformReach,
    RejectedNoCapacity,
    StepBudgetExceeded,
)
from .scheduler import NeverResize, SchedulerContext

DEFAULT_COSTS = {"alu": 1, "local": 2, "global": 4, "atomic": 16, "primitive": 4}
# virtual nanoseconds per cost unit; chosen so one traversal level of the
# bundled kernels lasts around a virtual millisecond
DEFAULT_NS_PER_UNIT = 1000
MODES = ("fair", "occupancy")


def preemption_model_overhead(P, D) -> float:
    """Slowdown of switching to a task of duration D every P time units."""
    if D < 0 or P <= 0 or D >= P:
        raise InvalidInterval(f"need 0 <= D < P, got P={P}, D={D}")
    return P / (P - D)


@dataclass
class SimConfig:
    units: int = 8
    wgsize: int = 1
    costs: dict = field(default_factory=lambda: dict(DEFAULT_COSTS))
    ns_per_unit: int = DEFAULT_NS_PER_UNIT
    mode: str = "fair"
    quantum: int = 64
    seed: int = 0
    policy: object = field(default_factory=NeverResize)
    barrier: str = "query"
    max_steps: int = 20_000_000
    initial_groups: Optional[int] = None
    record_exec: bool = False

    def __post_init__(self):
        if self.units < 1 or self.wgsize < 1:
            raise ConfigError("units and wgsize must be at least 1")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        if self.barrier not in ("naive", "query"):
            raise ConfigError("barrier must be naive or query")
        costs = dict(DEFAULT_COSTS)
        costs.update(self.costs)
        for k, v in costs.items():
            if k not in DEFAULT_COSTS:
                raise ConfigError(f"unknown cost class {k!r}")
            # only the cooperative-primitive class may be free
            if v < 0 or (v == 0 and k != "primitive"):
                raise ConfigError(f"cost of {k} must be positive")
        self.costs = costs
        if self.quantum < 1 or self.ns_per_unit < 1:
            raise ConfigError("quantum and ns_per_unit must be positive")

    def describe(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if k not in ("policy", "record_exec")}
        d["policy"] = self.policy.name
        return d


_ATOMIC = {"atomic_load", "cas", "atomic_add", "atomic_xchg"}


def instruction_cost(ins, costs) -> int:
    kind = ins[0]
    if ins[1] or kind in ("kill", "fork"):
        return costs["primitive"]
    if kind == "set":
        op = ins[4]
        if op == "query":
            return costs["primitive"]
        if op == "load":
            return costs["global"]
        if op == "lload":
            return costs["local"]
        if op in _ATOMIC:
            return costs["atomic"]
        return costs["alu"]
    if kind == "st":
        return {"store": costs["global"], "lstore": costs["local"]}.get(ins[3], costs["atomic"])
    return costs["alu"]


class _Thread:
    __slots__ = (
        "g",
        "tid",
        "t",
        "clock",
        "token",
        "parked",
        "at_op",
        "done",
        "reads",
        "wrote",
        "head",
        "env0",
        "vc0",
        "clock0",
        "pid",
    )

    def __init__(self, g, tid, t, clock):
        self.g = g
        self.tid = tid
        self.t = t
        self.clock = clock
        self.token = 0
        self.parked = False
        self.at_op = False
        self.done = False
        self.reads = []
        self.wrote = False
        self.head = None
        self.env0 = None
        self.vc0 = 0
        self.clock0 = clock
        self.pid = 0


@dataclass
class LaunchRecord:
    index: int
    requested: int
    units: int
    start: Optional[int] = None
    end: Optional[int] = None
    gather: Optional[int] = None
    rejected: bool = False


@dataclass
class Episode:
    index: int
    m_before: int
    start: int
    query_time: Optional[int] = None
    W: int = 0
    release: Optional[int] = None
    end: Optional[int] = None
    forks: int = 0
    kills: int = 0


def _ms(ns) -> Optional[float]:
    return None if ns is None else round(ns / 1e6, 6)


@dataclass
class SimResult:
    config: dict
    state: sm.KernelState
    runtime: int
    steps: int
    episodes: list
    launches: list
    demands: list
    trace: list
    exec_log: Optional[list] = None

    def metrics(self, baseline: Optional[int] = None) -> dict:
        """The MetricsRecord: plain JSON-serialisable data, times in virtual ms."""
        launches = []
        prev_start = None
        for L in self.launches:
            if L.rejected or L.start is None or L.end is None:
                continue
            period = None if prev_start is None else L.start - prev_start
            prev_start = L.start
            launches.append(
                {
                    "index": L.index,
                    "requested_ms": _ms(L.requested),
                    "units": L.units,
                    "gather_ms": _ms(L.gather),
                    "exec_ms": _ms(L.end - L.start),
                    "period_ms": _ms(period),
                }
            )
        rec = {
            "config": self.config,
            "coop": {
                "runtime_ms": _ms(self.runtime),
                "episodes": len(self.episodes),
                "final_groups": self.state.M,
                "steps": self.steps,
            },
            "launches": launches,
            "rejected_launches": sum(1 for L in self.launches if L.rejected),
            "demands": self.demands,
        }
        if baseline is not None:
            rec["coop"]["baseline_runtime_ms"] = _ms(baseline)
            rec["coop"]["slowdown"] = round(self.runtime / baseline, 6) if baseline else None
        return rec

    def episodes_jsonl(self) -> str:
        return "".join(json.dumps(asdict(e), sort_keys=True) + "\n" for e in self.episodes)


class Simulation:
    def __init__(self, config: SimConfig, coop: pm.LaunchSpec, stream=None, args=None, buffers=None):
        self.cfg = config
        self.stream = stream
        prog = br.lower_barriers(coop.program, config.barrier)
        kernel, mem = sm.instantiate(prog, args, buffers)
        N, d = coop.groups, coop.wgsize
        if stream is not None and N > config.units:
            raise ConfigError("with a competing stream the kernel may request at most `units` groups")
        self.sched = SchedulerContext(config.units, config.policy, oversubscribe=stream is None)
        spec = pm.LaunchSpec(prog, N, d, True)
        dec = self.sched.launch(spec, 0, name=prog.name, start_groups=config.initial_groups)
        self.kid = dec.kid
        self.state = sm.KernelState.from_kernel(kernel, mem, N, d, len(dec.units))
        self.code = kernel.code
        self.end = len(self.code)
        self.costs = [instruction_cost(i, config.costs) * config.ns_per_unit for i in self.code]
        self.bar = kernel.buffer_names.index(br.BAR) if br.BAR in kernel.buffer_names else None

        self.heap: list = []
        self.seq = 0
        self.now = 0
        self.steps = 0
        self.vc = 0
        self.version: dict = {}
        self.waiters: dict = {}
        self.threads: list = [None] * N
        # units: which groups each hosts, head of the list runs
        self.hosted = [[] for _ in range(config.units)]
        self.unit_of = [None] * N
        self.used = [0] * config.units
        for g in range(self.state.M):
            self._add_group(g, 0, g % config.units if stream is None else dec.units[g])
        self.finished_at = None
        self.rec = sm.Recorder()
        self.exec_log = [] if config.record_exec else None

        self.episodes: list = [Episode(0, self.state.M, 0)]
        self.launches: list = []
        self.nc_running = None  # (LaunchRecord, kid)
        self.nc_queued = None
        self.next_request = None
        if stream is not None:
            rng = random.Random(f"phase:{config.seed}")
            self.next_request = rng.randrange(stream.period_ns)
        self.fruitless = 0

    # -- bookkeeping ------------------------------------------------------------

    def _add_group(self, g, clock, unit):
        w = self.state.slots[g]
        self.threads[g] = [_Thread(g, i, t, clock) for i, t in enumerate(w.threads)]
        self.unit_of[g] = unit
        hosted = self.hosted[unit]
        hosted.append(g)
        if hosted[0] == g:
            for rt in self.threads[g]:
                self._push(rt)

    def _push(self, rt):
        rt.token += 1
        heapq.heappush(self.heap, (rt.clock, 1, rt.g, rt.tid, rt.token))

    def _running(self, g):
        u = self.unit_of[g]
        return u is not None and self.hosted[u] and self.hosted[u][0] == g

    def _bump(self, key, when):
        self.vc += 1
        self.version[key] = self.vc
        ws = self.waiters.pop(key, None)
        if ws:
            for rt, pid in ws:
                if rt.parked and rt.pid == pid and self.threads[rt.g] is not None and rt in self.threads[rt.g]:
                    rt.parked = False
                    # the redundant iteration overlapped the wait
                    rt.clock = max(rt.clock0, when)
                    rt.head = None
                    if self._running(rt.g):
                        self._push(rt)
                    elif self.cfg.mode == "fair":
                        u = self.unit_of[rt.g]
                        if self._blocked(self.hosted[u][0]):
                            self._rotate(u, when)

    def _scheduler_changed(self, when):
        self._bump(("S",), when)

    def _rotate(self, u, when):
        """Switch unit ``u`` to the next hosted group that can run."""
        hosted = self.hosted[u]
        self.used[u] = 0
        if len(hosted) < 2:
            return
        for _ in range(len(hosted)):
            old = hosted.pop(0)
            hosted.append(old)
            for rt in self.threads[old]:
                rt.token += 1  # drop any heap entry
            if not self._blocked(hosted[0]):
                break
        self._schedule_head(u, when)

    def _schedule_head(self, u, when):
        for rt in self.threads[self.hosted[u][0]]:
            rt.clock = max(rt.clock, when)
            if not (rt.parked or rt.at_op or rt.done):
                self._push(rt)

    def _remove_group(self, g, when):
        u = self.unit_of[g]
        for rt in self.threads[g]:
            rt.token += 1
        self.threads[g] = None
        self.unit_of[g] = None
        hosted = self.hosted[u]
        was_head = hosted[0] == g
        hosted.remove(g)
        if was_head and hosted:
            self.used[u] = 0
            self._schedule_head(u, when)

    def _blocked(self, g):
        return all(rt.parked or rt.at_op or rt.done for rt in self.threads[g])

    # -- external events ----------------------------------------------------------

    def _next_external(self):
        times = []
        t = self.sched.next_scripted_time()
        if t is not None and self.finished_at is None:
            times.append(t)
        if self.next_request is not None and self.finished_at is None and self.nc_running is None and self.nc_queued is None:
            times.append(self.next_request)
        if self.nc_running is not None:
            times.append(self.nc_running[0].end)
        return min(times) if times else None

    def _external(self, t):
        if self.nc_running is not None and self.nc_running[0].end == t:
            L, kid = self.nc_running
            self.nc_running = None
            self.sched.finish(kid, t)
            self.next_request = max(L.requested + self.stream.period_ns, t)
            self._scheduler_changed(t)
            return
        st = self.sched.next_scripted_time()
        if st is not None and st == t:
            self.sched.poll(t)
            self._scheduler_changed(t)
            return
        if self.next_request == t:
            self._request_launch(t)
            return
        raise AssertionError("no external event at t")  # pragma: no cover

    def _request_launch(self, t):
        stream = self.stream
        L = LaunchRecord(len(self.launches), t, stream.groups)
        self.launches.append(L)
        try:
            dec = self.sched.launch(stream.launch_spec(), t)
        except RejectedNoCapacity:
            L.rejected = True
            self.next_request = t + stream.period_ns
            return
        if dec.started:
            self._start_noncoop(L, dec.kid, t)
        else:
            self.nc_queued = (L, dec.kid)
        self.next_request = None
        self._scheduler_changed(t)

    def _start_noncoop(self, L, kid, t):
        L.start = t
        L.gather = t - L.requested
        L.end = t + self.stream.kernel().duration(L.units)
        self.nc_running = (L, kid)

    def _drain_outbox(self):
        for kid, t in self.sched.outbox:
            if self.nc_queued is not None and self.nc_queued[1] == kid:
                L, _ = self.nc_queued
                self.nc_queued = None
                self._start_noncoop(L, kid, t)
        self.sched.outbox.clear()

    # -- main loop ----------------------------------------------------------------

    def run(self) -> SimResult:
        heap = self.heap
        while True:
            if self.finished_at is not None and self.nc_running is None and self.nc_queued is None:
                break
            ext = self._next_external()
            while heap and self._stale(heap[0]):
                heapq.heappop(heap)
            if ext is not None and (not heap or ext <= heap[0][0]):
                self.now = max(self.now, ext)
                self._external(ext)
                self.fruitless += 1
                if self.fruitless > 100_000:
                    raise DeadlockDetected("only external events fire; the kernel makes no progress")
                continue
            if not heap:
                if self.finished_at is not None:
                    break
                raise DeadlockDetected(self._deadlock_message())
            _, _, g, tid, _ = heapq.heappop(heap)
            rt = self.threads[g][tid]
            self.now = max(self.now, rt.clock)
            self.fruitless = 0
            self._run_thread(rt, ext)
        return self._result()

    def _stale(self, entry):
        _, _, g, tid, token = entry
        ts = self.threads[g] if g < len(self.threads) else None
        if ts is None:
            return True
        rt = ts[tid]
        return rt.token != token or rt.parked or rt.at_op or rt.done or not self._running(g)

    def _deadlock_message(self):
        waiting = []
        for g in range(self.state.M):
            ts = self.threads[g]
            if ts is None:
                continue
            for rt in ts:
                if not rt.done:
                    where = self.code[rt.t.pc]
                    loc = f"line {where[2]}" if where[2] else "barrier runtime code"
                    waiting.append(f"({g},{rt.tid}) spinning in {loc}")
        hint = "; ".join(waiting[:6])
        unhosted = [g for g in range(self.state.M) if self.threads[g] is not None and not self._running(g)
                    and not all(rt.done for rt in self.threads[g])]
        if unhosted:
            hint += f"; groups {unhosted} wait for a compute unit"
        return f"no thread can make progress: {hint}"

    def _run_thread(self, rt, ext):
        code, costs, end = self.code, self.costs, self.end
        st = self.state
        t = rt.t
        g, tid = rt.g, rt.tid
        heap = self.heap
        rec = self.rec
        fair = self.cfg.mode == "fair"
        u = self.unit_of[g]
        quantum = self.cfg.quantum
        exec_log = self.exec_log
        while True:
            pc = t.pc
            if pc >= end:
                self._thread_done(rt)
                return
            ins = code[pc]
            kind = ins[0]
            if kind == "kill" or kind == "fork":
                self._arrive(rt, pc)
                return
            if kind == "bar":
                raise CoopError("unlowered barrier reached the simulator")
            rec.reads.clear()
            rec.writes.clear()
            q = 0
            if kind == "set":
                op = ins[4]
                if op == "query":
                    q = self.sched.query(self.kid)
                    self._mark_query(rt, q)
                elif ins[3] == "__bq":
                    self._mark_query(rt, 0)
            sm.exec_instr(st, g, tid, t, ins, q, rec)
            rt.clock += costs[pc]
            self.steps += 1
            if exec_log is not None:
                exec_log.append((rt.clock, g, tid, pc))
            if self.steps > self.cfg.max_steps:
                raise StepBudgetExceeded(f"more than {self.cfg.max_steps} instructions executed")
            if rec.reads:
                rt.reads.extend(rec.reads)
            if rec.writes:
                rt.wrote = True
                for key in rec.writes:
                    if self.bar is not None and key[1] == self.bar and key[0] == "g" and key[2] == 1:
                        self._mark_release(rt.clock)
                    self._bump(key, rt.clock)
            if kind == "jmp" and t.pc <= pc:
                if self._loop_check(rt):
                    return
            if fair and len(self.hosted[u]) > 1:
                self.used[u] += 1
                if self.used[u] >= quantum:
                    self._rotate(u, rt.clock)
                    return
            # keep going while nobody else is due first
            if ext is not None and rt.clock >= ext:
                self._push(rt)
                return
            while heap:
                top = heap[0]
                if (rt.clock, 1, g, tid) < (top[0], top[1], top[2], top[3]):
                    break
                if self._stale(top):
                    heapq.heappop(heap)
                    continue
                self._push(rt)
                return

    def _loop_check(self, rt) -> bool:
        t = rt.t
        h = t.pc
        if (
            rt.head == h
            and not rt.wrote
            and t.env == rt.env0
            and all(self.version.get(k, 0) <= rt.vc0 for k in rt.reads)
        ):
            self._park(rt)
            return True
        rt.head = h
        rt.env0 = dict(t.env)
        rt.vc0 = self.vc
        rt.clock0 = rt.clock
        rt.reads = []
        rt.wrote = False
        return False

    def _park(self, rt):
        rt.parked = True
        rt.token += 1
        rt.pid += 1
        for key in set(rt.reads):
            self.waiters.setdefault(key, []).append((rt, rt.pid))
        rt.reads = []
        rt.wrote = False
        rt.head = None
        if self.cfg.mode == "fair":
            u = self.unit_of[rt.g]
            if len(self.hosted[u]) > 1 and self._blocked(rt.g):
                self._rotate(u, rt.clock)

    def _thread_done(self, rt):
        rt.done = True
        rt.token += 1
        g = rt.g
        if all(x.done for x in self.threads[g]):
            u = self.unit_of[g]
            hosted = self.hosted[u]
            was_head = hosted[0] == g
            hosted.remove(g)
            if was_head and hosted:
                self.used[u] = 0
                when = max(x.clock for x in self.threads[g])
                self._schedule_head(u, when)
        for w in range(self.state.M):
            if not all(x.done for x in self.threads[w]):
                return
        self.finished_at = max(x.clock for w in range(self.state.M) for x in self.threads[w])
        self.sched.finish(self.kid, self.finished_at)
        self._drain_outbox()

    # -- workgroup-level primitives ---------------------------------------------------

    def _arrive(self, rt, pc):
        rt.at_op = True
        rt.token += 1
        group = self.threads[rt.g]
        for x in group:
            if x.done:
                raise NonUniformReach(f"thread ({x.g},{x.tid}) terminated while its group waits at line {self.code[pc][2]}")
            if x.at_op and x.t.pc != pc:
                raise NonUniformReach(
                    f"group {rt.g} reached different workgroup-level statements (lines {self.code[pc][2]} and {self.code[x.t.pc][2]})"
                )
        if not all(x.at_op for x in group):
            return
        when = max(x.clock for x in group) + self.costs[pc]
        ins = self.code[pc]
        g = rt.g
        st = self.state
        if ins[0] == "kill":
            accept = g == st.M - 1 and st.M > 1 and self.sched.on_offer_kill(self.kid, g, when)
            if accept:
                self._kill(g, when, tail=ins[2] == br.TAIL_LINE)
                return
            sm.apply_offer_kill_inplace(st, g, False)
        else:
            k = self.sched.on_request_fork(self.kid, g, when)
            k = min(k, st.N - st.M)
            entry = self.sched.kernels[self.kid]
            m0 = st.M
            sm.apply_request_fork_inplace(st, g, k)
            if k:
                self.episodes[-1].forks += k
                for ng in range(m0, m0 + k):
                    unit = entry.wg_units[ng] if ng < len(entry.wg_units) else ng % self.cfg.units
                    self._add_group(ng, when, unit)
                self._bump(("M",), when)
                self._scheduler_changed(when)
        for x in group:
            x.at_op = False
            x.clock = when
            x.reads.extend((("S",), ("M",)))
            if self._running(g):
                self._push(x)

    def _kill(self, g, when, tail):
        st = self.state
        sm.apply_offer_kill_inplace(st, g, True)
        self._remove_group(g, when)
        ep = self.episodes[-1]
        if tail and len(self.episodes) >= 2 and self.episodes[-2].release is not None:
            prev = self.episodes[-2]
            prev.kills += 1
            prev.end = max(prev.end or when, when)
        else:
            ep.kills += 1
        self._bump(("M",), when)
        self._scheduler_changed(when)
        self._drain_outbox()

    # -- barrier episode tracking ----------------------------------------------------

    def _mark_query(self, rt, W):
        ep = self.episodes[-1]
        if ep.query_time is None:
            ep.query_time = rt.clock
            ep.W = W

    def _mark_release(self, when):
        ep = self.episodes[-1]
        ep.release = when
        ep.end = when
        self.episodes.append(Episode(len(self.episodes), self.state.M, when))

    # -- results ------------------------------------------------------------------------

    def _result(self) -> SimResult:
        eps = [e for e in self.episodes if e.release is not None]
        demands = []
        for rid in sorted(self.sched.requests):
            r = self.sched.requests[rid]
            if r.for_launch is not None:
                continue
            done = r.surrendered[r.amount - 1] if r.satisfied and r.amount else None
            bound = None
            for e in eps:
                if e.query_time is not None and e.query_time >= r.posted:
                    bound = e.end
                    break
            demands.append(
                {
                    "request": rid,
                    "posted_ms": _ms(r.posted),
                    "amount": r.amount,
                    "gather_ms": _ms(None if done is None else done - r.posted) if r.amount else 0.0,
                    "gather_ns": None if done is None else done - r.posted,
                    "within_one_episode": bool(done is not None and bound is not None and done <= bound),
                }
            )
        return SimResult(
            config=self.cfg.describe(),
            state=self.state,
            runtime=self.finished_at,
            steps=self.steps,
            episodes=eps,
            launches=self.launches,
            demands=demands,
            trace=self.sched.trace,
            exec_log=self.exec_log,
        )


def run(config: SimConfig, coop: pm.LaunchSpec, noncoop_stream=None, args=None, buffers=None) -> SimResult:
    """Simulate ``coop`` (optionally against a recurring non-cooperative stream)."""
    report = pm.validate(coop.program)
    if not report.ok:
        from .errors import ValidationError

        raise ValidationError(report)
    return Simulation(config, coop, noncoop_stream, args, buffers).run()


def user_buffers(state) -> dict:
    names = state.kernel.buffer_names
    return {n: list(state.shared.global_mem[i]) for i, n in enumerate(names) if not n.startswith("__")}


def measure_overhead(coop_version: pm.Program, plain_version: pm.Program, config: SimConfig, groups=None,
                     args=None, buffers=None, normalise=None) -> float:
    """Completion-time ratio of the cooperative and the plain version under
    NeverResize.  Outputs are compared first."""
    if not isinstance(config.policy, NeverResize):
        raise ConfigError("overhead is measured with the never-resize policy")
    n = groups or config.units
    d = config.wgsize
    a = run(config, pm.LaunchSpec(coop_version, n, d), None, args, buffers)
    b = run(config, pm.LaunchSpec(plain_version, n, d), None, args, buffers)
    norm = normalise or user_buffers
    if norm(a.state) != norm(b.state):
        raise MismatchedOutputs("cooperative and plain versions produced different outputs")
    return a.runtime / b.runtime
