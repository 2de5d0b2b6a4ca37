"""Small-step semantics of cooperative kernels.

Programs are compiled to flat code with explicit jumps, so a thread state is
an environment plus a program counter.  The terminated sentinel is
``len(code)``.  Kernel-level barriers carry an id: a barrier fires when every
thread of every active workgroup sits at a barrier with the same id.

The transition functions come in two flavours: the public ``apply_*`` and
``step_thread`` functions are pure (they copy the state first), while the
``*_inplace`` variants mutate and are used by the simulator and the checker.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import NamedTuple, Optional

from . import program as pm
from .errors import (
    BarrierDivergence,
    CoopError,
    DivergentWorkgroupOp,
    DivisionByZero,
    ForkBoundExceeded,
    NonUniformReach,
    OutOfBoundsAccess,
    UninitialisedRead,
)

_MASK = (1 << 64) - 1
_SIGN = 1 << 63


def wrap64(x: int) -> int:
    x &= _MASK
    return x - (1 << 64) if x & _SIGN else x


# --------------------------------------------------------------------------
# compilation


@dataclass(frozen=True)
class Kernel:
    """A compiled program bound to its parameter values."""

    program: pm.Program
    code: tuple
    params: dict
    buffer_names: tuple
    barrier_labels: dict = field(default_factory=dict)

    @property
    def transmit(self) -> frozenset:
        return self.program.transmit_set

    @property
    def end(self) -> int:
        return len(self.code)


def desugar_resizing_barrier(prog: pm.Program) -> pm.Program:
    """Rewrite each resizing barrier into plain barriers plus primitives.

    Workgroup 0 runs ``barrier; request_fork; barrier; barrier`` and every
    other workgroup runs ``barrier; barrier; offer_kill; barrier``.  The two
    arms share barrier labels, so their barriers rendezvous with each other.
    Forked workgroups resume after the request_fork, i.e. inside the
    workgroup-0 arm, and therefore do not offer themselves for killing at
    the barrier that created them.
    """
    counter = [0]

    def block(stmts):
        out = []
        for s in stmts:
            if isinstance(s, pm.Primitive) and s.op == "resizing_global_barrier":
                n = counter[0]
                counter[0] += 1
                a, b, c = (f"__rb{n}.{x}" for x in "abc")
                coop, line = s.coop, s.line
                gb = lambda lab: pm.GlobalBarrier(lab, coop, line)  # noqa: E731
                out.append(pm.Assign("__rb", "get_group_id", (), coop, line))
                out.append(
                    pm.If(
                        pm.Cond("eq", ("__rb", 0)),
                        (gb(a), pm.Primitive("request_fork", coop, line), gb(b), gb(c)),
                        (gb(a), gb(b), pm.Primitive("offer_kill", coop, line), gb(c)),
                        coop,
                        line,
                    )
                )
            elif isinstance(s, pm.If):
                out.append(replace(s, then=block(s.then), orelse=block(s.orelse)))
            elif isinstance(s, pm.While):
                out.append(replace(s, header=block(s.header), body=block(s.body)))
            else:
                out.append(s)
        return tuple(out)

    return replace(prog, body=block(prog.body))


def compile_program(prog: pm.Program):
    """Flatten a program into a code tuple.  Returns (code, barrier_labels)."""
    prog = desugar_resizing_barrier(prog)
    code: list = []
    labels: dict = {}
    next_bid = [0]

    def bid_for(label):
        if label is None:
            b = next_bid[0]
            next_bid[0] += 1
            return b
        if label not in labels:
            labels[label] = next_bid[0]
            next_bid[0] += 1
        return labels[label]

    halts: list = []

    def emit(*ins):
        code.append(list(ins))
        return len(code) - 1

    def block(stmts, breaks):
        for s in stmts:
            if isinstance(s, pm.Assign):
                emit("set", s.coop, s.line, s.dst, s.op, s.args)
            elif isinstance(s, pm.Store):
                emit("st", s.coop, s.line, s.op, s.args)
            elif isinstance(s, pm.GlobalBarrier):
                at = emit("bar", s.coop, s.line, bid_for(s.label), None)
                code[at][4] = at + 1
            elif isinstance(s, pm.Primitive):
                if s.op == "offer_kill":
                    emit("kill", s.coop, s.line)
                elif s.op == "request_fork":
                    emit("fork", s.coop, s.line)
                elif s.op == "halt":
                    halts.append(emit("jmp", s.coop, s.line, None))
                elif s.op == "break":
                    breaks.append(emit("jmp", s.coop, s.line, None))
                else:  # pragma: no cover - removed by desugaring
                    raise CoopError(f"unexpected primitive {s.op}")
            elif isinstance(s, pm.If):
                jz = emit("jz", s.coop, s.line, s.cond.op, s.cond.args, None)
                block(s.then, breaks)
                if s.orelse:
                    j = emit("jmp", s.coop, s.line, None)
                    code[jz][5] = len(code)
                    block(s.orelse, breaks)
                    code[j][3] = len(code)
                else:
                    code[jz][5] = len(code)
            elif isinstance(s, pm.While):
                top = len(code)
                inner: list = []
                block(s.header, inner)
                jz = emit("jz", s.coop, s.line, s.cond.op, s.cond.args, None)
                block(s.body, inner)
                emit("jmp", s.coop, s.line, top)
                code[jz][5] = len(code)
                for b in inner:
                    code[b][3] = len(code)

    block(prog.body, [])
    for h in halts:
        code[h][3] = len(code)
    return tuple(tuple(i) for i in code), labels


def instantiate(prog: pm.Program, args: Optional[dict] = None, buffers: Optional[dict] = None):
    """Compile ``prog`` and build its initial global memory.

    Buffers declared in the program are bound to the parameter of the same
    name; ``buffers`` adds or overrides buffers by name, ``args`` binds
    scalar parameters.  Returns (Kernel, global_mem).
    """
    args = dict(args or {})
    decls = {b.name: b.initial() for b in prog.buffers}
    for name, data in (buffers or {}).items():
        decls[name] = [int(x) for x in data]
    names = tuple(decls)
    mem = [list(decls[n]) for n in names]
    params = {}
    for p in prog.params:
        if p in args:
            params[p] = int(args[p])
        elif p in decls:
            params[p] = names.index(p)
        else:
            raise CoopError(f"kernel parameter {p!r} is not bound")
    code, labels = compile_program(prog)
    return Kernel(prog, code, params, names, labels), mem


# --------------------------------------------------------------------------
# state


@dataclass
class ThreadState:
    env: dict
    pc: int
    blocked_on: Optional[int] = None  # barrier id while waiting at a barrier


@dataclass
class WorkgroupState:
    group_id: int
    threads: list


@dataclass
class SharedState:
    global_mem: list
    local_mem: list  # per slot: dict name -> list, or None when absent


@dataclass
class KernelState:
    kernel: Kernel
    shared: SharedState
    slots: list
    M: int
    N: int
    d: int

    @classmethod
    def launch(cls, prog, N, d=1, M=None, args=None, buffers=None) -> "KernelState":
        kernel, mem = instantiate(prog, args, buffers)
        return cls.from_kernel(kernel, mem, N, d, M)

    @classmethod
    def from_kernel(cls, kernel, mem, N, d=1, M=None) -> "KernelState":
        if M is None:
            M = N
        if not (1 <= M <= N) or d < 1:
            raise CoopError(f"bad launch geometry M={M} N={N} d={d}")
        slots = [None] * N
        local = [None] * N
        for g in range(M):
            slots[g] = _fresh_group(g, d, {}, 0)
            local[g] = _fresh_local(kernel)
        st = cls(kernel, SharedState(mem, local), slots, M, N, d)
        for wg in st.slots[:M]:
            for t in wg.threads:
                _update_blocked(st, t)
        return st

    # convenience views
    @property
    def code(self):
        return self.kernel.code

    def active(self):
        return self.slots[: self.M]

    def thread(self, wg, tid) -> ThreadState:
        return self.slots[wg].threads[tid]

    def terminated(self) -> bool:
        end = self.kernel.end
        return all(t.pc == end for w in self.active() for t in w.threads)

    def buffer(self, name) -> list:
        return self.shared.global_mem[self.kernel.buffer_names.index(name)]

    def clone(self) -> "KernelState":
        slots = [
            None
            if w is None
            else WorkgroupState(w.group_id, [ThreadState(dict(t.env), t.pc, t.blocked_on) for t in w.threads])
            for w in self.slots
        ]
        local = [None if lm is None else {k: list(v) for k, v in lm.items()} for lm in self.shared.local_mem]
        shared = SharedState([list(b) for b in self.shared.global_mem], local)
        return KernelState(self.kernel, shared, slots, self.M, self.N, self.d)

    def freeze(self):
        """Hashable snapshot of everything that affects future behaviour."""
        groups = []
        for g in range(self.M):
            w = self.slots[g]
            lm = self.shared.local_mem[g]
            groups.append(
                (
                    tuple((k, tuple(v)) for k, v in sorted(lm.items())),
                    tuple((t.pc, tuple(sorted(t.env.items()))) for t in w.threads),
                )
            )
        return (self.M, tuple(tuple(b) for b in self.shared.global_mem), tuple(groups))


def _fresh_group(g, d, env, pc):
    return WorkgroupState(g, [ThreadState(dict(env), pc) for _ in range(d)])


def _fresh_local(kernel):
    return {name: [0] * size for name, size in kernel.program.locals}


def _update_blocked(st, t):
    if t.pc < len(st.kernel.code) and st.kernel.code[t.pc][0] == "bar":
        t.blocked_on = st.kernel.code[t.pc][3]
    else:
        t.blocked_on = None


# --------------------------------------------------------------------------
# instruction evaluation (shared with the simulator)


_MISSING = object()


def read_var(a, env, params):
    if type(a) is int:
        return a
    v = env.get(a, _MISSING)
    if v is _MISSING:
        v = params.get(a, _MISSING)
        if v is _MISSING:
            raise UninitialisedRead(f"read of uninitialised variable {a!r}")
    return v


def _cdiv(a, b):
    if b == 0:
        raise DivisionByZero("division by zero")
    q = abs(a) // abs(b)
    return q if (a >= 0) == (b >= 0) else -q


def _cmod(a, b):
    if b == 0:
        raise DivisionByZero("modulo by zero")
    return a - b * _cdiv(a, b)


_PURE = {
    "mov": lambda a: a,
    "add": lambda a, b: wrap64(a + b),
    "sub": lambda a, b: wrap64(a - b),
    "mul": lambda a, b: wrap64(a * b),
    "div": lambda a, b: wrap64(_cdiv(a, b)),
    "mod": _cmod,
    "min": min,
    "max": max,
    "and": lambda a, b: a & b,
    "or": lambda a, b: a | b,
    "xor": lambda a, b: a ^ b,
    "shl": lambda a, b: wrap64(a << (b & 63)),
    "shr": lambda a, b: a >> (b & 63),
    "eq": lambda a, b: int(a == b),
    "ne": lambda a, b: int(a != b),
    "lt": lambda a, b: int(a < b),
    "le": lambda a, b: int(a <= b),
    "gt": lambda a, b: int(a > b),
    "ge": lambda a, b: int(a >= b),
    "not": lambda a: int(a == 0),
    "neg": lambda a: wrap64(-a),
}


def eval_pure(op, args, env, params):
    f = _PURE[op]
    if len(args) == 1:
        return f(read_var(args[0], env, params))
    return f(read_var(args[0], env, params), read_var(args[1], env, params))


def _cell(mem, h, i):
    if not (0 <= h < len(mem)):
        raise OutOfBoundsAccess(f"invalid buffer handle {h}")
    buf = mem[h]
    if not (0 <= i < len(buf)):
        raise OutOfBoundsAccess(f"index {i} out of bounds for buffer of size {len(buf)}")
    return buf


def _lcell(local, name, i):
    arr = local[name]
    if not (0 <= i < len(arr)):
        raise OutOfBoundsAccess(f"index {i} out of bounds for local array {name!r}")
    return arr


class Recorder:
    """Collects the memory cells touched by an instruction (for the simulator)."""

    __slots__ = ("reads", "writes")

    def __init__(self):
        self.reads = []
        self.writes = []


def exec_instr(st, slot, tid, t, ins, query_value=0, rec=None):
    """Execute a thread-local instruction, updating ``t`` and memory.

    ``st`` provides ``kernel``, ``shared``, ``M`` and ``d``.  Cooperative
    primitives and barriers are not handled here.
    """
    kind = ins[0]
    env = t.env
    params = st.kernel.params
    if kind == "set":
        op, args = ins[4], ins[5]
        f = _PURE.get(op)
        if f is not None:
            if len(args) == 1:
                v = f(read_var(args[0], env, params))
            else:
                v = f(read_var(args[0], env, params), read_var(args[1], env, params))
        else:
            v = _eval_effect(st, slot, tid, op, args, env, params, query_value, rec)
        env[ins[3]] = v
        t.pc += 1
    elif kind == "st":
        op, args = ins[3], ins[4]
        i = read_var(args[1], env, params)
        val = read_var(args[2], env, params)
        if op == "lstore":
            _lcell(st.shared.local_mem[slot], args[0], i)[i] = val
            if rec is not None:
                rec.writes.append(("l", slot, args[0], i))
        else:
            h = read_var(args[0], env, params)
            _cell(st.shared.global_mem, h, i)[i] = val
            if rec is not None:
                rec.writes.append(("g", h, i))
        t.pc += 1
    elif kind == "jz":
        op, args = ins[3], ins[4]
        if eval_pure(op, args, env, params):
            t.pc += 1
        else:
            t.pc = ins[5]
    elif kind == "jmp":
        t.pc = ins[3]
    else:
        raise CoopError(f"{kind} is not a thread-local instruction")


def _eval_effect(st, slot, tid, op, args, env, params, query_value, rec):
    if op == "get_group_id":
        return slot
    if op == "get_local_id":
        return tid
    if op == "get_global_id":
        return slot * st.d + tid
    if op == "get_local_size":
        return st.d
    if op == "get_num_groups":
        if rec is not None:
            rec.reads.append(("M",))
        return st.M
    if op == "get_global_size":
        if rec is not None:
            rec.reads.append(("M",))
        return st.M * st.d
    if op == "query":
        if rec is not None:
            rec.reads.append(("S",))
        return query_value
    if op == "lload":
        i = read_var(args[1], env, params)
        if rec is not None:
            rec.reads.append(("l", slot, args[0], i))
        return _lcell(st.shared.local_mem[slot], args[0], i)[i]
    mem = st.shared.global_mem
    h = read_var(args[0], env, params)
    if op == "len":
        if not (0 <= h < len(mem)):
            raise OutOfBoundsAccess(f"invalid buffer handle {h}")
        return len(mem[h])
    i = read_var(args[1], env, params)
    buf = _cell(mem, h, i)
    if rec is not None:
        rec.reads.append(("g", h, i))
    old = buf[i]
    if op in ("load", "atomic_load"):
        return old
    if op == "cas":
        expected = read_var(args[2], env, params)
        new = read_var(args[3], env, params)
        if old == expected:
            buf[i] = new
            if rec is not None:
                rec.writes.append(("g", h, i))
        return old
    if op == "atomic_add":
        buf[i] = wrap64(old + read_var(args[2], env, params))
        if rec is not None:
            rec.writes.append(("g", h, i))
        return old
    if op == "atomic_xchg":
        buf[i] = read_var(args[2], env, params)
        if rec is not None:
            rec.writes.append(("g", h, i))
        return old
    raise CoopError(f"unknown operation {op}")  # pragma: no cover


# --------------------------------------------------------------------------
# transition rules (in place)


def _check_thread(st, wg, tid):
    if not (0 <= wg < st.M) or st.slots[wg] is None:
        raise CoopError(f"workgroup {wg} is not active")
    if not (0 <= tid < st.d):
        raise CoopError(f"thread {tid} does not exist")
    return st.slots[wg].threads[tid]


def step_thread_inplace(st, wg, tid, choice=None):
    t = _check_thread(st, wg, tid)
    if t.pc >= st.kernel.end:
        raise CoopError(f"thread ({wg},{tid}) has terminated")
    ins = st.kernel.code[t.pc]
    if ins[0] in ("kill", "fork", "bar"):
        if ins[0] != "bar" and not _uniform_at(st, wg, t.pc):
            raise DivergentWorkgroupOp(f"workgroup {wg} reached {ins[0]} non-uniformly (line {ins[2]})")
        raise CoopError(f"{ins[0]} is not a thread step; use the corresponding rule")
    exec_instr(st, wg, tid, t, ins, 0 if choice is None else choice)
    _update_blocked(st, t)
    return st


def _uniform_at(st, wg, pc):
    return all(t.pc == pc for t in st.slots[wg].threads)


def _wg_op_pc(st, wg, kind):
    w = st.slots[wg] if 0 <= wg < st.M else None
    if w is None:
        raise CoopError(f"workgroup {wg} is not active")
    pcs = {t.pc for t in w.threads}
    if len(pcs) != 1:
        raise NonUniformReach(f"threads of workgroup {wg} are at different statements {sorted(pcs)}")
    pc = pcs.pop()
    if pc >= st.kernel.end or st.kernel.code[pc][0] != kind:
        raise CoopError(f"workgroup {wg} is not at {kind}")
    return pc


def apply_offer_kill_inplace(st, wg, accept):
    pc = _wg_op_pc(st, wg, "kill")
    if accept and wg == st.M - 1 and st.M > 1:
        st.slots[wg] = None
        st.shared.local_mem[wg] = None
        st.M -= 1
        return st
    for t in st.slots[wg].threads:
        t.pc = pc + 1
        _update_blocked(st, t)
    return st


def apply_request_fork_inplace(st, wg, k):
    pc = _wg_op_pc(st, wg, "fork")
    if k < 0 or k > st.N - st.M:
        raise ForkBoundExceeded(f"cannot fork {k} workgroups with M={st.M}, N={st.N}")
    src = st.slots[wg].threads[0].env
    env = {}
    for name in st.kernel.transmit:
        if name in src:
            env[name] = src[name]
    for g in range(st.M, st.M + k):
        st.slots[g] = _fresh_group(g, st.d, env, pc + 1)
        st.shared.local_mem[g] = _fresh_local(st.kernel)
        for t in st.slots[g].threads:
            _update_blocked(st, t)
    st.M += k
    for t in st.slots[wg].threads:
        t.pc = pc + 1
        _update_blocked(st, t)
    return st


def barrier_status(st):
    """Return the barrier id all active threads wait at, None if some thread
    is not at a barrier; raise BarrierDivergence if they wait at different
    barriers."""
    ids = set()
    for w in st.active():
        for t in w.threads:
            if t.blocked_on is None:
                return None
            ids.add(t.blocked_on)
    if len(ids) > 1:
        raise BarrierDivergence(f"threads wait at different barriers {sorted(ids)}")
    return ids.pop() if ids else None


def apply_global_barrier_inplace(st):
    bid = barrier_status(st)
    if bid is None:
        raise CoopError("not every thread is at a barrier")
    code = st.kernel.code
    for w in st.active():
        for t in w.threads:
            t.pc = code[t.pc][4]
            _update_blocked(st, t)
    # sync: memory is sequentially consistent, so there is nothing to flush
    return st


# pure wrappers


def step_thread(state, wg, tid, choice=None):
    return step_thread_inplace(state.clone(), wg, tid, choice)


def apply_offer_kill(state, wg, accept):
    return apply_offer_kill_inplace(state.clone(), wg, accept)


def apply_request_fork(state, wg, k):
    return apply_request_fork_inplace(state.clone(), wg, k)


def apply_global_barrier(state):
    return apply_global_barrier_inplace(state.clone())


# --------------------------------------------------------------------------
# enumeration


class Transition(NamedTuple):
    rule: str  # step | kill | fork | barrier
    wg: Optional[int] = None
    tid: Optional[int] = None
    choice: Optional[object] = None

    def to_json(self):
        return {"rule": self.rule, "wg": self.wg, "tid": self.tid, "choice": self.choice}

    @classmethod
    def from_json(cls, d):
        return cls(d["rule"], d.get("wg"), d.get("tid"), d.get("choice"))


def enabled_transitions(st, fork_cap=None, query_cap=None, kill_choices=True, runnable=None):
    """Every applicable transition, in a fixed order.

    ``runnable(wg)`` optionally restricts which workgroups may take steps
    (used to model occupancy-bound execution); a kernel-level barrier needs
    every active workgroup to be runnable.
    """
    out = []
    code = st.kernel.code
    end = len(code)
    allowed = [runnable is None or runnable(g) for g in range(st.M)]
    for g in range(st.M):
        if not allowed[g]:
            continue
        w = st.slots[g]
        first = w.threads[0].pc
        for tid, t in enumerate(w.threads):
            if t.pc >= end:
                continue
            kind = code[t.pc][0]
            if kind in ("kill", "fork", "bar"):
                continue
            if kind == "set" and code[t.pc][4] == "query":
                hi = st.M - 1 if query_cap is None else min(st.M - 1, query_cap)
                out.extend(Transition("step", g, tid, q) for q in range(hi + 1))
            else:
                out.append(Transition("step", g, tid, None))
        if first < end and all(t.pc == first for t in w.threads):
            kind = code[first][0]
            if kind == "kill":
                if g == st.M - 1 and st.M > 1 and kill_choices:
                    out.append(Transition("kill", g, None, True))
                out.append(Transition("kill", g, None, False))
            elif kind == "fork":
                hi = st.N - st.M if fork_cap is None else min(st.N - st.M, fork_cap)
                out.extend(Transition("fork", g, None, k) for k in range(hi + 1))
    if all(allowed):
        try:
            if barrier_status(st) is not None:
                out.append(Transition("barrier"))
        except BarrierDivergence:
            pass
    return out


def apply_transition_inplace(st, tr: Transition):
    if tr.rule == "step":
        return step_thread_inplace(st, tr.wg, tr.tid, tr.choice)
    if tr.rule == "kill":
        return apply_offer_kill_inplace(st, tr.wg, bool(tr.choice))
    if tr.rule == "fork":
        return apply_request_fork_inplace(st, tr.wg, int(tr.choice))
    if tr.rule == "barrier":
        return apply_global_barrier_inplace(st)
    raise CoopError(f"unknown rule {tr.rule}")


def apply_transition(state, tr: Transition):
    return apply_transition_inplace(state.clone(), tr)


def stuck_reason(st):
    """Explain why a non-terminated state has no enabled transition."""
    code = st.kernel.code
    end = len(code)
    for w in st.active():
        pcs = {t.pc for t in w.threads}
        kinds = {code[p][0] if p < end else "end" for p in pcs}
        if len(pcs) > 1 and kinds & {"kill", "fork"}:
            return f"workgroup {w.group_id} reached a workgroup-level primitive non-uniformly"
    try:
        barrier_status(st)
    except BarrierDivergence as e:
        return str(e)
    if any(t.pc >= end for w in st.active() for t in w.threads):
        return "some threads terminated while others wait at a barrier"
    return "no enabled transition"
