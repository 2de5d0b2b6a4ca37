"""Kernel DSL: syntax tree, line-oriented assembler, pretty-printer and validation.

A program is a tree of structured statements.  Values are 64-bit signed
integers; an operand is either an integer literal or a name (a thread-local
variable or an immutable kernel parameter).  Global buffers are referenced
through operands holding a buffer handle, group-local arrays by their
declared name.

Text format (one statement per line, ``#`` starts a comment)::

    .kernel demo
    .param out
    .transmit level
    .local scratch 4
    .buffer out 4 0 0 0 0
    .groups 3
    .wgsize 1

    level := 0
    g := get_group_id
    while
        c := load out g
    do eq c 0
        store out g 1
    end
    if eq g 0
        global_barrier
    else
        global_barrier
    end

A statement prefixed with ``@coop`` is cooperative-runtime scaffolding and is
charged at the primitive rate by the simulator.
"""

from __future__ import annotations

import re
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional, Union

from .errors import ParseError

Operand = Union[int, str]

BINOPS = frozenset(
    "add sub mul div mod min max and or xor shl shr eq ne lt le gt ge".split()
)
UNOPS = frozenset(["not", "neg"])
INTRINSICS = frozenset(
    [
        "get_global_id",
        "get_local_id",
        "get_group_id",
        "get_local_size",
        "get_num_groups",
        "get_global_size",
    ]
)
# value-producing operations other than pure arithmetic: name -> arity
MEMORY_OPS = {
    "load": 2,
    "lload": 2,
    "atomic_load": 2,
    "cas": 4,
    "atomic_add": 3,
    "atomic_xchg": 3,
    "len": 1,
}
STORE_OPS = {"store": 3, "lstore": 3, "atomic_store": 3}
SIMPLE_PRIMITIVES = frozenset(
    ["offer_kill", "request_fork", "resizing_global_barrier", "halt", "break"]
)
KEYWORDS = (
    BINOPS
    | UNOPS
    | INTRINSICS
    | set(MEMORY_OPS)
    | set(STORE_OPS)
    | SIMPLE_PRIMITIVES
    | {"query", "global_barrier", "if", "else", "end", "while", "do", "mov"}
)

_NAME_RE = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*$")
_INT_RE = re.compile(r"^-?[0-9]+$")
_LABEL_RE = re.compile(r"^[A-Za-z0-9_.:]+$")


def op_arity(op: str) -> int:
    if op == "mov":
        return 1
    if op in BINOPS:
        return 2
    if op in UNOPS:
        return 1
    if op in INTRINSICS or op == "query":
        return 0
    if op in MEMORY_OPS:
        return MEMORY_OPS[op]
    raise KeyError(op)


def is_pure(op: str) -> bool:
    return op == "mov" or op in BINOPS or op in UNOPS


# --------------------------------------------------------------------------
# syntax tree


@dataclass(frozen=True)
class Cond:
    op: str
    args: tuple

    def __str__(self):
        if self.op == "mov":
            return _fmt(self.args[0])
        return " ".join([self.op] + [_fmt(a) for a in self.args])


@dataclass(frozen=True)
class Assign:
    dst: str
    op: str
    args: tuple
    coop: bool = False
    line: Optional[int] = field(default=None, compare=False)


@dataclass(frozen=True)
class Store:
    op: str
    args: tuple
    coop: bool = False
    line: Optional[int] = field(default=None, compare=False)


@dataclass(frozen=True)
class Primitive:
    """offer_kill, request_fork, resizing_global_barrier, halt or break."""

    op: str
    coop: bool = False
    line: Optional[int] = field(default=None, compare=False)


@dataclass(frozen=True)
class GlobalBarrier:
    label: Optional[str] = None
    coop: bool = False
    line: Optional[int] = field(default=None, compare=False)


@dataclass(frozen=True)
class If:
    cond: Cond
    then: tuple
    orelse: tuple = ()
    coop: bool = False
    line: Optional[int] = field(default=None, compare=False)


@dataclass(frozen=True)
class While:
    header: tuple
    cond: Cond
    body: tuple
    coop: bool = False
    line: Optional[int] = field(default=None, compare=False)


Stmt = Union[Assign, Store, Primitive, GlobalBarrier, If, While]


@dataclass(frozen=True)
class BufferDecl:
    name: str
    size: int
    init: tuple = ()

    def initial(self) -> list:
        data = list(self.init) + [0] * (self.size - len(self.init))
        return data[: self.size]


@dataclass(frozen=True)
class Program:
    name: str
    params: tuple = ()
    body: tuple = ()
    transmit: tuple = ()
    locals: tuple = ()  # (name, size) pairs
    buffers: tuple = ()  # BufferDecl
    groups: Optional[int] = None
    wgsize: Optional[int] = None

    @property
    def transmit_set(self) -> frozenset:
        return frozenset(self.transmit)

    def local_sizes(self) -> dict:
        return dict(self.locals)


@dataclass(frozen=True)
class LaunchSpec:
    program: Program
    groups: int
    wgsize: int
    cooperative: bool = True

    def __post_init__(self):
        if self.groups < 1 or self.wgsize < 1:
            raise ValueError("a launch needs at least one workgroup of one thread")


def walk(stmts: Iterable[Stmt]):
    """Yield every statement in program order, descending into blocks."""
    for s in stmts:
        yield s
        if isinstance(s, If):
            yield from walk(s.then)
            yield from walk(s.orelse)
        elif isinstance(s, While):
            yield from walk(s.header)
            yield from walk(s.body)


def _fmt(a: Operand) -> str:
    return str(a)


# --------------------------------------------------------------------------
# assembler


def _operand(tok: str, line: int, col: int) -> Operand:
    if _INT_RE.match(tok):
        return int(tok)
    if _NAME_RE.match(tok) and tok not in KEYWORDS:
        return tok
    raise ParseError(f"bad operand {tok!r}", line, col)


def _name(tok: str, line: int, col: int, what="name") -> str:
    if _NAME_RE.match(tok) and tok not in KEYWORDS:
        return tok
    raise ParseError(f"bad {what} {tok!r}", line, col)


def _tokens(text: str):
    return [(m.group(0), m.start() + 1) for m in re.finditer(r"\S+", text)]


def _parse_cond(toks, line) -> Cond:
    if not toks:
        raise ParseError("missing condition", line)
    head, col = toks[0]
    if len(toks) == 1:
        return Cond("mov", (_operand(head, line, col),))
    if head in BINOPS or head in UNOPS:
        n = op_arity(head)
        if len(toks) - 1 != n:
            raise ParseError(f"{head} takes {n} operands", line, col)
        return Cond(head, tuple(_operand(t, line, c) for t, c in toks[1:]))
    raise ParseError(f"unknown mnemonic {head!r} in condition", line, col)


def assemble(text: str) -> Program:
    """Parse kernel assembly text into a Program."""
    header = {
        "name": None,
        "params": [],
        "transmit": [],
        "locals": [],
        "buffers": [],
        "groups": None,
        "wgsize": None,
    }
    # stack entries: [kind, stmts, extra...]
    root: list = []
    stack: list = [["root", root]]

    for lineno, raw in enumerate(text.splitlines(), start=1):
        stripped = raw.split("#", 1)[0]
        toks = _tokens(stripped)
        if not toks:
            continue
        head, col = toks[0]
        if head.startswith("."):
            _directive(header, head, toks, lineno)
            continue
        coop = False
        if head == "@coop":
            coop = True
            toks = toks[1:]
            if not toks:
                raise ParseError("@coop needs a statement", lineno, col)
            head, col = toks[0]
        frame = stack[-1]

        if head == "if":
            node = {"cond": _parse_cond(toks[1:], lineno), "coop": coop, "line": lineno}
            stack.append(["if", [], node, None])
            continue
        if head == "else":
            if frame[0] != "if" or frame[3] is not None:
                raise ParseError("else without matching if", lineno, col)
            frame[3] = frame[1]
            frame[1] = []
            continue
        if head == "while":
            node = {"coop": coop, "line": lineno}
            if len(toks) == 1:
                stack.append(["while-header", [], node])
            else:
                node["cond"] = _parse_cond(toks[1:], lineno)
                node["header"] = ()
                stack.append(["while", [], node])
            continue
        if head == "do":
            if frame[0] != "while-header":
                raise ParseError("do outside a while header", lineno, col)
            frame[2]["header"] = tuple(frame[1])
            frame[2]["cond"] = _parse_cond(toks[1:], lineno)
            frame[0] = "while"
            frame[1] = []
            continue
        if head == "end":
            if len(toks) > 1:
                raise ParseError("unexpected tokens after end", lineno, toks[1][1])
            if frame[0] == "if":
                node = frame[2]
                if frame[3] is None:
                    then, orelse = tuple(frame[1]), ()
                else:
                    then, orelse = tuple(frame[3]), tuple(frame[1])
                stmt = If(node["cond"], then, orelse, node["coop"], node["line"])
            elif frame[0] == "while":
                node = frame[2]
                stmt = While(node["header"], node["cond"], tuple(frame[1]), node["coop"], node["line"])
            elif frame[0] == "while-header":
                raise ParseError("while header without do", lineno, col)
            else:
                raise ParseError("end without open block", lineno, col)
            stack.pop()
            stack[-1][1].append(stmt)
            continue
        frame[1].append(_statement(toks, coop, lineno))

    if len(stack) != 1:
        kind = stack[-1][0]
        raise ParseError(f"unterminated {kind} block", stack[-1][2]["line"] if len(stack[-1]) > 2 else None)
    if header["name"] is None:
        header["name"] = "kernel"
    prog = Program(
        name=header["name"],
        params=tuple(header["params"]),
        body=tuple(root),
        transmit=tuple(header["transmit"]),
        locals=tuple(header["locals"]),
        buffers=tuple(header["buffers"]),
        groups=header["groups"],
        wgsize=header["wgsize"],
    )
    _check_breaks(prog.body, 0)
    return prog


def _check_breaks(stmts, depth):
    for s in stmts:
        if isinstance(s, Primitive) and s.op == "break" and depth == 0:
            raise ParseError("break outside a loop", s.line)
        if isinstance(s, If):
            _check_breaks(s.then, depth)
            _check_breaks(s.orelse, depth)
        elif isinstance(s, While):
            _check_breaks(s.header, depth)
            _check_breaks(s.body, depth + 1)


def _int(tok, line, col, minimum=None):
    if not _INT_RE.match(tok):
        raise ParseError(f"expected integer, got {tok!r}", line, col)
    v = int(tok)
    if minimum is not None and v < minimum:
        raise ParseError(f"value must be >= {minimum}", line, col)
    return v


def _directive(header, head, toks, line):
    args = toks[1:]
    if head == ".kernel":
        if len(args) != 1:
            raise ParseError(".kernel takes one name", line, toks[0][1])
        header["name"] = _name(args[0][0], line, args[0][1])
    elif head == ".param":
        header["params"].extend(_name(t, line, c) for t, c in args)
    elif head == ".transmit":
        header["transmit"].extend(_name(t, line, c) for t, c in args)
    elif head == ".local":
        if len(args) != 2:
            raise ParseError(".local takes a name and a size", line, toks[0][1])
        header["locals"].append((_name(args[0][0], line, args[0][1]), _int(args[1][0], line, args[1][1], 1)))
    elif head == ".buffer":
        if len(args) < 2:
            raise ParseError(".buffer takes a name, a size and optional values", line, toks[0][1])
        size = _int(args[1][0], line, args[1][1], 1)
        init = tuple(_int(t, line, c) for t, c in args[2:])
        if len(init) > size:
            raise ParseError("more initial values than buffer cells", line, args[2 + size][1])
        header["buffers"].append(BufferDecl(_name(args[0][0], line, args[0][1]), size, init))
    elif head in (".groups", ".wgsize"):
        if len(args) != 1:
            raise ParseError(f"{head} takes one integer", line, toks[0][1])
        header[head[1:]] = _int(args[0][0], line, args[0][1], 1)
    else:
        raise ParseError(f"unknown directive {head!r}", line, toks[0][1])


def _statement(toks, coop, line) -> Stmt:
    head, col = toks[0]
    if len(toks) >= 2 and toks[1][0] == ":=":
        dst = _name(head, line, col, "variable")
        rhs = toks[2:]
        if not rhs:
            raise ParseError("missing right-hand side", line, toks[1][1])
        op, ocol = rhs[0]
        if len(rhs) == 1 and (op not in KEYWORDS):
            return Assign(dst, "mov", (_operand(op, line, ocol),), coop, line)
        if op == "mov" or op in BINOPS or op in UNOPS or op in INTRINSICS or op in MEMORY_OPS or op == "query":
            n = op_arity(op)
            if len(rhs) - 1 != n:
                raise ParseError(f"{op} takes {n} operands, got {len(rhs) - 1}", line, ocol)
            if op == "lload":
                args = (_name(rhs[1][0], line, rhs[1][1], "local array"), _operand(rhs[2][0], line, rhs[2][1]))
            else:
                args = tuple(_operand(t, line, c) for t, c in rhs[1:])
            return Assign(dst, op, args, coop, line)
        raise ParseError(f"unknown mnemonic {op!r}", line, ocol)
    if head in STORE_OPS:
        if len(toks) - 1 != 3:
            raise ParseError(f"{head} takes 3 operands", line, col)
        if head == "lstore":
            args = (_name(toks[1][0], line, toks[1][1], "local array"),) + tuple(
                _operand(t, line, c) for t, c in toks[2:]
            )
        else:
            args = tuple(_operand(t, line, c) for t, c in toks[1:])
        return Store(head, args, coop, line)
    if head in SIMPLE_PRIMITIVES:
        if len(toks) != 1:
            raise ParseError(f"{head} takes no operands", line, toks[1][1])
        return Primitive(head, coop, line)
    if head == "global_barrier":
        if len(toks) > 2:
            raise ParseError("global_barrier takes at most a label", line, toks[2][1])
        label = None
        if len(toks) == 2:
            label = toks[1][0]
            if not _LABEL_RE.match(label):
                raise ParseError(f"bad barrier label {label!r}", line, toks[1][1])
        return GlobalBarrier(label, coop, line)
    raise ParseError(f"unknown mnemonic {head!r}", line, col)


# --------------------------------------------------------------------------
# pretty-printer


def format_program(prog: Program) -> str:
    out = [f".kernel {prog.name}"]
    if prog.params:
        out.append(".param " + " ".join(prog.params))
    if prog.transmit:
        out.append(".transmit " + " ".join(prog.transmit))
    for name, size in prog.locals:
        out.append(f".local {name} {size}")
    for b in prog.buffers:
        out.append(" ".join([".buffer", b.name, str(b.size)] + [str(v) for v in b.init]))
    if prog.groups is not None:
        out.append(f".groups {prog.groups}")
    if prog.wgsize is not None:
        out.append(f".wgsize {prog.wgsize}")
    out.append("")
    _format_block(prog.body, 0, out)
    return "\n".join(out) + "\n"


def _format_block(stmts, depth, out):
    pad = "    " * depth
    for s in stmts:
        pre = pad + ("@coop " if s.coop else "")
        if isinstance(s, Assign):
            if s.op == "mov":
                out.append(f"{pre}{s.dst} := {_fmt(s.args[0])}")
            else:
                out.append(f"{pre}{s.dst} := " + " ".join([s.op] + [_fmt(a) for a in s.args]))
        elif isinstance(s, Store):
            out.append(pre + " ".join([s.op] + [_fmt(a) for a in s.args]))
        elif isinstance(s, Primitive):
            out.append(pre + s.op)
        elif isinstance(s, GlobalBarrier):
            out.append(pre + "global_barrier" + (f" {s.label}" if s.label else ""))
        elif isinstance(s, If):
            out.append(f"{pre}if {s.cond}")
            _format_block(s.then, depth + 1, out)
            if s.orelse:
                out.append(pad + "else")
                _format_block(s.orelse, depth + 1, out)
            out.append(pad + "end")
        elif isinstance(s, While):
            if s.header:
                out.append(f"{pre}while")
                _format_block(s.header, depth + 1, out)
                out.append(f"{pad}do {s.cond}")
            else:
                out.append(f"{pre}while {s.cond}")
            _format_block(s.body, depth + 1, out)
            out.append(pad + "end")
        else:  # pragma: no cover
            raise TypeError(s)


# --------------------------------------------------------------------------
# builder


class ProgramBuilder:
    """Build a Program from Python without going through the text format.

    >>> b = ProgramBuilder("count")
    >>> b.param("out")
    >>> b.assign("x", "get_group_id")
    >>> with b.if_("eq", "x", 0):
    ...     b.store("out", 0, 1)
    >>> prog = b.build()
    """

    def __init__(self, name: str, *, groups=None, wgsize=None):
        self.name = name
        self.groups = groups
        self.wgsize = wgsize
        self._params: list = []
        self._transmit: list = []
        self._locals: list = []
        self._buffers: list = []
        self._stack: list = [[]]
        self._last_if = None
        self.coop = False

    def param(self, *names):
        self._params.extend(names)

    def transmit(self, *names):
        self._transmit.extend(names)

    def local(self, name, size):
        self._locals.append((name, size))

    def buffer(self, name, size, init=()):
        self._buffers.append(BufferDecl(name, size, tuple(init)))

    def _emit(self, stmt):
        self._stack[-1].append(stmt)
        self._last_if = None

    def assign(self, dst, op, *args):
        if op not in KEYWORDS and not args:
            op, args = "mov", (op,)
        elif isinstance(op, int):
            op, args = "mov", (op,)
        self._emit(Assign(dst, op, tuple(args), self.coop))

    def store(self, buf, idx, val, op="store"):
        self._emit(Store(op, (buf, idx, val), self.coop))

    def lstore(self, name, idx, val):
        self.store(name, idx, val, op="lstore")

    def atomic_store(self, buf, idx, val):
        self.store(buf, idx, val, op="atomic_store")

    def prim(self, op):
        self._emit(Primitive(op, self.coop))

    def offer_kill(self):
        self.prim("offer_kill")

    def request_fork(self):
        self.prim("request_fork")

    def resizing_global_barrier(self):
        self.prim("resizing_global_barrier")

    def global_barrier(self, label=None):
        self._emit(GlobalBarrier(label, self.coop))

    @staticmethod
    def _cond(op, args):
        if not args and op not in KEYWORDS:
            return Cond("mov", (op,))
        if isinstance(op, int):
            return Cond("mov", (op,))
        return Cond(op, tuple(args))

    @contextmanager
    def if_(self, op, *args):
        cond = self._cond(op, args)
        coop = self.coop
        self._stack.append([])
        yield
        then = tuple(self._stack.pop())
        node = If(cond, then, (), coop)
        self._emit(node)
        self._last_if = node

    @contextmanager
    def else_(self):
        node = self._last_if
        if node is None:
            raise ValueError("else_ must directly follow an if_ block")
        self._stack.append([])
        yield
        orelse = tuple(self._stack.pop())
        block = self._stack[-1]
        block[-1] = replace(node, orelse=orelse)
        self._last_if = None

    @contextmanager
    def while_(self, op, *args):
        cond = self._cond(op, args)
        coop = self.coop
        self._stack.append([])
        yield
        body = tuple(self._stack.pop())
        self._emit(While((), cond, body, coop))

    @contextmanager
    def loop(self):
        """``while`` with a header block; call ``.do(...)`` to end the header."""
        coop = self.coop
        frame = _LoopFrame(self)
        self._stack.append([])
        yield frame
        if frame.header is None:
            raise ValueError("loop() block never called do()")
        body = tuple(self._stack.pop())
        self._emit(While(frame.header, frame.cond, body, coop))

    def build(self) -> Program:
        if len(self._stack) != 1:
            raise ValueError("unclosed block")
        return Program(
            name=self.name,
            params=tuple(self._params),
            body=tuple(self._stack[0]),
            transmit=tuple(self._transmit),
            locals=tuple(self._locals),
            buffers=tuple(self._buffers),
            groups=self.groups,
            wgsize=self.wgsize,
        )


class _LoopFrame:
    def __init__(self, builder):
        self.builder = builder
        self.header = None
        self.cond = None

    def do(self, op, *args):
        self.header = tuple(self.builder._stack[-1])
        self.builder._stack[-1].clear()
        self.cond = ProgramBuilder._cond(op, args)


# --------------------------------------------------------------------------
# validation

UNIFORM, GROUP, THREAD = 0, 1, 2
_SOURCE_TAINT = {
    "get_local_id": THREAD,
    "get_global_id": THREAD,
    "get_group_id": GROUP,
    "cas": THREAD,
    "atomic_add": THREAD,
    "atomic_xchg": THREAD,
    "query": THREAD,
}


@dataclass(frozen=True)
class Violation:
    code: str
    message: str
    line: Optional[int] = None

    def __str__(self):
        where = f"line {self.line}: " if self.line is not None else ""
        return f"{where}{self.code}: {self.message}"


@dataclass
class ValidationReport:
    violations: list

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self):
        return self.ok


def validate(prog: Program) -> ValidationReport:
    """Static checks a program must pass before launch.

    Uniformity is checked syntactically: a variable is thread-dependent if
    it is (transitively, including through control dependence) derived from
    local/global ids or read-modify-write atomics, and group-dependent if
    derived from the group id.  Workgroup-level primitives may not sit under
    thread-dependent control; kernel-level barriers may not sit under any
    non-uniform control.
    """
    v: list = []
    params = set(prog.params)
    locals_ = prog.local_sizes()
    assigned = {s.dst for s in walk(prog.body) if isinstance(s, Assign)}

    for s in walk(prog.body):
        if isinstance(s, Assign) and s.dst in params:
            v.append(Violation("param-assigned", f"kernel parameter {s.dst!r} is immutable", s.line))
        for name in _reads(s):
            if name not in params and name not in assigned:
                v.append(Violation("undefined-name", f"{name!r} is never assigned", s.line))
        for name in _local_refs(s):
            if name not in locals_:
                v.append(Violation("unknown-local", f"local array {name!r} is not declared", s.line))

    root_assigned = {s.dst for s in prog.body if isinstance(s, Assign)}
    for name in prog.transmit:
        if name in params:
            v.append(Violation("transmit-param", f"parameter {name!r} cannot be transmitted"))
        elif name not in root_assigned:
            v.append(Violation("transmit-not-root", f"transmit variable {name!r} is not declared in root scope"))

    _check_definite_assignment(prog, v)
    _check_uniformity(prog, v)
    return ValidationReport(v)


def _reads(s) -> list:
    if isinstance(s, Assign):
        args = s.args[1:] if s.op == "lload" else s.args
    elif isinstance(s, Store):
        args = s.args[1:] if s.op == "lstore" else s.args
    elif isinstance(s, (If, While)):
        args = s.cond.args
    else:
        args = ()
    return [a for a in args if isinstance(a, str)]


def _local_refs(s) -> list:
    if isinstance(s, Assign) and s.op == "lload":
        return [s.args[0]]
    if isinstance(s, Store) and s.op == "lstore":
        return [s.args[0]]
    return []


_TOP = None  # "unreachable": acts as the universal set


def _meet(a, b):
    if a is _TOP:
        return b
    if b is _TOP:
        return a
    return a & b


def _check_definite_assignment(prog, v):
    transmit = prog.transmit_set
    if not transmit:
        return

    def block(stmts, live):
        for s in stmts:
            live = stmt(s, live)
        return live

    def stmt(s, live):
        if live is _TOP:
            return _TOP
        if isinstance(s, Assign):
            return live | {s.dst}
        if isinstance(s, Primitive):
            if s.op in ("request_fork", "resizing_global_barrier"):
                missing = sorted(transmit - live)
                if missing:
                    v.append(
                        Violation(
                            "transmit-before-fork",
                            f"transmit variable(s) {', '.join(missing)} may be unassigned at {s.op}",
                            s.line,
                        )
                    )
            if s.op in ("halt", "break"):
                return _TOP
            return live
        if isinstance(s, If):
            return _meet(block(s.then, live), block(s.orelse, live))
        if isinstance(s, While):
            head = block(s.header, live)
            if head is not _TOP:
                block(s.body, head)
            return head
        return live

    block(prog.body, frozenset())


def _check_uniformity(prog, v):
    taint: dict = {}

    def operand_taint(args):
        return max((taint.get(a, UNIFORM) for a in args if isinstance(a, str)), default=UNIFORM)

    def expr_taint(op, args):
        t = _SOURCE_TAINT.get(op, UNIFORM)
        if op == "lload":
            # group-local memory may hold thread-specific values
            t = max(t, GROUP, operand_taint(args[1:]))
        return max(t, operand_taint(args))

    # variable taint fixpoint (flow-insensitive, with control dependence)
    def propagate(stmts, ctx) -> bool:
        changed = False
        for s in stmts:
            if isinstance(s, Assign):
                t = max(ctx, expr_taint(s.op, s.args))
                if t > taint.get(s.dst, UNIFORM):
                    taint[s.dst] = t
                    changed = True
            elif isinstance(s, If):
                c = max(ctx, operand_taint(s.cond.args))
                changed |= propagate(s.then, c)
                changed |= propagate(s.orelse, c)
            elif isinstance(s, While):
                c = max(ctx, _loop_taint(s))
                changed |= propagate(s.header, c)
                changed |= propagate(s.body, c)
        return changed

    def _loop_taint(w):
        t = operand_taint(w.cond.args)
        for ctx in _break_contexts(w.body, UNIFORM):
            t = max(t, ctx)
        return t

    def _break_contexts(stmts, ctx):
        for s in stmts:
            if isinstance(s, Primitive) and s.op == "break":
                yield ctx
            elif isinstance(s, If):
                c = max(ctx, operand_taint(s.cond.args))
                yield from _break_contexts(s.then, c)
                yield from _break_contexts(s.orelse, c)
            # breaks inside nested loops belong to those loops

    while propagate(prog.body, UNIFORM):
        pass

    exit_taint = [UNIFORM]
    seen = set()

    def report(code, msg, line):
        key = (code, line)
        if key not in seen:
            seen.add(key)
            v.append(Violation(code, msg, line))

    def check(stmts, ctx, loop):
        for s in stmts:
            eff = max(ctx, exit_taint[0])
            if isinstance(s, Primitive):
                if s.op in ("offer_kill", "request_fork") and eff >= THREAD:
                    report("nonuniform-workgroup-op", f"{s.op} under thread-dependent control", s.line)
                elif s.op in ("offer_kill", "request_fork") and loop >= GROUP:
                    report("nonuniform-loop", f"{s.op} inside a loop with group-dependent trip count", s.line)
                elif s.op == "resizing_global_barrier" and eff >= GROUP:
                    report("nonuniform-barrier", "resizing_global_barrier under non-uniform control", s.line)
                elif s.op == "halt" and eff > UNIFORM:
                    exit_taint[0] = max(exit_taint[0], eff)
            elif isinstance(s, GlobalBarrier) and eff >= GROUP:
                report("nonuniform-barrier", "global_barrier under non-uniform control", s.line)
            elif isinstance(s, If):
                c = max(ctx, operand_taint(s.cond.args))
                check(s.then, c, loop)
                check(s.orelse, c, loop)
            elif isinstance(s, While):
                c = max(ctx, _loop_taint(s))
                for _ in range(2):  # second pass sees exits from later iterations
                    check(s.header, c, max(loop, c))
                    check(s.body, c, max(loop, c))

    check(prog.body, UNIFORM, UNIFORM)


# --------------------------------------------------------------------------
# transformations


def strip_cooperative(prog: Program) -> Program:
    """The non-cooperative twin of a program: primitives removed, resizing
    barriers replaced by plain global barriers."""

    def block(stmts):
        out = []
        for s in stmts:
            if isinstance(s, Primitive) and s.op in ("offer_kill", "request_fork"):
                continue
            if isinstance(s, Primitive) and s.op == "resizing_global_barrier":
                out.append(GlobalBarrier(None, s.coop, s.line))
            elif isinstance(s, If):
                out.append(replace(s, then=block(s.then), orelse=block(s.orelse)))
            elif isinstance(s, While):
                out.append(replace(s, header=block(s.header), body=block(s.body)))
            else:
                out.append(s)
        return tuple(out)

    return replace(prog, body=block(prog.body), name=prog.name + "_plain")
