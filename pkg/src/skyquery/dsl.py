"""Parser, type checker and executor for SkyQuery programs.

A program is a list of assignments, one per line::

    cars = ObjectDetection(Video, 'car_model')
    car_traj = ObjectTracking(cars)
    *counts = ToMatrix(Select(car_traj, duration > 120), Count)

A leading ``*`` on a target exports that dataframe.  Statements may be
continued with a trailing backslash, or across lines inside parentheses.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Optional, Union

from .analytics import io as aio
from .analytics.operators import (Aggregator, OperatorError, SelectPredicate, aggregate, join,
                                  matrix_binary, merge, select, thin, to_matrix)
from .analytics.tracking import object_tracking
from .core import DetectionFrame, MatrixFrame, RegionConfig, SequenceFrame
from .scheduling import RateMatrix, const_rates, forecast_rates, ttl_rates

# ---------------------------------------------------------------- errors


class ProgramError(ValueError):
    """Any parse, name, arity or type error, located at line/column (1-based)."""

    def __init__(self, kind: str, msg: str, line: int, col: int):
        super().__init__(f"line {line}, col {col}: {kind}: {msg}")
        self.kind = kind
        self.line = line
        self.col = col


# ---------------------------------------------------------------- AST

@dataclass(frozen=True)
class Node:
    line: int = field(default=0, compare=False, repr=False, kw_only=True)
    col: int = field(default=0, compare=False, repr=False, kw_only=True)


@dataclass(frozen=True)
class Name(Node):
    id: str


@dataclass(frozen=True)
class Num(Node):
    value: float


@dataclass(frozen=True)
class Str(Node):
    value: str


@dataclass(frozen=True)
class Symbol(Node):
    """A bare keyword argument value such as ``Count`` or ``SimpleGaussian``."""

    id: str


@dataclass(frozen=True)
class Pred(Node):
    attr: str
    cmp: str
    value: float


@dataclass(frozen=True)
class BinOp(Node):
    op: str
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class Neg(Node):
    operand: "Expr"


@dataclass(frozen=True)
class Call(Node):
    func: str
    args: tuple["Expr", ...]
    kwargs: tuple[tuple[str, "Expr"], ...] = ()


Expr = Union[Name, Num, Str, Symbol, Pred, BinOp, Neg, Call]


@dataclass(frozen=True)
class Statement(Node):
    targets: tuple[str, ...]
    exported: tuple[bool, ...]
    expr: Expr


@dataclass(frozen=True)
class Program:
    statements: tuple[Statement, ...]

    @property
    def exports(self) -> frozenset[str]:
        return frozenset(t for s in self.statements for t, e in zip(s.targets, s.exported) if e)

    @property
    def has_priorities(self) -> bool:
        return any("priorities" in s.targets for s in self.statements)

    def defined(self) -> list[str]:
        out: list[str] = []
        for s in self.statements:
            out.extend(t for t in s.targets if t not in out)
        return out


# ---------------------------------------------------------------- operator registry

@dataclass(frozen=True)
class Param:
    name: str
    kind: str  # V, D, S, M, agg, model, pred, str, num, int
    optional: bool = False
    choices: tuple[str, ...] = ()


@dataclass(frozen=True)
class Signature:
    params: tuple[Param, ...]
    returns: tuple[str, ...]


REGISTRY: dict[str, Signature] = {
    "ObjectDetection": Signature((Param("video", "V"), Param("model", "str")), ("D",)),
    "ObjectTracking": Signature((Param("detections", "D"),), ("S",)),
    "Select": Signature((Param("sequences", "S"), Param("predicate", "pred")), ("S",)),
    "Merge": Signature((Param("sequences", "S"),), ("S",)),
    "ToMatrix": Signature((Param("sequences", "S"),
                           Param("func", "agg", choices=("Count", "CountNew", "CountSum")),
                           Param("cell_size", "num", optional=True)), ("M",)),
    "Aggregate": Signature((Param("matrix", "M"),
                            Param("func", "agg", choices=("Sum", "Max", "Priority"))), ("M",)),
    "Thin": Signature((Param("matrix", "M"),), ("M",)),
    "Join": Signature((Param("sequences", "S"), Param("matrix", "M")), ("S",)),
    "Import": Signature((Param("path", "str"),), ("M",)),
    "ConstRates": Signature((), ("M",)),
    "TTLRates": Signature((Param("matrix", "M"), Param("ttl", "int")), ("M",)),
    "ForecastRates": Signature((Param("matrix", "M"),
                                Param("model", "model", optional=True, choices=("SimpleGaussian",))),
                               ("M", "M")),
}

BUILTIN_NAMES = {"Video": "V"}
ARITH_OPS = ("+", "-", "*", "/")
CMP_OPS = ("<", ">", "<=", ">=")
_CANON_CMP = {"≤": "<=", "≥": ">="}

# ---------------------------------------------------------------- tokenizer

_TOKEN = re.compile(r"""
    (?P<ws>[ \t\r]+)
  | (?P<comment>\#[^\n]*)
  | (?P<cont>\\[ \t]*(?:\#[^\n]*)?\n)
  | (?P<nl>\n)
  | (?P<num>(?:\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?)
  | (?P<name>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<str>['`‘][^'’\n]*['’])
  | (?P<op><=|>=|==|[≤≥<>=+\-*/(),])
""", re.VERBOSE)


@dataclass(frozen=True)
class Token:
    kind: str
    text: str
    line: int
    col: int


def tokenize(source: str) -> list[Token]:
    toks: list[Token] = []
    line, line_start, pos, depth = 1, 0, 0, 0
    if not source.endswith("\n"):
        source += "\n"
    while pos < len(source):
        m = _TOKEN.match(source, pos)
        col = pos - line_start + 1
        if m is None:
            raise ProgramError("syntax error", f"unexpected character {source[pos]!r}", line, col)
        kind = m.lastgroup
        text = m.group()
        if kind in ("cont", "nl"):
            if kind == "nl" and depth == 0:
                toks.append(Token("nl", text, line, col))
            line += 1
            line_start = m.end()
        elif kind == "op":
            if text in ("(",):
                depth += 1
            elif text == ")":
                depth = max(depth - 1, 0)
            toks.append(Token("op", _CANON_CMP.get(text, text), line, col))
        elif kind == "str":
            toks.append(Token("str", text[1:-1], line, col))
        elif kind in ("num", "name"):
            toks.append(Token(kind, text, line, col))
        pos = m.end()
    toks.append(Token("eof", "", line, 1))
    return toks


# ---------------------------------------------------------------- parser

class _Parser:
    def __init__(self, toks: list[Token]):
        self.toks = toks
        self.i = 0

    def peek(self) -> Token:
        return self.toks[self.i]

    def next(self) -> Token:
        tok = self.toks[self.i]
        self.i += 1
        return tok

    def accept(self, text: str) -> Optional[Token]:
        tok = self.peek()
        if tok.kind == "op" and tok.text == text:
            self.i += 1
            return tok
        return None

    def expect(self, text: str) -> Token:
        tok = self.accept(text)
        if tok is None:
            t = self.peek()
            raise ProgramError("syntax error", f"expected {text!r}, found {t.text or t.kind!r}",
                               t.line, t.col)
        return tok

    def program(self) -> list[Statement]:
        out = []
        while self.peek().kind != "eof":
            if self.peek().kind == "nl":
                self.next()
                continue
            out.append(self.statement())
        return out

    def statement(self) -> Statement:
        first = self.peek()
        targets, exported = [], []
        while True:
            star = self.accept("*") is not None
            tok = self.next()
            if tok.kind != "name":
                raise ProgramError("syntax error", "expected a dataframe name", tok.line, tok.col)
            targets.append(tok.text)
            exported.append(star)
            if not self.accept(","):
                break
        self.expect("=")
        expr = self.expr()
        end = self.peek()
        if end.kind not in ("nl", "eof"):
            raise ProgramError("syntax error", f"unexpected {end.text!r}", end.line, end.col)
        return Statement(tuple(targets), tuple(exported), expr, line=first.line, col=first.col)

    def expr(self) -> Expr:
        left = self.additive()
        tok = self.peek()
        if tok.kind == "op" and tok.text in CMP_OPS:
            self.next()
            right = self.additive()
            return BinOp(tok.text, left, right, line=tok.line, col=tok.col)
        return left

    def additive(self) -> Expr:
        left = self.term()
        while self.peek().kind == "op" and self.peek().text in ("+", "-"):
            tok = self.next()
            left = BinOp(tok.text, left, self.term(), line=tok.line, col=tok.col)
        return left

    def term(self) -> Expr:
        left = self.unary()
        while self.peek().kind == "op" and self.peek().text in ("*", "/"):
            tok = self.next()
            left = BinOp(tok.text, left, self.unary(), line=tok.line, col=tok.col)
        return left

    def unary(self) -> Expr:
        tok = self.accept("-")
        if tok is not None:
            inner = self.unary()
            if isinstance(inner, Num):
                return Num(-inner.value, line=tok.line, col=tok.col)
            return Neg(inner, line=tok.line, col=tok.col)
        return self.primary()

    def primary(self) -> Expr:
        tok = self.next()
        if tok.kind == "num":
            return Num(float(tok.text), line=tok.line, col=tok.col)
        if tok.kind == "str":
            return Str(tok.text, line=tok.line, col=tok.col)
        if tok.kind == "name":
            if self.accept("("):
                return self.call(tok)
            return Name(tok.text, line=tok.line, col=tok.col)
        if tok.kind == "op" and tok.text == "(":
            inner = self.expr()
            self.expect(")")
            return inner
        raise ProgramError("syntax error", f"unexpected {tok.text or tok.kind!r}", tok.line, tok.col)

    def call(self, name_tok: Token) -> Call:
        args, kwargs = [], []
        if not self.accept(")"):
            while True:
                tok = self.peek()
                nxt = self.toks[self.i + 1]
                if tok.kind == "name" and nxt.kind == "op" and nxt.text == "=":
                    self.i += 2
                    kwargs.append((tok.text, self.expr()))
                else:
                    if kwargs:
                        raise ProgramError("syntax error", "positional argument after keyword",
                                           tok.line, tok.col)
                    args.append(self.expr())
                if self.accept(")"):
                    break
                self.expect(",")
        return Call(name_tok.text, tuple(args), tuple(kwargs), line=name_tok.line, col=name_tok.col)


# ---------------------------------------------------------------- resolution

class _Scope:
    """Names visible while resolving one statement, for define-before-use checks."""

    def __init__(self, stmts: list[Statement]):
        self.first_def: dict[str, int] = {}
        for i, s in enumerate(stmts):
            for t in s.targets:
                self.first_def.setdefault(t, i)
        self.deps = {t: {n.id for n in _names(s.expr)} for s in stmts for t in s.targets}
        self.defined: set[str] = set(BUILTIN_NAMES)
        self.targets: tuple[str, ...] = ()

    def reaches(self, src: str, dst: str) -> bool:
        seen, stack = set(), [src]
        while stack:
            x = stack.pop()
            if x == dst:
                return True
            if x not in seen:
                seen.add(x)
                stack.extend(self.deps.get(x, ()))
        return False

    def use(self, n: Name) -> None:
        if n.id in self.defined:
            return
        if n.id in self.targets or (n.id in self.first_def
                                    and any(self.reaches(n.id, t) for t in self.targets)):
            raise ProgramError("cyclic reference", f"{n.id!r} depends on itself", n.line, n.col)
        raise ProgramError("undefined name", n.id, n.line, n.col)


def _resolve_call(call: Call, scope: _Scope) -> Call:
    """Bind arguments to the registry signature and rewrite keyword-like values."""
    sig = REGISTRY.get(call.func)
    if sig is None:
        raise ProgramError("unknown operator", call.func, call.line, call.col)
    names = [p.name for p in sig.params]
    if len(call.args) > len(sig.params):
        raise ProgramError("wrong arity", f"{call.func} takes at most {len(sig.params)} arguments, "
                           f"got {len(call.args) + len(call.kwargs)}", call.line, call.col)
    bound: dict[str, Expr] = dict(zip(names, call.args))
    for k, v in call.kwargs:
        if k not in names:
            raise ProgramError("wrong arity", f"{call.func} has no parameter {k!r}", v.line, v.col)
        if k in bound:
            raise ProgramError("wrong arity", f"{call.func} got {k!r} twice", v.line, v.col)
        bound[k] = v
    out_args = []
    for p in sig.params:
        if p.name not in bound:
            if p.optional:
                break
            raise ProgramError("wrong arity", f"{call.func} missing argument {p.name!r}",
                               call.line, call.col)
        out_args.append(_resolve_arg(call, p, bound[p.name], scope))
    if len(out_args) < len(bound):
        raise ProgramError("wrong arity", f"{call.func}: optional arguments must be given in order",
                           call.line, call.col)
    return Call(call.func, tuple(out_args), (), line=call.line, col=call.col)


def _resolve_arg(call: Call, p: Param, v: Expr, scope: _Scope) -> Expr:
    if p.kind in ("agg", "model"):
        if not isinstance(v, (Name, Symbol)):
            raise ProgramError("type error", f"{call.func} expects a {p.name} name", v.line, v.col)
        for choice in p.choices:
            if choice.lower() == v.id.lower():
                return Symbol(choice, line=v.line, col=v.col)
        raise ProgramError("type error", f"{call.func} {p.name} must be one of {', '.join(p.choices)}",
                           v.line, v.col)
    if p.kind == "pred":
        if isinstance(v, Pred):
            return v
        if not (isinstance(v, BinOp) and v.op in CMP_OPS and isinstance(v.left, Name)):
            raise ProgramError("type error", "Select expects a predicate like 'duration > 60'",
                               v.line, v.col)
        if not isinstance(v.right, Num):
            raise ProgramError("type error", "predicate threshold must be a number",
                               v.right.line, v.right.col)
        if v.left.id not in ("length", "displacement", "duration"):
            raise ProgramError("type error", f"unknown select attribute {v.left.id!r}",
                               v.left.line, v.left.col)
        return Pred(v.left.id, v.op, v.right.value, line=v.line, col=v.col)
    if p.kind == "str" and not isinstance(v, Str):
        raise ProgramError("type error", f"{call.func} expects a quoted string", v.line, v.col)
    if p.kind in ("num", "int") and not isinstance(v, Num):
        raise ProgramError("type error", f"{call.func} expects a number for {p.name}", v.line, v.col)
    if p.kind == "int" and not float(v.value).is_integer():
        raise ProgramError("type error", f"{call.func} expects an integer {p.name}", v.line, v.col)
    return _resolve(v, scope)


def _resolve(e: Expr, scope: _Scope) -> Expr:
    if isinstance(e, Name):
        scope.use(e)
    elif isinstance(e, Call):
        return _resolve_call(e, scope)
    elif isinstance(e, BinOp):
        return BinOp(e.op, _resolve(e.left, scope), _resolve(e.right, scope), line=e.line, col=e.col)
    elif isinstance(e, Neg):
        return Neg(_resolve(e.operand, scope), line=e.line, col=e.col)
    return e


def _names(e: Expr) -> list[Name]:
    if isinstance(e, Name):
        return [e]
    if isinstance(e, Call):
        return [n for a in e.args for n in _names(a)] + [n for _, a in e.kwargs for n in _names(a)]
    if isinstance(e, BinOp):
        return _names(e.left) + _names(e.right)
    if isinstance(e, Neg):
        return _names(e.operand)
    return []


def parse(source: str) -> Program:
    """Parse and resolve a program; raises ProgramError with a location on failure.

    Names must be defined before use and assigned once; the one exception
    is a refinement such as ``stopped = Select(stopped, ...)``, which
    rebinds a name in terms of its previous value.
    """
    raw = _Parser(tokenize(source)).program()
    scope = _Scope(raw)
    stmts = []
    for s in raw:
        scope.targets = s.targets
        expr = _resolve(s.expr, scope)
        used = {n.id for n in _names(expr)}
        if len(set(s.targets)) != len(s.targets):
            raise ProgramError("duplicate definition", "target listed twice", s.line, s.col)
        for t in s.targets:
            if t in BUILTIN_NAMES:
                raise ProgramError("duplicate definition", f"{t!r} is reserved", s.line, s.col)
            if t in scope.defined and t not in used:
                raise ProgramError("duplicate definition", f"{t!r} already defined at line "
                                   f"{raw[scope.first_def[t]].line}", s.line, s.col)
        if isinstance(expr, Call):
            n_out = len(REGISTRY[expr.func].returns)
            if n_out != len(s.targets):
                raise ProgramError("wrong arity", f"{expr.func} yields {n_out} dataframe(s), "
                                   f"{len(s.targets)} target(s) given", s.line, s.col)
        elif len(s.targets) != 1:
            raise ProgramError("wrong arity", "arithmetic yields one dataframe", s.line, s.col)
        scope.defined.update(s.targets)
        stmts.append(Statement(s.targets, s.exported, expr, line=s.line, col=s.col))
    return Program(tuple(stmts))


def parse_file(path: Union[str, Path]) -> Program:
    return parse(Path(path).read_text(encoding="utf-8"))


# ---------------------------------------------------------------- rendering

_PREC = {"<": 0, ">": 0, "<=": 0, ">=": 0, "+": 1, "-": 1, "*": 2, "/": 2}


def _num(v: float) -> str:
    return str(int(v)) if float(v).is_integer() and abs(v) < 1e15 else repr(float(v))


def render_expr(e: Expr, prec: int = 0) -> str:
    if isinstance(e, (Name, Symbol)):
        return e.id
    if isinstance(e, Num):
        s = _num(e.value)
        return f"({s})" if e.value < 0 and prec > 0 else s
    if isinstance(e, Str):
        return f"'{e.value}'"
    if isinstance(e, Pred):
        return f"{e.attr} {e.cmp} {_num(e.value)}"
    if isinstance(e, Neg):
        return f"-{render_expr(e.operand, 3)}"
    if isinstance(e, BinOp):
        p = _PREC[e.op]
        # left-associative: the right operand needs parens at equal precedence;
        # comparisons do not chain, so neither side may be a bare comparison
        s = f"{render_expr(e.left, max(p, 1))} {e.op} {render_expr(e.right, p + 1)}"
        return f"({s})" if p < prec or (p == 0 and prec > 0) else s
    if isinstance(e, Call):
        return f"{e.func}({', '.join(render_expr(a) for a in e.args)})"
    raise TypeError(e)


def render(p: Program) -> str:
    """Canonical text: one statement per line, positional arguments, single-quoted strings."""
    lines = []
    for s in p.statements:
        lhs = ", ".join(("*" if x else "") + t for t, x in zip(s.targets, s.exported))
        lines.append(f"{lhs} = {render_expr(s.expr)}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- type checking

def _type_of(e: Expr, env: Mapping[str, str]) -> str:
    if isinstance(e, Name):
        return env[e.id]
    if isinstance(e, Num):
        return "num"
    if isinstance(e, Neg):
        t = _type_of(e.operand, env)
        if t not in ("M", "num"):
            raise ProgramError("type error", f"cannot negate a {t} dataframe", e.line, e.col)
        return t
    if isinstance(e, BinOp):
        lt, rt = _type_of(e.left, env), _type_of(e.right, env)
        for t, side in ((lt, e.left), (rt, e.right)):
            if t not in ("M", "num"):
                raise ProgramError("type error", f"arithmetic needs matrices or numbers, got {t}",
                                   side.line, side.col)
        return "M" if "M" in (lt, rt) else "num"
    if isinstance(e, Call):
        sig = REGISTRY[e.func]
        for p, a in zip(sig.params, e.args):
            if p.kind in ("V", "D", "S", "M"):
                t = _type_of(a, env)
                if t != p.kind:
                    raise ProgramError("type error", f"{e.func} expects {p.kind} for {p.name}, got {t}",
                                       a.line, a.col)
        return sig.returns[0] if len(sig.returns) == 1 else "tuple"
    raise ProgramError("type error", f"{type(e).__name__} is not a dataframe", e.line, e.col)


def typecheck(p: Program) -> dict[str, str]:
    """Dataframe type (D, S or M) of every defined name."""
    env: dict[str, str] = dict(BUILTIN_NAMES)
    for s in p.statements:
        t = _type_of(s.expr, env)
        if isinstance(s.expr, Call):
            for name, rt in zip(s.targets, REGISTRY[s.expr.func].returns):
                env[name] = rt
        else:
            if t != "M":
                raise ProgramError("type error", "a statement must produce a dataframe", s.line, s.col)
            env[s.targets[0]] = t
    return {k: v for k, v in env.items() if k not in BUILTIN_NAMES}


def sources(p: Program) -> list[tuple[str, str]]:
    """(operator, source name) for every ObjectDetection/Import in the program."""
    out: list[tuple[str, str]] = []

    def walk(e: Expr):
        if isinstance(e, Call):
            if e.func in ("ObjectDetection", "Import"):
                out.append((e.func, e.args[-1].value))
            for a in e.args:
                walk(a)
        elif isinstance(e, BinOp):
            walk(e.left)
            walk(e.right)
        elif isinstance(e, Neg):
            walk(e.operand)

    for s in p.statements:
        walk(s.expr)
    return out


# ---------------------------------------------------------------- execution

Dataframe = Union[DetectionFrame, SequenceFrame, MatrixFrame]


@dataclass
class ExecutionContext:
    region: RegionConfig
    bindings: Mapping[str, Union[str, Path]] = field(default_factory=dict)
    coverage: Optional[aio.CoverageLog] = None
    merge_similarity: float = 0.8
    tracking_iou: float = 0.1
    tracking_max_age: int = 3


def _source(ctx: ExecutionContext, name: str, node: Node) -> Path:
    path = ctx.bindings.get(name)
    if path is None:
        raise ProgramError("unbound source", f"no binding for {name!r}", node.line, node.col)
    return Path(path)


class _Executor:
    def __init__(self, ctx: ExecutionContext):
        self.ctx = ctx
        self.env: dict[str, Any] = {}

    def eval(self, e: Expr) -> Any:
        if isinstance(e, Name):
            return None if e.id == "Video" else self.env[e.id]
        if isinstance(e, Num):
            return e.value
        if isinstance(e, Neg):
            return matrix_binary("-", 0.0, self.eval(e.operand))
        if isinstance(e, BinOp):
            return matrix_binary(e.op, self.eval(e.left), self.eval(e.right))
        if isinstance(e, Call):
            try:
                return self.call(e)
            except (OperatorError, aio.InputFormatError, ValueError) as exc:
                if isinstance(exc, ProgramError):
                    raise
                raise ProgramError("execution error", f"{e.func}: {exc}", e.line, e.col) from exc
        raise TypeError(e)

    def call(self, e: Call) -> Any:
        ctx = self.ctx
        a = e.args
        f = e.func
        if f == "ObjectDetection":
            return aio.read_detection_log(_source(ctx, a[1].value, a[1]))
        if f == "Import":
            return aio.import_raster(_source(ctx, a[0].value, a[0]), ctx.region)
        if f == "ObjectTracking":
            return object_tracking(self.eval(a[0]), ctx.tracking_iou, ctx.tracking_max_age)
        if f == "Select":
            pred: Pred = a[1]
            return select(self.eval(a[0]), SelectPredicate(pred.attr, pred.cmp, pred.value))
        if f == "Merge":
            return merge(self.eval(a[0]), ctx.coverage, ctx.merge_similarity)
        if f == "ToMatrix":
            region = ctx.region.with_cell_size(a[2].value) if len(a) > 2 else ctx.region
            return to_matrix(self.eval(a[0]), a[1].id, region, ctx.coverage)
        if f == "Aggregate":
            return aggregate(self.eval(a[0]), a[1].id)
        if f == "Thin":
            return thin(self.eval(a[0]))
        if f == "Join":
            return join(self.eval(a[0]), self.eval(a[1]))
        if f == "ConstRates":
            return const_rates(ctx.region)
        if f == "TTLRates":
            return ttl_rates(self.eval(a[0]), int(a[1].value))
        if f == "ForecastRates":
            return forecast_rates(self.eval(a[0]))
        raise ProgramError("unknown operator", f, e.line, e.col)


def plan_and_execute(p: Program, ctx: ExecutionContext, want: Optional[set[str]] = None
                     ) -> dict[str, Dataframe]:
    """Execute statements in order; returns exports plus ``priorities`` when defined.

    Only statements the requested outputs depend on are run.  Every source
    is checked for a binding before any work starts.
    """
    typecheck(p)
    want = set(want) if want is not None else set(p.exports) | ({"priorities"} if p.has_priorities else set())
    unknown = want - set(p.defined())
    if unknown:
        raise ProgramError("undefined name", f"cannot export {sorted(unknown)}", 1, 1)
    needed = _needed(p, want)
    for i in sorted(needed):
        s = p.statements[i]
        for op, name in sources(Program((s,))):
            _source(ctx, name, s)
    ex = _Executor(ctx)
    for i, s in enumerate(p.statements):
        if i not in needed:
            continue
        value = ex.eval(s.expr)
        if len(s.targets) == 1:
            ex.env[s.targets[0]] = value
        else:
            for t, v in zip(s.targets, value):
                ex.env[t] = v
    return {k: ex.env[k] for k in sorted(want)}


def _needed(p: Program, want: set[str]) -> set[int]:
    """Indices of statements contributing to the final binding of each wanted name."""
    needed: set[int] = set()
    # walk backwards: a use binds to the latest earlier definition
    pending = set(want)
    for i in range(len(p.statements) - 1, -1, -1):
        s = p.statements[i]
        hit = pending & set(s.targets)
        if hit:
            needed.add(i)
            pending -= hit
            pending |= {n.id for n in _names(s.expr) if n.id not in BUILTIN_NAMES}
    return needed


def write_dataframe(path: Union[str, Path], df: Dataframe) -> Path:
    """Write a dataframe in its canonical format; the suffix is chosen by type."""
    path = Path(path)
    if isinstance(df, MatrixFrame):
        path = path.with_suffix(".csv")
        aio.write_matrix_csv(path, df)
    elif isinstance(df, SequenceFrame):
        path = path.with_suffix(".jsonl")
        aio.write_sequences(path, df)
    elif isinstance(df, DetectionFrame):
        path = path.with_suffix(".jsonl")
        aio.write_detection_log(path, df)
    else:
        raise TypeError(f"cannot write {type(df).__name__}")
    return path


__all__ = [
    "BinOp", "Call", "ExecutionContext", "Name", "Neg", "Num", "Pred", "Program", "ProgramError",
    "REGISTRY", "RateMatrix", "Statement", "Str", "Symbol", "parse", "parse_file", "plan_and_execute",
    "render", "sources", "typecheck", "write_dataframe",
]
