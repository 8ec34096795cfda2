"""Closed-form expression language for metrics, fields, and obstacle indicators.

Grammar (EBNF, also shipped in docs/expression-grammar.md)::

    expr    := term  (("+" | "-") term)*
    term    := unary (("*" | "/") unary)*
    unary   := "-" unary | power
    power   := atom ("^" unary)?          # right-associative; binds tighter
                                          # than unary minus: -x1^2 == -(x1^2)
    atom    := NUMBER | IDENT | IDENT "(" expr ("," expr)* ")" | "(" expr ")"

Variables are ``x1 .. xn``; ``pi`` and ``e`` are constants.  Available
functions: sin, cos, tan, exp, log, sqrt, abs, atan2, pow.

ASTs are immutable; parsing, evaluation, and differentiation are pure, so
expressions are safe to share across threads.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass

import numpy as np

from .errors import ExpressionSyntaxError, NonFiniteValueError, UnknownIdentifierError

__all__ = [
    "Expression", "Const", "Var", "Neg", "Bin", "Fun",
    "parse", "to_text", "evaluate", "differentiate", "free_variables",
    "compile_point", "compile_grid", "to_python_source",
]

_FUNCTIONS_1 = ("sin", "cos", "tan", "exp", "log", "sqrt", "abs")
_FUNCTIONS_2 = ("atan2", "pow")
_CONSTANTS = {"pi": math.pi, "e": math.e}

_VAR_RE = re.compile(r"^x([1-9][0-9]*)$")


class Expression:
    """Base AST node. Subclasses: Const, Var, Neg, Bin, Fun."""

    __slots__ = ()

    def __call__(self, x):
        return evaluate(self, x)

    def __str__(self):
        return to_text(self)

    def __repr__(self):
        return f"{type(self).__name__}({to_text(self)!r})"


@dataclass(frozen=True, repr=False)
class Const(Expression):
    value: float


@dataclass(frozen=True, repr=False)
class Var(Expression):
    index: int  # 0-based; prints as x{index+1}


@dataclass(frozen=True, repr=False)
class Neg(Expression):
    arg: Expression


@dataclass(frozen=True, repr=False)
class Bin(Expression):
    op: str  # one of + - * / ^
    lhs: Expression
    rhs: Expression


@dataclass(frozen=True, repr=False)
class Fun(Expression):
    name: str
    args: tuple


# ---------------------------------------------------------------------------
# tokenizer / parser
# ---------------------------------------------------------------------------

_TOKEN_RE = re.compile(
    r"\s*(?:(?P<num>\d+\.\d*(?:[eE][+-]?\d+)?|\.\d+(?:[eE][+-]?\d+)?|\d+(?:[eE][+-]?\d+)?)"
    r"|(?P<ident>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>[-+*/^(),]))"
)


def _tokenize(text):
    tokens = []
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            stripped = text[pos:].lstrip()
            if not stripped:
                break
            col = len(text) - len(stripped) + 1
            raise ExpressionSyntaxError(f"unexpected character {stripped[0]!r}", col)
        pos = m.end()
        col = m.start(m.lastgroup) + 1
        if m.group("num") is not None:
            tokens.append(("num", m.group("num"), col))
        elif m.group("ident") is not None:
            tokens.append(("ident", m.group("ident"), col))
        else:
            tokens.append(("op", m.group("op"), col))
    tokens.append(("end", "", len(text) + 1))
    return tokens


class _Parser:
    def __init__(self, text, dimension):
        self.text = text
        self.dimension = dimension
        self.tokens = _tokenize(text)
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def advance(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect_op(self, op):
        kind, val, col = self.peek()
        if kind != "op" or val != op:
            raise ExpressionSyntaxError(
                f"expected '{op}', found {val!r}" if val else f"expected '{op}' at end of input",
                col, expected=(op,))
        return self.advance()

    def parse(self):
        node = self.expr()
        kind, val, col = self.peek()
        if kind != "end":
            raise ExpressionSyntaxError(f"trailing input {val!r}", col)
        return node

    def expr(self):
        node = self.term()
        while True:
            kind, val, _ = self.peek()
            if kind == "op" and val in "+-":
                self.advance()
                node = Bin(val, node, self.term())
            else:
                return node

    def term(self):
        node = self.unary()
        while True:
            kind, val, _ = self.peek()
            if kind == "op" and val in "*/":
                self.advance()
                node = Bin(val, node, self.unary())
            else:
                return node

    def unary(self):
        kind, val, _ = self.peek()
        if kind == "op" and val == "-":
            self.advance()
            arg = self.unary()
            if isinstance(arg, Const):
                return Const(-arg.value)
            return Neg(arg)
        return self.power()

    def power(self):
        base = self.atom()
        kind, val, _ = self.peek()
        if kind == "op" and val == "^":
            self.advance()
            return Bin("^", base, self.unary())
        return base

    def atom(self):
        kind, val, col = self.advance()
        if kind == "num":
            return Const(float(val))
        if kind == "ident":
            nk, nv, _ = self.peek()
            if nk == "op" and nv == "(":
                return self.call(val, col)
            m = _VAR_RE.match(val)
            if m:
                index = int(m.group(1)) - 1
                if index >= self.dimension:
                    raise UnknownIdentifierError(val, col)
                return Var(index)
            if val in _CONSTANTS:
                return Const(_CONSTANTS[val])
            raise UnknownIdentifierError(val, col)
        if kind == "op" and val == "(":
            node = self.expr()
            self.expect_op(")")
            return node
        shown = val if val else "end of input"
        raise ExpressionSyntaxError(
            f"expected a value, found {shown!r}", col,
            expected=("number", "identifier", "("))

    def call(self, name, col):
        if name not in _FUNCTIONS_1 and name not in _FUNCTIONS_2:
            raise UnknownIdentifierError(name, col)
        self.expect_op("(")
        args = [self.expr()]
        while True:
            kind, val, _ = self.peek()
            if kind == "op" and val == ",":
                self.advance()
                args.append(self.expr())
            else:
                break
        self.expect_op(")")
        arity = 1 if name in _FUNCTIONS_1 else 2
        if len(args) != arity:
            raise ExpressionSyntaxError(
                f"{name} takes {arity} argument(s), got {len(args)}", col)
        return Fun(name, tuple(args))


def parse(text, dimension=2):
    """Parse ``text`` into an AST over variables x1..x{dimension}."""
    return _Parser(text, dimension).parse()


# ---------------------------------------------------------------------------
# printing
# ---------------------------------------------------------------------------

_PREC_ADD, _PREC_MUL, _PREC_NEG, _PREC_POW, _PREC_ATOM = 1, 2, 3, 4, 5


def _prec(node):
    if isinstance(node, (Var, Fun)):
        return _PREC_ATOM
    if isinstance(node, Const):
        return _PREC_ATOM if node.value >= 0 else _PREC_NEG
    if isinstance(node, Neg):
        return _PREC_NEG
    if node.op in "+-":
        return _PREC_ADD
    if node.op in "*/":
        return _PREC_MUL
    return _PREC_POW


def _fmt_const(v):
    if v == int(v) and abs(v) < 1e16:
        return str(int(v))
    return repr(v)


def to_text(node):
    """Render an AST back to expression text; parse(to_text(e)) == e."""
    if isinstance(node, Const):
        return _fmt_const(node.value)
    if isinstance(node, Var):
        return f"x{node.index + 1}"
    if isinstance(node, Fun):
        return f"{node.name}({', '.join(to_text(a) for a in node.args)})"
    if isinstance(node, Neg):
        inner = to_text(node.arg)
        if _prec(node.arg) < _PREC_POW:
            inner = f"({inner})"
        return f"-{inner}"
    lhs, rhs = to_text(node.lhs), to_text(node.rhs)
    if node.op in "+-":
        if _prec(node.lhs) < _PREC_ADD:
            lhs = f"({lhs})"
        if _prec(node.rhs) <= _PREC_ADD:
            rhs = f"({rhs})"
    elif node.op in "*/":
        if _prec(node.lhs) < _PREC_MUL:
            lhs = f"({lhs})"
        if _prec(node.rhs) <= _PREC_MUL:
            rhs = f"({rhs})"
    else:  # ^  (left operand must be an atom per the grammar)
        if _prec(node.lhs) < _PREC_ATOM:
            lhs = f"({lhs})"
        if _prec(node.rhs) < _PREC_NEG:
            rhs = f"({rhs})"
    return f"{lhs}{node.op}{rhs}"


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

_MATH_1 = {"sin": math.sin, "cos": math.cos, "tan": math.tan, "exp": math.exp,
           "log": math.log, "sqrt": math.sqrt, "abs": abs}
_MATH_2 = {"atan2": math.atan2, "pow": math.pow}


def evaluate(node, x):
    """Reference tree-walking evaluator with non-finite reporting.

    Raises NonFiniteValueError naming the innermost subexpression whose
    value is not finite (division by zero, log of a nonpositive number...).
    """
    def ev(n):
        if isinstance(n, Const):
            return n.value
        if isinstance(n, Var):
            return float(x[n.index])
        if isinstance(n, Neg):
            return -ev(n.arg)
        if isinstance(n, Bin):
            a, b = ev(n.lhs), ev(n.rhs)
            try:
                if n.op == "+":
                    v = a + b
                elif n.op == "-":
                    v = a - b
                elif n.op == "*":
                    v = a * b
                elif n.op == "/":
                    v = a / b
                else:
                    v = a ** b
            except (ZeroDivisionError, OverflowError, ValueError):
                raise NonFiniteValueError(to_text(n), x) from None
            if isinstance(v, complex) or not math.isfinite(v):
                raise NonFiniteValueError(to_text(n), x)
            return v
        try:
            if n.name in _MATH_1:
                v = _MATH_1[n.name](ev(n.args[0]))
            else:
                v = _MATH_2[n.name](ev(n.args[0]), ev(n.args[1]))
        except (ZeroDivisionError, OverflowError, ValueError):
            raise NonFiniteValueError(to_text(n), x) from None
        if not math.isfinite(v):
            raise NonFiniteValueError(to_text(n), x)
        return v

    return ev(node)


def free_variables(node):
    """Set of variable indices appearing in the expression."""
    out = set()

    def walk(n):
        if isinstance(n, Var):
            out.add(n.index)
        elif isinstance(n, Neg):
            walk(n.arg)
        elif isinstance(n, Bin):
            walk(n.lhs)
            walk(n.rhs)
        elif isinstance(n, Fun):
            for a in n.args:
                walk(a)

    walk(node)
    return out


# ---------------------------------------------------------------------------
# symbolic differentiation (constant folding only)
# ---------------------------------------------------------------------------

def _is_const(n, v=None):
    return isinstance(n, Const) and (v is None or n.value == v)


def _add(a, b):
    if _is_const(a) and _is_const(b):
        return Const(a.value + b.value)
    if _is_const(a, 0.0):
        return b
    if _is_const(b, 0.0):
        return a
    return Bin("+", a, b)


def _sub(a, b):
    if _is_const(a) and _is_const(b):
        return Const(a.value - b.value)
    if _is_const(b, 0.0):
        return a
    if _is_const(a, 0.0):
        return _neg(b)
    return Bin("-", a, b)


def _neg(a):
    if _is_const(a):
        return Const(-a.value)
    if isinstance(a, Neg):
        return a.arg
    return Neg(a)


def _mul(a, b):
    if _is_const(a) and _is_const(b):
        return Const(a.value * b.value)
    if _is_const(a, 0.0) or _is_const(b, 0.0):
        return Const(0.0)
    if _is_const(a, 1.0):
        return b
    if _is_const(b, 1.0):
        return a
    return Bin("*", a, b)


def _div(a, b):
    if _is_const(a, 0.0):
        return Const(0.0)
    if _is_const(b, 1.0):
        return a
    if _is_const(a) and _is_const(b) and b.value != 0:
        return Const(a.value / b.value)
    return Bin("/", a, b)


def _pow(a, b):
    if _is_const(b, 1.0):
        return a
    if _is_const(b, 0.0):
        return Const(1.0)
    if _is_const(a) and _is_const(b):
        try:
            return Const(a.value ** b.value)
        except (OverflowError, ValueError, ZeroDivisionError):
            pass
    return Bin("^", a, b)


def differentiate(node, var_index):
    """Symbolic partial derivative ∂/∂x{var_index+1}, folded constants."""
    d = lambda n: differentiate(n, var_index)  # noqa: E731

    if isinstance(node, Const):
        return Const(0.0)
    if isinstance(node, Var):
        return Const(1.0 if node.index == var_index else 0.0)
    if isinstance(node, Neg):
        return _neg(d(node.arg))
    if isinstance(node, Bin):
        a, b = node.lhs, node.rhs
        da, db = d(a), d(b)
        if node.op == "+":
            return _add(da, db)
        if node.op == "-":
            return _sub(da, db)
        if node.op == "*":
            return _add(_mul(da, b), _mul(a, db))
        if node.op == "/":
            return _div(_sub(_mul(da, b), _mul(a, db)), _pow(b, Const(2.0)))
        # a^b
        if _is_const(b):
            return _mul(_mul(b, _pow(a, Const(b.value - 1.0))), da)
        if _is_const(da, 0.0) and _is_const(a):
            # c^b -> c^b * log(c) * db
            return _mul(_mul(_pow(a, b), Fun("log", (a,))), db)
        return _mul(_pow(a, b),
                    _add(_mul(db, Fun("log", (a,))), _div(_mul(b, da), a)))
    # functions
    a = node.args[0]
    da = d(a)
    if node.name == "sin":
        return _mul(Fun("cos", (a,)), da)
    if node.name == "cos":
        return _neg(_mul(Fun("sin", (a,)), da))
    if node.name == "tan":
        return _div(da, _pow(Fun("cos", (a,)), Const(2.0)))
    if node.name == "exp":
        return _mul(node, da)
    if node.name == "log":
        return _div(da, a)
    if node.name == "sqrt":
        return _div(da, _mul(Const(2.0), node))
    if node.name == "abs":
        return _mul(_div(a, node), da)
    if node.name == "atan2":
        y, x = node.args
        dy, dx = d(y), d(x)
        denom = _add(_pow(x, Const(2.0)), _pow(y, Const(2.0)))
        return _div(_sub(_mul(x, dy), _mul(y, dx)), denom)
    if node.name == "pow":
        return differentiate(Bin("^", node.args[0], node.args[1]), var_index)
    raise UnknownIdentifierError(node.name)


# ---------------------------------------------------------------------------
# compilation to fast callables
# ---------------------------------------------------------------------------

_LIB_FUNS = {
    "math": {"sin": "math.sin", "cos": "math.cos", "tan": "math.tan",
             "exp": "math.exp", "log": "math.log", "sqrt": "math.sqrt",
             "abs": "abs", "atan2": "math.atan2", "pow": "(lambda a,b: a**b)"},
    "np": {"sin": "np.sin", "cos": "np.cos", "tan": "np.tan",
           "exp": "np.exp", "log": "np.log", "sqrt": "np.sqrt",
           "abs": "np.abs", "atan2": "np.arctan2", "pow": "(lambda a,b: a**b)"},
}


def to_python_source(node, var_names, lib="math"):
    """Emit a Python source fragment evaluating the expression.

    ``var_names[i]`` is the code naming variable i; ``lib`` selects math
    (scalar, numba-compatible) or np (vectorized) function spellings.
    """
    funs = _LIB_FUNS[lib]

    def emit(n):
        if isinstance(n, Const):
            return repr(n.value)
        if isinstance(n, Var):
            return var_names[n.index]
        if isinstance(n, Neg):
            return f"(-{emit(n.arg)})"
        if isinstance(n, Bin):
            op = "**" if n.op == "^" else n.op
            return f"({emit(n.lhs)}{op}{emit(n.rhs)})"
        if n.name == "pow":
            return f"({emit(n.args[0])}**{emit(n.args[1])})"
        return f"{funs[n.name]}({', '.join(emit(a) for a in n.args)})"

    return emit(node)


def compile_point(node, dimension):
    """Compile to ``f(x) -> float`` where x is an indexable point."""
    names = [f"_v{i}" for i in range(dimension)]
    unpack = "; ".join(f"_v{i} = _x[{i}]" for i in range(dimension)) or "pass"
    src = (f"def _f(_x):\n    {unpack}\n"
           f"    return {to_python_source(node, names, 'math')}\n")
    ns = {"math": math}
    exec(src, ns)
    return ns["_f"]


def compile_grid(node, dimension):
    """Compile to ``f(X) -> ndarray`` with X of shape (..., dimension)."""
    names = [f"_X[..., {i}]" for i in range(dimension)]
    body = to_python_source(node, names, "np")
    src = (f"def _f(_X):\n"
           f"    _r = {body}\n"
           f"    return np.broadcast_to(np.asarray(_r, dtype=float), _X.shape[:-1]).copy()"
           f" if np.ndim(_r) == 0 else np.asarray(_r, dtype=float)\n")
    ns = {"np": np}
    exec(src, ns)
    return ns["_f"]
