"""Arithmetic expression language for feedback components.

Grammar (lowest to highest precedence)::

    expr    := term (('+' | '-') term)*
    term    := unary (('*' | '/') unary)*
    unary   := ('-' | '+') unary | power
    power   := primary ('^' unary)?
    primary := NUMBER | 't' | 'x' INT | 'pi' | FUNC '(' expr ')' | '(' expr ')'

``+ - * /`` associate to the left, ``^`` to the right.  Functions are
``sin``, ``cos``, ``exp`` and ``abs``.  State variables are evaluated at
their absolute value, so an expression defined on the nonnegative orthant
extends evenly to the whole space.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Union

import numpy as np

__all__ = [
    "ExprError",
    "ExprSyntaxError",
    "ExprEvalError",
    "Num",
    "Var",
    "Neg",
    "BinOp",
    "Call",
    "FeedbackExpr",
    "parse_expr",
    "eval_expr",
    "to_source",
]

FUNCTIONS = {"sin": np.sin, "cos": np.cos, "exp": np.exp, "abs": np.abs}


class ExprError(ValueError):
    """Base class for expression errors."""


class ExprSyntaxError(ExprError):
    def __init__(self, message: str, pos: int, text: str = ""):
        self.pos = pos
        self.text = text
        super().__init__(f"{message} at column {pos + 1}")


class ExprEvalError(ExprError):
    def __init__(self, message: str, subexpr: "Node"):
        self.subexpr = subexpr
        super().__init__(f"{message} in '{to_source(subexpr)}'")


@dataclass(frozen=True)
class Num:
    value: float
    pos: int = field(default=-1, compare=False, repr=False)


@dataclass(frozen=True)
class Var:
    # 0 means time t, j >= 1 means state component x_j
    index: int
    pos: int = field(default=-1, compare=False, repr=False)


@dataclass(frozen=True)
class Neg:
    operand: "Node"
    pos: int = field(default=-1, compare=False, repr=False)


@dataclass(frozen=True)
class BinOp:
    op: str
    left: "Node"
    right: "Node"
    pos: int = field(default=-1, compare=False, repr=False)


@dataclass(frozen=True)
class Call:
    func: str
    arg: "Node"
    pos: int = field(default=-1, compare=False, repr=False)


Node = Union[Num, Var, Neg, BinOp, Call]


@dataclass(frozen=True)
class FeedbackExpr:
    root: Node
    d: int
    source: str = field(default="", compare=False)

    def __call__(self, t, x):
        return eval_expr(self, t, x)

    def variables(self) -> set:
        return _collect_vars(self.root)

    def __str__(self) -> str:
        return to_source(self.root)


# -- lexer -----------------------------------------------------------------

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)
  | (?P<name>[A-Za-z_][A-Za-z_0-9]*)
  | (?P<op>[-+*/^()])
    """,
    re.VERBOSE,
)


@dataclass
class _Token:
    kind: str
    text: str
    pos: int


def _tokenize(text: str) -> list[_Token]:
    tokens = []
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise ExprSyntaxError(f"unexpected character {text[pos]!r}", pos, text)
        kind = m.lastgroup
        if kind != "ws":
            tokens.append(_Token(kind, m.group(), pos))
        pos = m.end()
    tokens.append(_Token("end", "", len(text)))
    return tokens


# -- parser ----------------------------------------------------------------


class _Parser:
    def __init__(self, text: str, d: int):
        self.text = text
        self.d = d
        self.tokens = _tokenize(text)
        self.i = 0

    @property
    def tok(self) -> _Token:
        return self.tokens[self.i]

    def advance(self) -> _Token:
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def error(self, message: str, tok: _Token | None = None):
        tok = tok or self.tok
        raise ExprSyntaxError(message, tok.pos, self.text)

    def expect(self, text: str) -> _Token:
        if self.tok.text != text:
            if self.tok.kind == "end":
                self.error(f"expected {text!r} but expression ended")
            self.error(f"expected {text!r}, found {self.tok.text!r}")
        return self.advance()

    def parse(self) -> Node:
        if self.tok.kind == "end":
            self.error("empty expression")
        node = self.expr()
        if self.tok.kind != "end":
            if self.tok.text == ")":
                self.error("unbalanced parentheses: unexpected ')'")
            self.error(f"unexpected token {self.tok.text!r}")
        return node

    def expr(self) -> Node:
        node = self.term()
        while self.tok.text in ("+", "-"):
            op = self.advance()
            node = BinOp(op.text, node, self.term(), op.pos)
        return node

    def term(self) -> Node:
        node = self.unary()
        while self.tok.text in ("*", "/"):
            op = self.advance()
            node = BinOp(op.text, node, self.unary(), op.pos)
        return node

    def unary(self) -> Node:
        if self.tok.text == "-":
            op = self.advance()
            return Neg(self.unary(), op.pos)
        if self.tok.text == "+":
            self.advance()
            return self.unary()
        return self.power()

    def power(self) -> Node:
        base = self.primary()
        if self.tok.text == "^":
            op = self.advance()
            return BinOp("^", base, self.unary(), op.pos)
        return base

    def primary(self) -> Node:
        tok = self.tok
        if tok.kind == "num":
            self.advance()
            return Num(float(tok.text), tok.pos)
        if tok.kind == "name":
            self.advance()
            return self.name(tok)
        if tok.text == "(":
            self.advance()
            node = self.expr()
            if self.tok.text != ")":
                self.error("unbalanced parentheses: missing ')'")
            self.advance()
            return node
        if tok.kind == "end":
            self.error("incomplete expression")
        self.error(f"unexpected token {tok.text!r}")

    def name(self, tok: _Token) -> Node:
        name = tok.text
        if name in FUNCTIONS:
            self.expect("(")
            arg = self.expr()
            if self.tok.text != ")":
                self.error("unbalanced parentheses: missing ')'")
            self.advance()
            return Call(name, arg, tok.pos)
        if name == "t":
            return Var(0, tok.pos)
        if name == "pi":
            return Num(math.pi, tok.pos)
        m = re.fullmatch(r"x([1-9]\d*)", name)
        if m:
            j = int(m.group(1))
            if j > self.d:
                raise ExprSyntaxError(
                    f"variable index out of range: {name} with d={self.d}", tok.pos, self.text
                )
            return Var(j, tok.pos)
        raise ExprSyntaxError(f"unknown identifier {name!r}", tok.pos, self.text)


def parse_expr(text: str, d: int) -> FeedbackExpr:
    """Parse ``text`` into an expression over ``t`` and ``x1..xd``."""
    if d < 1:
        raise ValueError("dimension must be positive")
    return FeedbackExpr(_Parser(text, d).parse(), d, text)


# -- evaluation ------------------------------------------------------------


def eval_expr(e: FeedbackExpr, t, x):
    """Evaluate ``e`` at time ``t`` and state ``x`` (last axis of length d).

    ``t`` and ``x[..., j]`` broadcast against each other; scalar inputs give a
    Python float.
    """
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != e.d:
        raise ValueError(f"state has {x.shape[-1]} components, expression expects {e.d}")
    t = np.asarray(t, dtype=float)
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(t))):
        raise ExprEvalError("non-finite input", e.root)
    with np.errstate(all="ignore"):
        out = _eval(e.root, t, np.abs(x))
    out = np.broadcast_to(out, np.broadcast_shapes(np.shape(out), t.shape, x.shape[:-1]))
    if out.ndim == 0:
        return float(out)
    return np.array(out, dtype=float)


def _eval(node: Node, t, x):
    if isinstance(node, Num):
        return np.float64(node.value)
    if isinstance(node, Var):
        return t if node.index == 0 else x[..., node.index - 1]
    if isinstance(node, Neg):
        return -_eval(node.operand, t, x)
    if isinstance(node, Call):
        out = FUNCTIONS[node.func](_eval(node.arg, t, x))
        if not np.all(np.isfinite(out)):
            raise ExprEvalError(f"overflow in {node.func}", node)
        return out
    a = _eval(node.left, t, x)
    b = _eval(node.right, t, x)
    if node.op == "+":
        out = a + b
    elif node.op == "-":
        out = a - b
    elif node.op == "*":
        out = a * b
    elif node.op == "/":
        if np.any(b == 0):
            raise ExprEvalError("division by zero", node)
        out = a / b
    else:
        out = np.power(a, b)
    if not np.all(np.isfinite(out)):
        raise ExprEvalError("domain error", node)
    return out


# -- printing --------------------------------------------------------------


def to_source(node: Node) -> str:
    """Fully parenthesised source text; reparsing gives an identical tree."""
    if isinstance(node, FeedbackExpr):
        node = node.root
    if isinstance(node, Num):
        return repr(float(node.value))
    if isinstance(node, Var):
        return "t" if node.index == 0 else f"x{node.index}"
    if isinstance(node, Neg):
        return f"(-{to_source(node.operand)})"
    if isinstance(node, Call):
        return f"{node.func}({to_source(node.arg)})"
    return f"({to_source(node.left)} {node.op} {to_source(node.right)})"


def _collect_vars(node: Node) -> set:
    if isinstance(node, Var):
        return {node.index}
    if isinstance(node, Num):
        return set()
    if isinstance(node, (Neg, Call)):
        return _collect_vars(node.operand if isinstance(node, Neg) else node.arg)
    return _collect_vars(node.left) | _collect_vars(node.right)
