"""Prefix (S-expression) text format for symbol trees.

Grammar::

    expr   := number | name | "(" op expr* ")"
    op     := + | - | * | / | ^ | exp | log | sin | cos | sinh | cosh | tanh
            | coth | lambda | dloglambda<k> | flat | smoothstep | erfstep
            | D | complex
    name   := r | theta<i> | rho | eta<i> | r' | theta<i>' | z | zbar | hbar
            | i | pi | lambda | dloglambda<k> | <any other identifier: Param>

``lambda`` and ``dloglambda<k>`` alone mean the weight evaluated at ``r``;
``(lambda x)`` evaluates it at ``x``.  ``(D name k x)`` is the k-th
derivative of a primitive, ``(complex a b)`` the constant ``a + b i``.
"""

from __future__ import annotations

import math
import re

from . import expr as E
from .primitives import PRIMITIVES


class SymbolParseError(ValueError):
    """Malformed symbol text."""


_TOKEN = re.compile(r"\s*(\(|\)|[^\s()]+)")
_COORD = re.compile(r"^(r|rho|theta\d+|eta\d+)'?$")
_DLOG = re.compile(r"^dloglambda(\d+)$")


def _tokenize(text: str) -> list:
    pos = 0
    out = []
    text = text.strip()
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if not m:
            raise SymbolParseError(f"cannot tokenize near {text[pos:pos + 20]!r}")
        out.append(m.group(1))
        pos = m.end()
        while pos < len(text) and text[pos].isspace():
            pos += 1
    return out


def _number(tok: str):
    try:
        return float(tok)
    except ValueError:
        pass
    try:
        return complex(tok)
    except ValueError:
        return None


def parse_symbol(text: str, weight=None) -> E.Expr:
    """Parse symbol text; ``weight`` resolves ``lambda``/``dloglambda<k>``."""
    tokens = _tokenize(text)
    if not tokens:
        raise SymbolParseError("empty symbol text")
    pos = 0

    def need_weight():
        if weight is None:
            raise SymbolParseError("symbol uses lambda but no weight was configured")
        return weight

    def atom(tok):
        v = _number(tok)
        if v is not None:
            return E.Const(v)
        if tok == "i":
            return E.Const(1j)
        if tok == "pi":
            return E.Const(math.pi)
        if tok == "lambda":
            return E.lam(need_weight())
        m = _DLOG.match(tok)
        if m:
            return E.dloglam(need_weight(), int(m.group(1)))
        if _COORD.match(tok) and not tok.startswith("rho'") and tok != "rho'":
            return E.Coord(tok)
        if re.match(r"^[A-Za-z_][A-Za-z_0-9]*$", tok):
            return E.Param(tok)
        raise SymbolParseError(f"unknown token {tok!r}")

    def parse():
        nonlocal pos
        if pos >= len(tokens):
            raise SymbolParseError("unexpected end of symbol text")
        tok = tokens[pos]
        pos += 1
        if tok == ")":
            raise SymbolParseError("unexpected ')'")
        if tok != "(":
            return atom(tok)
        if pos >= len(tokens):
            raise SymbolParseError("unexpected end after '('")
        op = tokens[pos]
        pos += 1
        args = []
        raw = []
        while True:
            if pos >= len(tokens):
                raise SymbolParseError("missing ')'")
            if tokens[pos] == ")":
                pos += 1
                break
            raw.append(tokens[pos])
            args.append(parse())
        return apply(op, args, raw)

    def apply(op, args, raw):
        if op == "+":
            return E.add(*args) if args else E.ZERO
        if op == "-":
            if len(args) == 1:
                return E.neg(args[0])
            if len(args) == 2:
                return E.sub(args[0], args[1])
            raise SymbolParseError("'-' takes one or two arguments")
        if op == "*":
            return E.mul(*args) if args else E.ONE
        if op == "/":
            if len(args) != 2:
                raise SymbolParseError("'/' takes two arguments")
            return E.div(args[0], args[1])
        if op == "^":
            if len(args) != 2 or not isinstance(args[1], E.Const):
                raise SymbolParseError("'^' takes a base and an integer exponent")
            k = args[1].value
            if isinstance(k, complex) or k != int(k):
                raise SymbolParseError("exponent must be an integer")
            return E.ipow(args[0], int(k))
        if op in E.FUNCS:
            if len(args) != 1:
                raise SymbolParseError(f"{op} takes one argument")
            return E.func(op, args[0])
        if op == "lambda":
            if len(args) != 1:
                raise SymbolParseError("(lambda x) takes one argument")
            return E.lam(need_weight(), args[0])
        m = _DLOG.match(op)
        if m:
            if len(args) != 1:
                raise SymbolParseError(f"({op} x) takes one argument")
            return E.dloglam(need_weight(), int(m.group(1)), args[0])
        if op in PRIMITIVES:
            if len(args) != 1:
                raise SymbolParseError(f"{op} takes one argument")
            return E.prim(op, args[0])
        if op == "D":
            if len(args) != 3 or raw[0] not in PRIMITIVES:
                raise SymbolParseError("(D name k x) needs a primitive name, order and argument")
            k = args[1]
            if not isinstance(k, E.Const):
                raise SymbolParseError("derivative order must be a number")
            return E.prim(raw[0], args[2], int(k.value))
        if op == "complex":
            if len(args) != 2 or not all(isinstance(a, E.Const) for a in args):
                raise SymbolParseError("(complex a b) takes two numbers")
            return E.Const(complex(args[0].value) + 1j * complex(args[1].value))
        raise SymbolParseError(f"unknown operator {op!r}")

    result = parse()
    if pos != len(tokens):
        raise SymbolParseError("trailing tokens after expression")
    return result


def _const_text(v) -> str:
    if isinstance(v, complex):
        return f"(complex {v.real!r} {v.imag!r})"
    return repr(float(v))


def to_text(e: E.Expr) -> str:
    """Serialize a tree into the prefix format (inverse of ``parse_symbol``)."""
    memo = {}
    for node in E.postorder(e):
        cls = type(node)
        if cls is E.Const:
            s = _const_text(node.value)
        elif cls in (E.Coord, E.Param):
            s = node.name
        elif cls is E.Add:
            s = "(+ " + " ".join(memo[id(c)] for c in node.args) + ")"
        elif cls is E.Mul:
            s = "(* " + " ".join(memo[id(c)] for c in node.args) + ")"
        elif cls is E.IntPow:
            s = f"(^ {memo[id(node.base)]} {node.exponent})"
        elif cls is E.Func:
            s = f"({node.name} {memo[id(node.arg)]})"
        elif cls is E.Weight:
            head = "lambda" if node.order == 0 else f"dloglambda{node.order}"
            s = head if node.arg is E.R else f"({head} {memo[id(node.arg)]})"
        elif cls is E.Prim:
            a = memo[id(node.arg)]
            s = f"({node.name} {a})" if node.order == 0 else f"(D {node.name} {node.order} {a})"
        else:
            raise E.SymbolError(f"cannot serialize {cls.__name__}")
        memo[id(node)] = s
    return memo[id(e)]
