"""Hash-consed expression trees over phase space with exact differentiation.

Trees are immutable and interned: building the same node twice returns the
same object, so repeated subexpressions (for instance the powers of
``(z - sigma)^{-1}`` that pervade parametrix terms) are stored and evaluated
once.  Smart constructors fold constants, which is what makes the
constant-coefficient parametrix terms collapse to an exact zero.

Coordinates are named ``r, theta1.., rho, eta1.., r', theta1'..``;
parameters (bound at evaluation) are ``z, zbar, hbar`` or any other name.
"""

from __future__ import annotations

import numbers
import sys
import weakref
from collections.abc import Iterable, Mapping

import numpy as np

from .primitives import eval_primitive

sys.setrecursionlimit(max(sys.getrecursionlimit(), 20000))


class SymbolError(ValueError):
    """Malformed tree or invalid differentiation request."""


class SymbolPoleError(ArithmeticError):
    """Evaluation produced a non-finite value (pole of the symbol)."""


_TABLE: weakref.WeakValueDictionary = weakref.WeakValueDictionary()


class Expr:
    """Base class of all nodes; instances are interned and immutable."""

    __slots__ = ("args", "_free", "_order", "_dcache", "__weakref__")
    kind = "expr"

    def __new__(cls, *args):
        key = (cls,) + args
        node = _TABLE.get(key)
        if node is None:
            node = object.__new__(cls)
            node.args = args
            node._free = None
            node._order = None
            node._dcache = None
            _TABLE[key] = node
        return node

    # identity semantics: interning makes structural equality identity
    __hash__ = object.__hash__

    def __eq__(self, other):
        return self is other

    def children(self) -> tuple:
        return ()

    @property
    def free(self) -> frozenset:
        """Names of coordinates and parameters the tree depends on."""
        if self._free is None:
            out = set()
            for c in self.children():
                out |= c.free
            self._free = frozenset(out)
        return self._free

    # arithmetic sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, as_expr(other))

    def __radd__(self, other):
        return add(as_expr(other), self)

    def __sub__(self, other):
        return sub(self, as_expr(other))

    def __rsub__(self, other):
        return sub(as_expr(other), self)

    def __mul__(self, other):
        return mul(self, as_expr(other))

    def __rmul__(self, other):
        return mul(as_expr(other), self)

    def __truediv__(self, other):
        return div(self, as_expr(other))

    def __rtruediv__(self, other):
        return div(as_expr(other), self)

    def __neg__(self):
        return mul(Const(-1.0), self)

    def __pow__(self, k):
        if not isinstance(k, numbers.Integral):
            raise SymbolError("only integer powers are supported")
        return ipow(self, int(k))

    def __repr__(self):
        from .text import to_text
        n = size(self)
        if n > 60:
            return f"SymbolExpr(<{n} nodes>)"
        return f"SymbolExpr({to_text(self)})"

    __str__ = __repr__


class Const(Expr):
    __slots__ = ()
    kind = "const"

    def __new__(cls, value):
        v = complex(value)
        v = v.real if v.imag == 0.0 else v
        return super().__new__(cls, v)

    @property
    def value(self):
        return self.args[0]


class Coord(Expr):
    __slots__ = ()
    kind = "coord"

    @property
    def name(self) -> str:
        return self.args[0]

    @property
    def free(self):
        if self._free is None:
            self._free = frozenset((self.args[0],))
        return self._free


class Param(Expr):
    __slots__ = ()
    kind = "param"

    @property
    def name(self) -> str:
        return self.args[0]

    @property
    def free(self):
        if self._free is None:
            self._free = frozenset((self.args[0],))
        return self._free


class Weight(Expr):
    """``lambda(arg)`` for order 0, ``d^j log lambda(arg)`` for order j >= 1."""

    __slots__ = ()
    kind = "weight"

    @property
    def weight(self):
        return self.args[0]

    @property
    def order(self) -> int:
        return self.args[1]

    @property
    def arg(self) -> Expr:
        return self.args[2]

    def children(self):
        return (self.args[2],)


class Prim(Expr):
    """k-th derivative of a registered one-dimensional primitive."""

    __slots__ = ()
    kind = "prim"

    @property
    def name(self) -> str:
        return self.args[0]

    @property
    def order(self) -> int:
        return self.args[1]

    @property
    def arg(self) -> Expr:
        return self.args[2]

    def children(self):
        return (self.args[2],)


class Add(Expr):
    __slots__ = ()
    kind = "add"

    def children(self):
        return self.args


class Mul(Expr):
    __slots__ = ()
    kind = "mul"

    def children(self):
        return self.args


class IntPow(Expr):
    __slots__ = ()
    kind = "pow"

    @property
    def base(self) -> Expr:
        return self.args[0]

    @property
    def exponent(self) -> int:
        return self.args[1]

    def children(self):
        return (self.args[0],)


FUNCS = ("exp", "log", "sin", "cos", "sinh", "cosh", "tanh", "coth")


class Func(Expr):
    __slots__ = ()
    kind = "func"

    @property
    def name(self) -> str:
        return self.args[0]

    @property
    def arg(self) -> Expr:
        return self.args[1]

    def children(self):
        return (self.args[1],)


ZERO = Const(0.0)
ONE = Const(1.0)


def as_expr(x) -> Expr:
    if isinstance(x, Expr):
        return x
    if isinstance(x, numbers.Number):
        return Const(x)
    raise SymbolError(f"cannot convert {type(x).__name__} to a symbol expression")


def is_const(e: Expr, value=None) -> bool:
    if not isinstance(e, Const):
        return False
    return value is None or e.value == value


# smart constructors -----------------------------------------------------

def add(*terms) -> Expr:
    flat_terms = []
    acc = 0.0
    for t in terms:
        t = as_expr(t)
        parts = t.args if isinstance(t, Add) else (t,)
        for p in parts:
            if isinstance(p, Const):
                acc += p.value
            else:
                flat_terms.append(p)
    if acc != 0.0:
        flat_terms.append(Const(acc))
    if not flat_terms:
        return ZERO
    if len(flat_terms) == 1:
        return flat_terms[0]
    return Add(*flat_terms)


def mul(*factors) -> Expr:
    flat_factors = []
    acc = 1.0
    for f in factors:
        f = as_expr(f)
        parts = f.args if isinstance(f, Mul) else (f,)
        for p in parts:
            if isinstance(p, Const):
                acc *= p.value
            else:
                flat_factors.append(p)
    if acc == 0.0:
        return ZERO
    if acc != 1.0:
        flat_factors.insert(0, Const(acc))
    if not flat_factors:
        return ONE
    if len(flat_factors) == 1:
        return flat_factors[0]
    return Mul(*flat_factors)


def neg(a) -> Expr:
    return mul(Const(-1.0), a)


def sub(a, b) -> Expr:
    return add(a, neg(b))


def ipow(base, k: int) -> Expr:
    base = as_expr(base)
    k = int(k)
    if k == 0:
        return ONE
    if k == 1:
        return base
    if isinstance(base, Const):
        if base.value == 0.0 and k < 0:
            raise SymbolError("negative power of zero")
        return Const(base.value ** k)
    if isinstance(base, IntPow):
        return ipow(base.base, base.exponent * k)
    return IntPow(base, k)


def div(a, b) -> Expr:
    b = as_expr(b)
    if isinstance(b, Const):
        if b.value == 0.0:
            raise SymbolError("division by constant zero")
        return mul(a, Const(1.0 / b.value))
    return mul(a, ipow(b, -1))


_CONST_FUNCS = {
    "exp": np.exp, "log": np.log, "sin": np.sin, "cos": np.cos,
    "sinh": np.sinh, "cosh": np.cosh, "tanh": np.tanh,
    "coth": lambda x: 1.0 / np.tanh(x),
}


def func(name: str, arg) -> Expr:
    if name not in FUNCS:
        raise SymbolError(f"unknown function {name!r}")
    arg = as_expr(arg)
    if isinstance(arg, Const):
        return Const(_CONST_FUNCS[name](arg.value))
    return Func(name, arg)


def exp(a):
    return func("exp", a)


def log(a):
    return func("log", a)


def sin(a):
    return func("sin", a)


def cos(a):
    return func("cos", a)


def sinh(a):
    return func("sinh", a)


def cosh(a):
    return func("cosh", a)


def tanh(a):
    return func("tanh", a)


def coth(a):
    return func("coth", a)


def coord(name: str) -> Coord:
    return Coord(name)


def param(name: str) -> Param:
    return Param(name)


def weight_node(w, order: int = 0, arg=None) -> Expr:
    """``lambda(arg)`` (order 0) or ``d^order log lambda(arg)``."""
    arg = R if arg is None else as_expr(arg)
    if order < 0:
        raise SymbolError("weight order must be >= 0")
    if order > 0 and order > w.jmax:
        raise SymbolError(
            f"log-derivative order {order} exceeds jmax={w.jmax} of weight {w.label}")
    if w.is_constant:
        return Const(float(w.eval(0.0))) if order == 0 else ZERO
    if isinstance(arg, Const):
        x = np.real(arg.value)
        return Const(float(w.eval(x)) if order == 0 else float(w.log_deriv(order, x)))
    return Weight(w, order, arg)


def lam(w, arg=None) -> Expr:
    return weight_node(w, 0, arg)


def dloglam(w, j: int, arg=None) -> Expr:
    return weight_node(w, j, arg)


def prim(name: str, arg, order: int = 0) -> Expr:
    arg = as_expr(arg)
    if isinstance(arg, Const):
        return Const(float(eval_primitive(name, order, np.real(arg.value))))
    return Prim(name, order, arg)


# canonical coordinates ------------------------------------------------------

R = Coord("r")
RHO = Coord("rho")
RP = Coord("r'")
Z = Param("z")
ZBAR = Param("zbar")
HBAR = Param("hbar")


def theta(i: int = 1, primed: bool = False) -> Coord:
    return Coord(f"theta{i}'" if primed else f"theta{i}")


def eta(i: int = 1) -> Coord:
    return Coord(f"eta{i}")


def q_names(n: int) -> list:
    return ["r"] + [f"theta{i}" for i in range(1, n)]


def p_names(n: int) -> list:
    return ["rho"] + [f"eta{i}" for i in range(1, n)]


def qp_names(n: int) -> list:
    return ["r'"] + [f"theta{i}'" for i in range(1, n)]


# traversal ------------------------------------------------------------------

def postorder(e: Expr) -> list:
    """Nodes of the DAG in dependency order (each node once)."""
    if e._order is not None:
        return e._order
    order = []
    seen = set()
    stack = [(e, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for c in reversed(node.children()):
            if id(c) not in seen:
                stack.append((c, False))
    e._order = order
    return order


def size(e: Expr) -> int:
    """Number of distinct nodes in the DAG."""
    return len(postorder(e))


# evaluation -----------------------------------------------------------------

def _as_float_if_real(x):
    if np.iscomplexobj(x):
        x = np.real(x)
    return x


_NUMPY_FUNCS = {
    "exp": np.exp, "log": None, "sin": np.sin, "cos": np.cos,
    "sinh": np.sinh, "cosh": np.cosh, "tanh": np.tanh,
    "coth": lambda x: 1.0 / np.tanh(x),
}


def _log(x):
    if np.iscomplexobj(x):
        return np.log(x)
    x = np.asarray(x)
    if np.any(x < 0):
        return np.log(x.astype(complex))
    return np.log(x)


def evaluate(e: Expr, env: Mapping[str, object], check: bool = False):
    """Evaluate ``e`` with numpy broadcasting over the arrays in ``env``.

    Every free name of ``e`` must be bound in ``env``.  Intermediate arrays
    are released as soon as their last consumer has been computed.
    """
    order = postorder(e)
    missing = e.free - set(env)
    if missing:
        raise SymbolError(f"unbound names in evaluation: {sorted(missing)}")
    last_use = {}
    for idx, node in enumerate(order):
        for c in node.children():
            last_use[id(c)] = idx
    values = {}
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        for idx, node in enumerate(order):
            cls = type(node)
            if cls is Const:
                v = node.args[0]
            elif cls is Coord or cls is Param:
                v = env[node.args[0]]
            elif cls is Add:
                it = iter(node.args)
                v = values[id(next(it))]
                for c in it:
                    v = v + values[id(c)]
            elif cls is Mul:
                it = iter(node.args)
                v = values[id(next(it))]
                for c in it:
                    v = v * values[id(c)]
            elif cls is IntPow:
                b = values[id(node.args[0])]
                k = node.args[1]
                if isinstance(b, (int, np.integer)):
                    b = float(b)
                v = b ** k if k > 0 else 1.0 / (b ** (-k))
            elif cls is Func:
                x = values[id(node.args[1])]
                v = _log(x) if node.args[0] == "log" else _NUMPY_FUNCS[node.args[0]](x)
            elif cls is Weight:
                w, j, _ = node.args
                x = _as_float_if_real(values[id(node.args[2])])
                v = w.eval(x) if j == 0 else w.log_deriv(j, x)
            elif cls is Prim:
                x = _as_float_if_real(values[id(node.args[2])])
                v = eval_primitive(node.args[0], node.args[1], x)
            else:
                raise SymbolError(f"unknown node type {cls.__name__}")
            values[id(node)] = v
            for c in node.children():
                if last_use.get(id(c)) == idx and c is not node:
                    values.pop(id(c), None)
    out = values[id(e)]
    if check and not np.all(np.isfinite(out)):
        raise SymbolPoleError("symbol evaluation hit a pole or overflow")
    return out


# differentiation ------------------------------------------------------------

def differentiate(e: Expr, var: str) -> Expr:
    """Exact partial derivative of ``e`` with respect to coordinate ``var``."""
    if var not in e.free:
        return ZERO
    if e._dcache is None:
        e._dcache = {}
    hit = e._dcache.get(var)
    if hit is not None:
        return hit
    d = _diff(e, var)
    e._dcache[var] = d
    return d


def _diff(e: Expr, v: str) -> Expr:
    cls = type(e)
    if cls is Coord:
        return ONE if e.name == v else ZERO
    if cls is Param or cls is Const:
        return ZERO
    if cls is Add:
        return add(*(differentiate(t, v) for t in e.args))
    if cls is Mul:
        terms = []
        fs = e.args
        for i, f in enumerate(fs):
            df = differentiate(f, v)
            if df is ZERO:
                continue
            terms.append(mul(*fs[:i], df, *fs[i + 1:]))
        return add(*terms)
    if cls is IntPow:
        db = differentiate(e.base, v)
        if db is ZERO:
            return ZERO
        k = e.exponent
        return mul(Const(float(k)), ipow(e.base, k - 1), db)
    if cls is Func:
        x = e.arg
        dx = differentiate(x, v)
        if dx is ZERO:
            return ZERO
        name = e.name
        if name == "exp":
            outer = e
        elif name == "log":
            outer = ipow(x, -1)
        elif name == "sin":
            outer = cos(x)
        elif name == "cos":
            outer = neg(sin(x))
        elif name == "sinh":
            outer = cosh(x)
        elif name == "cosh":
            outer = sinh(x)
        elif name == "tanh":
            outer = sub(ONE, ipow(e, 2))
        elif name == "coth":
            outer = sub(ONE, ipow(e, 2))
        else:
            raise SymbolError(f"no derivative rule for {name}")
        return mul(outer, dx)
    if cls is Weight:
        dx = differentiate(e.arg, v)
        if dx is ZERO:
            return ZERO
        w, j = e.weight, e.order
        if j + 1 > w.jmax:
            raise SymbolError(
                f"derivative needs d^{j + 1} log lambda beyond jmax={w.jmax} "
                f"of weight {w.label}")
        if j == 0:
            return mul(e, weight_node(w, 1, e.arg), dx)
        return mul(weight_node(w, j + 1, e.arg), dx)
    if cls is Prim:
        dx = differentiate(e.arg, v)
        if dx is ZERO:
            return ZERO
        return mul(prim(e.name, e.arg, e.order + 1), dx)
    raise SymbolError(f"unknown node type {cls.__name__}")


def diff_multi(e: Expr, counts: Iterable) -> Expr:
    """Apply ``differentiate`` for each ``(var, count)`` pair in order."""
    for var, k in counts:
        for _ in range(int(k)):
            e = differentiate(e, var)
            if e is ZERO:
                return ZERO
    return e


# rewriting ------------------------------------------------------------------

def rebuild(node: Expr, new_children: list) -> Expr:
    cls = type(node)
    if cls is Add:
        return add(*new_children)
    if cls is Mul:
        return mul(*new_children)
    if cls is IntPow:
        return ipow(new_children[0], node.exponent)
    if cls is Func:
        return func(node.name, new_children[0])
    if cls is Weight:
        return weight_node(node.weight, node.order, new_children[0])
    if cls is Prim:
        return prim(node.name, new_children[0], node.order)
    return node


def transform(e: Expr, leaf) -> Expr:
    """Bottom-up rewrite; ``leaf(node)`` maps leaves, interior nodes rebuild."""
    memo = {}
    for node in postorder(e):
        kids = node.children()
        if not kids:
            memo[id(node)] = leaf(node)
        else:
            new = [memo[id(c)] for c in kids]
            if all(a is b for a, b in zip(new, kids)):
                memo[id(node)] = node
            else:
                memo[id(node)] = rebuild(node, new)
    return memo[id(e)]


def substitute(e: Expr, mapping: Mapping[str, object]) -> Expr:
    """Replace coordinates/parameters by trees (simultaneously)."""
    m = {k: as_expr(v) for k, v in mapping.items()}
    if not (set(m) & e.free):
        return e

    def leaf(node):
        if isinstance(node, (Coord, Param)):
            return m.get(node.name, node)
        return node

    return transform(e, leaf)


_CONJ_PARAMS = {"z": "zbar", "zbar": "z"}


def conjugate(e: Expr) -> Expr:
    """Complex conjugate, pushed to the leaves.

    Coordinates, weights and primitives are real; ``z`` and ``zbar`` swap.
    Other parameters are treated as real.
    """

    def leaf(node):
        if isinstance(node, Const):
            return Const(np.conj(node.value))
        if isinstance(node, Param):
            name = _CONJ_PARAMS.get(node.name)
            return Param(name) if name else node
        return node

    return transform(e, leaf)


def bind_params(env: dict, params: Mapping[str, complex] | None) -> dict:
    """Add parameter bindings, supplying ``zbar`` from ``z`` and vice versa."""
    env = dict(env)
    if params:
        env.update(params)
        if "z" in params and "zbar" not in params:
            env["zbar"] = np.conj(params["z"])
        if "zbar" in params and "z" not in params:
            env["z"] = np.conj(params["zbar"])
    return env
