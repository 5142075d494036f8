"""Plateau cutoffs built from registered primitives."""

from __future__ import annotations

from . import expr as E


def smooth_plateau(arg, a: float, b: float, width: float) -> E.Expr:
    """Compactly supported plateau: 0 outside ``[a, b]``, 1 on ``[a + width, b - width]``."""
    if not (width > 0 and a + 2 * width <= b):
        raise ValueError("need width > 0 and a + 2 width <= b")
    arg = E.as_expr(arg)
    up = E.prim("smoothstep", E.mul(1.0 / width, E.sub(arg, a)))
    down = E.prim("smoothstep", E.mul(1.0 / width, E.sub(b, arg)))
    return E.mul(up, down)


def erf_plateau(arg, a: float, b: float, scale: float) -> E.Expr:
    """Gaussian-edged plateau with half-height points ``a`` and ``b``.

    Equal to 1 within double precision on ``[a + 6 scale, b - 6 scale]`` and
    below 1e-16 outside ``[a - 6 scale, b + 6 scale]``.
    """
    if not (scale > 0 and a < b):
        raise ValueError("need scale > 0 and a < b")
    arg = E.as_expr(arg)
    up = E.prim("erfstep", E.mul(1.0 / scale, E.sub(arg, a)))
    down = E.prim("erfstep", E.mul(1.0 / scale, E.sub(b, arg)))
    return E.mul(up, down)


def plateau(arg, a: float, b: float, width: float, kind: str = "erf") -> E.Expr:
    if kind == "erf":
        return erf_plateau(arg, a, b, width)
    if kind == "smooth":
        return smooth_plateau(arg, a, b, width)
    raise ValueError(f"unknown plateau kind {kind!r}")
