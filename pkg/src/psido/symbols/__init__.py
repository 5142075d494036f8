"""Symbol trees, weighted derivatives and seminorm estimation."""

from .bumps import erf_plateau, plateau, smooth_plateau  # noqa: F401
from .calculus import (  # noqa: F401
    BisymbolLattice,
    RefinementCheck,
    SeminormEstimate,
    SymbolClassTag,
    SymbolLattice,
    adjoint_bisymbol,
    estimate_bisymbol_seminorm,
    estimate_seminorm,
    freeze_bisymbol,
    multi_indices,
    refinement_check,
    semiclassical_symbol,
    swap_q,
    weighted_derivative,
)
from .expr import (  # noqa: F401
    HBAR,
    ONE,
    RHO,
    RP,
    ZBAR,
    ZERO,
    Add,
    Const,
    Coord,
    Expr,
    Func,
    IntPow,
    Mul,
    Param,
    Prim,
    R,
    SymbolError,
    SymbolPoleError,
    Weight,
    Z,
    add,
    as_expr,
    bind_params,
    conjugate,
    coord,
    cos,
    cosh,
    coth,
    diff_multi,
    differentiate,
    div,
    dloglam,
    eta,
    evaluate,
    exp,
    func,
    ipow,
    is_const,
    lam,
    log,
    mul,
    neg,
    p_names,
    param,
    postorder,
    prim,
    q_names,
    qp_names,
    sin,
    sinh,
    size,
    sub,
    substitute,
    tanh,
    theta,
    weight_node,
)
from .text import SymbolParseError, parse_symbol, to_text  # noqa: F401

SymbolExpr = Expr
