"""Conservation-law calculus for variable-coefficient diffusion-convection
equations f(x)u_t = (g(x)A(u)u_x)_x + h(x)B(u)u_x."""

from .expr import (
    Add,
    Expr,
    Fun,
    Jet,
    KernelError,
    Mul,
    Op,
    Param,
    Pot,
    Pow,
    Rat,
    Var,
    collect,
    diff,
    normalize,
    substitute,
)
from .parser import ParseError, parse, parse_normal, to_str

__all__ = [
    "Add", "Expr", "Fun", "Jet", "KernelError", "Mul", "Op", "Param", "Pot",
    "Pow", "Rat", "Var", "collect", "diff", "normalize", "substitute",
    "ParseError", "parse", "parse_normal", "to_str",
]
