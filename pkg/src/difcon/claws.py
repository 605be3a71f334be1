"""Conserved vectors: verification, characteristics, triviality, equivalence
and reduction to canonical low order."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

from .expr import (
    Expr,
    Jet,
    KernelError,
    Rat,
    U,
    UT,
    as_expr,
    collect,
    diff,
    integrate_poly,
    jets_of,
    max_x_order,
    normalize,
)
from .jets import (
    D_t,
    D_x,
    DEFAULT_ORDER_CAP,
    Equation,
    adjoint_frechet_apply,
    divergence,
    reduce_mod_equation,
)
from .zerotest import NONZERO, ZeroReport, is_zero


class VerificationError(KernelError):
    pass


@dataclass
class ConservedVector:
    eq: Equation
    F: Expr
    G: Expr
    label: str = ""

    def __post_init__(self):
        self.F = normalize(as_expr(self.F))
        self.G = normalize(as_expr(self.G))

    def order(self):
        return max(max_x_order(self.F), max_x_order(self.G), 0)


@dataclass
class VerifyReport:
    valid: bool
    residual: Expr
    status: str
    tier: int

    def __bool__(self):
        return self.valid


@dataclass
class Characteristic:
    eq: Equation
    expr: Expr


def _guard_order(F, G, cap=2):
    if max_x_order(F) > cap or max_x_order(G) > cap:
        raise VerificationError("conserved vector exceeds jet order %d" % cap)
    for e in (F, G):
        if any(j.dt > 0 for j in jets_of(e)):
            raise VerificationError("inputs must use x-jets only")


def verify(eq, F, G, *, seed=42, order_cap=DEFAULT_ORDER_CAP):
    """Does D_t F + D_x G vanish modulo the equation?"""
    F = normalize(as_expr(F))
    G = normalize(as_expr(G))
    _guard_order(F, G)
    div = divergence(F, G, eq.ctx(), order_cap)
    residual = reduce_mod_equation(div, eq, order_cap)
    r = eq.is_zero(residual, seed=seed)
    return VerifyReport(bool(r), residual, r.status, r.tier)


def characteristic_of(eq, F, G, *, seed=42, check=True):
    """Extract lambda with Div(F,G) = lambda * (f u_t - (gAu_x)_x - hBu_x).

    Expects the canonical order: F of order 0, G of order <= 1 (run
    lower_order first otherwise).
    """
    F = normalize(as_expr(F))
    G = normalize(as_expr(G))
    if max_x_order(F) > 0:
        raise VerificationError("density must have order 0; apply lower_order")
    div = divergence(F, G, eq.ctx())
    parts = collect(div, [UT])
    for expo in parts:
        if expo[0] > 1:
            raise VerificationError("coefficient of u_t depends on u_t")
    from .expr import condense

    lam = condense(parts.get((1,), Rat(0)) / eq.f)
    if check:
        residual = normalize(div - lam * eq.lhs())
        r = eq.is_zero(residual, seed=seed)
        if not r:
            raise VerificationError(
                "characteristic form fails: residual %r" % (residual,)
            )
    return Characteristic(eq, lam)


def lower_order(eq, F, G, *, order_cap=DEFAULT_ORDER_CAP):
    """Equivalent vector with F(t,x,u), G(t,x,u,u_x); returns (F', G', H)
    where F' = F - D_x H and G' = G + D_t H up to on-solution terms."""
    F = normalize(as_expr(F))
    G = normalize(as_expr(G))
    _guard_order(F, G)
    H = Rat(0)
    for _ in range(order_cap):
        s = max_x_order(F)
        if s <= 0:
            break
        parts = collect(F, [Jet(0, s)])
        if any(expo[0] > 1 for expo in parts):
            raise VerificationError(
                "density not linear in its top-order jet "
                "(verification failure upstream)"
            )
        F1 = parts.get((1,), Rat(0))
        piece = integrate_poly(F1, Jet(0, s - 1))
        F = normalize(F - D_x(piece))
        G = normalize(G + D_t(piece))
        H = normalize(H + piece)
    else:
        raise VerificationError("could not reach order 0 within the cap")
    G = reduce_mod_equation(G, eq, order_cap)
    if max_x_order(G) > 1:
        raise VerificationError(
            "flux kept order > 1 after reduction (not a conserved vector?)"
        )
    return F, G, H


def is_trivial(eq, F, G, *, seed=42):
    """Trivial iff the characteristic vanishes on solutions."""
    F0, G0, _ = lower_order(eq, F, G)
    lam = characteristic_of(eq, F0, G0, seed=seed, check=False).expr
    lam = reduce_mod_equation(lam, eq)
    return bool(eq.is_zero(lam, seed=seed))


def equivalent(eq, FG1, FG2, *, seed=42):
    """Do the two vectors represent the same conservation law?"""
    F1, G1 = (normalize(as_expr(x)) for x in FG1)
    F2, G2 = (normalize(as_expr(x)) for x in FG2)
    return is_trivial(eq, normalize(F1 - F2), normalize(G1 - G2), seed=seed)


def linear_combination(parts):
    """Componentwise sum of (coefficient, ConservedVector) on one equation."""
    if not parts:
        raise VerificationError("empty linear combination")
    eq = parts[0][1].eq
    for _, v in parts:
        if v.eq is not eq:
            raise VerificationError("linear combination across equations")
    F = normalize(sum((as_expr(c) * v.F for c, v in parts), Rat(0)))
    G = normalize(sum((as_expr(c) * v.G for c, v in parts), Rat(0)))
    return ConservedVector(eq, F, G)


def cosymmetry_residual(eq, lam, *, seed=42):
    """Adjoint Frechet condition; Zero/ProbablyZero certifies a cosymmetry."""
    res = adjoint_frechet_apply(eq, lam)
    return eq.is_zero(res, seed=seed), res
