"""Two-tier zero testing and numeric evaluation.

Tier 1 is the canonical form: normalize(e) == 0 certifies Zero.  Tier 2
evaluates at seeded random points; opaque symbols get smooth random
polynomial models so that formal derivative indices and the IntA/IntB pair
evaluate consistently (the model of IntA is the exact antiderivative of the
model of A).  No ambient randomness: every draw comes from the seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from random import Random

from .expr import (
    ANTIDERIVATIVES,
    Add,
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
    atoms,
    normalize,
)

ZERO_ = "zero"
PROBABLY_ZERO = "probably_zero"
NONZERO = "nonzero"

DEFAULT_TOL = 1e-9
DEFAULT_POINTS = 8

# default sampling windows
_DOMAIN_DEFAULTS = {"__var__": (0.5, 2.0), "__jet0__": (0.5, 2.0),
                    "__jet__": (-1.5, 1.5), "__param__": (0.5, 2.0)}


class EvalDomainError(KernelError):
    pass


_CLEAR_LIMIT = 8  # total sum-denominator powers worth multiplying out


def _clear_denominators(e):
    """Multiply e by its inverse-sum denominators (nonvanishing on the
    sampling domain by construction), so exact rational identities reach the
    canonical-form tier.  Returns None when there is nothing to clear."""
    from .expr import _neg_add_bases

    from .expr import _CANCEL_GUARD

    cleared = False
    _CANCEL_GUARD[0] += 1  # plain polynomial cancellation is all we need here
    try:
        for _ in range(3):
            terms = e.terms if type(e) is Add else (e,)
            need: dict = {}
            for t in terms:
                for base, k in _neg_add_bases(t).items():
                    need[base] = max(need.get(base, 0), k)
            if not need:
                break
            if sum(need.values()) > _CLEAR_LIMIT:
                return None
            m = Rat(1)
            for base, k in need.items():
                m = Mul((m, Pow(base, Rat(k))))
            e = normalize(Mul((e, m)))
            cleared = True
    finally:
        _CANCEL_GUARD[0] -= 1
    return e if cleared else None


class IndeterminateError(KernelError):
    """Sampling kept hitting evaluation domain errors."""


@dataclass
class ZeroReport:
    status: str
    tier: int
    max_error: float = 0.0

    def __bool__(self):
        return self.status in (ZERO_, PROBABLY_ZERO)


class PolyModel:
    """Random polynomial model of an opaque symbol; derivatives are exact."""

    DEGREE = 6
    DAMP = 0.2

    def __init__(self, rng, nargs):
        self.nargs = nargs
        self.coeffs = {}
        for mono in _monomials(nargs, self.DEGREE):
            total = sum(mono)
            if total == 0:
                self.coeffs[mono] = rng.uniform(1.2, 2.0)
            else:
                self.coeffs[mono] = rng.uniform(-0.5, 0.5) * self.DAMP**total

    @classmethod
    def from_coeffs(cls, nargs, coeffs):
        m = cls.__new__(cls)
        m.nargs = nargs
        m.coeffs = coeffs
        return m

    def value(self, args, d):
        if len(args) != self.nargs:
            raise EvalDomainError("model arity mismatch")
        total = 0.0
        for mono, c in self.coeffs.items():
            term = c
            ok = True
            for power, order, arg in zip(mono, d, args):
                if order > power:
                    ok = False
                    break
                for k in range(order):
                    term *= power - k
                term *= arg ** (power - order)
            if ok:
                total += term
        return total

    def antiderivative(self):
        """Exact antiderivative in the single argument, constant 0."""
        if self.nargs != 1:
            raise EvalDomainError("antiderivative model needs one argument")
        out = {}
        for (p,), c in self.coeffs.items():
            out[(p + 1,)] = c / (p + 1)
        return PolyModel.from_coeffs(1, out)


def _monomials(nargs, degree):
    if nargs == 0:
        yield ()
        return
    for head in range(degree + 1):
        for tail in _monomials(nargs - 1, degree - head):
            yield (head,) + tail


def _atom_window(a, domains):
    domains = domains or {}
    for key in (a, getattr(a, "name", None)):
        if key is not None and key in domains:
            return domains[key]
    if type(a) is Jet:
        return _DOMAIN_DEFAULTS["__jet0__" if (a.dt, a.dx) == (0, 0) else "__jet__"]
    if type(a) is Param:
        return _DOMAIN_DEFAULTS["__param__"]
    return _DOMAIN_DEFAULTS["__var__"]


def sample_point(e, rng, domains=None):
    """Draw one consistent evaluation point for every free atom of e."""
    point = {}
    symbol_atoms = sorted(
        atoms(e, (Var, Param, Pot, Jet)),
        key=lambda a: (type(a).__name__, getattr(a, "name", ""), getattr(a, "dt", 0), getattr(a, "dx", 0)),
    )
    for a in symbol_atoms:
        lo, hi = _atom_window(a, domains)
        point[a] = rng.uniform(lo, hi)
    models = {}
    op_sigs = sorted({(o.name, len(o.args)) for o in atoms(e, (Op,))})
    for name, nargs in op_sigs:
        if name not in models:
            models[name] = PolyModel(rng, nargs)
    # tie antiderivative symbols to their integrands
    for intname, base in ANTIDERIVATIVES.items():
        if intname in models:
            if base not in models:
                models[base] = PolyModel(rng, 1)
            models[intname] = models[base].antiderivative()
    return point, models


def eval_numeric(e, point, opaque_model=None):
    """Double-precision value of e at the given point.

    point maps atoms (or their names) to floats; opaque_model maps an opaque
    name to an object with .value(args, d) -> float.
    """
    return _eval(normalize(e), _normalize_point(point), opaque_model or {}, {})


def _normalize_point(point):
    out = {}
    for k, v in point.items():
        out[k] = float(v)
    return out


def _lookup(a, point):
    if a in point:
        return point[a]
    name = getattr(a, "name", None)
    if name is not None and name in point:
        return point[name]
    if type(a) is Jet:
        for alias in ("u{%d,%d}" % (a.dt, a.dx), _jet_alias(a)):
            if alias in point:
                return point[alias]
    raise EvalDomainError("no value supplied for %r" % (a,))


def _jet_alias(a):
    if a.dt == 0:
        return "u" if a.dx == 0 else "u_" + "x" * min(a.dx, 3)
    return "u_t" if (a.dt, a.dx) == (1, 0) else "u{%d,%d}" % (a.dt, a.dx)


def _eval(e, point, models, cache):
    t = type(e)
    if t is Rat:
        return float(e.q)
    if t in (Var, Param, Pot, Jet):
        return _lookup(e, point)
    hit = cache.get(e)
    if hit is not None:
        return hit
    if t is Add:
        r = sum(_eval(x, point, models, cache) for x in e.terms)
    elif t is Mul:
        r = 1.0
        for f in e.factors:
            r *= _eval(f, point, models, cache)
    elif t is Pow:
        b = _eval(e.base, point, models, cache)
        x = _eval(e.exp, point, models, cache)
        r = _pow(b, x)
    elif t is Fun:
        a = _eval(e.arg, point, models, cache)
        r = _apply_fun(e.name, a)
    elif t is Op:
        model = models.get(e.name)
        if model is None:
            raise EvalDomainError("no model for opaque symbol %r" % e.name)
        args = [_eval(a, point, models, cache) for a in e.args]
        r = model.value(args, e.d)
    else:
        raise EvalDomainError("cannot evaluate %r" % t)
    if isinstance(r, complex) or math.isnan(r):
        raise EvalDomainError("evaluation left the real domain")
    cache[e] = r
    return r


def _pow(b, x):
    if x == int(x):
        if b == 0.0 and x < 0:
            raise EvalDomainError("division by zero")
        return b ** int(x)
    if b < 0:
        raise EvalDomainError("fractional power of a negative base")
    try:
        return math.pow(b, x)
    except (ValueError, OverflowError) as exc:
        raise EvalDomainError(str(exc))


def _apply_fun(name, a):
    try:
        if name == "exp":
            return math.exp(a)
        if name == "ln":
            if a <= 0:
                raise EvalDomainError("ln of a nonpositive sample")
            return math.log(a)
        if name == "abs":
            return abs(a)
        return getattr(math, name)(a)
    except (ValueError, OverflowError) as exc:
        raise EvalDomainError(str(exc))


def is_zero(e, *, seed=42, npoints=DEFAULT_POINTS, tol=DEFAULT_TOL, domains=None):
    """Zero / ProbablyZero / NonZero verdict for e.

    Zero comes from the canonical form alone.  Otherwise e is evaluated at
    npoints seeded samples; ProbablyZero needs |e| < tol*scale at all of
    them, where scale is the magnitude of the largest additive term.
    """
    e = normalize(e)
    if type(e) is Rat:
        if e.q == 0:
            return ZeroReport(ZERO_, tier=1)
        return ZeroReport(NONZERO, tier=1, max_error=abs(float(e.q)))
    cleared = _clear_denominators(e)
    if cleared is not None and cleared == Rat(0):
        return ZeroReport(ZERO_, tier=1)
    rng = Random(seed)
    terms = e.terms if type(e) is Add else (e,)
    done = 0
    attempts = 0
    worst = 0.0
    while done < npoints:
        attempts += 1
        if attempts > 4 * npoints:
            raise IndeterminateError(
                "could not find %d valid sample points for %r" % (npoints, e)
            )
        point, models = sample_point(e, rng, domains)
        try:
            cache: dict = {}
            vals = [_eval(term, point, models, cache) for term in terms]
        except EvalDomainError:
            continue
        total = sum(vals)
        scale = max(1.0, max(abs(v) for v in vals))
        rel = abs(total) / scale
        worst = max(worst, rel)
        if rel >= tol:
            return ZeroReport(NONZERO, tier=2, max_error=worst)
        done += 1
    return ZeroReport(PROBABLY_ZERO, tier=2, max_error=worst)
