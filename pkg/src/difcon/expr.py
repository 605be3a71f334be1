"""Immutable symbolic expression trees with exact rational coefficients.

The coordinate ring is built from independent variables (t, x, y), declared
parameters, jet variables u{a,b} = d^(a+b)u / dt^a dx^b, potential variables
(v, w, v1, v2) and opaque function applications f(x), A(u), sigma(t,v), ...
carrying a formal derivative multi-index.  IntA/IntB are atomic antiderivative
symbols whose only rule is d/du IntA(u) = A(u).

Everything here is pure: `normalize` is an idempotent canonicalizer to a
sum-of-products form, `diff` is the plain partial derivative (jet variables
are independent coordinates), `substitute` is simultaneous replacement.
"""

from __future__ import annotations

from fractions import Fraction
from typing import Iterable


class KernelError(Exception):
    pass


class NonPolynomialError(KernelError):
    pass


class NotIntegrableError(KernelError):
    pass


# how far Pow(Add, n) is expanded during normalization; larger powers stay atomic
POW_EXPAND_LIMIT = 12

# elementary function names accepted by Fun
ELEMENTARY = ("exp", "ln", "sin", "cos", "sinh", "cosh", "atan", "abs", "sqrt")

# antiderivative symbols: d/du IntA(u) -> A(u)
ANTIDERIVATIVES = {"IntA": "A", "IntB": "B"}


class Expr:
    __slots__ = ("_hash",)

    def __add__(self, other):
        return Add((self, as_expr(other)))

    def __radd__(self, other):
        return Add((as_expr(other), self))

    def __sub__(self, other):
        return Add((self, Mul((MINUS_ONE, as_expr(other)))))

    def __rsub__(self, other):
        return Add((as_expr(other), Mul((MINUS_ONE, self))))

    def __mul__(self, other):
        return Mul((self, as_expr(other)))

    def __rmul__(self, other):
        return Mul((as_expr(other), self))

    def __truediv__(self, other):
        return Mul((self, Pow(as_expr(other), MINUS_ONE)))

    def __rtruediv__(self, other):
        return Mul((as_expr(other), Pow(self, MINUS_ONE)))

    def __pow__(self, other):
        return Pow(self, as_expr(other))

    def __neg__(self):
        return Mul((MINUS_ONE, self))

    def __repr__(self):
        from .parser import to_str

        return to_str(self)


class Rat(Expr):
    __slots__ = ("q",)

    def __init__(self, q):
        self.q = q if isinstance(q, Fraction) else Fraction(q)
        self._hash = hash(("Rat", self.q))

    def __eq__(self, other):
        return self is other or (type(other) is Rat and self.q == other.q)

    def __hash__(self):
        return self._hash


class Var(Expr):
    """Independent variable (t, x or y)."""

    __slots__ = ("name",)

    def __init__(self, name):
        self.name = name
        self._hash = hash(("Var", name))

    def __eq__(self, other):
        return self is other or (type(other) is Var and self.name == other.name)

    def __hash__(self):
        return self._hash


class Param(Expr):
    """Named constant parameter (mu, c1, delta3, ...)."""

    __slots__ = ("name",)

    def __init__(self, name):
        self.name = name
        self._hash = hash(("Param", name))

    def __eq__(self, other):
        return self is other or (type(other) is Param and self.name == other.name)

    def __hash__(self):
        return self._hash


class Pot(Expr):
    """Potential dependent variable (v, w, v1, v2): zero-order only."""

    __slots__ = ("name",)

    def __init__(self, name):
        self.name = name
        self._hash = hash(("Pot", name))

    def __eq__(self, other):
        return self is other or (type(other) is Pot and self.name == other.name)

    def __hash__(self):
        return self._hash


class Jet(Expr):
    """Jet coordinate d^(dt+dx) u / dt^dt dx^dx; Jet(0,0) is u itself."""

    __slots__ = ("dt", "dx")

    def __init__(self, dt, dx):
        if dt < 0 or dx < 0:
            raise KernelError("negative jet order")
        self.dt = dt
        self.dx = dx
        self._hash = hash(("Jet", dt, dx))

    def __eq__(self, other):
        return self is other or (
            type(other) is Jet and self.dt == other.dt and self.dx == other.dx
        )

    def __hash__(self):
        return self._hash


class Add(Expr):
    __slots__ = ("terms",)

    def __init__(self, terms):
        self.terms = tuple(terms)
        self._hash = hash(("Add", self.terms))

    def __eq__(self, other):
        return self is other or (type(other) is Add and self.terms == other.terms)

    def __hash__(self):
        return self._hash


class Mul(Expr):
    __slots__ = ("factors",)

    def __init__(self, factors):
        self.factors = tuple(factors)
        self._hash = hash(("Mul", self.factors))

    def __eq__(self, other):
        return self is other or (type(other) is Mul and self.factors == other.factors)

    def __hash__(self):
        return self._hash


class Pow(Expr):
    __slots__ = ("base", "exp")

    def __init__(self, base, exp):
        self.base = base
        self.exp = exp
        self._hash = hash(("Pow", base, exp))

    def __eq__(self, other):
        return self is other or (
            type(other) is Pow and self.base == other.base and self.exp == other.exp
        )

    def __hash__(self):
        return self._hash


class Fun(Expr):
    """Elementary function application (unary)."""

    __slots__ = ("name", "arg")

    def __init__(self, name, arg):
        if name not in ELEMENTARY:
            raise KernelError("unknown elementary function %r" % name)
        self.name = name
        self.arg = arg
        self._hash = hash(("Fun", name, arg))

    def __eq__(self, other):
        return self is other or (
            type(other) is Fun and self.name == other.name and self.arg == other.arg
        )

    def __hash__(self):
        return self._hash


class Op(Expr):
    """Opaque function application with a formal derivative multi-index."""

    __slots__ = ("name", "args", "d")

    def __init__(self, name, args, d=None):
        self.name = name
        self.args = tuple(args)
        self.d = tuple(d) if d is not None else (0,) * len(self.args)
        if len(self.d) != len(self.args):
            raise KernelError("derivative index length mismatch for %r" % name)
        if any(k < 0 for k in self.d):
            raise KernelError("negative derivative index for %r" % name)
        self._hash = hash(("Op", name, self.args, self.d))

    def __eq__(self, other):
        return self is other or (
            type(other) is Op
            and self.name == other.name
            and self.d == other.d
            and self.args == other.args
        )

    def __hash__(self):
        return self._hash


ZERO = Rat(0)
ONE = Rat(1)
MINUS_ONE = Rat(-1)
HALF = Rat(Fraction(1, 2))

T = Var("t")
X = Var("x")
Y = Var("y")
U = Jet(0, 0)
UX = Jet(0, 1)
UXX = Jet(0, 2)
UT = Jet(1, 0)


def as_expr(v):
    if isinstance(v, Expr):
        return v
    if isinstance(v, (int, Fraction)):
        return Rat(v)
    raise KernelError("cannot coerce %r to Expr" % (v,))


def rat(p, q=1):
    return Rat(Fraction(p, q))


# ---------------------------------------------------------------------------
# ordering


_TYPE_RANK = {Rat: 0, Var: 1, Param: 2, Pot: 3, Jet: 4, Fun: 5, Op: 6, Pow: 7, Add: 8, Mul: 9}


def sort_key(e):
    t = type(e)
    r = _TYPE_RANK[t]
    if t is Rat:
        return (r, e.q)
    if t is Var or t is Param or t is Pot:
        return (r, e.name)
    if t is Jet:
        return (r, e.dt, e.dx)
    if t is Fun:
        return (r, e.name, sort_key(e.arg))
    if t is Op:
        return (r, e.name, e.d, tuple(sort_key(a) for a in e.args))
    if t is Pow:
        return (r, sort_key(e.base), sort_key(e.exp))
    if t is Add:
        return (r, tuple(sort_key(x) for x in e.terms))
    return (r, tuple(sort_key(x) for x in e.factors))


def jet_degree(e):
    """Total polynomial degree in jet variables of a canonical term."""
    t = type(e)
    if t is Jet:
        return 1
    if t is Pow and type(e.base) is Jet and type(e.exp) is Rat and e.exp.q.denominator == 1:
        return max(int(e.exp.q), 0)
    if t is Mul:
        return sum(jet_degree(f) for f in e.factors)
    return 0


def _term_key(term):
    # highest jet degree first, then deterministic structural order
    return (-jet_degree(term), sort_key(term))


# ---------------------------------------------------------------------------
# normalization


def positive_certain(e):
    """Conservatively true when e > 0 on any valid evaluation domain."""
    t = type(e)
    if t is Rat:
        return e.q > 0
    if t is Fun:
        return e.name in ("exp", "cosh")
    if t is Pow:
        return positive_certain(e.base)
    if t is Mul:
        return all(positive_certain(f) for f in e.factors)
    if t is Add:
        return all(positive_certain(x) for x in e.terms)
    return False


_canon_cache: dict = {}
_canon_cache_guarded: dict = {}


def normalize(e):
    """Canonical sum-of-products form; idempotent."""
    cache = _canon_cache if _CANCEL_GUARD[0] == 0 else _canon_cache_guarded
    r = cache.get(e)
    if r is None:
        r = _canon(e)
        cache[e] = r
        cache[r] = r
    return r


def _canon(e):
    t = type(e)
    if t in (Rat, Var, Param, Pot, Jet):
        return e
    if t is Add:
        return _canon_add([normalize(x) for x in e.terms])
    if t is Mul:
        return _canon_mul([normalize(f) for f in e.factors])
    if t is Pow:
        return _canon_pow(normalize(e.base), normalize(e.exp))
    if t is Fun:
        return _canon_fun(e.name, normalize(e.arg))
    if t is Op:
        return Op(e.name, [normalize(a) for a in e.args], e.d)
    raise KernelError("unknown node %r" % t)


def _split_coeff(term):
    """Canonical term -> (Fraction coefficient, monic part)."""
    if type(term) is Rat:
        return term.q, ONE
    if type(term) is Mul and type(term.factors[0]) is Rat:
        rest = term.factors[1:]
        monic = rest[0] if len(rest) == 1 else Mul(rest)
        return term.factors[0].q, monic
    return Fraction(1), term


def _with_coeff(c, monic):
    if c == 0:
        return ZERO
    if monic is ONE:
        return Rat(c)
    if c == 1:
        return monic
    if type(monic) is Mul:
        return Mul((Rat(c),) + monic.factors)
    return Mul((Rat(c), monic))


def _canon_add(terms):
    flat = []
    for x in terms:
        if type(x) is Add:
            flat.extend(x.terms)
        else:
            flat.append(x)
    acc: dict = {}
    order: list = []
    for x in flat:
        c, monic = _split_coeff(x)
        if monic in acc:
            acc[monic] += c
        else:
            acc[monic] = c
            order.append(monic)
    out = [_with_coeff(acc[m], m) for m in order if acc[m] != 0]
    if not out:
        return ZERO
    if len(out) == 1:
        return out[0]
    if _CANCEL_GUARD[0] == 0 and len(out) <= _CANCEL_TERM_LIMIT:
        cancelled = _try_cancel_sum(out, _CANCEL_TERM_LIMIT, _DIVIDE_STEPS)
        if cancelled is not None:
            return cancelled
    out.sort(key=_term_key)
    return Add(tuple(out))


def condense(e):
    """normalize plus a deeper exact-quotient collapse for ratio expressions
    (characteristics are quotients by the arbitrary element f)."""
    e = normalize(e)
    if type(e) is not Add:
        return e
    cancelled = _try_cancel_sum(list(e.terms), 64, 128)
    if cancelled is None:
        return e
    return condense(cancelled)


_CANCEL_GUARD = [0]  # nonzero while long division runs: no nested cancels
_CANCEL_TERM_LIMIT = 12  # quotient collapse targets small sums (characteristics)


def _term_factors(term):
    _, monic = _split_coeff(term)
    if type(monic) is Mul:
        return monic.factors
    if monic == ONE:
        return ()
    return (monic,)


def _neg_add_bases(term):
    """Sum bases appearing with a negative integer exponent in a term."""
    out = {}
    for f in _term_factors(term):
        if (
            type(f) is Pow
            and type(f.base) is Add
            and type(f.exp) is Rat
            and f.exp.q.denominator == 1
            and f.exp.q < 0
        ):
            out[f.base] = -int(f.exp.q)
    return out


def _strip_one_power(term, base):
    """Multiply a canonical term by `base` once, where base^(-k) divides it."""
    c, monic = _split_coeff(term)
    factors = list(_term_factors(term))
    for i, f in enumerate(factors):
        if type(f) is Pow and f.base == base:
            new_exp = _canon_add([f.exp, ONE])
            if new_exp == ZERO:
                del factors[i]
            else:
                factors[i] = _canon_pow(base, new_exp)
            rebuilt = _canon_mul(factors) if factors else ONE
            return _with_coeff(c, rebuilt)
    raise KernelError("factor %r not present" % (base,))


def _mono_quotient(t1, t2):
    """t1/t2 for canonical sum-free terms, or None if not a clean monomial."""
    c1, _ = _split_coeff(t1)
    c2, _ = _split_coeff(t2)
    expmap: dict = {}
    order: list = []

    def accumulate(term, sign):
        for f in _term_factors(term):
            base, p = (f.base, f.exp) if type(f) is Pow else (f, ONE)
            if base not in expmap:
                expmap[base] = []
                order.append(base)
            expmap[base].append(p if sign > 0 else _canon_mul([MINUS_ONE, p]))

    accumulate(t1, +1)
    accumulate(t2, -1)
    factors = []
    for base in order:
        p = _canon_add(expmap[base])
        if p == ZERO:
            continue
        factors.append(_canon_pow(base, p))
    if any(type(f) is Add for f in factors):
        return None
    return _with_coeff(c1 / c2, _canon_mul(factors) if factors else ONE)


def _mono_mul(q, term):
    """Product of two sum-free canonical terms (no distribution happens)."""
    return _canon_mul([q, term])


_DIVIDE_STEPS = 24


def _div_degree(term):
    """Total rational degree of a sum-free term; division order key."""
    total = Fraction(0)
    for f in _term_factors(term):
        _, p = (f.base, f.exp) if type(f) is Pow else (f, ONE)
        if type(p) is Rat:
            total += p.q
        elif type(p) is Add:
            for x in p.terms:
                if type(x) is Rat:
                    total += x.q
        else:
            total += 1
    return total


def _div_key(term):
    return (-_div_degree(term), sort_key(term))


def _divide_exact(n, s, term_limit, steps):
    """Exact quotient n/s (a sum of monomials) by long division, or None."""
    n_terms = sorted(n.terms if type(n) is Add else [n], key=_div_key)
    s_terms = sorted(s.terms if type(s) is Add else [s], key=_div_key)
    if len(n_terms) > term_limit or len(s_terms) > 4:
        return None
    for lead in s_terms:
        q = _divide_attempt(n_terms, s_terms, lead, steps)
        if q is not None:
            return q
    return None


def _divide_attempt(n_terms, s_terms, s_lead, steps):
    work = list(n_terms)
    q_parts: list = []
    _CANCEL_GUARD[0] += 1
    try:
        for _ in range(steps):
            if not work:
                return _canon_add(q_parts)
            q = _mono_quotient(work[0], s_lead)
            if q is None:
                return None
            q_parts.append(q)
            neg_q = _canon_mul([MINUS_ONE, q])
            r = _canon_add(work + [_mono_mul(neg_q, t) for t in s_terms])
            if r == ZERO:
                work = []
            elif type(r) is Add:
                work = sorted(r.terms, key=_div_key)
            else:
                work = [r]
        return None
    finally:
        _CANCEL_GUARD[0] -= 1


def _try_cancel_sum(terms, term_limit, steps):
    """Collapse sum(terms) when all terms share an inverse-sum factor S^-1
    and the sum stripped of it divides exactly by S (or simplifies)."""
    common = None
    for t in terms:
        bases = set(_neg_add_bases(t))
        common = bases if common is None else (common & bases)
        if not common:
            return None
    for base in sorted(common, key=sort_key):
        stripped = [_strip_one_power(t, base) for t in terms]
        n = _canon_add(stripped)
        if n == ZERO:
            return ZERO
        if type(n) is not Add:
            return _canon_mul([n, Pow(base, MINUS_ONE)])
        q = _divide_exact(n, base, term_limit, steps)
        if q is not None:
            return q
        if len(n.terms) < len(terms):
            # no exact division, but the stripped sum collapsed: keep it
            inv = Pow(base, MINUS_ONE)
            return _canon_add([_mono_mul(t, inv) for t in n.terms])
    return None


def _canon_mul(factors):
    flat = []
    for f in factors:
        if type(f) is Mul:
            flat.extend(f.factors)
        else:
            flat.append(f)
    # distribute over sums: canonical form is a sum of products
    for i, f in enumerate(flat):
        if type(f) is Add:
            rest = flat[:i] + flat[i + 1 :]
            return _canon_add(
                [_canon_mul(rest + [term]) for term in f.terms]
            )
    coeff = Fraction(1)
    powmap: dict = {}
    order: list = []
    exp_arg_parts: list = []

    def record(base, expo):
        if base in powmap:
            powmap[base].append(expo)
        else:
            powmap[base] = [expo]
            order.append(base)

    for f in flat:
        tf = type(f)
        if tf is Rat:
            if f.q == 0:
                return ZERO
            coeff *= f.q
        elif tf is Pow:
            record(f.base, f.exp)
        elif tf is Fun and f.name == "exp":
            exp_arg_parts.append(f.arg)
        else:
            record(f, ONE)

    pending = []
    for base in order:
        expo = _canon_add(powmap[base])
        if type(base) is Add:
            # keep integer and fractional powers of a sum as separate factors
            n, rest = _split_exponent(expo)
            if rest != ZERO:
                pending.append(Pow(base, rest))
            if n != 0:
                pending.append(_canon_pow(base, Rat(n)))
        else:
            pending.append(_canon_pow(base, expo))
    out = []
    i = 0
    while i < len(pending):
        p = pending[i]
        i += 1
        tp = type(p)
        if tp is Rat:
            if p.q == 0:
                return ZERO
            coeff *= p.q
        elif tp is Fun and p.name == "exp":
            exp_arg_parts.append(p.arg)
        elif tp is Add or tp is Mul:
            rest_parts = (
                out
                + pending[i:]
                + [Fun("exp", a) for a in exp_arg_parts]
                + [Rat(coeff), p]
            )
            return _canon_mul(rest_parts)
        else:
            out.append(p)
    if exp_arg_parts:
        a = _canon_add(exp_arg_parts)
        if a != ZERO:
            out.append(Fun("exp", a))
    if not out:
        return Rat(coeff)
    out.sort(key=sort_key)
    if coeff == 0:
        return ZERO
    if coeff != 1:
        out = [Rat(coeff)] + out
    if len(out) == 1:
        return out[0]
    return Mul(tuple(out))


def _rat_pow(b: Fraction, n: int):
    if b == 0 and n <= 0:
        raise KernelError("0 raised to a nonpositive power")
    return Rat(b**n)


def _nth_root(n: int, k: int):
    """Exact integer k-th root of n >= 0, or None."""
    if n in (0, 1):
        return n
    r = round(n ** (1.0 / k))
    for c in (r - 1, r, r + 1):
        if c >= 0 and c**k == n:
            return c
    return None


def _canon_pow(base, expo):
    tb, te = type(base), type(expo)
    if te is Rat and expo.q == 0:
        return ONE
    if te is Rat and expo.q == 1:
        return base
    if tb is Rat:
        if base.q == 1:
            return ONE
        if te is Rat and expo.q.denominator == 1:
            return _rat_pow(base.q, int(expo.q))
        if base.q == 0:
            return ZERO  # positive non-integer exponent
        if te is Rat and base.q > 0:
            # exact rational roots, e.g. sqrt(4) or (8/27)^(2/3)
            k = expo.q.denominator
            rn = _nth_root(base.q.numerator, k)
            rd = _nth_root(base.q.denominator, k)
            if rn is not None and rd is not None:
                return _rat_pow(Fraction(rn, rd), expo.q.numerator)
        return Pow(base, expo)
    if tb is Pow:
        inner_int = type(base.exp) is Rat and base.exp.q.denominator == 1
        outer_int = te is Rat and expo.q.denominator == 1
        if outer_int or positive_certain(base.base) or (inner_int and int(base.exp.q) % 2 == 1):
            return _canon_pow(base.base, _canon_mul([base.exp, expo]))
        return Pow(base, expo)
    if tb is Fun and base.name == "exp":
        return _canon_fun("exp", _canon_mul([base.arg, expo]))
    if tb is Mul:
        if (te is Rat and expo.q.denominator == 1) or all(
            positive_certain(f) for f in base.factors
        ):
            return _canon_mul([_canon_pow(f, expo) for f in base.factors])
        return Pow(base, expo)
    if tb is Add:
        n, rest = _split_exponent(expo)
        if rest == ZERO:
            if 2 <= n <= POW_EXPAND_LIMIT:
                r = base
                for _ in range(n - 1):
                    r = _canon_mul([r, base])
                return r
            return Pow(base, expo)
        if n == 0:
            return Pow(base, rest)
        # S^(mu-3/2) -> S^(-2) * S^(mu+1/2): the integer part joins the
        # rational cancellation machinery, the fractional atom rides along
        ip = _canon_pow(base, Rat(n))
        if type(ip) in (Add, Mul):
            return _canon_mul([ip, Pow(base, rest)])
        return Mul(tuple(sorted([ip, Pow(base, rest)], key=sort_key)))
    return Pow(base, expo)


def _split_exponent(expo):
    """Split a canonical exponent into (integer part, remainder with
    rational-constant part in [0,1))."""
    if type(expo) is Rat:
        c0 = expo.q
        rest_terms = []
    elif type(expo) is Add:
        c0 = Fraction(0)
        rest_terms = []
        for t in expo.terms:
            if type(t) is Rat:
                c0 += t.q
            else:
                rest_terms.append(t)
    else:
        return 0, expo
    n = c0.numerator // c0.denominator
    frac = c0 - n
    if frac != 0:
        rest_terms.append(Rat(frac))
    rest = _canon_add(rest_terms) if rest_terms else ZERO
    return n, rest


def _canon_fun(name, arg):
    ta = type(arg)
    if name == "sqrt":
        return _canon_pow(arg, HALF)
    if name == "exp":
        if ta is Rat and arg.q == 0:
            return ONE
        if ta is Fun and arg.name == "ln":
            if positive_certain(arg.arg):
                return arg.arg
        return Fun("exp", arg)
    if name == "ln":
        if ta is Rat and arg.q == 1:
            return ZERO
        if ta is Fun and arg.name == "exp":
            return arg.arg
        return Fun("ln", arg)
    if name == "abs":
        if ta is Rat:
            return Rat(abs(arg.q))
        if positive_certain(arg):
            return arg
        arg, _ = _strip_sign(arg)
        return Fun("abs", arg)
    if name in ("sin", "sinh", "atan"):
        if ta is Rat and arg.q == 0:
            return ZERO
        arg, sign = _strip_sign(arg)
        f = Fun(name, arg)
        return f if sign > 0 else _canon_mul([MINUS_ONE, f])
    if name in ("cos", "cosh"):
        if ta is Rat and arg.q == 0:
            return ONE
        arg, _ = _strip_sign(arg)
        return Fun(name, arg)
    raise KernelError("unknown elementary function %r" % name)


def _strip_sign(arg):
    """Factor a negative rational coefficient out of a canonical expression."""
    if type(arg) is Add:
        # negate only when every term carries a negative coefficient
        if all(_split_coeff(x)[0] < 0 for x in arg.terms):
            return _canon_mul([MINUS_ONE, arg]), -1
        return arg, 1
    c, monic = _split_coeff(arg)
    if c < 0:
        return _with_coeff(-c, monic), -1
    return arg, 1


# ---------------------------------------------------------------------------
# differentiation (partial; jet variables are independent coordinates)


def diff(e, v, times=1):
    """Partial derivative of e with respect to variable v, `times` times."""
    r = normalize(e)
    for _ in range(times):
        r = normalize(_diff(r, v))
    return r


_diff_cache: dict = {}


def _diff(e, v):
    key = (e, v)
    r = _diff_cache.get(key)
    if r is None:
        r = _diff_raw(e, v)
        _diff_cache[key] = r
    return r


def _diff_raw(e, v):
    if e == v:
        return ONE
    t = type(e)
    if t in (Rat, Var, Param, Pot, Jet):
        return ZERO
    if t is Add:
        return Add(tuple(_diff(x, v) for x in e.terms))
    if t is Mul:
        fs = e.factors
        parts = []
        for i, f in enumerate(fs):
            df = _diff(f, v)
            if df == ZERO:
                continue
            parts.append(Mul(fs[:i] + (df,) + fs[i + 1 :]))
        return Add(tuple(parts)) if parts else ZERO
    if t is Pow:
        b, ex = e.base, e.exp
        db = _diff(b, v)
        dex = _diff(ex, v)
        parts = []
        if db != ZERO:
            parts.append(Mul((ex, Pow(b, Add((ex, MINUS_ONE))), db)))
        if dex != ZERO:
            parts.append(Mul((e, Fun("ln", b), dex)))
        return Add(tuple(parts)) if parts else ZERO
    if t is Fun:
        da = _diff(e.arg, v)
        if da == ZERO:
            return ZERO
        return Mul((_fun_derivative(e), da))
    if t is Op:
        parts = []
        for i, a in enumerate(e.args):
            da = _diff(a, v)
            if da == ZERO:
                continue
            parts.append(Mul((_op_derivative(e, i), da)))
        return Add(tuple(parts)) if parts else ZERO
    raise KernelError("cannot differentiate %r" % t)


def _fun_derivative(e):
    a = e.arg
    n = e.name
    if n == "exp":
        return e
    if n == "ln":
        return Pow(a, MINUS_ONE)
    if n == "sin":
        return Fun("cos", a)
    if n == "cos":
        return Mul((MINUS_ONE, Fun("sin", a)))
    if n == "sinh":
        return Fun("cosh", a)
    if n == "cosh":
        return Fun("sinh", a)
    if n == "atan":
        return Pow(Add((ONE, Pow(a, Rat(2)))), MINUS_ONE)
    if n == "abs":
        return Mul((a, Pow(Fun("abs", a), MINUS_ONE)))
    raise KernelError("no derivative rule for %r" % n)


def _op_derivative(e, i):
    """Derivative of an opaque application with respect to its i-th argument."""
    if e.name in ANTIDERIVATIVES and sum(e.d) == 0:
        return Op(ANTIDERIVATIVES[e.name], e.args)
    d = list(e.d)
    d[i] += 1
    return Op(e.name, e.args, d)


# ---------------------------------------------------------------------------
# substitution


def substitute(e, mapping):
    """Simultaneous replacement of exact subtrees, then normalize."""
    m = {normalize(as_expr(k)): normalize(as_expr(v)) for k, v in mapping.items()}
    return normalize(_subst(normalize(e), m, {}))


def _subst(e, m, cache):
    hit = m.get(e)
    if hit is not None:
        return hit
    t = type(e)
    if t in (Rat, Var, Param, Pot, Jet):
        return e
    c = cache.get(e)
    if c is not None:
        return c
    if t is Add:
        r = Add(tuple(_subst(x, m, cache) for x in e.terms))
    elif t is Mul:
        r = Mul(tuple(_subst(f, m, cache) for f in e.factors))
    elif t is Pow:
        r = Pow(_subst(e.base, m, cache), _subst(e.exp, m, cache))
    elif t is Fun:
        r = Fun(e.name, _subst(e.arg, m, cache))
    elif t is Op:
        r = Op(e.name, tuple(_subst(a, m, cache) for a in e.args), e.d)
    else:
        raise KernelError("cannot substitute into %r" % t)
    cache[e] = r
    return r


def bind_opaque(e, models):
    """Replace opaque applications by concrete expressions.

    models maps an opaque name to (argument variables, expression); formal
    derivative indices are resolved by differentiating the model.  Names not
    present stay opaque.
    """
    e = normalize(e)
    return normalize(_bind(e, models, {}))


def _bind(e, models, cache):
    t = type(e)
    if t in (Rat, Var, Param, Pot, Jet):
        return e
    c = cache.get(e)
    if c is not None:
        return c
    if t is Op and e.name in models:
        argvars, body = models[e.name]
        if len(argvars) != len(e.args):
            raise KernelError("arity mismatch binding %r" % e.name)
        # bind other opaques inside the model, both before and after
        # differentiation (d/du IntA yields a fresh A application)
        r = _bind(normalize(body), models, cache)
        for av, k in zip(argvars, e.d):
            r = diff(r, av, k)
        r = _bind(normalize(r), models, cache)
        r = _subst(
            normalize(r),
            {av: _bind(a, models, cache) for av, a in zip(argvars, e.args)},
            {},
        )
    elif t is Add:
        r = Add(tuple(_bind(x, models, cache) for x in e.terms))
    elif t is Mul:
        r = Mul(tuple(_bind(f, models, cache) for f in e.factors))
    elif t is Pow:
        r = Pow(_bind(e.base, models, cache), _bind(e.exp, models, cache))
    elif t is Fun:
        r = Fun(e.name, _bind(e.arg, models, cache))
    elif t is Op:
        r = Op(e.name, tuple(_bind(a, models, cache) for a in e.args), e.d)
    else:
        raise KernelError("cannot bind %r" % t)
    cache[e] = r
    return r


# ---------------------------------------------------------------------------
# structure queries


def atoms(e, kinds):
    """Set of atomic subexpressions of the given node classes."""
    out = set()
    _walk_atoms(normalize(e), kinds, out, set())
    return out


def _walk_atoms(e, kinds, out, seen):
    if e in seen:
        return
    seen.add(e)
    t = type(e)
    if t in kinds:
        out.add(e)
    if t is Add:
        for x in e.terms:
            _walk_atoms(x, kinds, out, seen)
    elif t is Mul:
        for f in e.factors:
            _walk_atoms(f, kinds, out, seen)
    elif t is Pow:
        _walk_atoms(e.base, kinds, out, seen)
        _walk_atoms(e.exp, kinds, out, seen)
    elif t is Fun:
        _walk_atoms(e.arg, kinds, out, seen)
    elif t is Op:
        if Op in kinds:
            out.add(e)
        for a in e.args:
            _walk_atoms(a, kinds, out, seen)


def jets_of(e):
    return atoms(e, (Jet,))


def max_x_order(e):
    js = [j for j in jets_of(e) if j.dt == 0]
    return max((j.dx for j in js), default=-1)


def max_t_order(e):
    return max((j.dt for j in jets_of(e)), default=0)


def contains(e, sub):
    sub = normalize(as_expr(sub))
    return _contains(normalize(e), sub, set())


def _contains(e, sub, seen):
    if e == sub:
        return True
    if e in seen:
        return False
    seen.add(e)
    t = type(e)
    if t is Add:
        return any(_contains(x, sub, seen) for x in e.terms)
    if t is Mul:
        return any(_contains(f, sub, seen) for f in e.factors)
    if t is Pow:
        return _contains(e.base, sub, seen) or _contains(e.exp, sub, seen)
    if t is Fun:
        return _contains(e.arg, sub, seen)
    if t is Op:
        return any(_contains(a, sub, seen) for a in e.args)
    return False


def is_rational_const(e):
    return type(normalize(e)) is Rat


# ---------------------------------------------------------------------------
# coefficient collection and polynomial antidifferentiation


def collect(e, basis):
    """Split e as a polynomial in the given jet variables.

    Returns a dict mapping exponent tuples (aligned with basis) to
    coefficient expressions free of the basis variables.  Raises
    NonPolynomialError on non-polynomial dependence.
    """
    basis = [normalize(as_expr(b)) for b in basis]
    e = normalize(e)
    terms = e.terms if type(e) is Add else (e,)
    out: dict = {}
    for term in terms:
        c, monic = _split_coeff(term)
        factors = monic.factors if type(monic) is Mul else (monic,)
        expo = [0] * len(basis)
        rest = []
        for f in factors:
            base, p = (f.base, f.exp) if type(f) is Pow else (f, ONE)
            if base in basis:
                i = basis.index(base)
                if not (type(p) is Rat and p.q.denominator == 1 and p.q >= 0):
                    raise NonPolynomialError(
                        "non-polynomial power of %r" % (base,)
                    )
                expo[i] += int(p.q)
            else:
                for b in basis:
                    if _contains(f, b, set()):
                        raise NonPolynomialError(
                            "basis variable %r buried inside %r" % (b, f)
                        )
                rest.append(f)
        coeff = _with_coeff(c, _canon_mul(rest) if rest else ONE)
        key = tuple(expo)
        out[key] = normalize(out[key] + coeff) if key in out else coeff
    return {k: v for k, v in out.items() if v != ZERO}


def reassemble(parts, basis):
    basis = [normalize(as_expr(b)) for b in basis]
    total = ZERO
    for expo, coeff in parts.items():
        term = coeff
        for b, k in zip(basis, expo):
            term = term * b**k
        total = total + term
    return normalize(total)


_INT_NAMES = {name: intname for intname, name in ANTIDERIVATIVES.items()}


def integrate_poly(e, v):
    """Antiderivative in v of a polynomial in v.

    The only non-polynomial rule is the atomic pair: a bare A(u) or B(u)
    factor integrated in u gives IntA/IntB.  Anything else with buried
    v-dependence raises NotIntegrableError.
    """
    v = normalize(as_expr(v))
    e = normalize(e)
    terms = e.terms if type(e) is Add else (e,)
    total = ZERO
    for term in terms:
        total = total + _integrate_term(term, v)
    return normalize(total)


def _integrate_term(term, v):
    c, monic = _split_coeff(term)
    if type(monic) is Mul:
        factors = list(monic.factors)
    elif monic == ONE:
        factors = []
    else:
        factors = [monic]
    k = 0
    rest = []
    atom = None
    for f in factors:
        base, p = (f.base, f.exp) if type(f) is Pow else (f, ONE)
        if base == v:
            if not (type(p) is Rat and p.q.denominator == 1 and p.q >= 0):
                raise NotIntegrableError("non-polynomial power of %r" % (v,))
            k += int(p.q)
        elif _contains(f, v, set()):
            bare = (
                type(f) is Op
                and f.name in _INT_NAMES
                and f.args == (v,)
                and sum(f.d) == 0
            )
            if v == U and bare and atom is None:
                atom = f
            else:
                raise NotIntegrableError("cannot integrate %r in %r" % (term, v))
        else:
            rest.append(f)
    coeff = _with_coeff(c, _canon_mul(rest) if rest else ONE)
    if atom is not None:
        if k != 0:
            raise NotIntegrableError("cannot integrate %r in %r" % (term, v))
        return coeff * Op(_INT_NAMES[atom.name], (U,))
    return coeff * v ** (k + 1) / (k + 1)


def clear_caches():
    _canon_cache.clear()
    _canon_cache_guarded.clear()
    _diff_cache.clear()
