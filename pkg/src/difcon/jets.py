"""Total derivatives, divergence, Euler operator and reduction modulo an
evolution equation of the class f(x)u_t = (g(x)A(u)u_x)_x + h(x)B(u)u_x.

D_t introduces internal mixed jets u{a,b}; public verification always
eliminates them through reduce_mod_equation, so the visible coordinate
system is t, x, u, u_x, u_xx, ...
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

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
    U,
    UX,
    Var,
    X,
    as_expr,
    atoms,
    bind_opaque,
    collect,
    contains,
    diff,
    integrate_poly,
    jets_of,
    max_t_order,
    max_x_order,
    normalize,
    substitute,
)
from .zerotest import ZeroReport, is_zero

T_VAR = Var("t")
X_VAR = Var("x")

DEFAULT_ORDER_CAP = 8


class OrderCapError(KernelError):
    pass


class ConstrainedSymbol:
    """Opaque symbol with rewrite rules on formal derivatives.

    rules maps an argument position to the expression for the first
    derivative of the symbol in that argument (e.g. sigma_t -> -sigma_vv).
    Rewriting eliminates every ruled derivative; it terminates because each
    step lowers the ruled index by one.
    """

    def __init__(self, name, argvars, rules):
        self.name = name
        self.argvars = tuple(normalize(as_expr(a)) for a in argvars)
        self.rules = {pos: normalize(as_expr(r)) for pos, r in rules.items()}

    def matches(self, node):
        return (
            type(node) is Op
            and node.name == self.name
            and any(node.d[p] > 0 for p in self.rules)
        )

    def rewrite_node(self, node):
        if tuple(node.args) != self.argvars:
            raise KernelError(
                "constrained symbol %s used with non-canonical arguments" % self.name
            )
        pos = next(p for p in self.rules if node.d[p] > 0)
        rest = list(node.d)
        rest[pos] -= 1
        out = self.rules[pos]
        for av, k in zip(self.argvars, rest):
            out = diff(out, av, k)
        return out


def apply_constraints(e, constrained, max_passes=64):
    """Rewrite ruled derivatives away; confluent at the orders used."""
    if not constrained:
        return normalize(e)
    e = normalize(e)
    for _ in range(max_passes):
        mapping = {}
        for node in atoms(e, (Op,)):
            for cs in constrained:
                if cs.matches(node):
                    mapping[node] = cs.rewrite_node(node)
                    break
        if not mapping:
            return e
        e = substitute(e, mapping)
    raise KernelError("constraint rewriting did not terminate")


@dataclass(frozen=True)
class Context:
    """Rewrites threaded through total derivatives."""

    potentials: tuple = ()  # (Pot, v_x expression, v_t expression)
    constrained: tuple = ()

    def pot_derivative(self, pot, var):
        for p, vx, vt in self.potentials:
            if p == pot:
                return vx if var == X_VAR else vt
        raise KernelError("no defining pair for potential %r" % pot.name)


def total_derivative(e, var, ctx=None, order_cap=DEFAULT_ORDER_CAP):
    """Total derivative D_t or D_x; mixed jets from D_t stay internal."""
    if var not in (T_VAR, X_VAR):
        raise KernelError("total derivative only in t or x")
    e = normalize(as_expr(e))
    parts = [diff(e, var)]
    for j in jets_of(e):
        dj = diff(e, j)
        if dj == Rat(0):
            continue
        bumped = Jet(j.dt + 1, j.dx) if var == T_VAR else Jet(j.dt, j.dx + 1)
        if bumped.dt + bumped.dx > order_cap:
            raise OrderCapError("jet order cap %d exceeded" % order_cap)
        parts.append(dj * bumped)
    for p in atoms(e, (Pot,)):
        dp = diff(e, p)
        if dp == Rat(0):
            continue
        if ctx is None:
            raise KernelError("potential %r differentiated without a context" % p.name)
        parts.append(dp * ctx.pot_derivative(p, var))
    out = normalize(Add(tuple(parts)))
    if ctx is not None and ctx.constrained:
        out = apply_constraints(out, ctx.constrained)
    return out


def D_x(e, ctx=None, times=1, order_cap=DEFAULT_ORDER_CAP):
    for _ in range(times):
        e = total_derivative(e, X_VAR, ctx, order_cap)
    return e


def D_t(e, ctx=None, times=1, order_cap=DEFAULT_ORDER_CAP):
    for _ in range(times):
        e = total_derivative(e, T_VAR, ctx, order_cap)
    return e


def divergence(F, G, ctx=None, order_cap=DEFAULT_ORDER_CAP):
    """D_t F + D_x G."""
    return normalize(D_t(F, ctx, 1, order_cap) + D_x(G, ctx, 1, order_cap))


def euler_operator(e, order_cap=DEFAULT_ORDER_CAP + 4):
    """Variational derivative sum((-D_t)^a (-D_x)^b d/du{a,b}) e."""
    e = normalize(as_expr(e))
    total = Rat(0)
    for j in sorted(jets_of(e), key=lambda j: (j.dt, j.dx)):
        part = diff(e, j)
        if part == Rat(0):
            continue
        part = D_t(part, None, j.dt, order_cap)
        part = D_x(part, None, j.dx, order_cap)
        sign = -1 if (j.dt + j.dx) % 2 else 1
        total = total + sign * part
    return normalize(total)


# ---------------------------------------------------------------------------
# the equation class


class Equation:
    """One member of f(x)u_t = (g(x)A(u)u_x)_x + h(x)B(u)u_x.

    Arbitrary elements are expressions in x (f, g, h) or u (A, B); leaving
    one as its bare opaque application keeps it arbitrary.  Sampling domains
    feed the randomized zero test.
    """

    def __init__(self, f="f(x)", g=1, h="h(x)", A="A(u)", B="B(u)", params=(),
                 x_domain=(0.5, 2.0), u_domain=(0.5, 2.0), constrained=(),
                 param_domains=None, name=""):
        from .parser import parse  # local import to avoid a cycle

        def conv(v):
            if isinstance(v, str):
                return normalize(parse(v, params))
            return normalize(as_expr(v))

        self.f = conv(f)
        self.g = conv(g)
        self.h = conv(h)
        self.A = conv(A)
        self.B = conv(B)
        self.params = tuple(params)
        self.x_domain = x_domain
        self.u_domain = u_domain
        self.constrained = tuple(constrained)
        self.param_domains = dict(param_domains or {})
        self.name = name
        self._reduced: dict = {}
        self._models = self._build_models()

    def __repr__(self):
        return "Equation(f=%r, g=%r, h=%r, A=%r, B=%r)" % (
            self.f, self.g, self.h, self.A, self.B)

    def elements(self):
        return {"f": self.f, "g": self.g, "h": self.h, "A": self.A, "B": self.B}

    def _build_models(self):
        models = {}
        for name, ex in self.elements().items():
            argvar = U if name in ("A", "B") else X_VAR
            if ex == Op(name, (argvar,)):
                continue  # genuinely arbitrary element
            models[name] = ((argvar,), ex)
        for intname, base in (("IntA", "A"), ("IntB", "B")):
            if base in models:
                try:
                    models[intname] = ((U,), antiderivative_in_u(models[base][1]))
                except KernelError:
                    pass  # no closed form; IntX stays atomic
        return models

    def bind(self, e):
        """Substitute concrete arbitrary elements into e."""
        return bind_opaque(e, self._models)

    def ctx(self, potentials=()):
        return Context(potentials=tuple(potentials), constrained=self.constrained)

    def lhs(self):
        """L = f u_t - (g A u_x)_x - h B u_x, mixed jet kept."""
        return normalize(
            self.f * Jet(1, 0) - D_x(self.g * self.A * UX) - self.h * self.B * UX
        )

    def rhs(self):
        """u_t solved from the equation."""
        return normalize(
            (D_x(self.g * self.A * UX) + self.h * self.B * UX) / self.f
        )

    def domains(self):
        d = {X_VAR: self.x_domain, U: self.u_domain}
        for p, window in self.param_domains.items():
            d[p] = window
        return d

    def is_zero(self, e, seed=42):
        return is_zero(self.bind(e), seed=seed, domains=self.domains())

    def check_nondegenerate(self, seed=42):
        """f*g*A must not vanish (sampled)."""
        r = self.is_zero(self.f * self.g * self.A, seed=seed)
        return r.status == "nonzero"

    def reduced_jet(self, dt, dx, order_cap=DEFAULT_ORDER_CAP):
        """u{dt,dx} rewritten through the equation and its consequences."""
        key = (dt, dx)
        hit = self._reduced.get(key)
        if hit is not None:
            return hit
        if dt == 0:
            r = Jet(0, dx)
        elif dt == 1:
            r = D_x(self.rhs(), self.ctx(), dx, order_cap)
        else:
            base = self.reduced_jet(dt - 1, dx, order_cap)
            r = reduce_mod_equation(D_t(base, self.ctx(), 1, order_cap), self,
                                    order_cap)
        r = apply_constraints(r, self.constrained)
        self._reduced[key] = r
        return r


def reduce_mod_equation(e, eq, order_cap=DEFAULT_ORDER_CAP):
    """Eliminate every mixed jet via u{1,j} = D_x^j(rhs); idempotent."""
    e = normalize(as_expr(e))
    for _ in range(order_cap + 2):
        mixed = [j for j in jets_of(e) if j.dt >= 1]
        if not mixed:
            return apply_constraints(e, eq.constrained)
        mapping = {j: eq.reduced_jet(j.dt, j.dx, order_cap) for j in mixed}
        e = substitute(e, mapping)
    raise OrderCapError("reduction did not settle within the order cap")


def adjoint_frechet_apply(eq, lam, reduce=True, order_cap=DEFAULT_ORDER_CAP):
    """Adjoint Frechet derivative of the equation applied to lam.

    Returns sum over jet coordinates of (-D)^alpha (dL/du_alpha * lam),
    reduced modulo the equation; a Zero/ProbablyZero verdict on the result
    certifies lam as a cosymmetry.
    """
    lam = normalize(as_expr(lam))
    L = eq.lhs()
    ctx = eq.ctx()
    total = Rat(0)
    for j in sorted(jets_of(L), key=lambda j: (j.dt, j.dx)):
        coeff = diff(L, j)
        if coeff == Rat(0):
            continue
        part = normalize(coeff * lam)
        part = D_t(part, ctx, j.dt, order_cap)
        part = D_x(part, ctx, j.dx, order_cap)
        sign = -1 if (j.dt + j.dx) % 2 else 1
        total = normalize(total + sign * part)
    if reduce:
        total = reduce_mod_equation(total, eq, order_cap)
    return total


def antiderivative_in_u(e):
    """Closed-form antiderivative in u for the element shapes the catalog
    ships: polynomials, rational powers of u, exp(u), 1/u, linear
    combinations of opaque A/B applications, and the by-parts pattern
    u*A + IntA -> u*IntA."""
    e = normalize(as_expr(e))
    terms = list(e.terms) if type(e) is Add else [e]
    out = Rat(0)
    by_parts: dict = {}
    for term in terms:
        from .expr import _split_coeff

        c, monic = _split_coeff(term)
        ex = _try_antiderivative_term(monic)
        if ex is not None:
            out = out + Rat(c) * ex
            continue
        # collect candidates for the by-parts pattern
        key = _by_parts_key(monic)
        if key is None:
            raise KernelError("no closed-form antiderivative for %r" % (term,))
        by_parts.setdefault(key, []).append((c, monic))
    for (name,), parts in by_parts.items():
        # c*u*A(u) + c*IntA(u) integrates to c*u*IntA(u)
        kinds = {}
        for c, monic in parts:
            tag = "prod" if contains(monic, U) and type(monic) is Mul else "int"
            tag = "prod" if monic == normalize(U * Op(name, (U,))) else "int"
            kinds.setdefault(tag, []).append(c)
        intname = {"A": "IntA", "B": "IntB"}[name]
        if (
            set(kinds) == {"prod", "int"}
            and len(kinds["prod"]) == 1
            and len(kinds["int"]) == 1
            and kinds["prod"][0] == kinds["int"][0]
        ):
            out = out + Rat(kinds["prod"][0]) * U * Op(intname, (U,))
        else:
            raise KernelError("no closed-form antiderivative for %r" % (e,))
    return normalize(out)


def _try_antiderivative_term(monic):
    from fractions import Fraction

    if not contains(monic, U):
        return monic * U
    if monic == U:
        return normalize(U**2 / 2)
    if type(monic) is Pow and monic.base == U and type(monic.exp) is Rat:
        k = monic.exp.q
        if k == -1:
            return Fun("ln", U)
        return normalize(U ** (k + 1) / (k + 1))
    if type(monic) is Fun and monic.name == "exp" and monic.arg == U:
        return monic
    if type(monic) is Op and monic.args == (U,) and sum(monic.d) == 0:
        if monic.name == "A":
            return Op("IntA", (U,))
        if monic.name == "B":
            return Op("IntB", (U,))
    return None


def _by_parts_key(monic):
    for name in ("A", "B"):
        if monic == normalize(U * Op(name, (U,))) or monic == Op(
            {"A": "IntA", "B": "IntB"}[name], (U,)
        ):
            return (name,)
    return None
