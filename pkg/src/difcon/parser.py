"""Infix expression grammar: parser (precedence climbing) and printer.

Grammar: `+ - * / ^` with parentheses; `^` is right-associative and unary
minus binds looser than `^`.  Bare identifiers are the variables t, x, y,
the jet tokens u, u_t, u_x, u_xx, u_xxx, u{k}, u{a,b}, the potentials
v, w, v1, v2, or declared parameters.  Calls are elementary functions
(exp ln sin cos sinh cosh atan abs sqrt), antiderivatives IntA(u)/IntB(u),
or opaque applications f(x), sigma(t,v); a brace suffix before the argument
list is a formal derivative multi-index, e.g. sigma{0,2}(t,v).
"""

from __future__ import annotations

from fractions import Fraction

from .expr import (
    ELEMENTARY,
    Add,
    Expr,
    Fun,
    Jet,
    Mul,
    Op,
    Param,
    Pot,
    Pow,
    Rat,
    Var,
    _split_coeff,
    _with_coeff,
    normalize,
)


class ParseError(Exception):
    def __init__(self, message, pos=None):
        if pos is not None:
            message = "%s (at position %d)" % (message, pos)
        super().__init__(message)
        self.pos = pos


class UnknownSymbolError(ParseError):
    pass


VARIABLES = {"t": Var("t"), "x": Var("x"), "y": Var("y")}
POTENTIALS = {"v": Pot("v"), "w": Pot("w"), "v1": Pot("v1"), "v2": Pot("v2")}
JET_TOKENS = {"u": Jet(0, 0), "u_t": Jet(1, 0), "u_x": Jet(0, 1),
              "u_xx": Jet(0, 2), "u_xxx": Jet(0, 3)}
RESERVED = set(VARIABLES) | set(POTENTIALS) | set(JET_TOKENS) | set(ELEMENTARY)

_PUNCT = "+-*/^(){},"


def tokenize(text):
    """Yield (kind, value, pos) tuples; kinds are num, ident, punct, end."""
    out = []
    i, n = 0, len(text)
    while i < n:
        c = text[i]
        if c.isspace():
            i += 1
            continue
        if c.isdigit() or (c == "." and i + 1 < n and text[i + 1].isdigit()):
            j = i
            seen_dot = False
            while j < n and (text[j].isdigit() or (text[j] == "." and not seen_dot)):
                if text[j] == ".":
                    seen_dot = True
                j += 1
            out.append(("num", text[i:j], i))
            i = j
            continue
        if c.isalpha():
            j = i
            while j < n and (text[j].isalnum() or text[j] == "_"):
                j += 1
            out.append(("ident", text[i:j], i))
            i = j
            continue
        if c in _PUNCT:
            out.append(("punct", c, i))
            i += 1
            continue
        raise ParseError("unexpected character %r" % c, i)
    out.append(("end", "", n))
    return out


class _Parser:
    def __init__(self, tokens, params):
        self.toks = tokens
        self.i = 0
        self.params = frozenset(params)

    def peek(self):
        return self.toks[self.i]

    def next(self):
        tok = self.toks[self.i]
        self.i += 1
        return tok

    def expect(self, value):
        kind, val, pos = self.next()
        if val != value:
            raise ParseError("expected %r, found %r" % (value, val or "end of input"), pos)

    # precedence: + - (10), unary minus (15), * / (20), ^ (30, right)
    def expression(self, min_prec=0):
        left = self.atom()
        while True:
            kind, val, pos = self.peek()
            if kind != "punct" or val not in "+-*/^":
                return left
            if val in "+-":
                prec, next_min = 10, 11
            elif val in "*/":
                prec, next_min = 20, 21
            else:
                prec, next_min = 30, 30  # right-associative
            if prec < min_prec:
                return left
            self.next()
            right = self.expression(next_min)
            if val == "+":
                left = Add((left, right))
            elif val == "-":
                left = Add((left, Mul((Rat(-1), right))))
            elif val == "*":
                left = Mul((left, right))
            elif val == "/":
                left = Mul((left, Pow(right, Rat(-1))))
            else:
                left = Pow(left, right)

    def atom(self):
        kind, val, pos = self.next()
        if kind == "num":
            return Rat(Fraction(val))
        if kind == "punct" and val == "(":
            e = self.expression(0)
            self.expect(")")
            return e
        if kind == "punct" and val == "-":
            return Mul((Rat(-1), self.expression(15)))
        if kind == "ident":
            return self.identifier(val, pos)
        raise ParseError("unexpected token %r" % (val or "end of input"), pos)

    def identifier(self, name, pos):
        indices = None
        if self.peek()[1] == "{":
            self.next()
            indices = [self.integer()]
            while self.peek()[1] == ",":
                self.next()
                indices.append(self.integer())
            self.expect("}")
        if self.peek()[1] == "(":
            self.next()
            args = [self.expression(0)]
            while self.peek()[1] == ",":
                self.next()
                args.append(self.expression(0))
            self.expect(")")
            if name in ELEMENTARY:
                if indices is not None or len(args) != 1:
                    raise ParseError("%s takes one plain argument" % name, pos)
                return Fun(name, args[0])
            d = indices if indices is not None else [0] * len(args)
            if len(d) != len(args):
                raise ParseError("derivative index arity mismatch for %r" % name, pos)
            return Op(name, args, d)
        if indices is not None:
            if name == "u":
                if len(indices) == 1:
                    return Jet(0, indices[0])
                if len(indices) == 2:
                    return Jet(indices[0], indices[1])
            raise ParseError("brace suffix on %r needs an argument list" % name, pos)
        if name in JET_TOKENS:
            return JET_TOKENS[name]
        if name in VARIABLES:
            return VARIABLES[name]
        if name in POTENTIALS:
            return POTENTIALS[name]
        if name in self.params:
            return Param(name)
        raise UnknownSymbolError("unknown symbol %r (declare it as a parameter?)" % name, pos)

    def integer(self):
        kind, val, pos = self.next()
        if kind != "num" or "." in val:
            raise ParseError("expected integer index", pos)
        return int(val)


def parse(text, params=()):
    """Parse an expression string; params declares bare parameter names."""
    for p in params:
        if p in RESERVED or p in ("IntA", "IntB"):
            raise ParseError("parameter name %r is reserved" % p)
    p = _Parser(tokenize(text), params)
    e = p.expression(0)
    kind, val, pos = p.peek()
    if kind != "end":
        raise ParseError("trailing input %r" % val, pos)
    return e


# ---------------------------------------------------------------------------
# printing

_ADD_PREC, _MUL_PREC, _POW_PREC, _ATOM_PREC = 10, 20, 30, 100


def to_str(e):
    """Deterministic infix form; parses back to the same normal form."""
    return _p(e)[0]


def _p(e):
    """Return (text, precedence of outermost operator)."""
    t = type(e)
    if t is Rat:
        q = e.q
        if q.denominator == 1:
            s = str(q.numerator)
        else:
            s = "%d/%d" % (q.numerator, q.denominator)
        return s, (_ATOM_PREC if q.denominator == 1 and q >= 0 else _MUL_PREC - 1)
    if t in (Var, Param, Pot):
        return e.name, _ATOM_PREC
    if t is Jet:
        if e.dt == 0:
            if e.dx == 0:
                return "u", _ATOM_PREC
            if e.dx <= 3:
                return "u_" + "x" * e.dx, _ATOM_PREC
            return "u{%d}" % e.dx, _ATOM_PREC
        if (e.dt, e.dx) == (1, 0):
            return "u_t", _ATOM_PREC
        return "u{%d,%d}" % (e.dt, e.dx), _ATOM_PREC
    if t is Fun:
        return "%s(%s)" % (e.name, _p(e.arg)[0]), _ATOM_PREC
    if t is Op:
        suffix = "" if not any(e.d) else "{%s}" % ",".join(str(k) for k in e.d)
        return "%s%s(%s)" % (e.name, suffix, ", ".join(_p(a)[0] for a in e.args)), _ATOM_PREC
    if t is Pow:
        b, bp = _p(e.base)
        x, xp = _p(e.exp)
        if bp < _POW_PREC or type(e.base) is Pow:
            b = "(" + b + ")"
        if xp < _ATOM_PREC:
            x = "(" + x + ")"
        return b + "^" + x, _POW_PREC
    if t is Add:
        parts = []
        for i, term in enumerate(e.terms):
            c, _ = _split_coeff(term)
            if i > 0 and c < 0:
                s, p = _p(_negate(term))
                parts.append(" - " + (("(" + s + ")") if p < _ADD_PREC else s))
            else:
                s, p = _p(term)
                sep = " + " if i > 0 else ""
                parts.append(sep + (("(" + s + ")") if p < _ADD_PREC else s))
        return "".join(parts), _ADD_PREC
    if t is Mul:
        c, monic = _split_coeff(e)
        if c < 0:
            s, p = _p(_with_coeff(-c, monic))
            if p < _MUL_PREC:
                s = "(" + s + ")"
            return "-" + s, 14  # unary minus binds between + and *
        parts = []
        for f in e.factors:
            s, p = _p(f)
            if p < _MUL_PREC:
                s = "(" + s + ")"
            parts.append(s)
        return "*".join(parts), _MUL_PREC
    raise TypeError("cannot print %r" % t)


def _negate(term):
    return normalize(Mul((Rat(-1), term)))


def parse_normal(text, params=()):
    return normalize(parse(text, params))
