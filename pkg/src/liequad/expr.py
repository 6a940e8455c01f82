"""Symbolic scalar expressions: parsing, printing, evaluation, derivatives, normal form.

Expressions are immutable trees. Exponents are exact ``Fraction`` values and
numeric constants are exact decimals, so identities built from fractional
powers reduce by integer arithmetic on exponents.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .sampling import halton

FUNCTIONS = ("sin", "cos", "tan", "exp", "log", "sqrt", "abs", "sign")
MAX_EXPAND = 8
TOL_ZERO = 1e-9


class ParseError(ValueError):
    def __init__(self, message: str, position: int):
        super().__init__(f"{message} at position {position}")
        self.position = position


class ExprDomainError(ArithmeticError):
    """Raised when an expression has no real value at a point."""


class IndeterminateError(RuntimeError):
    """Raised when a sampled test has no admissible sample."""


# ---------------------------------------------------------------------------
# nodes


class Expr:
    __slots__ = ("_hash",)

    def _key(self) -> tuple:
        raise NotImplementedError

    def __eq__(self, other):
        if self is other:
            return True
        if type(self) is not type(other) or hash(self) != hash(other):
            return False
        return self._key() == other._key()

    def __hash__(self):
        try:
            return self._hash
        except AttributeError:
            h = hash((type(self).__name__, self._key()))
            self._hash = h
            return h

    def __repr__(self):
        return f"{type(self).__name__}({to_str(self)!r})"

    def __str__(self):
        return to_str(self)

    # light-weight builders; no simplification is applied
    def __add__(self, other):
        return Add((self, as_expr(other)))

    def __radd__(self, other):
        return Add((as_expr(other), self))

    def __sub__(self, other):
        return Add((self, Neg(as_expr(other))))

    def __rsub__(self, other):
        return Add((as_expr(other), Neg(self)))

    def __mul__(self, other):
        return Mul((self, as_expr(other)))

    def __rmul__(self, other):
        return Mul((as_expr(other), self))

    def __truediv__(self, other):
        return Div(self, as_expr(other))

    def __rtruediv__(self, other):
        return Div(as_expr(other), self)

    def __neg__(self):
        return Neg(self)

    def __pow__(self, exponent):
        return Pow(self, exponent)


class Num(Expr):
    __slots__ = ("value",)

    def __init__(self, value):
        if isinstance(value, Fraction):
            v = value
        elif isinstance(value, bool):
            raise TypeError("boolean is not a number")
        elif isinstance(value, int):
            v = Fraction(value)
        elif isinstance(value, (float, np.floating)):
            if not math.isfinite(float(value)):
                raise ValueError("non-finite constant")
            v = Fraction(repr(float(value)))
        elif isinstance(value, str):
            v = Fraction(value)
        else:
            raise TypeError(f"cannot make a constant from {type(value).__name__}")
        self.value = v

    def _key(self):
        return (self.value,)


class Var(Expr):
    __slots__ = ("index", "name")

    def __init__(self, index: int, name: str | None = None):
        self.index = int(index)
        self.name = name if name is not None else f"x{self.index + 1}"

    def _key(self):
        return (self.index, self.name)


class Param(Expr):
    __slots__ = ("name", "value")

    def __init__(self, name: str, value: float):
        self.name = name
        self.value = float(value)

    def _key(self):
        return (self.name, self.value)


class Add(Expr):
    __slots__ = ("args",)

    def __init__(self, args: Sequence[Expr]):
        args = tuple(args)
        if len(args) < 2:
            raise ValueError("a sum needs at least two terms")
        self.args = args

    def _key(self):
        return self.args


class Mul(Expr):
    __slots__ = ("args",)

    def __init__(self, args: Sequence[Expr]):
        args = tuple(args)
        if len(args) < 2:
            raise ValueError("a product needs at least two factors")
        self.args = args

    def _key(self):
        return self.args


class Div(Expr):
    __slots__ = ("num", "den")

    def __init__(self, num: Expr, den: Expr):
        self.num = num
        self.den = den

    def _key(self):
        return (self.num, self.den)


class Pow(Expr):
    __slots__ = ("base", "exp")

    def __init__(self, base: Expr, exp):
        if isinstance(exp, float):
            raise TypeError("exponents must be exact rationals")
        self.base = base
        self.exp = Fraction(exp)

    def _key(self):
        return (self.base, self.exp)


class Neg(Expr):
    __slots__ = ("arg",)

    def __init__(self, arg: Expr):
        self.arg = arg

    def _key(self):
        return (self.arg,)


class Func(Expr):
    __slots__ = ("name", "arg")

    def __init__(self, name: str, arg: Expr):
        if name not in FUNCTIONS:
            raise ValueError(f"unknown function {name!r}")
        self.name = name
        self.arg = arg

    def _key(self):
        return (self.name, self.arg)


ZERO = Num(0)
ONE = Num(1)


def as_expr(value) -> Expr:
    if isinstance(value, Expr):
        return value
    return const(value)


def _is_decimal(q: Fraction) -> bool:
    d = q.denominator
    for p in (2, 5):
        while d % p == 0:
            d //= p
    return d == 1


def const(value) -> Expr:
    """Expression for a constant; non-decimal rationals become a quotient."""
    q = value.value if isinstance(value, Num) else Num(value).value
    if _is_decimal(q):
        return Num(q)
    return Div(Num(q.numerator), Num(q.denominator))


def children(e: Expr) -> tuple[Expr, ...]:
    if isinstance(e, (Add, Mul)):
        return e.args
    if isinstance(e, Div):
        return (e.num, e.den)
    if isinstance(e, Pow):
        return (e.base,)
    if isinstance(e, (Neg, Func)):
        return (e.arg,)
    return ()


def variables_of(e: Expr) -> set[int]:
    out: set[int] = set()
    stack = [e]
    seen = set()
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        if isinstance(node, Var):
            out.add(node.index)
        stack.extend(children(node))
    return out


# ---------------------------------------------------------------------------
# parsing

@dataclass(frozen=True)
class Context:
    """Declared variable names and bound parameter values."""

    variables: tuple[str, ...]
    parameters: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "variables", tuple(self.variables))
        object.__setattr__(self, "parameters", dict(self.parameters))
        names = list(self.variables) + list(self.parameters)
        if len(set(names)) != len(names):
            raise ValueError("variable and parameter names must be distinct")
        for name in names:
            if name in FUNCTIONS:
                raise ValueError(f"{name!r} is reserved")

    def var(self, name: str) -> Var:
        return Var(self.variables.index(name), name)

    def parse(self, text: str) -> Expr:
        return parse(text, self)


_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<id>[A-Za-z_][A-Za-z_0-9]*)|(?P<op>[-+*/^()]))"
)


def _tokenize(text: str) -> list[tuple[str, str, int]]:
    tokens = []
    pos = 0
    n = len(text)
    while pos < n:
        if text[pos:].strip() == "":
            break
        m = _TOKEN.match(text, pos)
        if m is None or m.end() == pos:
            start = pos + len(text[pos:]) - len(text[pos:].lstrip())
            raise ParseError(f"unexpected character {text[start]!r}", start)
        kind = m.lastgroup
        tokens.append((kind, m.group(kind), m.start(kind)))
        pos = m.end()
    tokens.append(("end", "", len(text)))
    return tokens


class _Parser:
    def __init__(self, text: str, context: Context):
        self.tokens = _tokenize(text)
        self.i = 0
        self.ctx = context

    def peek(self, offset=0):
        return self.tokens[min(self.i + offset, len(self.tokens) - 1)]

    def take(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, value):
        kind, text, pos = self.take()
        if text != value or kind == "end":
            raise ParseError(f"expected {value!r}, found {text or 'end of input'!r}", pos)

    def run(self) -> Expr:
        e = self.expr()
        kind, text, pos = self.peek()
        if kind != "end":
            raise ParseError(f"unexpected {text!r}", pos)
        return e

    def expr(self) -> Expr:
        terms = [self.term()]
        while self.peek()[0] == "op" and self.peek()[1] in "+-":
            op = self.take()[1]
            t = self.term()
            terms.append(t if op == "+" else Neg(t))
        return terms[0] if len(terms) == 1 else Add(tuple(terms))

    def term(self) -> Expr:
        node = self.factor()
        run = None
        while self.peek()[0] == "op" and self.peek()[1] in "*/":
            op = self.take()[1]
            f = self.factor()
            if op == "*":
                if run is None:
                    run = [node, f]
                else:
                    run.append(f)
            else:
                left = Mul(tuple(run)) if run else node
                run = None
                node = Div(left, f)
        if run:
            node = Mul(tuple(run))
        return node

    def factor(self) -> Expr:
        kind, text, pos = self.peek()
        if kind == "op" and text == "-":
            self.take()
            nk, ntext, _ = self.peek()
            after = self.peek(1)
            if nk == "num" and not (after[0] == "op" and after[1] == "^"):
                self.take()
                return Num(-Fraction(ntext))
            return Neg(self.factor())
        base = self.base()
        if self.peek()[0] == "op" and self.peek()[1] == "^":
            self.take()
            exp = self.exponent()
            node = Pow(base, exp)
            k2, t2, p2 = self.peek()
            if k2 == "op" and t2 == "^":
                raise ParseError("'^' is non-associative; use parentheses", p2)
            return node
        return base

    def _integer(self) -> int:
        sign = 1
        kind, text, pos = self.peek()
        if kind == "op" and text in "+-":
            self.take()
            sign = -1 if text == "-" else 1
            kind, text, pos = self.peek()
        if kind != "num" or not text.isdigit():
            raise ParseError("expected an integer exponent", pos)
        self.take()
        return sign * int(text)

    def exponent(self) -> Fraction:
        kind, text, pos = self.peek()
        if kind == "op" and text == "(":
            self.take()
            p = self._integer()
            kind, text, pos = self.peek()
            if text == ")":
                self.take()
                return Fraction(p)
            self.expect("/")
            kind, text, pos = self.peek()
            q = self._integer()
            if q <= 0:
                raise ParseError("exponent denominator must be positive", pos)
            self.expect(")")
            return Fraction(p, q)
        return Fraction(self._integer())

    def base(self) -> Expr:
        kind, text, pos = self.take()
        if kind == "num":
            return Num(Fraction(text))
        if kind == "id":
            if text in FUNCTIONS:
                self.expect("(")
                arg = self.expr()
                self.expect(")")
                return Func(text, arg)
            if text in self.ctx.variables:
                return Var(self.ctx.variables.index(text), text)
            if text in self.ctx.parameters:
                return Param(text, self.ctx.parameters[text])
            raise ParseError(f"unknown identifier {text!r}", pos)
        if kind == "op" and text == "(":
            e = self.expr()
            self.expect(")")
            return e
        raise ParseError(f"unexpected {text or 'end of input'!r}", pos)


def parse(text: str, context: Context | Sequence[str]) -> Expr:
    """Parse an expression string against declared variables and parameters."""
    if not isinstance(context, Context):
        context = Context(tuple(context))
    return _Parser(text, context).run()


# ---------------------------------------------------------------------------
# printing

def _num_str(q: Fraction) -> str:
    if q.denominator == 1:
        return str(q.numerator)
    if not _is_decimal(q):
        return f"({q.numerator}/{q.denominator})"
    d = q.denominator
    k = 0
    while (10**k) % d:
        k += 1
    digits = abs(q.numerator) * (10**k // d)
    s = str(digits).rjust(k + 1, "0")
    s = s[:-k] + "." + s[-k:]
    return ("-" if q < 0 else "") + s


def _exp_str(q: Fraction) -> str:
    if q.denominator == 1:
        return str(q.numerator)
    return f"({q.numerator}/{q.denominator})"


def to_str(e: Expr) -> str:
    if isinstance(e, Num):
        return _num_str(e.value)
    if isinstance(e, (Var, Param)):
        return e.name
    if isinstance(e, Add):
        parts = []
        for i, t in enumerate(e.args):
            if i > 0 and isinstance(t, Neg):
                parts.append(" - " + _term_str(t.arg))
            elif i == 0:
                parts.append(_term_str(t))
            else:
                parts.append(" + " + _term_str(t))
        return "".join(parts)
    if isinstance(e, Mul):
        out = []
        for i, a in enumerate(e.args):
            wrap = isinstance(a, (Add, Mul)) or (i > 0 and isinstance(a, Div))
            out.append(f"({to_str(a)})" if wrap else to_str(a))
        return "*".join(out)
    if isinstance(e, Div):
        n = f"({to_str(e.num)})" if isinstance(e.num, Add) else to_str(e.num)
        wrap = isinstance(e.den, (Add, Mul, Div))
        d = f"({to_str(e.den)})" if wrap else to_str(e.den)
        return f"{n}/{d}"
    if isinstance(e, Neg):
        a = e.arg
        if isinstance(a, (Add, Mul, Div, Num)):
            return f"-({to_str(a)})"
        return "-" + to_str(a)
    if isinstance(e, Pow):
        b = e.base
        atomic = isinstance(b, (Var, Param, Func)) or (isinstance(b, Num) and b.value >= 0
                                                      and b.value.denominator == 1)
        bs = to_str(b) if atomic else f"({to_str(b)})"
        return f"{bs}^{_exp_str(e.exp)}"
    if isinstance(e, Func):
        return f"{e.name}({to_str(e.arg)})"
    raise TypeError(type(e))


def _term_str(e: Expr) -> str:
    return f"({to_str(e)})" if isinstance(e, Add) else to_str(e)


# ---------------------------------------------------------------------------
# scalar evaluation

def _real_pow(b: float, q: Fraction) -> float:
    p, d = q.numerator, q.denominator
    if b == 0.0 and p < 0:
        raise ExprDomainError("division by zero in negative power")
    if d == 1:
        return b**p
    if b < 0:
        if d % 2 == 0:
            raise ExprDomainError(f"even root of negative base {b!r}")
        return (-1.0 if p % 2 else 1.0) * (-b) ** (p / d)
    return b ** (p / d)


def _apply(name: str, a: float) -> float:
    if name == "log":
        if a <= 0:
            raise ExprDomainError(f"log of non-positive value {a!r}")
        return math.log(a)
    if name == "sqrt":
        if a < 0:
            raise ExprDomainError(f"sqrt of negative value {a!r}")
        return math.sqrt(a)
    if name == "abs":
        return abs(a)
    if name == "sign":
        return float(np.sign(a))
    if name == "exp":
        try:
            return math.exp(a)
        except OverflowError:
            raise ExprDomainError("exp overflow") from None
    return getattr(math, name)(a)


def evaluate(e: Expr, point: Sequence[float]) -> float:
    """Value of ``e`` at a point; raises ExprDomainError outside the real domain."""
    point = [float(v) for v in point]

    def ev(node: Expr) -> float:
        if isinstance(node, Num):
            return float(node.value)
        if isinstance(node, Var):
            return point[node.index]
        if isinstance(node, Param):
            return node.value
        if isinstance(node, Add):
            return math.fsum(ev(a) for a in node.args)
        if isinstance(node, Mul):
            r = 1.0
            for a in node.args:
                r *= ev(a)
            return r
        if isinstance(node, Div):
            d = ev(node.den)
            if d == 0.0:
                raise ExprDomainError("division by zero")
            return ev(node.num) / d
        if isinstance(node, Pow):
            return _real_pow(ev(node.base), node.exp)
        if isinstance(node, Neg):
            return -ev(node.arg)
        if isinstance(node, Func):
            return _apply(node.name, ev(node.arg))
        raise TypeError(type(node))

    value = ev(e)
    if not math.isfinite(value):
        raise ExprDomainError("non-finite value")
    return value


# ---------------------------------------------------------------------------
# vectorized evaluation by code generation

def _opow(b, p, q):
    return np.sign(b) ** (p % 2) * np.abs(b) ** (p / q)


def _ipow(b, p):
    return np.asarray(b, dtype=float) ** p


_NP_FUNCS = {"sin": "np.sin", "cos": "np.cos", "tan": "np.tan", "exp": "np.exp",
             "log": "np.log", "sqrt": "np.sqrt", "abs": "np.abs", "sign": "np.sign"}


@lru_cache(maxsize=4096)
def compile_exprs(exprs: tuple[Expr, ...]) -> Callable[[np.ndarray], np.ndarray]:
    """Compile expressions into ``f(points (m, n)) -> values (m, k)``.

    Points where an expression has no real value yield NaN or inf; callers
    decide how to treat them. Shared subtrees are computed once.
    """
    names: dict[Expr, str] = {}
    lines: list[str] = []

    def emit(node: Expr) -> str:
        got = names.get(node)
        if got is not None:
            return got
        if isinstance(node, Num):
            code = f"np.float64({float(node.value)!r})"
        elif isinstance(node, Var):
            code = f"x[:, {node.index}]"
        elif isinstance(node, Param):
            code = f"np.float64({node.value!r})"
        elif isinstance(node, Add):
            code = " + ".join(emit(a) for a in node.args)
        elif isinstance(node, Mul):
            code = " * ".join(emit(a) for a in node.args)
        elif isinstance(node, Div):
            code = f"{emit(node.num)} / {emit(node.den)}"
        elif isinstance(node, Pow):
            b = emit(node.base)
            p, q = node.exp.numerator, node.exp.denominator
            if q == 1:
                code = f"_ipow({b}, {p})"
            elif q % 2:
                code = f"_opow({b}, {p}, {q})"
            else:
                code = f"np.power({b}, {p / q!r})"
        elif isinstance(node, Neg):
            code = f"-{emit(node.arg)}"
        elif isinstance(node, Func):
            code = f"{_NP_FUNCS[node.name]}({emit(node.arg)})"
        else:
            raise TypeError(type(node))
        name = f"t{len(names)}"
        names[node] = name
        lines.append(f"    {name} = {code}")
        return name

    outs = [emit(e) for e in exprs]
    body = "\n".join(lines) if lines else "    pass"
    packed = "(" + ", ".join(outs) + ",)" if outs else "()"
    src = (
        "def _f(x):\n"
        f"{body}\n"
        "    m = x.shape[0]\n"
        f"    cols = [np.broadcast_to(v, (m,)).astype(float) for v in {packed}]\n"
        "    return np.stack(cols, axis=1) if cols else np.zeros((m, 0))\n"
    )
    scope = {"np": np, "_opow": _opow, "_ipow": _ipow}
    exec(compile(src, "<liequad-expr>", "exec"), scope)
    raw = scope["_f"]

    def run(points: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(points, dtype=float))
        with np.errstate(all="ignore"):
            return raw(x)

    return run


def evaluate_many(e: Expr | Sequence[Expr], points: np.ndarray, check: bool = True) -> np.ndarray:
    """Vectorized values at ``points``; shape (m,) for one expression or (m, k)."""
    single = isinstance(e, Expr)
    exprs = (e,) if single else tuple(e)
    vals = compile_exprs(exprs)(points)
    if check and not np.all(np.isfinite(vals)):
        bad = np.argwhere(~np.isfinite(vals))[0]
        raise ExprDomainError(
            f"no real value for expression {bad[1]} at point {np.atleast_2d(points)[bad[0]].tolist()}")
    return vals[:, 0] if single else vals


# ---------------------------------------------------------------------------
# differentiation

def _add(terms: Iterable[Expr]) -> Expr:
    terms = [t for t in terms if not (isinstance(t, Num) and t.value == 0)]
    if not terms:
        return ZERO
    return terms[0] if len(terms) == 1 else Add(tuple(terms))


def _mul(factors: Iterable[Expr]) -> Expr:
    out = []
    for f in factors:
        if isinstance(f, Num):
            if f.value == 0:
                return ZERO
            if f.value == 1:
                continue
        out.append(f)
    if not out:
        return ONE
    return out[0] if len(out) == 1 else Mul(tuple(out))


def _neg(e: Expr) -> Expr:
    if isinstance(e, Num):
        return Num(-e.value)
    return Neg(e)


def _raw_diff(e: Expr, i: int, memo: dict) -> Expr:
    got = memo.get(e)
    if got is not None:
        return got
    if isinstance(e, (Num, Param)):
        d = ZERO
    elif isinstance(e, Var):
        d = ONE if e.index == i else ZERO
    elif isinstance(e, Add):
        d = _add(_raw_diff(a, i, memo) for a in e.args)
    elif isinstance(e, Mul):
        terms = []
        for j, a in enumerate(e.args):
            da = _raw_diff(a, i, memo)
            if isinstance(da, Num) and da.value == 0:
                continue
            terms.append(_mul(list(e.args[:j]) + [da] + list(e.args[j + 1:])))
        d = _add(terms)
    elif isinstance(e, Div):
        dn = _raw_diff(e.num, i, memo)
        dd = _raw_diff(e.den, i, memo)
        first = _mul([dn, Pow(e.den, -1)])
        second = _neg(_mul([e.num, dd, Pow(e.den, -2)]))
        d = _add([first, second])
    elif isinstance(e, Pow):
        db = _raw_diff(e.base, i, memo)
        if isinstance(db, Num) and db.value == 0:
            d = ZERO
        else:
            d = _mul([const(e.exp), Pow(e.base, e.exp - 1), db])
    elif isinstance(e, Neg):
        d = _neg(_raw_diff(e.arg, i, memo))
    elif isinstance(e, Func):
        a = e.arg
        da = _raw_diff(a, i, memo)
        if isinstance(da, Num) and da.value == 0:
            d = ZERO
        else:
            outer = {
                "sin": lambda: Func("cos", a),
                "cos": lambda: Neg(Func("sin", a)),
                "tan": lambda: Add((ONE, Pow(Func("tan", a), 2))),
                "exp": lambda: e,
                "log": lambda: Pow(a, -1),
                "sqrt": lambda: Mul((Num(Fraction(1, 2)), Pow(a, Fraction(-1, 2)))),
                "abs": lambda: Func("sign", a),
                "sign": lambda: ZERO,
            }[e.name]()
            d = _mul([outer, da])
    else:
        raise TypeError(type(e))
    memo[e] = d
    return d


def diff(e: Expr, i: int, simplified: bool = True) -> Expr:
    """Exact partial derivative with respect to variable ``i``."""
    d = _raw_diff(e, i, {})
    return simplify(d) if simplified else d


# ---------------------------------------------------------------------------
# normal form
#
# A polynomial is a dict {monomial: Fraction}; a monomial is a sorted tuple of
# (atom, exponent) pairs. Atoms are variables, parameters and opaque nodes
# (function applications, sums that stay unexpanded).

def _atom_key(atom: Expr):
    if isinstance(atom, Var):
        return (0, atom.index, "")
    if isinstance(atom, Param):
        return (1, 0, atom.name)
    return (2, 0, to_str(atom))


_KEYS: dict[Expr, tuple] = {}


def _key_of(atom: Expr):
    k = _KEYS.get(atom)
    if k is None:
        k = _atom_key(atom)
        if len(_KEYS) < 200000:
            _KEYS[atom] = k
    return k


def _mono_mul(m1: tuple, m2: tuple) -> tuple:
    if not m1:
        return m2
    if not m2:
        return m1
    acc: dict = dict(m1)
    order = {a: _key_of(a) for a, _ in m1}
    for a, e in m2:
        if a in acc:
            s = acc[a] + e
            if s:
                acc[a] = s
            else:
                del acc[a]
        else:
            acc[a] = e
            order[a] = _key_of(a)
    return tuple(sorted(acc.items(), key=lambda kv: order[kv[0]]))


def _padd_into(acc: dict, p: dict, scale: Fraction = Fraction(1)):
    for m, c in p.items():
        s = acc.get(m, 0) + c * scale
        if s:
            acc[m] = s
        else:
            acc.pop(m, None)


def _expandable(m: tuple) -> bool:
    return any(isinstance(a, Add) and e.denominator == 1 and 0 < e <= MAX_EXPAND for a, e in m)


def _pmul(a: dict, b: dict) -> dict:
    if len(a) > len(b):
        a, b = b, a
    out: dict = {}
    for m1, c1 in a.items():
        for m2, c2 in b.items():
            m = _mono_mul(m1, m2)
            c = c1 * c2
            if _expandable(m):
                rest = tuple((x, e) for x, e in m if not (isinstance(x, Add) and e.denominator == 1 and e > 0))
                poly = {rest: c}
                for x, e in m:
                    if isinstance(x, Add) and e.denominator == 1 and e > 0:
                        poly = _pmul(poly, _ppow_int(_poly(x), int(e)))
                _padd_into(out, poly)
            else:
                s = out.get(m, 0) + c
                if s:
                    out[m] = s
                else:
                    out.pop(m, None)
    return out


def _ppow_int(p: dict, k: int) -> dict:
    result: dict = {(): Fraction(1)}
    base = p
    while k:
        if k & 1:
            result = _pmul(result, base)
        k >>= 1
        if k:
            base = _pmul(base, base)
    return result


def _atom(atom: Expr, exp: Fraction = Fraction(1), coeff: Fraction = Fraction(1)) -> dict:
    return {((atom, Fraction(exp)),): coeff}


def _iroot(n: int, k: int) -> int | None:
    if n < 0:
        return None
    r = int(round(n ** (1.0 / k))) if n else 0
    for cand in (r - 1, r, r + 1):
        if cand >= 0 and cand**k == n:
            return cand
    return None


def _const_pow(c: Fraction, q: Fraction) -> Fraction | None:
    """c**q as an exact or rounded rational; None if there is no real value."""
    if q.denominator == 1:
        if c == 0 and q < 0:
            return None
        return c ** q.numerator
    if c < 0 and q.denominator % 2 == 0:
        return None
    if c == 0:
        return Fraction(0) if q > 0 else None
    sign = -1 if (c < 0 and q.numerator % 2) else 1
    a = abs(c)
    rn, rd = _iroot(a.numerator, q.denominator), _iroot(a.denominator, q.denominator)
    if rn is not None and rd is not None:
        return sign * Fraction(rn, rd) ** q.numerator
    return sign * Fraction(repr(float(a) ** float(q)))


def _normalized(p: dict) -> tuple[Fraction, Expr]:
    """Split a multi-term polynomial as c * S with S's leading coefficient ±1 and c > 0."""
    first = min(p, key=_mono_sort_key)
    c = abs(p[first])
    s = {m: v / c for m, v in p.items()}
    return c, _from_poly(s)


def _pow_valid(e: Fraction, q: Fraction) -> bool:
    # (a^e)^q == a^(e*q) wherever the left side is real
    return q.denominator % 2 == 1 or e.numerator % 2 == 1 or e.denominator % 2 == 0


@lru_cache(maxsize=65536)
def _poly_cached(e: Expr):
    return tuple(_poly_build(e).items())


def _poly(e: Expr) -> dict:
    return dict(_poly_cached(e))


def _poly_build(e: Expr) -> dict:
    if isinstance(e, Num):
        return {(): e.value} if e.value else {}
    if isinstance(e, (Var, Param)):
        return _atom(e)
    if isinstance(e, Add):
        acc: dict = {}
        for a in e.args:
            _padd_into(acc, _poly(a))
        return acc
    if isinstance(e, Neg):
        return {m: -c for m, c in _poly(e.arg).items()}
    if isinstance(e, Mul):
        acc = {(): Fraction(1)}
        for a in e.args:
            pa = _poly(a)
            if not pa:
                return {}
            acc = _pmul(acc, pa)
        return acc
    if isinstance(e, Div):
        return _poly_div(e)
    if isinstance(e, Pow):
        return _poly_pow(_poly(e.base), e.exp)
    if isinstance(e, Func):
        return _poly_func(e)
    raise TypeError(type(e))


def _factor_list(e: Expr) -> list[tuple[Expr, Fraction]]:
    parts = e.args if isinstance(e, Mul) else (e,)
    out = []
    for f in parts:
        if isinstance(f, Pow):
            out.append((f.base, f.exp))
        else:
            out.append((f, Fraction(1)))
    return out


def _poly_div(e: Div) -> dict:
    # cancel structurally identical bases first: b^a / b^d -> b^(a-d)
    nf = _factor_list(e.num)
    df = _factor_list(e.den)
    changed = False
    for j, (base, d) in enumerate(df):
        for i, (nb, a) in enumerate(nf):
            if nb == base and a > 0 and d > 0:
                common = min(a, d)
                nf[i] = (nb, a - common)
                df[j] = (base, d - common)
                changed = True
                break
    if changed:
        num = _mul(b if x == 1 else Pow(b, x) for b, x in nf if x != 0)
        rest = [(b, x) for b, x in df if x != 0]
        if not rest:
            return _poly(num)
        return _poly_div(Div(num, _mul(b if x == 1 else Pow(b, x) for b, x in rest)))
    pn = _poly(e.num)
    pd = _poly(e.den)
    if not pd:
        return _atom(Div(simplify(e.num), ZERO))
    if not pn:
        return {}
    return _pmul(pn, _pinverse(pd))


def _pinverse(pd: dict) -> dict:
    if len(pd) == 1:
        (m, c), = pd.items()
        ok = all(_pow_valid(x, Fraction(-1)) for _, x in m)
        if ok:
            return {tuple((a, -x) for a, x in m): 1 / c}
    c, s = _normalized(pd)
    return _atom(s, Fraction(-1), 1 / c)


def _poly_pow(pb: dict, q: Fraction) -> dict:
    if q == 0:
        return {(): Fraction(1)}
    if not pb:
        if q > 0:
            return {}
        return _atom(Pow(ZERO, q))
    if q.denominator == 1 and q > 0:
        if len(pb) == 1 or q <= MAX_EXPAND:
            return _ppow_int(pb, int(q))
    if len(pb) == 1:
        (m, c), = pb.items()
        cq = _const_pow(c, q)
        if cq is not None:
            if q.denominator % 2 == 1 and all(_pow_valid(x, q) for _, x in m):
                return {tuple((a, x * q) for a, x in m if x * q): cq}
            if len(m) == 1 and c > 0 and _pow_valid(m[0][1], q):
                a, x = m[0]
                return {((a, x * q),): cq}
        if len(m) == 0:
            return _atom(Pow(const(c), q))
        return _atom(_from_poly(pb), q)
    c, s = _normalized(pb)
    return _atom(s, q, _const_pow(c, q))


_EXACT = {
    ("sin", 0): Fraction(0), ("tan", 0): Fraction(0), ("cos", 0): Fraction(1),
    ("exp", 0): Fraction(1), ("log", 1): Fraction(0),
}


def _poly_func(e: Func) -> dict:
    if e.name == "sqrt":
        return _poly_pow(_poly(e.arg), Fraction(1, 2))
    arg = simplify(e.arg)
    if isinstance(arg, Num):
        v = arg.value
        if (e.name, v) in _EXACT:
            r = _EXACT[(e.name, v)]
            return {(): r} if r else {}
        if e.name == "abs":
            return {(): abs(v)} if v else {}
        if e.name == "sign":
            return {(): Fraction(int(np.sign(float(v))))} if v else {}
        try:
            val = _apply(e.name, float(v))
        except (ExprDomainError, ValueError, OverflowError):
            return _atom(Func(e.name, arg))
        if math.isfinite(val):
            r = Fraction(repr(val))
            return {(): r} if r else {}
    if e.name in ("abs", "sign"):
        pa = _poly(arg)
        if len(pa) == 1:
            (m, c), = pa.items()
            if m and c < 0:
                neg = _from_poly({m: -c})
                inner = Func(e.name, neg)
                return _atom(inner, Fraction(1), Fraction(1 if e.name == "abs" else -1))
    return _atom(Func(e.name, arg))


def _mono_sort_key(m: tuple):
    return (sum(abs(x) for _, x in m), tuple((_key_of(a), -x) for a, x in m))


def _from_poly(p: dict) -> Expr:
    if not p:
        return ZERO
    terms = []
    for m in sorted(p, key=_mono_sort_key):
        c = p[m]
        factors = [a if x == 1 else Pow(a, x) for a, x in m]
        first = not terms
        if not factors:
            terms.append(const(c) if (first or c > 0) else Neg(const(-c)))
            continue
        # the first term carries its sign in the coefficient, later ones as a negation
        mag = c if (first or c > 0) else -c
        if mag == 1:
            body = factors[0] if len(factors) == 1 else Mul(tuple(factors))
        elif mag == -1:
            body = Neg(factors[0] if len(factors) == 1 else Mul(tuple(factors)))
        else:
            body = Mul((const(mag), *factors))
        terms.append(body if mag == c else Neg(body))
    return terms[0] if len(terms) == 1 else Add(tuple(terms))


@lru_cache(maxsize=65536)
def simplify(e: Expr) -> Expr:
    """Deterministic normal form: expanded sum of monomials in exact arithmetic."""
    return _from_poly(_poly(e))


def terms_of(e: Expr) -> tuple[Expr, ...]:
    return e.args if isinstance(e, Add) else (e,)


def is_zero_expr(e: Expr) -> bool:
    return isinstance(e, Num) and e.value == 0


def substitute(e: Expr, mapping: Mapping[int, Expr]) -> Expr:
    """Replace variables by expressions (no simplification)."""
    memo: dict = {}

    def sub(node: Expr) -> Expr:
        got = memo.get(node)
        if got is not None:
            return got
        if isinstance(node, Var):
            r = mapping.get(node.index, node)
        elif isinstance(node, (Num, Param)):
            r = node
        elif isinstance(node, Add):
            r = Add(tuple(sub(a) for a in node.args))
        elif isinstance(node, Mul):
            r = Mul(tuple(sub(a) for a in node.args))
        elif isinstance(node, Div):
            r = Div(sub(node.num), sub(node.den))
        elif isinstance(node, Pow):
            r = Pow(sub(node.base), node.exp)
        elif isinstance(node, Neg):
            r = Neg(sub(node.arg))
        elif isinstance(node, Func):
            r = Func(node.name, sub(node.arg))
        else:
            raise TypeError(type(node))
        memo[node] = r
        return r

    return sub(e)


# ---------------------------------------------------------------------------
# zero test

@dataclass(frozen=True)
class ZeroTest:
    """Outcome of a zero test; truthy when the expression vanishes."""

    zero: bool
    method: str
    witness: tuple[float, ...] | None = None
    value: float = 0.0
    scale: float = 1.0
    samples_used: int = 0

    def __bool__(self):
        return self.zero


def is_zero_on(e: Expr, box, samples: int = 64, seed: int = 0, tol: float = TOL_ZERO) -> ZeroTest:
    """Semi-decision zero test: symbolic normal form, then quasi-random sampling."""
    s = simplify(e)
    if is_zero_expr(s):
        return ZeroTest(True, "symbolic")
    pts = halton(box, samples, seed)
    terms = terms_of(s)
    vals = compile_exprs((s,) + terms)(pts)
    ok = np.all(np.isfinite(vals), axis=1)
    if not ok.any():
        raise IndeterminateError("every sample point is outside the expression's domain")
    vals = vals[ok]
    pts = pts[ok]
    scale = 1.0 + float(np.max(np.abs(vals[:, 1:])))
    bad = np.abs(vals[:, 0]) > tol * scale
    if bad.any():
        j = int(np.argmax(bad))
        return ZeroTest(False, "sampled", tuple(float(v) for v in pts[j]), float(vals[j, 0]),
                        scale, int(ok.sum()))
    return ZeroTest(True, "sampled", None, float(np.max(np.abs(vals[:, 0]))), scale, int(ok.sum()))
