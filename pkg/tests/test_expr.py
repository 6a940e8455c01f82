import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from liequad.expr import (Context, ExprDomainError, ParseError, compile_exprs, diff, evaluate, is_zero_expr,
                          is_zero_on, parse, simplify, substitute, to_str)
from liequad.systems import load_system
from liequad.vfield import lie_bracket

XY = Context(("x", "y"), {})


def same(a, b, pts):
    fa, fb = compile_exprs((a,)), compile_exprs((b,))
    return np.allclose(fa(pts), fb(pts), rtol=1e-12, atol=1e-12)


PTS = np.array([[0.3, 0.7], [1.2, 1.9], [-0.4, 0.6], [0.9, 1.1]])


def test_parse_precedence():
    assert evaluate(parse("2 + 3*4", XY), (0, 0)) == 14
    assert evaluate(parse("2^(9)", XY), (0, 0)) == 512
    assert evaluate(parse("x^(-3/2)", XY), (4.0, 0)) == 0.125
    with pytest.raises(ParseError):
        parse("2^3^2", XY)
    assert evaluate(parse("-2^2", XY), (0, 0)) == -4
    assert evaluate(parse("(1 + x)/(2*y)", XY), (1.0, 2.0)) == 0.5


def test_parse_error_position():
    with pytest.raises(ParseError) as exc:
        parse("x + * y", XY)
    assert exc.value.position == 4
    with pytest.raises(ParseError):
        parse("z + 1", XY)
    with pytest.raises(ParseError):
        parse("foo(x)", XY)


def test_parameters_are_symbolic_and_bound():
    ctx = Context(("x",), {"k": 2.0})
    e = parse("k*x^2", ctx)
    assert "k" in to_str(e)
    assert evaluate(e, (3.0,)) == 18.0


def test_diff_examples():
    e = parse("6*x/y^(2/3)", XY)
    assert same(diff(e, 0), parse("6/y^(2/3)", XY), PTS)
    e = parse("sin(x)*x", XY)
    assert same(diff(e, 0), parse("cos(x)*x + sin(x)", XY), PTS)


def test_simplify_examples():
    assert to_str(simplify(parse("x + 0*y", XY))) == "x"
    lhs = simplify(parse("y^(1/3)*y^(-2/3)", XY))
    assert is_zero_expr(simplify(parse(f"({to_str(lhs)}) - y^(-1/3)", XY)))


def test_superintegrable_x2_x3_bracket_vanishes_symbolically():
    s = load_system("superintegrable")
    br = lie_bracket(s.frame.fields[1], s.frame.fields[2])
    assert is_zero_expr(simplify(br.components[0]))


def test_zero_test_examples():
    assert is_zero_on(parse("x - x", XY), [(0, 1), (0, 1)]).method == "symbolic"
    zt = is_zero_on(parse("x*y - 1", XY), [(0, 2), (0, 2)])
    assert not zt and zt.witness is not None
    x, y = zt.witness
    assert abs(x * y - 1) > 1e-6


def test_zero_test_on_gamma_brackets():
    s = load_system("superintegrable")
    br = lie_bracket(s.frame.fields[0], s.frame.fields[1])
    assert all(is_zero_on(c, s.domain.box) for c in br.components)


def test_trig_identity_needs_sampling():
    zt = is_zero_on(parse("sin(x)^2 + cos(x)^2 - 1", XY), [(-1, 1), (-1, 1)])
    assert zt


def test_domain_errors():
    f = compile_exprs((parse("log(x)", XY),))
    vals = f(np.array([[-1.0, 0.0], [1.0, 0.0]]))
    assert math.isnan(vals[0, 0]) and vals[1, 0] == 0.0
    with pytest.raises(ExprDomainError):
        evaluate(parse("1/x", XY), (0.0, 1.0))


def test_substitute():
    e = substitute(parse("x*y", XY), {1: parse("x + 1", XY)})
    assert evaluate(e, (2.0, 99.0)) == 6.0


_polys = st.lists(st.tuples(st.integers(-3, 3), st.integers(0, 3), st.integers(0, 3)), min_size=1, max_size=5)


def _poly_text(terms):
    return " + ".join(f"({c})*x^{a}*y^{b}" for c, a, b in terms)


@settings(max_examples=60, deadline=None)
@given(_polys, st.floats(0.1, 2.0), st.floats(0.1, 2.0))
def test_diff_matches_central_difference(terms, x, y):
    e = parse(_poly_text(terms), XY)
    d = evaluate(diff(e, 0), (x, y))
    h = 1e-5
    fd = (evaluate(e, (x + h, y)) - evaluate(e, (x - h, y))) / (2 * h)
    assert abs(d - fd) <= 1e-5 * (1 + abs(d))


@settings(max_examples=60, deadline=None)
@given(_polys)
def test_simplify_preserves_value(terms):
    e = parse(_poly_text(terms), XY)
    assert same(e, simplify(e), PTS)
