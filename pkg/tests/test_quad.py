import math

import numpy as np
import pytest

from helpers import field_from
from liequad.distrib import dist_series
from liequad.expr import Context, parse
from liequad.liealg import Subspace, gamma_series, structure_constants
from liequad.quad import (ChartError, LeafPath, LeafPathError, OneForm, PolylinePath, StraightPath,
                          adaptive_gauss_legendre, analytic_flow, annihilator_basis, build_chart, chart_flow,
                          closedness_check, compare_flow, invert_chart, leaf_path, one_form, path_integral,
                          rk_oracle)
from liequad.systems import load_system
from liequad.vfield import Domain, canonical_frame

C2 = Context(("x1", "x2"), {})
BOX2 = Domain(((-1.0, 1.0),) * 2, (0.1, 0.2))
BOX3 = Domain(((-1.0, 1.0),) * 3, (0.1, 0.2, 0.3))


def chart_for(name):
    s = load_system(name)
    return s, build_chart(dist_series("dist_gamma", s.frame, s.gamma_index), s)


def test_gauss_legendre_batch():
    def fun(ids, s):
        k = ids + 1.0
        return np.column_stack([np.exp(k * s), np.cos(k * s)])

    out = adaptive_gauss_legendre(fun, 3, 2, 1e-12)
    k = np.arange(1, 4)
    assert np.allclose(out[:, 0], (np.exp(k) - 1) / k, atol=1e-11)
    assert np.allclose(out[:, 1], np.sin(k) / k, atol=1e-11)


def test_annihilator_examples():
    full = Subspace.full(4)
    assert annihilator_basis(full, full) == []
    cov = annihilator_basis(Subspace.axes([0, 1], 4), full)
    assert len(cov) == 2
    R = np.array([c.row for c in cov])
    assert np.allclose(R[:, :2], 0) and np.linalg.matrix_rank(R[:, 2:]) == 2
    assert len(annihilator_basis(Subspace.zero(3), Subspace.axes([0, 2], 3))) == 2
    with pytest.raises(ValueError):
        annihilator_basis(Subspace.axes([1], 3), Subspace.axes([0], 3))


def test_superintegrable_planned_covectors():
    s = load_system("superintegrable")
    tr = gamma_series(structure_constants(s.frame), 0)
    chain = tr.chain_to_zero()
    assert [len(annihilator_basis(b, a)) for a, b in zip(chain, chain[1:])] == [2, 2]
    with pytest.raises(ChartError):
        build_chart(tr, s)


def test_one_form_examples():
    F = canonical_frame(BOX3)
    alpha = one_form(np.array([0.0, 1.0, 0.0]), F)
    assert np.allclose(alpha.rows(np.array([[0.3, 0.1, -0.2]])), [[0, 1, 0]])
    s = load_system("scaled_line_rational")
    alpha = one_form(np.array([1.0, 0.0, 0.0]), s.frame)
    P = np.array([[0.5, 0.1, 0.2], [-0.3, 0.0, 0.4]])
    assert np.allclose(alpha.rows(P), np.column_stack([1 / (1 + P[:, 0] ** 2), 0 * P[:, :2]]))


def test_closedness_examples():
    F = canonical_frame(BOX2)
    exact = OneForm.from_exprs([parse("x2", C2), parse("x1", C2)])
    assert closedness_check(exact, F.fields, BOX2)
    bad = closedness_check(OneForm.from_exprs([parse("x2", C2), parse("0", C2)]), F.fields, BOX2)
    assert not bad and bad.max_residual == pytest.approx(1.0, rel=1e-6)
    s = load_system("affine")
    for z in annihilator_basis(Subspace.axes([0], 2), Subspace.full(2)):
        assert closedness_check(one_form(z, s.frame), s.frame.fields, s.domain)


def test_path_integral_examples():
    dx1 = OneForm.from_exprs([parse("1", C2), parse("0", C2)])
    assert path_integral(dx1, StraightPath(np.array([0.1, 0.2]), np.array([0.8, 0.2]))) == pytest.approx(0.7)
    log_form = OneForm.from_exprs([parse("1/x1", C2), parse("0", C2)])
    val = path_integral(log_form, StraightPath(np.array([1.0, 0.0]), np.array([math.e, 0.0])))
    assert abs(val - 1.0) < 1e-10
    s = load_system("scaled_line_rational")
    alpha = one_form(np.array([1.0, 0.0, 0.0]), s.frame)
    x0, x = np.asarray(s.domain.x0), np.array([0.9, 0.2, 0.3])
    val = path_integral(alpha, StraightPath(x0, x))
    assert abs(val - (math.atan(0.9) - math.atan(0.1))) < 1e-10
    poly = PolylinePath(np.array([x0, [0.5, -0.5, 0.0], x]))
    assert abs(path_integral(alpha, poly) - val) < 1e-10


def test_leaf_path_examples():
    a, b = np.array([0.1, 0.2, 0.3]), np.array([0.1, -0.4, 0.5])
    assert isinstance(leaf_path(a, b), StraightPath)

    def pin(P):
        return P[:, :1]

    def pin_jac(P):
        J = np.zeros((len(P), 1, 3))
        J[:, 0, 0] = 1
        return J

    lp = leaf_path(a, b, pin, pin_jac, [0.1], [0])
    pts = lp.point(np.linspace(0, 1, 5))
    assert np.allclose(pts[:, 0], 0.1)
    assert np.allclose(pts, StraightPath(a, b).point(np.linspace(0, 1, 5)))


def test_leaf_path_projects_onto_curved_leaf():
    def g(P):
        return (P[:, 0] + P[:, 1] ** 2)[:, None]

    def g_jac(P):
        return np.stack([np.ones(len(P)), 2 * P[:, 1]], axis=1)[:, None, :]

    c = 0.3
    start, end = np.array([c - 0.04, 0.2]), np.array([c - 0.49, 0.7])
    lp = LeafPath(start, end, g, g_jac, [c], [0])
    s = np.linspace(0, 1, 9)
    P = lp.point(s)
    assert lp.max_residual < 1e-9
    assert np.allclose(P[:, 1], 0.2 + 0.5 * s) and np.allclose(P[:, 0], c - P[:, 1] ** 2, atol=1e-9)
    # integral of dx1 along the leaf equals the difference of the end values
    dx1 = OneForm(lambda Q: np.tile([1.0, 0.0], (len(Q), 1)), 2)
    assert abs(path_integral(dx1, lp) - (end[0] - start[0])) < 1e-10
    with pytest.raises(LeafPathError):
        LeafPath(start, np.array([0.0, 0.0]), g, g_jac, [c], [0])


def test_canonical_chart():
    F = canonical_frame(BOX3)
    chart = build_chart(dist_series("dist_gamma", F, 0), F, 0)
    assert chart.quadrature_count == 1
    assert np.allclose(chart.xi_gamma, [1, 0, 0])
    X = np.array([[0.5, -0.2, 0.7], [0.0, 0.0, 0.0]])
    assert np.allclose(chart.Q(X), X - np.asarray(BOX3.x0))


def test_triangular_chain_chart_routes_agree():
    s, chart = chart_for("triangular_chain")
    assert chart.block_dims == (1, 1, 1)
    assert np.allclose(chart.Q(np.asarray(s.domain.x0)[None, :]), 0, atol=1e-14)
    X = np.array([[0.4, -0.3, 0.2], [-0.5, 0.5, -0.6]])
    q = chart.Q(X)
    for x, qx in zip(X, q):
        assert np.abs(chart.Q_by_leaf_paths(x) - qx).max() < 1e-9
    assert np.abs(chart.Q_by_detour(X, np.array([[0.0, 0.6, 0.0], [0.3, -0.2, 0.5]])) - q).max() < 1e-9
    d = chart.diagnostics(16)
    assert d["quadratures"] == 3 and d["closed"] and d["gamma_constancy"] < 1e-9


def test_invert_chart_round_trip():
    s, chart = chart_for("scaled_line_periodic")
    X = np.array([[0.9, 0.5, -0.3], [-0.6, -0.8, 0.7]])
    guesses = np.tile(np.asarray(s.domain.x0), (2, 1))
    inv = invert_chart(chart, chart.Q(X), guesses)
    assert inv.converged.all() and np.allclose(inv.points, X, atol=1e-10)


def test_flow_examples():
    times = np.linspace(0, 0.5, 6)
    F = canonical_frame(BOX3)
    chart = build_chart(dist_series("dist_gamma", F, 0), F, 0)
    x = np.array([0.1, 0.2, 0.3])
    flow = chart_flow(chart, x, times)
    assert np.allclose(flow.points, x + times[:, None] * [1, 0, 0], atol=1e-12)
    s, chart = chart_for("linear")
    x = np.asarray(s.domain.x0)
    flow = chart_flow(chart, x, times)
    exact = analytic_flow(lambda t: np.array([x[0] * math.exp(t), x[1]]), x, times)
    assert compare_flow(flow, exact, 1e-8)
    assert compare_flow(flow, rk_oracle(s.gamma, x, times, s.domain), 1e-8)


def test_flow_needs_gamma_chart():
    F = canonical_frame(BOX3)
    chart = build_chart(dist_series("dist_derived", F), F, 0)
    with pytest.raises(ValueError):
        chart_flow(chart, np.asarray(BOX3.x0), [0, 0.1])


def test_flow_reports_domain_exit():
    s, chart = chart_for("linear")
    flow = chart_flow(chart, np.array([2.5, 0.0]), np.linspace(0, 1, 5))
    assert flow.truncated and not flow.converged[-1]


def test_rk_oracle_examples():
    gx = field_from(["x1"], Context(("x1",), {}), "G")
    r = rk_oracle(gx, [1.0], [0.0, 1.0])
    assert abs(r.points[-1, 0] - math.e) < 1e-8
    rot = field_from(["x2", "-x1"], C2, "R")
    r = rk_oracle(rot, [1.0, 0.0], [0.0, math.pi])
    assert np.allclose(r.points[-1], [-1.0, 0.0], atol=1e-8)
    r = rk_oracle(rot, [0.9, 0.5], np.linspace(0, 3, 7), BOX2)
    assert r.truncated and r.exited.any()


def test_compare_identical():
    times = np.linspace(0, 1, 4)
    a = analytic_flow(lambda t: np.array([t, 2 * t]), [0, 0], times)
    assert compare_flow(a, a).max_deviation == 0.0
    with pytest.raises(ValueError):
        compare_flow(a, analytic_flow(lambda t: np.array([t, t]), [0, 0], times[:3]))
