"""Seed-fixed randomized property suites (each at least 100 cases).

Every suite returns a SuiteResult; results are memoized so the acceptance summary and the
individual property tests share one run.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from helpers import (NAMES3, chain_frame, random_lie_algebra, random_poly_field, random_positive,
                     triangular_frame)
from liequad.distrib import dist_series, rescaling_order
from liequad.expr import Context, parse
from liequad.liealg import (derived_series, gamma_series, is_nilpotent, is_solvable,
                            lie_integrability_order)
from liequad.quad import (TOL_CLOSED, TOL_FLOW, TOL_QUAD, annihilator_basis, build_chart, closedness_check,
                          invert_chart, one_form, rk_oracle)
from liequad.systems import load_system
from liequad.vfield import Domain, combine, field_is_zero, lie_bracket

CASES = 100


@dataclass
class SuiteResult:
    name: str
    cases: int
    failures: list = field(default_factory=list)
    worst: float = 0.0

    @property
    def ok(self) -> bool:
        return self.cases >= CASES and not self.failures

    def line(self) -> str:
        status = "PASS" if self.ok else "FAIL"
        extra = f", worst {self.worst:.3g}" if self.worst else ""
        return f"{self.name}: {self.cases} cases, {len(self.failures)} failures{extra} [{status}]"


_BOX2 = Domain(((-1.0, 1.0),) * 2, (0.1, 0.2))
_BOX3 = Domain(((-1.0, 1.0),) * 3, (0.1, 0.2, -0.1))


@lru_cache(maxsize=None)
def bracket_antisymmetry_jacobi() -> SuiteResult:
    rng = np.random.default_rng(101)
    res = SuiteResult("bracket antisymmetry and Jacobi", 0)
    for case in range(CASES):
        n = 2 + case % 2
        dom = _BOX2 if n == 2 else _BOX3
        ctx = Context(NAMES3[:n], {})
        X, Y, Z = (random_poly_field(rng, n, ctx, nm) for nm in "XYZ")
        anti = combine([1, 1], [lie_bracket(X, Y), lie_bracket(Y, X)])
        jac = combine([1, 1, 1], [lie_bracket(X, lie_bracket(Y, Z)), lie_bracket(Y, lie_bracket(Z, X)),
                                  lie_bracket(Z, lie_bracket(X, Y))])
        ok = anti.is_zero() and field_is_zero(jac, dom)[0]
        res.cases += 1
        if not ok:
            res.failures.append(case)
    return res


@lru_cache(maxsize=None)
def lie_series_properties() -> dict[str, SuiteResult]:
    """Containment of derived series in Gamma series, integrable -> solvable, nilpotent -> integrable."""
    rng = np.random.default_rng(202)
    contain = SuiteResult("derived series inside Gamma series", 0)
    solv = SuiteResult("Lie integrable implies solvable", 0)
    nil = SuiteResult("nilpotent implies integrable for every basis Gamma", 0)
    case = 0
    while min(contain.cases, solv.cases, nil.cases) < CASES:
        c = random_lie_algebra(rng)
        case += 1
        d = derived_series(c)
        nilpotent = is_nilpotent(c)
        for g in range(c.n):
            tr = gamma_series(c, g)
            k = min(len(d.entries), len(tr.entries))
            nested = all(tr.entries[i].issubset(tr.entries[i - 1]) for i in range(1, len(tr.entries)))
            has_gamma = all(e.contains(np.eye(c.n)[g]) for e in tr.entries)
            contained = all(d.entries[i].issubset(tr.entries[i]) for i in range(k))
            contain.cases += 1
            if not (nested and has_gamma and contained):
                contain.failures.append(case)
            order = lie_integrability_order(tr)
            solv.cases += 1
            if order.integrable and not is_solvable(c):
                solv.failures.append(case)
        if nilpotent:
            nil.cases += 1
            if not all(lie_integrability_order(gamma_series(c, g)).integrable for g in range(c.n)):
                nil.failures.append(case)
    return {"contain": contain, "solvable": solv, "nilpotent": nil}


def _rescaling_frames(rng):
    kind = int(rng.integers(0, 3))
    if kind == 0:
        return triangular_frame(rng, strong=bool(rng.integers(0, 2))), 0
    if kind == 1:
        return chain_frame(rng), 0
    return chain_frame(rng, f=random_positive(rng)), 0


@lru_cache(maxsize=None)
def rescaling() -> SuiteResult:
    rng = np.random.default_rng(303)
    res = SuiteResult("rescaling order |r - r'| <= 1", 0)
    ctx = Context(NAMES3, {})
    for case in range(CASES):
        F, g = _rescaling_frames(rng)
        f = parse(random_positive(rng), ctx)
        out = rescaling_order(F, g, f)
        res.cases += 1
        if not out.ok:
            res.failures.append((case, out.r, out.r_prime))
    return res


def _chart_systems():
    rng = np.random.default_rng(404)
    systems = []
    for name in ("triangular_chain", "scaled_line_periodic", "affine", "linear", "scaled_line_rational"):
        s = load_system(name)
        tr = dist_series("dist_gamma", s.frame, s.gamma_index)
        systems.append((name, build_chart(tr, s), s.domain))
    for strong in (False, True):
        F = triangular_frame(rng, strong)
        for kind in ("dist_central" if strong else "dist_derived", "dist_gamma"):
            tr = dist_series(kind, F, 0 if kind == "dist_gamma" else None)
            if tr.verdict == "stabilized":
                continue
            systems.append((f"triangular strong={strong} {kind}", build_chart(tr, F, 0), F.domain))
    return systems


def _inner_points(rng, domain, count, shrink=0.3):
    lo, hi = domain.lower, domain.upper
    x0 = np.asarray(domain.x0)
    u = rng.random((count, len(lo)))
    return x0 + (1 - shrink) * (lo + u * (hi - lo) - x0)


def _stays_inside(gamma, x, times, domain, margin=0.05):
    """True flow from x over each time stays in the box shrunk by the margin (RK oracle)."""
    lo, hi = domain.lower, domain.upper
    pad = margin * (hi - lo)
    for t in times:
        if t == 0:
            continue
        grid = np.linspace(0.0, t, 9)
        pts = rk_oracle(gamma, x, grid, domain).points
        if not np.all(np.isfinite(pts)) or np.any(pts < lo + pad) or np.any(pts > hi - pad):
            return False
    return True


def _flow_cases(rng, gamma, domain, count):
    """Start points and times (s, t) for which Phi_s, Phi_{s+t} and Phi_t o Phi_s stay inside."""
    X, S, T = [], [], []
    while len(X) < count:
        x = _inner_points(rng, domain, 1, shrink=0.6)[0]
        s, t = rng.uniform(-0.15, 0.15, 2)
        if _stays_inside(gamma, x, (s, s + t), domain):
            X.append(x)
            S.append(s)
            T.append(t)
    return np.array(X), np.array(S), np.array(T)


@lru_cache(maxsize=None)
def chart_properties() -> dict[str, SuiteResult]:
    """Path independence of Q and the chart-flow semigroup property."""
    rng = np.random.default_rng(505)
    path = SuiteResult("path independence of Q (10 tol_quad)", 0)
    semi = SuiteResult("chart semigroup property (tol_flow)", 0)
    systems = _chart_systems()
    per = -(-CASES // len(systems))
    for name, chart, dom in systems:
        X = _inner_points(rng, dom, per)
        via = _inner_points(rng, dom, per)
        diff = np.abs(chart.Q(X) - chart.Q_by_detour(X, via)).max(axis=1)
        path.cases += per
        path.worst = max(path.worst, float(diff.max()))
        path.failures += [(name, i) for i in np.flatnonzero(~(diff < 10 * TOL_QUAD))]
    flows = [entry for entry in systems if entry[1].rectifies_gamma]
    per = -(-CASES // len(flows))
    for name, chart, dom in flows:
        # Phi_{s+t}(x) against Phi_t(Phi_s(x)), both read off the chart
        xi = chart.xi_gamma
        gamma = chart.frame.fields[chart.gamma_index]
        X, s, t = _flow_cases(rng, gamma, dom, per)
        q = chart.Q(X)
        a = invert_chart(chart, q + s[:, None] * xi, X + s[:, None] * gamma(X))
        qa = chart.Q(a.points)
        b = invert_chart(chart, qa + t[:, None] * xi, a.points + t[:, None] * gamma(a.points))
        direct = invert_chart(chart, q + (s + t)[:, None] * xi, X + (s + t)[:, None] * gamma(X))
        ok = a.converged & b.converged & direct.converged
        dev = np.abs(b.points - direct.points) / np.maximum(1.0, np.abs(direct.points))
        dev = np.where(ok[:, None], dev, np.inf).max(axis=1)
        semi.cases += per
        semi.worst = max(semi.worst, float(dev.max()))
        semi.failures += [(name, i) for i in np.flatnonzero(~(dev < TOL_FLOW))]
    return {"path": path, "semigroup": semi}


@lru_cache(maxsize=None)
def stage1_closedness() -> SuiteResult:
    rng = np.random.default_rng(606)
    res = SuiteResult("stage-1 closedness residual < 1e-7", 0)
    fixtures = [load_system(n) for n in ("affine", "scaled_line_periodic", "triangular_chain", "linear")]
    case = 0
    while res.cases < CASES:
        kind = case % 4
        case += 1
        if kind == 0:
            F, kind_name, g = triangular_frame(rng, False), "dist_derived", None
        elif kind == 1:
            F, kind_name, g = triangular_frame(rng, True), "dist_central", None
        elif kind == 2:
            F, kind_name, g = chain_frame(rng, f=random_positive(rng)), "dist_gamma", 0
        else:
            s = fixtures[int(rng.integers(0, len(fixtures)))]
            F, kind_name, g = s.frame, "dist_gamma", s.gamma_index
        tr = dist_series(kind_name, F, g)
        chain = tr.chain_to_zero()
        for zeta in annihilator_basis(chain[1], chain[0]):
            chk = closedness_check(one_form(zeta, F), F.fields, F.domain, samples=32,
                                   skip=1 << 11 + int(rng.integers(0, 8)))
            res.cases += 1
            res.worst = max(res.worst, chk.max_residual)
            if chk.max_residual >= TOL_CLOSED:
                res.failures.append(case)
    return res


def all_suites() -> list[SuiteResult]:
    lie = lie_series_properties()
    ch = chart_properties()
    return [bracket_antisymmetry_jacobi(), lie["contain"], lie["solvable"], lie["nilpotent"], rescaling(),
            ch["path"], ch["semigroup"], stage1_closedness()]
