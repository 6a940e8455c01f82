"""Rectifying charts by quadratures, chart flows and the Runge-Kutta oracle.

Stage s of a chart integrates the 1-forms defined by covectors that vanish on the
s-th subspace of a nested chain but not on the (s-1)-th. Stage 1 forms are closed on
the whole box and are integrated along straight lines from x0. Later forms are closed
only along the leaves cut out by earlier stages and are integrated inside the leaf.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.integrate import solve_ivp
from scipy.linalg import qr

from .expr import Expr, compile_exprs
from .liealg import SeriesTrace, Subspace
from .vfield import Frame, SystemDef, VectorField, lie_bracket, verify_frame

log = logging.getLogger(__name__)

TOL_QUAD = 1e-10
TOL_NEWTON = 1e-12
TOL_LEAF = 1e-9
TOL_CLOSED = 1e-7
TOL_FLOW = 1e-6
MAX_LEVEL = 20
MAX_NEWTON = 50

_GL_X, _GL_W = np.polynomial.legendre.leggauss(7)
_FD6 = np.array([-1.0, 9.0, -45.0, 0.0, 45.0, -9.0, 1.0]) / 60.0


class QuadratureError(ArithmeticError):
    pass


class ChartError(RuntimeError):
    def __init__(self, message: str, stage: int | None = None):
        super().__init__(message if stage is None else f"stage {stage}: {message}")
        self.stage = stage


class LeafPathError(ArithmeticError):
    def __init__(self, message: str, node=None):
        super().__init__(message)
        self.node = node


# ---------------------------------------------------------------- covectors and forms

@dataclass(frozen=True)
class Covector:
    row: np.ndarray
    stage: int = 1

    def __call__(self, v) -> float:
        return float(np.dot(self.row, v))


def annihilator_basis(sub: Subspace, ambient: Subspace, stage: int = 1) -> list[Covector]:
    """Covectors on ``ambient`` killing ``sub``, as rows in the row space of ``ambient``."""
    if not sub.issubset(ambient):
        raise ValueError("subspace is not contained in the ambient space")
    rows = sub.annihilator_in(ambient)
    if len(rows) != ambient.dim - sub.dim:
        raise ChartError("annihilator has the wrong dimension", stage)
    return [Covector(r, stage) for r in rows]


def _frame_inverse_rows(A: np.ndarray, Z: np.ndarray) -> np.ndarray:
    """Rows Z A(p)^-1 for stacked A (m, n, n) -> (m, d, n)."""
    if not np.all(np.isfinite(A)):
        raise QuadratureError("frame undefined on the path")
    try:
        sol = np.linalg.solve(A.transpose(0, 2, 1), np.broadcast_to(Z.T, (len(A),) + Z.T.shape))
    except np.linalg.LinAlgError:
        raise QuadratureError("frame matrix is singular on the path") from None
    return sol.transpose(0, 2, 1)


class OneForm:
    """A 1-form evaluated as coordinate-differential rows a(p), batched over points."""

    def __init__(self, rows: Callable[[np.ndarray], np.ndarray], n: int, label: str = ""):
        self._rows = rows
        self.n = n
        self.label = label

    def rows(self, points: np.ndarray) -> np.ndarray:
        return self._rows(np.atleast_2d(np.asarray(points, dtype=float)))

    def __call__(self, points: np.ndarray, vectors: np.ndarray) -> np.ndarray:
        return np.einsum("mn,mn->m", self.rows(points), vectors)

    @classmethod
    def from_exprs(cls, exprs: Sequence[Expr], label: str = "") -> "OneForm":
        f = compile_exprs(tuple(exprs))
        return cls(f, len(exprs), label)


def one_form(zeta: Covector | np.ndarray, frame: Frame) -> OneForm:
    """alpha with alpha(X_i) = zeta_i, solved pointwise against the frame matrix."""
    row = zeta.row if isinstance(zeta, Covector) else np.asarray(zeta, dtype=float)
    Z = row[None, :]

    def rows(P):
        return _frame_inverse_rows(frame.matrices(P), Z)[:, 0, :]

    return OneForm(rows, frame.n, "alpha")


@dataclass(frozen=True)
class ClosednessCheck:
    ok: bool
    max_residual: float
    worst_pair: tuple[int, int] | None
    samples: int
    tol: float = TOL_CLOSED

    def __bool__(self):
        return self.ok


def closedness_check(alpha: OneForm, fields: Sequence[VectorField], domain, samples: int = 32,
                     tol: float = TOL_CLOSED, h: float = 1e-3, skip: int = 1 << 11) -> ClosednessCheck:
    """Max over pairs and samples of |X alpha(Y) - Y alpha(X) - alpha([X,Y])|."""
    lo, hi = domain.lower, domain.upper
    margin = 0.05 * (hi - lo)
    pts = domain.points(samples, skip=skip)
    pts = np.clip(pts, lo + margin, hi - margin)
    offs = np.arange(-3, 4)
    worst, pair = 0.0, None

    def pairing(Y: VectorField, P):
        return alpha(P, Y(P))

    def deriv(X: VectorField, Y: VectorField):
        d = X(pts)
        scale = h / np.maximum(1.0, np.linalg.norm(d, axis=1))
        probe = pts[None] + (offs[:, None, None] * scale[None, :, None]) * d[None]
        vals = pairing(Y, probe.reshape(-1, pts.shape[1])).reshape(len(offs), len(pts))
        return np.tensordot(_FD6, vals, axes=(0, 0)) / scale

    for i in range(len(fields)):
        for j in range(i + 1, len(fields)):
            X, Y = fields[i], fields[j]
            res = deriv(X, Y) - deriv(Y, X) - pairing(lie_bracket(X, Y), pts)
            e = float(np.nanmax(np.abs(res))) if np.isfinite(res).any() else np.inf
            if e > worst:
                worst, pair = e, (i, j)
    return ClosednessCheck(worst < tol, worst, pair, len(pts), tol)


# ---------------------------------------------------------------- quadrature

def adaptive_gauss_legendre(fun: Callable[[np.ndarray, np.ndarray], np.ndarray], count: int,
                            width: int, tol: float = TOL_QUAD, max_level: int = MAX_LEVEL) -> np.ndarray:
    """Integrate fun(ids, s) over s in [0, 1] for ``count`` independent integrands at once.

    fun returns (len(ids), width). Panels are halved until the two-half estimate agrees with
    the whole-panel estimate within tol times the panel length.
    """

    def panel(ids, a, b):
        mid, rad = 0.5 * (a + b), 0.5 * (b - a)
        s = (mid[:, None] + rad[:, None] * _GL_X[None, :]).reshape(-1)
        vals = fun(np.repeat(ids, 7), s).reshape(len(ids), 7, width)
        if not np.all(np.isfinite(vals)):
            raise QuadratureError("integrand is undefined on the path")
        return rad[:, None] * np.einsum("k,mkw->mw", _GL_W, vals)

    ids = np.arange(count)
    a, b = np.zeros(count), np.ones(count)
    whole = panel(ids, a, b)
    total = np.zeros((count, width))
    level = 0
    while len(ids):
        mid = 0.5 * (a + b)
        both = panel(np.concatenate([ids, ids]), np.concatenate([a, mid]), np.concatenate([mid, b]))
        left, right = both[: len(ids)], both[len(ids):]
        err = np.abs(left + right - whole).max(axis=1)
        done = err <= tol * (b - a)
        np.add.at(total, ids[done], (left + right)[done])
        if done.all():
            break
        level += 1
        if level >= max_level:
            raise QuadratureError(f"quadrature did not converge after {max_level} refinement levels")
        keep = ~done
        ids = np.concatenate([ids[keep], ids[keep]])
        a, b, whole = (np.concatenate([a[keep], mid[keep]]), np.concatenate([mid[keep], b[keep]]),
                       np.concatenate([left[keep], right[keep]]))
    return total


@dataclass
class StraightPath:
    start: np.ndarray
    end: np.ndarray

    def point(self, s: np.ndarray) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        return self.start[None, :] + s[:, None] * (self.end - self.start)[None, :]

    def velocity(self, s: np.ndarray) -> np.ndarray:
        return np.broadcast_to(self.end - self.start, (len(np.atleast_1d(s)), len(self.start)))


@dataclass
class PolylinePath:
    vertices: np.ndarray

    def _locate(self, s):
        k = len(self.vertices) - 1
        t = np.clip(np.asarray(s, dtype=float) * k, 0, k)
        i = np.minimum(t.astype(int), k - 1)
        return i, t - i, k

    def point(self, s):
        i, f, _ = self._locate(s)
        return self.vertices[i] + f[:, None] * (self.vertices[i + 1] - self.vertices[i])

    def velocity(self, s):
        i, _, k = self._locate(s)
        return k * (self.vertices[i + 1] - self.vertices[i])


def path_integral(alpha: OneForm, path, tol: float = TOL_QUAD) -> float:
    """Integral of alpha along a path given by point(s) and velocity(s), s in [0, 1]."""
    if isinstance(path, PolylinePath) and len(path.vertices) > 2:
        return sum(path_integral(alpha, StraightPath(a, b), tol / (len(path.vertices) - 1))
                   for a, b in zip(path.vertices[:-1], path.vertices[1:]))

    def fun(ids, s):
        if hasattr(path, "point_and_velocity"):
            P, V = path.point_and_velocity(s)
        else:
            P, V = path.point(s), path.velocity(s)
        return alpha(P, V)[:, None]

    return float(adaptive_gauss_legendre(fun, 1, 1, tol)[0, 0])


class LeafPath:
    """Straight line in the free coordinates, constrained block projected onto a level set by Newton."""

    def __init__(self, start, end, constraint: Callable, jacobian: Callable, target,
                 constrained: Sequence[int], tol: float = TOL_LEAF):
        self.start = np.asarray(start, dtype=float)
        self.end = np.asarray(end, dtype=float)
        self.constraint = constraint
        self.jacobian = jacobian
        self.target = np.asarray(target, dtype=float)
        self.w = np.asarray(constrained, dtype=int)
        n = len(self.start)
        self.u = np.array([i for i in range(n) if i not in set(self.w.tolist())], dtype=int)
        self.tol = tol
        for label, p in (("start", self.start), ("end", self.end)):
            r = np.abs(self.constraint(p[None, :])[0] - self.target).max(initial=0.0)
            if r > tol * (1 + np.abs(self.target).max(initial=0.0)):
                raise LeafPathError(f"{label} point is not on the leaf (residual {r:.3g})", p)
        self.max_residual = 0.0

    def point_linear(self, s):
        s = np.asarray(s, dtype=float)
        return self.start[None, :] + s[:, None] * (self.end - self.start)[None, :]

    def point(self, s: np.ndarray) -> np.ndarray:
        P = self.point_linear(s).copy()
        if len(self.w) == 0:
            return P
        scale = 1 + np.abs(self.target).max(initial=0.0)
        for it in range(MAX_NEWTON):
            r = self.constraint(P) - self.target[None, :]
            if not np.all(np.isfinite(r)):
                raise LeafPathError("constraint undefined at a path node", P[np.argmax(~np.isfinite(r).all(1))])
            res = np.abs(r).max(axis=1)
            if np.all(res <= self.tol * scale * 1e-3):
                break
            J = self.jacobian(P)[:, :, self.w]
            try:
                step = np.linalg.solve(J, r[..., None])[..., 0]
            except np.linalg.LinAlgError:
                raise LeafPathError("singular constraint Jacobian on the path", P[0]) from None
            P[:, self.w] -= step
        else:
            bad = int(np.argmax(res))
            if res[bad] > self.tol * scale:
                raise LeafPathError("projection onto the leaf did not converge", P[bad])
        r = np.abs(self.constraint(P) - self.target[None, :]).max(initial=0.0)
        self.max_residual = max(self.max_residual, float(r))
        return P

    def velocity(self, s: np.ndarray) -> np.ndarray:
        return self.point_and_velocity(s)[1]

    def point_and_velocity(self, s: np.ndarray):
        P = self.point(s)
        du = (self.end - self.start)[self.u]
        J = self.jacobian(P)
        V = np.empty_like(P)
        V[:, self.u] = du[None, :]
        if len(self.w):
            V[:, self.w] = -np.linalg.solve(J[:, :, self.w], (J[:, :, self.u] @ du)[..., None])[..., 0]
        return P, V


def leaf_path(start, end, constraint: Callable | None = None, jacobian: Callable | None = None,
              target=None, constrained: Sequence[int] = ()) -> StraightPath | LeafPath:
    if constraint is None or len(constrained) == 0:
        return StraightPath(np.asarray(start, dtype=float), np.asarray(end, dtype=float))
    return LeafPath(start, end, constraint, jacobian, target, constrained)


# ---------------------------------------------------------------- charts

@dataclass
class Stage:
    index: int
    ambient: Subspace
    sub: Subspace
    covectors: list[Covector]
    rows: slice
    constrained: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    free: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    @property
    def dim(self) -> int:
        return len(self.covectors)


class QuadratureChart:
    """Rectifying map x -> Q(x) built stage by stage from a nested chain of subspaces."""

    def __init__(self, trace: SeriesTrace, frame: Frame, gamma_index: int,
                 tol_quad: float = TOL_QUAD, ode_rtol: float = 1e-13, ode_atol: float = 1e-14):
        self.trace = trace
        self.frame = frame
        self.gamma_index = gamma_index
        self.n = frame.n
        self.x0 = np.asarray(frame.domain.x0, dtype=float)
        self.tol_quad = tol_quad
        self.ode_rtol, self.ode_atol = ode_rtol, ode_atol
        chain = trace.chain_to_zero()
        if chain[0].dim != frame.size or frame.size != frame.n:
            raise ChartError("the chart needs a square frame and a chain starting at the full space")
        self.stages: list[Stage] = []
        start = 0
        for s in range(1, len(chain)):
            cov = annihilator_basis(chain[s], chain[s - 1], s)
            self.stages.append(Stage(s, chain[s - 1], chain[s], cov, slice(start, start + len(cov))))
            start += len(cov)
        self.Z = np.vstack([c.row for st in self.stages for c in st.covectors])
        if np.linalg.matrix_rank(self.Z) < self.n:
            raise ChartError("covector basis is not a basis")
        self._setup_sections()

    # structure -------------------------------------------------------------
    @property
    def block_dims(self) -> tuple[int, ...]:
        return tuple(st.dim for st in self.stages)

    @property
    def quadrature_count(self) -> int:
        return len(self.stages)

    @property
    def rectifies_gamma(self) -> bool:
        """dQ(Gamma) is constant only for charts built from a Gamma series."""
        return self.trace.kind.endswith("gamma") and self.trace.gamma_index == self.gamma_index

    @property
    def xi_gamma(self) -> np.ndarray:
        return self.Z[:, self.gamma_index].copy()

    def _setup_sections(self):
        """Pick the constrained coordinates of each later stage by pivoted QR at x0."""
        J0 = self.jacobian(self.x0[None, :])[0]
        for st in self.stages[1:]:
            c = st.rows.start
            _, _, piv = qr(J0[:c], pivoting=True)
            st.constrained = np.sort(piv[:c])
            st.free = np.array([i for i in range(self.n) if i not in set(st.constrained.tolist())])

    def adapted_basis(self) -> np.ndarray:
        """Frame-coefficient rows b_i in the stage ambient with zeta_j(b_i) = delta_ij inside the stage."""
        out = np.zeros((self.n, self.n))
        for st in self.stages:
            Zs = self.Z[st.rows]
            B = st.ambient.basis
            Y = np.linalg.pinv(Zs @ B.T)
            out[st.rows] = (B.T @ Y).T
        return out

    def coordinate_direction(self, P: np.ndarray, j: int) -> np.ndarray:
        """Field values spanning, with later indices, the chart coordinate directions beyond j."""
        coeffs = np.linalg.solve(self.Z, np.eye(self.n)[:, j])
        return np.einsum("mnk,k->mn", self.frame.matrices(P), coeffs)

    # evaluation ------------------------------------------------------------
    def jacobian(self, points: np.ndarray, rows: slice | None = None) -> np.ndarray:
        """1-form rows Z A(p)^-1, (m, d, n)."""
        Z = self.Z if rows is None else self.Z[rows]
        return _frame_inverse_rows(self.frame.matrices(np.atleast_2d(points)), Z)

    def one_forms(self, stage: int) -> list[OneForm]:
        st = self.stages[stage - 1]
        return [one_form(c, self.frame) for c in st.covectors]

    def _stage1(self, X: np.ndarray) -> np.ndarray:
        st = self.stages[0]
        D = X - self.x0[None, :]

        def fun(ids, s):
            P = self.x0[None, :] + s[:, None] * D[ids]
            return np.einsum("mdn,mn->md", self.jacobian(P, st.rows), D[ids])

        return adaptive_gauss_legendre(fun, len(X), st.dim, self.tol_quad)

    def transport(self, stage: int, X: np.ndarray, free_target: np.ndarray | None = None):
        """Move each point inside its stage leaf with the free block going linearly to its target.

        Returns the end points and the integrals of the stage forms along the way. The default
        target is x0's free block, i.e. the section point of the leaf.
        """
        st = self.stages[stage - 1]
        X = np.atleast_2d(np.asarray(X, dtype=float))
        m = len(X)
        c, d = st.rows.start, st.dim
        W, U = st.constrained, st.free
        goal = self.x0[U][None, :] if free_target is None else np.atleast_2d(free_target)
        du = goal - X[:, U]
        rows = slice(0, st.rows.stop)

        def rhs(tau, y):
            y = y.reshape(m, c + d)
            P = np.empty((m, self.n))
            P[:, W] = y[:, :c]
            P[:, U] = X[:, U] + tau * du
            J = self.jacobian(P, rows)
            Cw, Cu = J[:, :c][:, :, W], J[:, :c][:, :, U]
            V = np.empty((m, self.n))
            V[:, U] = du
            V[:, W] = -np.linalg.solve(Cw, np.einsum("mcu,mu->mc", Cu, du)[..., None])[..., 0]
            acc = np.einsum("mdn,mn->md", J[:, c:], V)
            return np.hstack([V[:, W], acc]).reshape(-1)

        y0 = np.hstack([X[:, W], np.zeros((m, d))]).reshape(-1)
        try:
            sol = solve_ivp(rhs, (0.0, 1.0), y0, method="DOP853", rtol=self.ode_rtol, atol=self.ode_atol)
        except (np.linalg.LinAlgError, QuadratureError) as exc:
            raise QuadratureError(f"leaf transport failed at stage {st.index}: {exc}") from None
        if sol.status != 0 or not np.all(np.isfinite(sol.y[:, -1])):
            raise QuadratureError(f"leaf transport failed at stage {st.index}: {sol.message}")
        end = sol.y[:, -1].reshape(m, c + d)
        P = np.empty((m, self.n))
        P[:, W] = end[:, :c]
        P[:, U] = X[:, U] + du
        return P, end[:, c:]

    def Q(self, points: np.ndarray) -> np.ndarray:
        """Chart values (m, n); Q(x0) = 0."""
        X = np.atleast_2d(np.asarray(points, dtype=float))
        out = np.empty((len(X), self.n))
        out[:, self.stages[0].rows] = self._stage1(X)
        for st in self.stages[1:]:
            out[:, st.rows] = -self.transport(st.index, X)[1]
        return out

    def __call__(self, points):
        return self.Q(points)

    # second routes ---------------------------------------------------------
    def Q_by_detour(self, X: np.ndarray, via: np.ndarray) -> np.ndarray:
        """Chart values along different paths: stage 1 through the points ``via``; later stages
        through the leaf point whose free block is that of ``via``."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        via = np.atleast_2d(np.asarray(via, dtype=float))
        st1 = self.stages[0]
        out = np.empty((len(X), self.n))
        A, B = via - self.x0[None, :], X - via

        def leg(D, base):
            def fun(ids, s):
                P = base[ids] + s[:, None] * D[ids]
                return np.einsum("mdn,mn->md", self.jacobian(P, st1.rows), D[ids])
            return adaptive_gauss_legendre(fun, len(X), st1.dim, self.tol_quad)

        out[:, st1.rows] = leg(A, np.broadcast_to(self.x0, X.shape)) + leg(B, via)
        for st in self.stages[1:]:
            mid, first = self.transport(st.index, X, via[:, st.free])
            _, second = self.transport(st.index, mid)
            out[:, st.rows] = -(first + second)
        return out

    def Q_by_leaf_paths(self, x, stage_1_via: np.ndarray | None = None) -> np.ndarray:
        """Chart values by Newton-projected leaf paths from the section point (an independent route)."""
        x = np.asarray(x, dtype=float)
        out = np.empty(self.n)
        st1 = self.stages[0]
        verts = [self.x0] + ([] if stage_1_via is None else [np.asarray(stage_1_via, float)]) + [x]
        for r, form in zip(range(st1.dim), self.one_forms(1)):
            out[st1.rows.start + r] = path_integral(form, PolylinePath(np.array(verts)), self.tol_quad)
        for st in self.stages[1:]:
            rows_prev = slice(0, st.rows.start)
            target = out[rows_prev]

            def constraint(P, rows_prev=rows_prev):
                return self.Q(P)[:, rows_prev]

            def jac(P, rows_prev=rows_prev):
                return self.jacobian(P, rows_prev)

            section = self.x0.copy()
            section[st.constrained] = x[st.constrained]
            proj = _project(section, constraint, jac, target, st.constrained)
            path = LeafPath(proj, x, constraint, jac, target, st.constrained)
            for r, form in enumerate(self.one_forms(st.index)):
                out[st.rows.start + r] = path_integral(form, path, self.tol_quad)
        return out

    def section_point(self, x, stage: int) -> np.ndarray:
        """Point on the leaf through x sharing x0's free coordinates."""
        st = self.stages[stage - 1]
        if stage == 1:
            return self.x0.copy()
        rows_prev = slice(0, st.rows.start)
        target = self.Q(np.asarray(x, float)[None, :])[0, rows_prev]
        guess = self.x0.copy()
        guess[st.constrained] = np.asarray(x, float)[st.constrained]
        return _project(guess, lambda P: self.Q(P)[:, rows_prev],
                        lambda P: self.jacobian(P, rows_prev), target, st.constrained)

    # diagnostics -------------------------------------------------------------
    def diagnostics(self, samples: int = 32) -> dict:
        dom = self.frame.domain
        J0 = self.jacobian(self.x0[None, :])[0]
        q0 = self.Q(self.x0[None, :])[0]
        closed = [closedness_check(a, self.frame.fields, dom, samples) for a in self.one_forms(1)]
        pts = dom.points(samples, skip=1 << 13)
        J = self.jacobian(pts)
        G = self.frame.fields[self.gamma_index](pts)
        drift = np.abs(np.einsum("mdn,mn->md", J, G) - self.xi_gamma[None, :]).max()
        return {
            "stages": [{"index": st.index, "covectors": st.dim, "ambient_dim": st.ambient.dim,
                        "sub_dim": st.sub.dim} for st in self.stages],
            "quadratures": self.quadrature_count,
            "closedness_residuals": [c.max_residual for c in closed],
            "closed": all(closed),
            "q_x0_max": float(np.abs(q0).max()),
            "jacobian_cond_x0": float(np.linalg.cond(J0)),
            "jacobian_min_sigma_ratio": float(min(
                np.linalg.svd(M, compute_uv=False)[-1] / np.linalg.svd(M, compute_uv=False)[0] for M in J)),
            "xi_gamma": self.xi_gamma.tolist(),
            "gamma_constancy": float(drift),
        }


def _project(guess, constraint, jacobian, target, constrained, tol: float = TOL_LEAF) -> np.ndarray:
    P = np.asarray(guess, dtype=float)[None, :].copy()
    scale = 1 + np.abs(target).max(initial=0.0)
    for _ in range(MAX_NEWTON):
        r = constraint(P)[0] - target
        if np.abs(r).max(initial=0.0) <= 1e-3 * tol * scale:
            return P[0]
        J = jacobian(P)[0][:, constrained]
        P[0, constrained] -= np.linalg.solve(J, r)
    if np.abs(constraint(P)[0] - target).max(initial=0.0) > tol * scale:
        raise LeafPathError("projection onto the leaf did not converge", P[0])
    return P[0]


class IdentityChart:
    """Q(x) = x - x0 with the frame itself as adapted basis (for frames already in normal form)."""

    def __init__(self, frame: Frame, block_dims: Sequence[int]):
        self.frame = frame
        self.n = frame.n
        self.x0 = np.asarray(frame.domain.x0, dtype=float)
        self.block_dims = tuple(block_dims)
        self.Z = np.eye(self.n)

    def Q(self, points):
        return np.atleast_2d(points) - self.x0[None, :]

    __call__ = Q

    def jacobian(self, points, rows=None):
        m = len(np.atleast_2d(points))
        J = np.broadcast_to(np.eye(self.n), (m, self.n, self.n))
        return J if rows is None else J[:, rows]

    def adapted_basis(self) -> np.ndarray:
        return np.eye(self.n)

    def coordinate_direction(self, P, j):
        return np.broadcast_to(np.eye(self.n)[j], (len(P), self.n)).copy()


def build_chart(trace: SeriesTrace, system: SystemDef | Frame, gamma_index: int | None = None,
                check_frame: bool = True) -> QuadratureChart:
    """Chart from a chain that ends abelian (appending zero) or at zero."""
    if isinstance(system, SystemDef):
        frame, gamma_index = system.frame, system.gamma_index
    else:
        frame = system
        gamma_index = trace.gamma_index if gamma_index is None else gamma_index
        if gamma_index is None:
            gamma_index = 0
    if check_frame:
        fc = verify_frame(frame)
        if not fc:
            raise ChartError(f"frame is not pointwise independent (witness {fc.witness}, "
                             f"sigma ratio {fc.min_ratio:.3g})", 1)
    try:
        chart = QuadratureChart(trace, frame, gamma_index)
        q0 = chart.Q(chart.x0[None, :])[0]
    except (QuadratureError, LeafPathError, ValueError) as exc:
        raise ChartError(str(exc)) from None
    if np.abs(q0).max() > 1e-12:
        raise ChartError("chart does not vanish at the reference point")
    return chart


# ---------------------------------------------------------------- flows

@dataclass
class FlowResult:
    x0: np.ndarray
    times: np.ndarray
    points: np.ndarray
    method: str
    converged: np.ndarray
    iterations: np.ndarray | None = None
    residuals: np.ndarray | None = None
    exited: np.ndarray | None = None
    message: str = ""

    @property
    def truncated(self) -> bool:
        return not bool(np.all(self.converged))

    def to_dict(self) -> dict:
        d = {"method": self.method, "x0": self.x0.tolist(), "times": self.times.tolist(),
             "points": self.points.tolist(), "converged": self.converged.tolist()}
        if self.iterations is not None:
            d["newton_iterations"] = self.iterations.tolist()
        if self.residuals is not None:
            d["residuals"] = self.residuals.tolist()
        if self.exited is not None:
            d["exited"] = self.exited.tolist()
        if self.message:
            d["message"] = self.message
        return d


def _q_rows(chart, P: np.ndarray, cache: dict | None) -> np.ndarray:
    """Q at each row of P, evaluating only rows not yet memoized."""
    if cache is None:
        return chart.Q(P)
    keys = [row.tobytes() for row in P]
    todo = [i for i, k in enumerate(keys) if k not in cache]
    if todo:
        vals = chart.Q(P[todo])
        for i, v in zip(todo, vals):
            cache[keys[i]] = v
    return np.array([cache[k] for k in keys])


@dataclass
class Inversion:
    points: np.ndarray
    converged: np.ndarray
    iterations: np.ndarray
    residuals: np.ndarray


def invert_chart(chart, targets, guesses, tol: float = TOL_NEWTON, cache: dict | None = None) -> Inversion:
    """Batched damped Newton on y -> Q(y) = target, Jacobian given by the 1-form rows.

    The row Jacobian matches dQ only up to a unit block-triangular factor, so a step is
    accepted whenever it stays in the box and does not grow the residual tenfold; otherwise
    it is halved. Converged means max |Q(y) - target| < tol (1 + max |target|).
    """
    T = np.atleast_2d(np.asarray(targets, dtype=float))
    Y = np.atleast_2d(np.asarray(guesses, dtype=float)).copy()
    dom = chart.frame.domain
    m = len(T)
    scale = tol * (1 + np.abs(T).max(axis=1))
    R = _q_rows(chart, Y, cache) - T
    res = np.abs(R).max(axis=1)
    iters = np.zeros(m, dtype=int)
    active = res >= scale
    failed = np.zeros(m, dtype=bool)
    for _ in range(MAX_NEWTON):
        idx = np.flatnonzero(active & ~failed)
        if not len(idx):
            break
        iters[idx] += 1
        J = chart.jacobian(Y[idx])
        try:
            step = np.linalg.solve(J, R[idx][..., None])[..., 0]
        except np.linalg.LinAlgError:
            failed[idx] = True
            break
        lam = np.ones(len(idx))
        pending = np.ones(len(idx), dtype=bool)
        for _ in range(12):
            k = np.flatnonzero(pending)
            if not len(k):
                break
            cand = Y[idx[k]] - lam[k, None] * step[k]
            inside = dom.inside(cand)
            rc = np.full((len(k), chart.n), np.nan)
            if inside.any():
                try:
                    rc[inside] = _q_rows(chart, cand[inside], cache) - T[idx[k][inside]]
                except ArithmeticError:
                    for j in np.flatnonzero(inside):
                        try:
                            rc[j] = _q_rows(chart, cand[j:j + 1], cache)[0] - T[idx[k][j]]
                        except ArithmeticError:
                            pass
            good = np.all(np.isfinite(rc), axis=1)
            good &= np.abs(np.where(np.isfinite(rc), rc, 0)).max(axis=1) < 10 * res[idx[k]] + scale[idx[k]]
            acc = k[good]
            Y[idx[acc]] = cand[good]
            R[idx[acc]] = rc[good]
            pending[acc] = False
            lam[k[~good]] *= 0.5
        failed[idx[pending]] = True
        res = np.abs(R).max(axis=1)
        active = res >= scale
    conv = ~active & ~failed
    return Inversion(Y, conv, iters, res)


def chart_flow(chart: QuadratureChart, x, times, tol: float = TOL_NEWTON, t0: float | None = None) -> FlowResult:
    """Phi_t(x) from Q(Phi_t(x)) = Q(x) + (t - t0) xi(Gamma), inverted by warm-started Newton."""
    x = np.asarray(x, dtype=float)
    times = np.asarray(times, dtype=float)
    t0 = times[0] if t0 is None else t0
    dom = chart.frame.domain
    if not dom.contains(x):
        raise ValueError("initial point is outside the domain")
    if not chart.rectifies_gamma:
        raise ValueError("chart was not built from the Gamma series of its field")
    cache: dict = {}
    q = _q_rows(chart, x[None, :], cache)[0]
    xi = chart.xi_gamma
    gamma = chart.frame.fields[chart.gamma_index]
    m = len(times)
    pts = np.full((m, chart.n), np.nan)
    conv = np.zeros(m, dtype=bool)
    iters = np.zeros(m, dtype=int)
    resid = np.full(m, np.nan)
    exited = np.zeros(m, dtype=bool)
    y, t_prev = x.copy(), t0
    message = ""
    for k, t in enumerate(times):
        guess = y + (t - t_prev) * gamma.at(y)
        if not dom.contains(guess):
            guess = y
        inv = invert_chart(chart, q + (t - t0) * xi, guess, tol, cache)
        iters[k], resid[k] = inv.iterations[0], inv.residuals[0]
        if not inv.converged[0]:
            exited[k] = not dom.contains(inv.points[0])
            message = f"Newton failed at t={t!r} (residual {inv.residuals[0]:.3g})"
            break
        pts[k], conv[k] = inv.points[0], True
        y, t_prev = inv.points[0], t
    return FlowResult(x, times, pts, "chart", conv, iters, resid, exited, message)


def rk_oracle(gamma: VectorField, x, times, domain=None, rtol: float = 1e-10, atol: float = 1e-10) -> FlowResult:
    """Adaptive embedded Runge-Kutta 4(5) reference trajectory on the time grid."""
    x = np.asarray(x, dtype=float)
    times = np.asarray(times, dtype=float)
    f = compile_exprs(gamma.components)

    def rhs(t, y):
        return f(y[None, :])[0]

    events = None
    if domain is not None:
        lo, hi = domain.lower, domain.upper

        def leave(t, y):
            return float(min(np.min(y - lo), np.min(hi - y)))

        leave.terminal = True
        events = leave
    sol = solve_ivp(rhs, (times[0], times[-1]), x, method="RK45", t_eval=times, rtol=rtol, atol=atol,
                    events=events, dense_output=True)
    pts = np.full((len(times), len(x)), np.nan)
    got = sol.y.T
    pts[: len(got)] = got
    conv = np.zeros(len(times), dtype=bool)
    conv[: len(got)] = np.all(np.isfinite(got), axis=1)
    exited = np.zeros(len(times), dtype=bool)
    if sol.status == 1:
        exited[len(got):] = True
    if sol.status == -1:
        raise ArithmeticError(f"oracle integration failed: {sol.message}")
    return FlowResult(x, times, pts, "rk-oracle", conv, exited=exited,
                      message="" if sol.status == 0 else sol.message)


def analytic_flow(fun: Callable[[float], np.ndarray], x, times, label: str = "analytic") -> FlowResult:
    times = np.asarray(times, dtype=float)
    pts = np.array([fun(t) for t in times], dtype=float)
    return FlowResult(np.asarray(x, float), times, pts, label, np.ones(len(times), dtype=bool))


@dataclass(frozen=True)
class FlowComparison:
    per_time: tuple[float, ...]
    max_deviation: float
    tol: float
    ok: bool

    def __bool__(self):
        return self.ok

    def to_dict(self) -> dict:
        return {"per_time": list(self.per_time), "max_deviation": self.max_deviation,
                "tol": self.tol, "pass": self.ok}


def compare_flow(a: FlowResult, b: FlowResult, tol: float = TOL_FLOW) -> FlowComparison:
    """Componentwise relative deviation |a - b| / max(1, |b|), per time and overall."""
    if a.times.shape != b.times.shape or not np.allclose(a.times, b.times, rtol=0, atol=1e-14):
        raise ValueError("flows are sampled on different time grids")
    dev = np.abs(a.points - b.points) / np.maximum(1.0, np.abs(b.points))
    per = np.where(np.all(np.isfinite(dev), axis=1), np.max(dev, axis=1), np.inf)
    worst = float(per.max()) if len(per) else 0.0
    return FlowComparison(tuple(float(v) for v in per), worst, tol, bool(worst < tol))
