"""Spaces of vector fields over function modules: regularity, cores and core-based series.

A subspace W of the frame span V is recorded by real coefficient rows over the frame
fields; D_W is the module of function combinations of those spanning fields.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .expr import Expr, compile_exprs, is_zero_on, simplify
from .liealg import (InternalConsistencyError, IntegrabilityOrder, Subspace, SeriesTrace,
                     lie_integrability_order, numerical_rank)
from .vfield import Domain, Frame, VectorField, combine, field_is_zero, lie_bracket

log = logging.getLogger(__name__)

CORE_TOL = 1e-10
TOL_CORE = 1e-8
TOL_NF = 1e-6


class CoreError(ValueError):
    pass


class PreconditionError(ValueError):
    pass


@dataclass
class RegularSpace:
    """A frame viewed as a space of fields, with sampled regularity verdicts."""

    frame: Frame
    regular: bool
    completely_regular: bool
    span_dim: int
    ranks: tuple[int, ...]
    witness: tuple[float, ...] | None = None
    skipped: int = 0

    @property
    def dim(self) -> int:
        return self.frame.size

    @property
    def domain(self) -> Domain:
        return self.frame.domain

    def __bool__(self):
        return self.regular


def _finite_rows(pts: np.ndarray, vals: np.ndarray):
    ok = np.all(np.isfinite(vals.reshape(len(vals), -1)), axis=1)
    return pts[ok], vals[ok], int((~ok).sum())


def regularity_check(V: Frame | Sequence[VectorField], domain: Domain | None = None,
                     samples: int | None = None) -> RegularSpace:
    """Regular: pointwise rank equals the real span dimension everywhere sampled; complete: rank n."""
    F = V if isinstance(V, Frame) else Frame(tuple(V), domain)
    pts = np.vstack([np.asarray(F.domain.x0)[None, :], F.domain.points(samples)])
    A = F.matrices(pts)
    pts, A, skipped = _finite_rows(pts, A)
    if skipped:
        log.info("regularity check skipped %d samples with evaluation errors", skipped)
    if len(pts) == 0:
        raise PreconditionError("frame undefined at every sample")
    span_dim = numerical_rank(A.reshape(-1, F.size))
    ranks = tuple(numerical_rank(M) for M in A)
    bad = [k for k, r in enumerate(ranks) if r != span_dim]
    witness = tuple(float(v) for v in pts[bad[0]]) if bad else None
    regular = not bad
    return RegularSpace(F, regular, regular and span_dim == F.n, span_dim, ranks, witness, skipped)


@dataclass
class CoreResult:
    subspace: Subspace
    rank: int
    singular_values: np.ndarray
    samples: int
    residual: float
    inputs: tuple[str, ...] = ()


def _coefficients(A: np.ndarray, B: np.ndarray, names: Sequence[str], pts: np.ndarray) -> np.ndarray:
    """Pointwise solutions c(p) of A(p) c = B(p); A (m, n, k), B (m, q, n) -> (m, q, k)."""
    m, n, k = A.shape
    if n == k:
        try:
            return np.linalg.solve(A[:, None, :, :], B[..., None])[..., 0]
        except np.linalg.LinAlgError:
            pass
    out = np.empty((m, B.shape[1], k))
    for a in range(m):
        c, *_ = np.linalg.lstsq(A[a], B[a].T, rcond=None)
        res = A[a] @ c - B[a].T
        scale = 1 + np.abs(B[a]).max(initial=0.0)
        bad = np.abs(res).max(axis=0) > TOL_CORE * scale
        if bad.any():
            q = int(np.argmax(bad))
            raise CoreError(f"field {names[q]} is not in the pointwise span of V at {pts[a].tolist()}")
        out[a] = c.T
    return out


def _values(fields: Sequence[VectorField], pts: np.ndarray) -> np.ndarray:
    exprs = tuple(c for f in fields for c in f.components)
    vals = compile_exprs(exprs)(pts)
    return vals.reshape(len(pts), len(fields), -1)


def _row_space(C: np.ndarray, k: int) -> tuple[Subspace, int, np.ndarray]:
    if C.size == 0:
        return Subspace.zero(k), 0, np.zeros(0)
    s = np.linalg.svd(C, compute_uv=False)
    return Subspace.span(C, k, CORE_TOL), numerical_rank(C, CORE_TOL), s


def core(S: Sequence[VectorField], V: RegularSpace | Frame, samples: int | None = None,
         skip: int = 1 << 12) -> CoreResult:
    """Smallest W in V with S inside D_W: span of the sampled pointwise coefficient vectors."""
    F = V.frame if isinstance(V, RegularSpace) else V
    k = F.size
    S = [f for f in S if not f.is_zero()]
    names = tuple(f.name for f in S)
    if not S:
        return CoreResult(Subspace.zero(k), 0, np.zeros(0), 0, 0.0, names)
    m = samples or 4 * k
    for attempt in range(4):
        pts = F.domain.points(m, skip=skip)
        A = F.matrices(pts)
        B = _values(S, pts)
        ok = np.all(np.isfinite(A), axis=(1, 2)) & np.all(np.isfinite(B), axis=(1, 2))
        pts, A, B = pts[ok], A[ok], B[ok]
        if len(pts) < 2:
            raise CoreError("too few admissible samples for the core computation")
        C = _coefficients(A, B, names, pts)
        half = len(pts) // 2
        r1 = numerical_rank(C[:half].reshape(-1, k), CORE_TOL)
        r2 = numerical_rank(C[half:].reshape(-1, k), CORE_TOL)
        W, rank, sv = _row_space(C.reshape(-1, k), k)
        if r1 == r2 == rank:
            break
        m *= 2
    residual = _membership_residual(S, W, F, skip + 4 * m + 17, max(8, 2 * k))
    if residual > TOL_CORE:
        raise CoreError(f"core certification failed at fresh samples (residual {residual:.3g})")
    return CoreResult(W, rank, sv, len(pts), residual, names)


def _membership_residual(S: Sequence[VectorField], W: Subspace, F: Frame, skip: int, count: int) -> float:
    """Largest relative residual of fitting B(p) by the fields of W at fresh points."""
    pts = F.domain.points(count, skip=skip)
    A = F.matrices(pts)
    B = _values(S, pts)
    ok = np.all(np.isfinite(A), axis=(1, 2)) & np.all(np.isfinite(B), axis=(1, 2))
    worst = 0.0
    for Ap, Bp in zip(A[ok], B[ok]):
        scale = 1 + np.abs(Bp).max()
        if W.dim == 0:
            worst = max(worst, float(np.abs(Bp).max() / scale))
            continue
        M = Ap @ W.basis.T
        y, *_ = np.linalg.lstsq(M, Bp.T, rcond=None)
        worst = max(worst, float(np.abs(M @ y - Bp.T).max() / scale))
    return worst


def membership_residual(S: Sequence[VectorField], W: Subspace, V: RegularSpace | Frame,
                        count: int = 32, skip: int = 1 << 14) -> float:
    F = V.frame if isinstance(V, RegularSpace) else V
    return _membership_residual([f for f in S if not f.is_zero()], W, F, skip, count)


def spanning_fields(W: Subspace, F: Frame, prefix: str = "Y") -> list[VectorField]:
    return [combine(row, F.fields, f"{prefix}{a + 1}") for a, row in enumerate(W.basis)]


def _brackets(A: Subspace, B: Subspace, F: Frame) -> list[VectorField]:
    """Brackets of spanning fields, formed bilinearly from the frame brackets."""
    out = []
    k = F.size
    pair_cache: dict[tuple[int, int], VectorField] = {}

    def fb(i, j):
        if (i, j) not in pair_cache:
            pair_cache[(i, j)] = lie_bracket(F.fields[i], F.fields[j])
        return pair_cache[(i, j)]

    same = A == B
    for a, u in enumerate(A.basis):
        for b, v in enumerate(B.basis):
            if same and b <= a:
                continue
            coeffs, fields = [], []
            for i in range(k):
                for j in range(i + 1, k):
                    w = u[i] * v[j] - u[j] * v[i]
                    if abs(w) > 1e-15:
                        coeffs.append(w)
                        fields.append(fb(i, j))
            if fields:
                out.append(combine(coeffs, fields, f"[{a + 1},{b + 1}]"))
    return out


def _abelian_flag(W: Subspace, F: Frame) -> bool:
    for B in _brackets(W, W, F):
        if not field_is_zero(B, F.domain)[0]:
            return False
    return True


@dataclass
class DistSeriesTrace(SeriesTrace):
    cores: list[CoreResult] = field(default_factory=list)


def dist_series(kind: str, V: RegularSpace | Frame, gamma_index: int | None = None,
                stop_at_abelian: bool = True) -> DistSeriesTrace:
    """Core-based derived, central or Gamma series inside V, in frame coordinates."""
    R = V if isinstance(V, RegularSpace) else regularity_check(V)
    if not R.completely_regular:
        raise PreconditionError(f"V is not completely regular (rank drop near {R.witness})")
    F = R.frame
    kind = kind if kind.startswith("dist_") else "dist_" + kind
    if kind not in ("dist_derived", "dist_central", "dist_gamma"):
        raise ValueError(f"unknown series kind {kind!r}")
    if kind == "dist_gamma" and gamma_index is None:
        raise ValueError("the Gamma series needs the index of the dynamical field")
    k = F.size
    full = Subspace.full(k)
    cur = full
    entries, flags, cores = [cur], [_abelian_flag(cur, F)], []
    line = Subspace.axes([gamma_index], k) if kind == "dist_gamma" else None
    stop = stop_at_abelian and kind == "dist_gamma"
    for _ in range(k + 1):
        if stop and flags[-1]:
            return DistSeriesTrace(kind, entries, flags, "abelian", gamma_index, cores=cores)
        other = full if kind == "dist_central" else cur
        res = core(_brackets(cur, other, F), F)
        cores.append(res)
        nxt = res.subspace if line is None else line + res.subspace
        if not nxt.issubset(cur):
            raise InternalConsistencyError(f"{kind} series is not nested")
        if nxt == cur:
            verdict = "abelian" if stop and flags[-1] else "stabilized"
            return DistSeriesTrace(kind, entries, flags, verdict, gamma_index, cores=cores)
        entries.append(nxt)
        flags.append(_abelian_flag(nxt, F))
        cur = nxt
        if cur.dim == 0:
            return DistSeriesTrace(kind, entries, flags, "zero", gamma_index, cores=cores)
    raise InternalConsistencyError(f"{kind} series did not terminate within {k + 1} steps")


def dist_integrability_order(trace: SeriesTrace) -> IntegrabilityOrder:
    if trace.kind != "dist_gamma":
        raise ValueError("distributional order needs a dist_gamma trace")
    return lie_integrability_order(trace)


def is_dist_solvable(V: RegularSpace | Frame) -> bool:
    return dist_series("dist_derived", V).verdict == "zero"


def is_dist_nilpotent(V: RegularSpace | Frame) -> bool:
    return dist_series("dist_central", V).verdict == "zero"


@dataclass(frozen=True)
class IntersectionCheck:
    ok: bool
    expected_dim: int
    witness: tuple[float, ...] | None = None
    note: str = "sampling certification"

    def __bool__(self):
        return self.ok


def module_intersection_check(W1: Subspace, W2: Subspace, V: RegularSpace | Frame,
                              samples: int = 32, seed: int = 7) -> IntersectionCheck:
    """Pointwise intersections of D_W1 and D_W2 must be the pointwise span of W1 and W2 intersected."""
    F = V.frame if isinstance(V, RegularSpace) else V
    W = W1.intersection(W2)
    pts = F.domain.points(samples, skip=1 << 15)
    A = F.matrices(pts)
    rng = np.random.default_rng(seed)
    for p, Ap in zip(pts, A):
        if not np.all(np.isfinite(Ap)):
            continue
        witness = tuple(float(v) for v in p)
        M1 = Ap @ W1.basis.T if W1.dim else np.zeros((F.n, 0))
        M2 = Ap @ W2.basis.T if W2.dim else np.zeros((F.n, 0))
        if M1.shape[1] == 0 or M2.shape[1] == 0:
            inter = np.zeros((0, F.n))
        else:
            K = np.hstack([M1, -M2])
            r = numerical_rank(K)
            _, _, vt = np.linalg.svd(K)
            null = vt[r:]
            inter = (M1 @ null[:, : W1.dim].T).T
        dim_p = numerical_rank(inter) if inter.size else 0
        if dim_p != W.dim:
            return IntersectionCheck(False, W.dim, witness)
        if dim_p:
            # a random element f.w1 = g.w2 of the pointwise intersection must lie in span W at p
            v = rng.standard_normal(len(inter)) @ inter
            MW = Ap @ W.basis.T
            y, *_ = np.linalg.lstsq(MW, v, rcond=None)
            if np.abs(MW @ y - v).max() > 1e-8 * (1 + np.abs(v).max()):
                return IntersectionCheck(False, W.dim, witness)
    return IntersectionCheck(True, W.dim)


@dataclass(frozen=True)
class RescalingResult:
    r: int | None
    r_prime: int | None

    @property
    def ok(self) -> bool:
        if self.r is None or self.r_prime is None:
            return self.r is None and self.r_prime is None
        return abs(self.r - self.r_prime) <= 1


def rescaled_frame(F: Frame, gamma_index: int, f: Expr) -> Frame:
    fields = list(F.fields)
    fields[gamma_index] = fields[gamma_index].scaled(f, f"f*{fields[gamma_index].name}")
    return Frame(tuple(fields), F.domain)


def rescaling_order(V: RegularSpace | Frame, gamma_index: int, f: Expr) -> RescalingResult:
    """Distributional orders of (V, Gamma) and (V', f Gamma) with V' the rescaled frame."""
    F = V.frame if isinstance(V, RegularSpace) else V
    dom = F.domain
    zt = is_zero_on(f, dom.box, dom.samples, dom.seed)
    vals = compile_exprs((simplify(f),))(np.vstack([np.asarray(dom.x0)[None, :], dom.points()]))[:, 0]
    # a sign change between samples means a zero somewhere in the (connected) box
    if zt or not np.all(np.isfinite(vals)) or np.any(np.abs(vals) <= 1e-12) or vals.min() * vals.max() < 0:
        raise PreconditionError("rescaling function vanishes or is undefined at a sample")
    r = dist_integrability_order(dist_series("dist_gamma", F, gamma_index)).order
    G = rescaled_frame(F, gamma_index, f)
    r2 = dist_integrability_order(dist_series("dist_gamma", G, gamma_index)).order
    return RescalingResult(r, r2)


@dataclass(frozen=True)
class NormalFormProfile:
    """Block sizes d_s and cumulative sizes w_s of a series that reaches zero."""

    kind: str
    dims: tuple[int, ...]

    @classmethod
    def from_trace(cls, trace: SeriesTrace) -> "NormalFormProfile":
        chain = trace.chain_to_zero()
        return cls(trace.kind, tuple(a.dim - b.dim for a, b in zip(chain, chain[1:])))

    @property
    def depth(self) -> int:
        return len(self.dims)

    @property
    def cumulative(self) -> tuple[int, ...]:
        return tuple(int(v) for v in np.cumsum(self.dims))

    def block_of(self, i: int) -> int:
        """Zero-based block index of zero-based coordinate i."""
        return int(np.searchsorted(np.asarray(self.cumulative), i, side="right"))


@dataclass
class NormalFormCheck:
    ok: bool
    triangular_error: float
    dependence_error: float | None
    samples: int
    skipped: int
    witness: tuple[float, ...] | None = None
    tol: float = TOL_NF

    def __bool__(self):
        return self.ok


_FD6 = np.array([-1.0, 9.0, -45.0, 0.0, 45.0, -9.0, 1.0]) / 60.0
_FD4 = np.array([1.0, -8.0, 0.0, 8.0, -1.0]) / 12.0


def _directional(fun, pts: np.ndarray, dirs: np.ndarray, h: float, stencil: np.ndarray) -> np.ndarray:
    """Central finite-difference derivative of fun (batched) along per-point directions."""
    half = len(stencil) // 2
    offs = np.arange(-half, half + 1)
    m = len(pts)
    probe = (pts[None, :, :] + h * offs[:, None, None] * dirs[None, :, :]).reshape(-1, pts.shape[1])
    vals = fun(probe)
    vals = vals.reshape(len(offs), m, -1)
    return np.tensordot(stencil, vals, axes=(0, 0)) / h


def normal_form_verify(V: RegularSpace | Frame, chart, profile: NormalFormProfile,
                       samples: int = 32, tol: float = TOL_NF, strong: bool | None = None,
                       h: float = 2e-3, h_outer: float = 1e-2) -> NormalFormCheck:
    """Push the adapted basis through the chart and test the (strong) triangular pattern."""
    F = V.frame if isinstance(V, RegularSpace) else V
    n = F.n
    strong = profile.kind.endswith("central") if strong is None else strong
    basis = chart.adapted_basis()
    if tuple(chart.block_dims) != tuple(profile.dims):
        raise ValueError("chart stages do not match the profile")
    w = (0,) + profile.cumulative
    dom = F.domain
    # keep finite-difference probes away from the box boundary
    x0 = np.asarray(dom.x0)
    margin = 0.15 * (dom.upper - dom.lower)
    lo = np.minimum(dom.lower + margin, x0 - 1e-3)
    hi = np.maximum(dom.upper - margin, x0 + 1e-3)
    pts = Domain(tuple(zip(lo, hi)), dom.x0, dom.samples, dom.seed).points(samples, skip=1 << 16)

    def fields_at(coeffs: np.ndarray, P: np.ndarray) -> np.ndarray:
        return np.einsum("mnk,k->mn", F.matrices(P), coeffs)

    def pushforward(i: int, P: np.ndarray) -> np.ndarray:
        dirs = fields_at(basis[i], P)
        return _directional(chart.Q, P, dirs, h, _FD6)

    skipped = 0
    tri = np.zeros((len(pts), n, n))
    for i in range(n):
        try:
            tri[:, i, :] = pushforward(i, pts)
        except ArithmeticError as exc:
            log.info("pushforward failed for field %d: %s", i, exc)
            tri[:, i, :] = np.nan
    good = np.all(np.isfinite(tri.reshape(len(pts), -1)), axis=1)
    skipped = int((~good).sum())
    worst, witness = 0.0, None
    for i in range(n):
        s = profile.block_of(i)
        for j in range(w[s + 1]):
            target = 1.0 if i == j else 0.0
            err = np.abs(tri[good, i, j] - target)
            if err.size and err.max() > worst:
                worst = float(err.max())
                witness = tuple(float(v) for v in pts[good][int(np.argmax(err))])
    dep = None
    if strong:
        dep = 0.0
        P = pts[good]
        for i in range(n):
            s = profile.block_of(i)
            for k in range(w[s + 1], n):
                t = profile.block_of(k)
                for j in range(w[t], n):
                    # span of d/dy^j for j beyond W_{t-1} equals the span of these frame combinations
                    dirs = chart.coordinate_direction(P, j)
                    d = _directional(lambda X: pushforward(i, X)[:, k:k + 1], P, dirs, h_outer, _FD4)
                    e = float(np.abs(d).max(initial=0.0))
                    if e > dep:
                        dep = e
                        if e > tol:
                            witness = tuple(float(v) for v in P[int(np.argmax(np.abs(d[:, 0])))])
    ok = good.any() and worst <= tol and (dep is None or dep <= tol)
    return NormalFormCheck(bool(ok), worst, dep, int(good.sum()), skipped, witness, tol)
