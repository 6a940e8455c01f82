"""Finite-dimensional real Lie algebras given by structure constants.

Subspaces are kept in a canonical reduced row-echelon basis so that equality
of subspaces, and hence stabilization of a series, is a matrix comparison.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

from .expr import Expr, is_zero_on
from .vfield import Frame, combine, field_is_zero, lie_bracket

RANK_TOL = 1e-10
ABS_FLOOR = 1e-12
TOL_SC = 1e-8
SNAP_TOL = 1e-11


class InternalConsistencyError(RuntimeError):
    pass


def _snap(M: np.ndarray) -> np.ndarray:
    M = np.where(np.abs(M) < 1e-13, 0.0, M)
    out = M.copy()
    for idx in zip(*np.nonzero(M)):
        x = M[idx]
        f = Fraction(float(x)).limit_denominator(64)
        if abs(x - float(f)) < SNAP_TOL * max(1.0, abs(x)):
            out[idx] = float(f)
    return out


def numerical_rank(M: np.ndarray, tol: float = RANK_TOL, floor: float = ABS_FLOOR) -> int:
    if M.size == 0:
        return 0
    s = np.linalg.svd(np.atleast_2d(M), compute_uv=False)
    if s[0] <= floor:
        return 0
    return int(np.sum(s > max(tol * s[0], floor)))


def _canonical_rows(vectors: np.ndarray, n: int, tol: float = RANK_TOL) -> np.ndarray:
    M = np.asarray(vectors, dtype=float).reshape(-1, n)
    if M.size == 0:
        return np.zeros((0, n))
    scale = np.abs(M).max()
    if scale <= ABS_FLOOR:
        return np.zeros((0, n))
    _, s, vt = np.linalg.svd(M / scale, full_matrices=False)
    rank = int(np.sum(s > tol * s[0]))
    R = vt[:rank].copy()
    row = 0
    for col in range(n):
        if row == rank:
            break
        piv = row + int(np.argmax(np.abs(R[row:, col])))
        if abs(R[piv, col]) <= tol:
            continue
        R[[row, piv]] = R[[piv, row]]
        R[row] /= R[row, col]
        for r in range(rank):
            if r != row:
                R[r] -= R[r, col] * R[row]
        R[:, col] = 0.0
        R[row, col] = 1.0
        row += 1
    return _snap(R[:row] if row < rank else R)


class Subspace:
    """Real subspace of R^n (coordinates over a frame), stored in canonical echelon form."""

    __slots__ = ("basis", "n")

    def __init__(self, basis: np.ndarray, n: int):
        self.basis = np.asarray(basis, dtype=float).reshape(-1, n)
        self.basis.setflags(write=False)
        self.n = n

    @classmethod
    def span(cls, vectors, n: int, tol: float = RANK_TOL) -> "Subspace":
        return cls(_canonical_rows(vectors, n, tol), n)

    @classmethod
    def zero(cls, n: int) -> "Subspace":
        return cls(np.zeros((0, n)), n)

    @classmethod
    def full(cls, n: int) -> "Subspace":
        return cls(np.eye(n), n)

    @classmethod
    def axes(cls, indices: Sequence[int], n: int) -> "Subspace":
        return cls.span(np.eye(n)[list(indices)], n)

    @property
    def dim(self) -> int:
        return self.basis.shape[0]

    def __eq__(self, other):
        if not isinstance(other, Subspace):
            return NotImplemented
        return (self.n == other.n and self.dim == other.dim
                and np.allclose(self.basis, other.basis, atol=1e-8))

    def __hash__(self):
        return hash((self.n, self.dim))

    def __add__(self, other: "Subspace") -> "Subspace":
        return Subspace.span(np.vstack([self.basis, other.basis]), self.n)

    def contains(self, v, tol: float = 1e-8) -> bool:
        v = np.asarray(v, dtype=float).reshape(-1, self.n)
        if self.dim == 0:
            return bool(np.all(np.abs(v) <= tol * (1 + np.abs(v).max(initial=0))))
        coef, *_ = np.linalg.lstsq(self.basis.T, v.T, rcond=None)
        res = v.T - self.basis.T @ coef
        return bool(np.all(np.abs(res) <= tol * (1 + np.abs(v).max())))

    def issubset(self, other: "Subspace", tol: float = 1e-8) -> bool:
        return self.dim == 0 or other.contains(self.basis, tol)

    def intersection(self, other: "Subspace") -> "Subspace":
        if self.dim == 0 or other.dim == 0:
            return Subspace.zero(self.n)
        M = np.vstack([self.basis, -other.basis]).T
        _, s, vt = np.linalg.svd(M)
        rank = numerical_rank(M)
        null = vt[rank:]
        return Subspace.span(null[:, : self.dim] @ self.basis, self.n)

    def annihilator_in(self, ambient: "Subspace") -> np.ndarray:
        """Rows z in the row space of ``ambient`` with z . v = 0 for v in self; canonical echelon."""
        B = ambient.basis
        if self.dim == 0:
            return Subspace.span(B, self.n).basis
        # z = y B, need (B S^T)^T y = 0
        G = B @ self.basis.T
        _, s, vt = np.linalg.svd(G.T)
        rank = numerical_rank(G)
        Y = vt[rank:]
        return Subspace.span(Y @ B, self.n).basis if Y.size else np.zeros((0, self.n))

    def __repr__(self):
        return f"Subspace(dim={self.dim}, basis={np.round(self.basis, 12).tolist()})"


@dataclass
class StructureConstants:
    """c[i, j, k] with [X_i, X_j] = sum_k c[i, j, k] X_k."""

    tensor: np.ndarray
    residual: float = 0.0
    closed: bool = True
    witness: tuple[int, int] | None = None
    diagnostic: float | None = None
    tol: float = TOL_SC

    @classmethod
    def from_tensor(cls, c) -> "StructureConstants":
        c = np.asarray(c, dtype=float)
        if not np.allclose(c, -c.transpose(1, 0, 2), atol=1e-12):
            raise ValueError("structure constants must be antisymmetric in the first two indices")
        return cls(c)

    @classmethod
    def from_brackets(cls, n: int, table: dict[tuple[int, int], Sequence[float]]) -> "StructureConstants":
        c = np.zeros((n, n, n))
        for (i, j), v in table.items():
            c[i, j] = v
            c[j, i] = -np.asarray(v, dtype=float)
        return cls(c)

    @property
    def n(self) -> int:
        return self.tensor.shape[0]

    def bracket(self, u, v) -> np.ndarray:
        return np.einsum("i,j,ijk->k", u, v, self.tensor)

    def jacobi_residual(self) -> float:
        c = self.tensor
        # sum over cyclic (i, j, l): c_ij^m c_ml^k
        t = np.einsum("ijm,mlk->ijlk", c, c)
        cyc = t + t.transpose(1, 2, 0, 3) + t.transpose(2, 0, 1, 3)
        return float(np.abs(cyc).max(initial=0.0))


def bracket_space(S: Subspace, T: Subspace, c: StructureConstants) -> Subspace:
    n = c.n
    if S.dim == 0 or T.dim == 0:
        return Subspace.zero(n)
    vecs = np.einsum("ai,bj,ijk->abk", S.basis, T.basis, c.tensor).reshape(-1, n)
    return Subspace.span(vecs, n)


def _snap_constants(v: np.ndarray) -> np.ndarray:
    v = v.copy()
    big = np.abs(v).max(initial=0.0)
    v[np.abs(v) < 1e-9 * (1 + big)] = 0.0
    for k, x in enumerate(v):
        if x:
            f = Fraction(float(x)).limit_denominator(10000)
            if abs(x - float(f)) < 1e-9 * (1 + abs(x)):
                v[k] = float(f)
    return v


def structure_constants(F: Frame, samples: int | None = None, seed_skip: int = 1 << 10) -> StructureConstants:
    """Fit constant c_ij^k by stacked least squares over samples, then certify symbolically."""
    n = F.size
    m = max(2 * n, samples or 4 * n)
    pts = F.domain.points(m, skip=seed_skip)
    A = F.matrices(pts)
    ok = np.all(np.isfinite(A), axis=(1, 2))
    pts, A = pts[ok], A[ok]
    if len(pts) < 2:
        raise ValueError("too few admissible samples for the constant fit")
    A_stack = A.reshape(-1, n)
    if numerical_rank(A_stack) < n:
        raise np.linalg.LinAlgError("stacked frame matrix is rank deficient")
    c = np.zeros((n, n, n))
    worst = 0.0
    for i in range(n):
        for j in range(i + 1, n):
            B = lie_bracket(F.fields[i], F.fields[j])
            if B.is_zero():
                continue
            b = B(pts)
            if not np.all(np.isfinite(b)):
                raise ValueError(f"bracket [{F.fields[i].name},{F.fields[j].name}] undefined at a sample")
            coef, *_ = np.linalg.lstsq(A_stack, b.reshape(-1), rcond=None)
            coef = _snap_constants(coef)
            fit = A_stack @ coef - b.reshape(-1)
            res = float(np.abs(fit).max() / (1 + np.abs(b).max()))
            worst = max(worst, res)
            diag = _pointwise_spread(A, b)
            if res >= TOL_SC:
                return StructureConstants(c, res, False, (i, j), diag)
            diff = combine([1.0] + [-x for x in coef], [B] + list(F.fields))
            zero, _, _ = field_is_zero(diff, F.domain)
            if not zero:
                return StructureConstants(c, res, False, (i, j), diag)
            c[i, j] = coef
            c[j, i] = -coef
    return StructureConstants(c, worst, True, None, 0.0)


def _pointwise_spread(A: np.ndarray, b: np.ndarray) -> float:
    """Largest standard deviation of the pointwise solutions c(p) (NaN if A(p) is singular)."""
    sols = []
    for Ap, bp in zip(A, b):
        try:
            sols.append(np.linalg.solve(Ap, bp))
        except np.linalg.LinAlgError:
            return float("nan")
    return float(np.std(np.array(sols), axis=0).max())


@dataclass
class SeriesTrace:
    """A recorded chain of subspaces with abelian flags and the reason it ended."""

    kind: str
    entries: list[Subspace]
    abelian: list[bool]
    verdict: str
    gamma_index: int | None = None
    notes: list[str] = field(default_factory=list)

    @property
    def dims(self) -> list[int]:
        return [s.dim for s in self.entries]

    @property
    def last(self) -> Subspace:
        return self.entries[-1]

    def chain_to_zero(self) -> list[Subspace]:
        """Nested chain ending at {0}, as used by the chart construction."""
        chain = list(self.entries)
        if chain[-1].dim != 0:
            if self.verdict != "abelian":
                raise ValueError(f"{self.kind} series does not terminate ({self.verdict})")
            chain.append(Subspace.zero(chain[-1].n))
        return chain


@dataclass(frozen=True)
class IntegrabilityOrder:
    """Order r = k + 1 where k indexes the first abelian entry, or not integrable."""

    abelian_index: int | None
    kind: str = "gamma"

    @property
    def integrable(self) -> bool:
        return self.abelian_index is not None

    @property
    def order(self) -> int | None:
        return None if self.abelian_index is None else self.abelian_index + 1

    def __bool__(self):
        return self.integrable


def _is_abelian(S: Subspace, c: StructureConstants) -> bool:
    return bracket_space(S, S, c).dim == 0


def _run_series(kind: str, c: StructureConstants, step, stop_abelian: bool, gamma_index=None) -> SeriesTrace:
    n = c.n
    cur = Subspace.full(n)
    entries, flags = [cur], [_is_abelian(cur, c)]
    for _ in range(n + 1):
        if stop_abelian and flags[-1]:
            return SeriesTrace(kind, entries, flags, "abelian", gamma_index)
        nxt = step(cur)
        if not nxt.issubset(cur):
            raise InternalConsistencyError(f"{kind} series is not nested")
        if nxt == cur:
            return SeriesTrace(kind, entries, flags, "stabilized", gamma_index)
        entries.append(nxt)
        flags.append(_is_abelian(nxt, c))
        cur = nxt
        if cur.dim == 0:
            return SeriesTrace(kind, entries, flags, "zero", gamma_index)
    raise InternalConsistencyError(f"{kind} series did not terminate within {n + 1} steps")


def derived_series(c: StructureConstants) -> SeriesTrace:
    return _run_series("derived", c, lambda S: bracket_space(S, S, c), False)


def central_series(c: StructureConstants) -> SeriesTrace:
    full = Subspace.full(c.n)
    return _run_series("central", c, lambda S: bracket_space(full, S, c), False)


def gamma_series(c: StructureConstants, gamma_index: int) -> SeriesTrace:
    line = Subspace.axes([gamma_index], c.n)
    return _run_series("gamma", c, lambda S: line + bracket_space(S, S, c), True, gamma_index)


def is_solvable(c: StructureConstants) -> bool:
    return derived_series(c).verdict == "zero"


def is_nilpotent(c: StructureConstants) -> bool:
    return central_series(c).verdict == "zero"


def lie_integrability_order(trace: SeriesTrace) -> IntegrabilityOrder:
    if not trace.kind.endswith("gamma"):
        raise ValueError("integrability order needs a gamma series")
    for k, flag in enumerate(trace.abelian):
        if flag:
            return IntegrabilityOrder(k, trace.kind)
    return IntegrabilityOrder(None, trace.kind)


@dataclass(frozen=True)
class SubspaceProps:
    is_ideal: bool
    is_abelian: bool


def subspace_props(S: Subspace, c: StructureConstants) -> SubspaceProps:
    return SubspaceProps(bracket_space(Subspace.full(c.n), S, c).issubset(S), _is_abelian(S, c))


@dataclass(frozen=True)
class CocycleCheck:
    ok: bool
    witness_pair: tuple[int, int] | None = None
    witness_point: tuple[float, ...] | None = None
    value: float = 0.0

    def __bool__(self):
        return self.ok


def cocycle_residual(h: Sequence[Expr], c: StructureConstants, F: Frame, i: int, j: int) -> Expr:
    from .expr import Add, Mul, Neg, const, simplify

    terms = [F.fields[i].apply(h[j]), Neg(F.fields[j].apply(h[i]))]
    for k in range(c.n):
        if c.tensor[i, j, k]:
            terms.append(Mul((const(-float(c.tensor[i, j, k])), h[k])))
    return simplify(Add(tuple(terms)))


def cocycle_check(h: Sequence[Expr], c: StructureConstants, F: Frame, domain=None) -> CocycleCheck:
    """X_i(h_j) - X_j(h_i) - sum_k c_ij^k h_k = 0 for every pair."""
    if len(h) != c.n:
        raise ValueError("cochain length must equal the algebra dimension")
    domain = domain or F.domain
    for i in range(c.n):
        for j in range(i + 1, c.n):
            r = cocycle_residual(h, c, F, i, j)
            zt = is_zero_on(r, domain.box, domain.samples, domain.seed)
            if not zt:
                return CocycleCheck(False, (i, j), zt.witness, zt.value)
    return CocycleCheck(True)
