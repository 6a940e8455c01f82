"""Vector fields on coordinate boxes: brackets, frames, pointwise independence."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Mapping, Sequence

import numpy as np

from .expr import (ONE, ZERO, Expr, ExprDomainError, IndeterminateError, Mul, Num, Var,
                   compile_exprs, const, diff, evaluate, is_zero_expr, is_zero_on, simplify, to_str)
from .sampling import halton

SIGMA_TOL = 1e-10


@dataclass(frozen=True)
class Domain:
    """Coordinate box with a reference point and the sampling settings used on it."""

    box: tuple[tuple[float, float], ...]
    x0: tuple[float, ...]
    samples: int = 64
    seed: int = 0

    def __post_init__(self):
        box = tuple((float(lo), float(hi)) for lo, hi in self.box)
        x0 = tuple(float(v) for v in self.x0)
        if len(x0) != len(box):
            raise ValueError("reference point and box have different dimensions")
        for (lo, hi), v in zip(box, x0):
            if not lo < hi:
                raise ValueError(f"degenerate interval [{lo}, {hi}]")
            if not lo < v < hi:
                raise ValueError(f"reference point coordinate {v} is not inside ({lo}, {hi})")
        object.__setattr__(self, "box", box)
        object.__setattr__(self, "x0", x0)

    @property
    def n(self) -> int:
        return len(self.box)

    @property
    def lower(self) -> np.ndarray:
        return np.array([lo for lo, _ in self.box])

    @property
    def upper(self) -> np.ndarray:
        return np.array([hi for _, hi in self.box])

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lower + self.upper)

    def points(self, count: int | None = None, skip: int = 0) -> np.ndarray:
        return halton(self.box, self.samples if count is None else count, self.seed, skip)

    def contains(self, p, margin: float = 0.0) -> bool:
        p = np.asarray(p, dtype=float)
        return bool(np.all(p >= self.lower + margin) and np.all(p <= self.upper - margin))

    def inside(self, pts: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(pts)
        return np.all((pts >= self.lower) & (pts <= self.upper), axis=1)


@dataclass(frozen=True)
class VectorField:
    """Coefficient expressions of sum_i f^i d/dx^i."""

    components: tuple[Expr, ...]
    name: str = field(default="", compare=False)

    def __post_init__(self):
        object.__setattr__(self, "components", tuple(self.components))

    @property
    def n(self) -> int:
        return len(self.components)

    def __call__(self, points: np.ndarray) -> np.ndarray:
        """Values at points (m, n) -> (m, n); NaN where undefined."""
        return compile_exprs(self.components)(points)

    def at(self, point) -> np.ndarray:
        return np.array([evaluate(c, point) for c in self.components])

    def apply(self, h: Expr) -> Expr:
        """Directional derivative X(h) as a simplified expression."""
        terms = [Mul((c, diff(h, i, simplified=False)))
                 for i, c in enumerate(self.components) if not is_zero_expr(c)]
        if not terms:
            return ZERO
        return simplify(terms[0] if len(terms) == 1 else _sum(terms))

    def is_zero(self) -> bool:
        return all(is_zero_expr(c) for c in self.components)

    def scaled(self, f: Expr, name: str | None = None) -> "VectorField":
        return VectorField(tuple(simplify(Mul((f, c))) for c in self.components),
                           name or f"({to_str(f)})*{self.name}")

    def __str__(self):
        return f"{self.name}: [" + ", ".join(to_str(c) for c in self.components) + "]"


def _sum(terms):
    from .expr import Add

    return Add(tuple(terms))


def coordinate_field(i: int, n: int, name: str | None = None) -> VectorField:
    return VectorField(tuple(ONE if k == i else ZERO for k in range(n)), name or f"d{i + 1}")


def combine(coefficients: Sequence[float], fields: Sequence[VectorField], name: str = "") -> VectorField:
    """Real linear combination sum_a c_a X_a with exact decimal coefficients."""
    n = fields[0].n
    comps = []
    for k in range(n):
        terms = []
        for c, f in zip(coefficients, fields):
            if c == 0 or is_zero_expr(f.components[k]):
                continue
            terms.append(f.components[k] if c == 1 else Mul((const(float(c)), f.components[k])))
        if not terms:
            comps.append(ZERO)
        else:
            comps.append(simplify(terms[0] if len(terms) == 1 else _sum(terms)))
    return VectorField(tuple(comps), name)


@lru_cache(maxsize=4096)
def _bracket(xc: tuple[Expr, ...], yc: tuple[Expr, ...]) -> tuple[Expr, ...]:
    n = len(xc)
    out = []
    for k in range(n):
        terms = []
        for i in range(n):
            if not is_zero_expr(xc[i]):
                d = diff(yc[k], i)
                if not is_zero_expr(d):
                    terms.append(Mul((xc[i], d)))
            if not is_zero_expr(yc[i]):
                d = diff(xc[k], i)
                if not is_zero_expr(d):
                    terms.append(Mul((Num(-1), yc[i], d)))
        if not terms:
            out.append(ZERO)
        else:
            out.append(simplify(terms[0] if len(terms) == 1 else _sum(terms)))
    return tuple(out)


def lie_bracket(X: VectorField, Y: VectorField) -> VectorField:
    """[X, Y]^k = sum_i X^i d_i Y^k - Y^i d_i X^k, simplified."""
    if X.n != Y.n:
        raise ValueError("fields live on spaces of different dimension")
    return VectorField(_bracket(X.components, Y.components), f"[{X.name},{Y.name}]")


def field_is_zero(X: VectorField, domain: Domain, samples: int | None = None, tol: float = 1e-9):
    """Componentwise zero test; returns (verdict, failing component index or None, ZeroTest)."""
    last = None
    for k, c in enumerate(X.components):
        zt = is_zero_on(c, domain.box, samples or domain.samples, domain.seed, tol)
        last = zt
        if not zt:
            return False, k, zt
    return True, None, last


@dataclass(frozen=True)
class Frame:
    """Ordered vector fields over one domain."""

    fields: tuple[VectorField, ...]
    domain: Domain
    verified: bool = False

    def __post_init__(self):
        object.__setattr__(self, "fields", tuple(self.fields))
        for f in self.fields:
            if f.n != self.domain.n:
                raise ValueError(f"field {f.name!r} has {f.n} components, expected {self.domain.n}")

    @property
    def n(self) -> int:
        return self.domain.n

    @property
    def size(self) -> int:
        return len(self.fields)

    @property
    def names(self) -> list[str]:
        return [f.name for f in self.fields]

    def _compiled(self):
        exprs = tuple(c for f in self.fields for c in f.components)
        return compile_exprs(exprs)

    def matrices(self, points: np.ndarray) -> np.ndarray:
        """Stacked frame matrices (m, n, k); column j is field j. NaN where undefined."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        vals = self._compiled()(pts)
        return vals.reshape(len(pts), self.size, self.n).transpose(0, 2, 1)

    def with_verified(self, flag: bool = True) -> "Frame":
        return Frame(self.fields, self.domain, flag)


def eval_frame(F: Frame, p) -> np.ndarray:
    """n x k matrix whose column j is field j at p."""
    M = F.matrices(np.asarray(p, dtype=float)[None, :])[0]
    if not np.all(np.isfinite(M)):
        i, j = np.argwhere(~np.isfinite(M))[0]
        f = F.fields[j]
        try:
            evaluate(f.components[i], p)
        except ExprDomainError as exc:
            raise ExprDomainError(f"field {f.name!r} component {i}: {exc}") from None
        raise ExprDomainError(f"field {f.name!r} component {i} is not finite at {list(p)}")
    return M


def canonical_frame(domain: Domain, names: Sequence[str] | None = None) -> Frame:
    n = domain.n
    names = names or [f"d{i + 1}" for i in range(n)]
    return Frame(tuple(coordinate_field(i, n, names[i]) for i in range(n)), domain)


@dataclass(frozen=True)
class FrameCheck:
    ok: bool
    min_sigma: float
    min_ratio: float
    witness: tuple[float, ...] | None
    skipped: int
    tol: float = SIGMA_TOL

    def __bool__(self):
        return self.ok


def verify_frame(F: Frame, samples: int | None = None, tol: float = SIGMA_TOL) -> FrameCheck:
    """Sampled pointwise-independence test at x0 and quasi-random samples."""
    if F.size != F.n:
        return FrameCheck(False, 0.0, 0.0, F.domain.x0, 0, tol)
    pts = np.vstack([np.asarray(F.domain.x0)[None, :], F.domain.points(samples)])
    mats = F.matrices(pts)
    finite = np.all(np.isfinite(mats), axis=(1, 2))
    if not finite[0]:
        raise ExprDomainError("frame is undefined at the reference point")
    skipped = int((~finite).sum())
    if not finite.any():
        raise IndeterminateError("frame undefined at every sample")
    sv = np.linalg.svd(mats[finite], compute_uv=False)
    ratios = sv[:, -1] / np.maximum(sv[:, 0], 1e-300)
    good_pts = pts[finite]
    bad = ratios <= tol
    witness = tuple(float(v) for v in good_pts[int(np.argmax(bad))]) if bad.any() else None
    return FrameCheck(not bad.any(), float(sv[:, -1].min()), float(ratios.min()), witness, skipped, tol)


@dataclass(frozen=True)
class SystemDef:
    """Domain, frame and the position of the dynamical field in the frame."""

    domain: Domain
    frame: Frame
    gamma_index: int
    variables: tuple[str, ...]
    parameters: Mapping[str, float] = field(default_factory=dict)
    name: str = ""
    mode: str = "auto"

    def __post_init__(self):
        if not 0 <= self.gamma_index < self.frame.size:
            raise ValueError("dynamical field index out of range")
        object.__setattr__(self, "variables", tuple(self.variables))
        object.__setattr__(self, "parameters", dict(self.parameters))

    @property
    def gamma(self) -> VectorField:
        return self.frame.fields[self.gamma_index]

    @property
    def n(self) -> int:
        return self.domain.n

    def variable(self, i: int) -> Var:
        return Var(i, self.variables[i])
