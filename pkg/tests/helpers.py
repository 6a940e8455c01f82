"""Random generators shared by the test modules."""

from __future__ import annotations

import numpy as np

from liequad.expr import Context, parse
from liequad.liealg import StructureConstants
from liequad.vfield import Domain, Frame, VectorField

NAMES3 = ("x1", "x2", "x3")


def random_poly(rng, variables, degree: int = 2, scale: int = 3) -> str:
    """Random polynomial text in the given variables with small rational coefficients."""
    terms = [str(int(rng.integers(-scale, scale + 1)))]
    for v in variables:
        terms.append(f"{int(rng.integers(-scale, scale + 1))}/2*{v}")
    if degree >= 2:
        for i, a in enumerate(variables):
            for b in variables[i:]:
                if rng.random() < 0.5:
                    terms.append(f"{int(rng.integers(-scale, scale + 1))}/4*{a}*{b}")
    return " + ".join(terms)


def field_from(texts, ctx: Context, name: str) -> VectorField:
    return VectorField(tuple(parse(t, ctx) for t in texts), name)


def triangular_frame(rng, strong: bool, domain: Domain | None = None) -> Frame:
    """X_i = d_i + sum_{k>i} f_i^k d_k in three variables (f_i^k depends on x^1..x^{k-1} when strong)."""
    ctx = Context(NAMES3, {})
    dom = domain or Domain(((-0.5, 0.5),) * 3, (0.05, -0.1, 0.08))

    def f(k):
        return random_poly(rng, NAMES3[:k] if strong else NAMES3)

    X1 = field_from(["1", f(1), f(2)], ctx, "X1")
    X2 = field_from(["0", "1", f(2)], ctx, "X2")
    X3 = field_from(["0", "0", "1"], ctx, "X3")
    return Frame((X1, X2, X3), dom)


def chain_frame(rng, f: str = "1", domain: Domain | None = None) -> Frame:
    """Gamma = f (d1 + g2(x1) d2 + g3(x1, x2) d3) with d2, d3."""
    ctx = Context(NAMES3, {})
    dom = domain or Domain(((-0.5, 0.5),) * 3, (0.1, -0.05, 0.12))
    g2 = random_poly(rng, NAMES3[:1])
    g3 = random_poly(rng, NAMES3[:2])
    G = field_from([f"({f})", f"({f})*({g2})", f"({f})*({g3})"], ctx, "G")
    return Frame((G, field_from(["0", "1", "0"], ctx, "d2"), field_from(["0", "0", "1"], ctx, "d3")), dom)


def random_positive(rng, variables=NAMES3) -> str:
    kind = rng.integers(0, 3)
    a = rng.uniform(-1, 1, len(variables)).round(2)
    lin = " + ".join(f"{c}*{v}" for c, v in zip(a, variables))
    if kind == 0:
        return f"exp({lin})"
    if kind == 1:
        return f"2 + sin({lin})"
    return "1 + " + " + ".join(f"{abs(c)}*{v}^2" for c, v in zip(a, variables))


def random_poly_field(rng, n: int, ctx: Context, name: str, degree: int = 2) -> VectorField:
    return field_from([random_poly(rng, ctx.variables, degree) for _ in range(n)], ctx, name)


# ---------------------------------------------------------------- abstract Lie algebras

def _from_matrices(basis: list[np.ndarray]) -> StructureConstants:
    n = len(basis)
    M = np.array([b.reshape(-1) for b in basis]).T
    c = np.zeros((n, n, n))
    for i in range(n):
        for j in range(n):
            br = basis[i] @ basis[j] - basis[j] @ basis[i]
            coef, *_ = np.linalg.lstsq(M, br.reshape(-1), rcond=None)
            c[i, j] = coef
    return StructureConstants(np.where(np.abs(c) < 1e-12, 0.0, c))


def _unit(m, i, j):
    E = np.zeros((m, m))
    E[i, j] = 1.0
    return E


def upper_triangular(m: int, strict: bool) -> StructureConstants:
    return _from_matrices([_unit(m, i, j) for i in range(m) for j in range(i + (1 if strict else 0), m)])


def sl2() -> StructureConstants:
    return StructureConstants.from_brackets(3, {(0, 1): [0, 2, 0], (0, 2): [0, 0, -2], (1, 2): [1, 0, 0]})


def so3() -> StructureConstants:
    return StructureConstants.from_brackets(3, {(0, 1): [0, 0, 1], (1, 2): [1, 0, 0], (2, 0): [0, 1, 0]})


def heisenberg() -> StructureConstants:
    return StructureConstants.from_brackets(3, {(0, 1): [0, 0, 1]})


def semidirect(phi: np.ndarray) -> StructureConstants:
    """R acting on the abelian ideal R^k by the matrix phi: [e0, e_i] = sum_j phi_ji e_j."""
    k = phi.shape[0]
    n = k + 1
    c = np.zeros((n, n, n))
    for i in range(k):
        c[0, i + 1, 1:] = phi[:, i]
        c[i + 1, 0, 1:] = -phi[:, i]
    return StructureConstants(c)


def direct_sum(a: StructureConstants, b: StructureConstants) -> StructureConstants:
    n, m = a.n, b.n
    c = np.zeros((n + m,) * 3)
    c[:n, :n, :n] = a.tensor
    c[n:, n:, n:] = b.tensor
    return StructureConstants(c)


def change_basis(c: StructureConstants, P: np.ndarray) -> StructureConstants:
    """Constants in the basis f_a = sum_i P_ia e_i."""
    Pinv = np.linalg.inv(P)
    t = np.einsum("ia,jb,ijk,ck->abc", P, P, c.tensor, Pinv)
    return StructureConstants(np.where(np.abs(t) < 1e-12, 0.0, t))


def random_lie_algebra(rng) -> StructureConstants:
    kind = int(rng.integers(0, 8))
    if kind == 0:
        c = upper_triangular(int(rng.integers(2, 4)), strict=False)
    elif kind == 1:
        c = upper_triangular(int(rng.integers(3, 5)), strict=True)
    elif kind == 2:
        c = sl2()
    elif kind == 3:
        c = so3()
    elif kind == 4:
        c = heisenberg()
    elif kind == 5:
        k = int(rng.integers(1, 4))
        phi = rng.integers(-2, 3, (k, k)).astype(float)
        if rng.random() < 0.5:
            phi = np.triu(phi, 1)
        c = semidirect(phi)
    elif kind == 6:
        c = direct_sum(heisenberg(), semidirect(np.array([[1.0]])))
    else:
        c = direct_sum(sl2(), StructureConstants(np.zeros((1, 1, 1))))
    n = c.n
    P = np.eye(n) + np.triu(rng.integers(-1, 2, (n, n)), 1)
    perm = rng.permutation(n)
    return change_basis(c, P[:, perm])
