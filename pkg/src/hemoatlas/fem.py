"""Linear Lagrange finite elements on tetrahedra and boundary triangles.

Element integrals of products of P1 functions are evaluated in closed form
(barycentric monomial formula), so mass matrices with a linearly interpolated
coefficient are exact.  Quadrature rules are provided for loads with general
integrands and for error norms.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from math import factorial

import numpy as np
from scipy import sparse
from scipy.sparse import linalg as spla
from scipy.special import roots_jacobi

from .mesh import TetMesh, tet_volumes

logger = logging.getLogger(__name__)

DEFAULT_RTOL = 1e-10


class SolverError(RuntimeError):
    """Linear solve failed (no convergence or indefinite operator)."""


# -- element geometry --------------------------------------------------------


def tet_geometry(points: np.ndarray, tets: np.ndarray):
    """Basis gradients (M, 4, 3) and positive volumes (M,) of every tet."""
    p = points[tets]
    J = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0], p[:, 3] - p[:, 0]], axis=1)  # rows are edges
    det = np.linalg.det(J)
    if np.any(np.abs(det) < 6e-18):
        raise ValueError("degenerate tetrahedron")
    # rows of inv(J)^T... grads of lambda_1..3 are the columns of inv(J)
    Jinv = np.linalg.inv(J)
    g = np.empty((len(tets), 4, 3))
    g[:, 1:, :] = np.transpose(Jinv, (0, 2, 1))
    g[:, 0, :] = -g[:, 1:, :].sum(axis=1)
    return g, np.abs(det) / 6.0


def element_gradients(mesh: TetMesh, index: int):
    """Gradients of the four barycentric basis functions of one tet and its volume."""
    g, v = tet_geometry(mesh.nodes, mesh.tets[index : index + 1])
    return g[0], float(v[0])


def _coeff_at_nodes(coeff, n_nodes):
    if np.isscalar(coeff):
        if coeff < 0:
            raise ValueError("coefficient must be non-negative")
        return np.full(n_nodes, float(coeff))
    c = np.asarray(coeff, dtype=float)
    if c.shape != (n_nodes,):
        raise ValueError(f"coefficient has {c.size} values, expected {n_nodes}")
    if np.any(c < 0):
        raise ValueError("coefficient must be non-negative")
    return c


def stiffness_elements(grads, vols, cmean=None):
    Ke = vols[:, None, None] * np.einsum("eia,eja->eij", grads, grads)
    return Ke if cmean is None else Ke * cmean[:, None, None]


def mass_elements(vols, ce):
    """Exact P1 mass with a linear coefficient: V/120 (1+d_ij)(S + c_i + c_j)."""
    S = ce.sum(axis=1)
    Me = (S[:, None, None] + ce[:, :, None] + ce[:, None, :]) * (vols / 120.0)[:, None, None]
    Me[:, np.arange(4), np.arange(4)] *= 2.0
    return Me


def boundary_mass_elements(areas, ce):
    """Exact P1 triangle mass with a linear coefficient: A/60 (1+d_ij)(S + c_i + c_j)."""
    S = ce.sum(axis=1)
    Me = (S[:, None, None] + ce[:, :, None] + ce[:, None, :]) * (areas / 60.0)[:, None, None]
    Me[:, np.arange(3), np.arange(3)] *= 2.0
    return Me


def barycentric_monomial(exponents, measure, dim=3):
    """Exact integral of prod(lambda_k ** a_k) over a simplex of given measure."""
    num = 1
    for a in exponents:
        num *= factorial(int(a))
    return measure * factorial(dim) * num / factorial(int(sum(exponents)) + dim)


# -- quadrature --------------------------------------------------------------


@dataclass(frozen=True)
class Quadrature:
    """Barycentric points (Q, d+1) and weights summing to one."""

    points: np.ndarray
    weights: np.ndarray


def tet_quadrature(degree: int = 2) -> Quadrature:
    if degree <= 1:
        return Quadrature(np.full((1, 4), 0.25), np.ones(1))
    if degree == 2:
        a, b = 0.5854101966249685, 0.1381966011250105
        pts = np.full((4, 4), b)
        np.fill_diagonal(pts, a)
        return Quadrature(pts, np.full(4, 0.25))
    # conical product Gauss rule on the collapsed cube, exact to 2n-1
    n = degree // 2 + 1
    x0, w0 = roots_jacobi(n, 2.0, 0.0)
    x1, w1 = roots_jacobi(n, 1.0, 0.0)
    x2, w2 = roots_jacobi(n, 0.0, 0.0)
    a, b, c = (x0 + 1) / 2, (x1 + 1) / 2, (x2 + 1) / 2
    A, B, C = np.meshgrid(a, b, c, indexing="ij")
    W = np.einsum("i,j,k->ijk", w0 / 8, w1 / 4, w2 / 2)
    l1 = A
    l2 = (1 - A) * B
    l3 = (1 - A) * (1 - B) * C
    l0 = 1 - l1 - l2 - l3
    pts = np.stack([l0.ravel(), l1.ravel(), l2.ravel(), l3.ravel()], axis=1)
    w = W.ravel()
    return Quadrature(pts, w / w.sum())


def triangle_quadrature(degree: int = 2) -> Quadrature:
    if degree <= 1:
        return Quadrature(np.full((1, 3), 1 / 3), np.ones(1))
    if degree == 2:
        pts = np.full((3, 3), 1 / 6)
        np.fill_diagonal(pts, 2 / 3)
        return Quadrature(pts, np.full(3, 1 / 3))
    n = degree // 2 + 1
    x0, w0 = roots_jacobi(n, 1.0, 0.0)
    x1, w1 = roots_jacobi(n, 0.0, 0.0)
    a, b = (x0 + 1) / 2, (x1 + 1) / 2
    A, B = np.meshgrid(a, b, indexing="ij")
    W = np.outer(w0, w1)
    l1 = A
    l2 = (1 - A) * B
    pts = np.stack([(1 - l1 - l2).ravel(), l1.ravel(), l2.ravel()], axis=1)
    w = W.ravel()
    return Quadrature(pts, w / w.sum())


def integrate(points, cells, func, degree=2) -> float:
    """Integral of ``func(x) -> (Q,)`` over tets (4 columns) or triangles (3 columns)."""
    cells = np.asarray(cells)
    if cells.shape[1] == 4:
        q = tet_quadrature(degree)
        meas = np.abs(tet_volumes(points, cells))
    else:
        q = triangle_quadrature(degree)
        p = points[cells]
        meas = 0.5 * np.linalg.norm(np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]), axis=1)
    X = np.einsum("qk,ekd->eqd", q.points, points[cells])
    vals = np.asarray(func(X.reshape(-1, 3)), dtype=float).reshape(len(cells), -1)
    return float((meas[:, None] * vals * q.weights).sum())


def load_vector(points, cells, func, n_nodes, degree=2) -> np.ndarray:
    """Vector of integrals of ``func * phi_i`` with the given quadrature."""
    cells = np.asarray(cells)
    if cells.shape[1] == 4:
        q = tet_quadrature(degree)
        meas = np.abs(tet_volumes(points, cells))
    else:
        q = triangle_quadrature(degree)
        p = points[cells]
        meas = 0.5 * np.linalg.norm(np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]), axis=1)
    X = np.einsum("qk,ekd->eqd", q.points, points[cells])
    vals = np.asarray(func(X.reshape(-1, 3)), dtype=float).reshape(len(cells), -1)
    local = np.einsum("eq,q,qk->ek", vals * meas[:, None], q.weights, q.points)
    return np.bincount(cells.ravel(), weights=local.ravel(), minlength=n_nodes)


# -- sparse assembly -----------------------------------------------------------


class Assembler:
    """Scatter of element matrices into a fixed CSR pattern.

    The pattern and the element-entry -> CSR-slot map are built once, so each
    assembly is a single ``bincount``.  Accumulation order does not depend on
    element order beyond floating-point summation of at most a few terms.
    """

    def __init__(self, cells: np.ndarray, n: int):
        cells = np.asarray(cells, dtype=np.int64)
        self.cells = cells
        self.n = n
        k = cells.shape[1]
        rows = np.repeat(cells, k, axis=1).ravel()
        cols = np.tile(cells, (1, k)).ravel()
        key = rows * n + cols
        uniq, self.slot = np.unique(key, return_inverse=True)
        self.slot = self.slot.ravel()
        self.indices = (uniq % n).astype(np.int32 if n < 2**31 else np.int64)
        row_of = uniq // n
        self.indptr = np.concatenate([[0], np.cumsum(np.bincount(row_of, minlength=n))]).astype(self.indices.dtype)
        self.nnz = len(uniq)

    def matrix(self, local: np.ndarray) -> sparse.csr_matrix:
        data = np.bincount(self.slot, weights=np.asarray(local).ravel(), minlength=self.nnz)
        return sparse.csr_matrix((data, self.indices.copy(), self.indptr.copy()), shape=(self.n, self.n))

    def vector(self, local: np.ndarray) -> np.ndarray:
        return np.bincount(self.cells.ravel(), weights=np.asarray(local).ravel(), minlength=self.n)


@dataclass
class SparseOperator:
    """Assembled sparse matrix with a symmetry flag and a cached solver."""

    matrix: sparse.csr_matrix
    symmetric: bool = True
    _lu: object = field(default=None, init=False, repr=False)

    @property
    def shape(self):
        return self.matrix.shape

    def __matmul__(self, x):
        return self.matrix @ x

    def __add__(self, other):
        o = other.matrix if isinstance(other, SparseOperator) else other
        sym = self.symmetric and (other.symmetric if isinstance(other, SparseOperator) else False)
        return SparseOperator((self.matrix + o).tocsr(), sym)

    def __mul__(self, s: float):
        return SparseOperator((self.matrix * s).tocsr(), self.symmetric)

    __rmul__ = __mul__

    def toarray(self):
        return self.matrix.toarray()

    def is_symmetric(self, tol=1e-12) -> bool:
        A = self.matrix
        scale = abs(A).max() if A.nnz else 0.0
        return bool(A.nnz == 0 or abs(A - A.T).max() <= tol * scale)

    def factorize(self):
        if self._lu is None:
            self._lu = spla.splu(self.matrix.tocsc())
        return self._lu

    def solve(self, b, rtol=DEFAULT_RTOL, method="direct"):
        """Solve ``A x = b`` with relative residual at most ``rtol``.

        ``direct`` reuses a cached sparse LU (with one refinement sweep when
        the residual is above tolerance); ``cg`` runs :func:`solve_spd`.
        """
        b = np.asarray(b, dtype=float)
        if method == "cg":
            return solve_spd(self, b, rtol)
        lu = self.factorize()
        x = lu.solve(b)
        bn = np.linalg.norm(b)
        if bn == 0:
            return np.zeros_like(b)
        for _ in range(3):
            r = b - self.matrix @ x
            if np.linalg.norm(r) <= rtol * bn:
                break
            x += lu.solve(r)
        else:
            raise SolverError(f"direct solve residual {np.linalg.norm(r) / bn:.2e} above {rtol:.0e}")
        return x


def solve_spd(A, b, tol=DEFAULT_RTOL, maxiter=None, x0=None) -> np.ndarray:
    """Jacobi-preconditioned conjugate gradients with an indefiniteness check.

    Iterates until ``||b - A x|| <= tol ||b||`` or ``10 n`` iterations.
    """
    M = A.matrix if isinstance(A, SparseOperator) else sparse.csr_matrix(A)
    b = np.asarray(b, dtype=float)
    n = len(b)
    maxiter = 10 * n if maxiter is None else maxiter
    bn = np.linalg.norm(b)
    if bn == 0:
        return np.zeros(n)
    d = M.diagonal()
    if np.any(d <= 0):
        raise SolverError("matrix is not positive definite (non-positive diagonal entry)")
    dinv = 1.0 / d
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    r = b - M @ x
    z = dinv * r
    p = z.copy()
    rz = r @ z
    for it in range(maxiter + 1):
        if np.linalg.norm(r) <= tol * bn:
            # confirm with the true residual; restart from it if the recursion drifted
            r = b - M @ x
            if np.linalg.norm(r) <= tol * bn:
                logger.debug("pcg converged in %d iterations", it)
                return x
            z = dinv * r
            p = z.copy()
            rz = r @ z
            continue
        Ap = M @ p
        pAp = p @ Ap
        if pAp <= 0:
            raise SolverError("matrix is not positive definite (p^T A p <= 0 in CG)")
        alpha = rz / pAp
        x += alpha * p
        r -= alpha * Ap
        z = dinv * r
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise SolverError(f"CG did not converge in {maxiter} iterations (residual {np.linalg.norm(r) / bn:.2e})")


# -- operators on a subdomain --------------------------------------------------


class FESpace:
    """P1 space on a set of tets with cached geometry and assembly pattern."""

    def __init__(self, points: np.ndarray, tets: np.ndarray):
        self.points = np.asarray(points, float)
        self.tets = np.asarray(tets, np.int64)
        self.n = len(self.points)
        self.grads, self.vols = tet_geometry(self.points, self.tets)
        self.assembler = Assembler(self.tets, self.n)

    @classmethod
    def from_subdomain(cls, sub) -> "FESpace":
        return cls(sub.points, sub.tets)

    def stiffness(self, coeff=1.0) -> SparseOperator:
        c = _coeff_at_nodes(coeff, self.n)
        return SparseOperator(self.assembler.matrix(stiffness_elements(self.grads, self.vols, c[self.tets].mean(1))))

    def mass(self, coeff=1.0) -> SparseOperator:
        c = _coeff_at_nodes(coeff, self.n)
        return SparseOperator(self.assembler.matrix(mass_elements(self.vols, c[self.tets])))

    def lumped_mass(self) -> np.ndarray:
        return self.assembler.vector(np.repeat(self.vols / 4, 4))

    def load(self, values) -> np.ndarray:
        """Vector of integrals of the P1 interpolant of ``values`` times phi_i."""
        return self.mass(1.0) @ np.asarray(values, float)


def assemble_stiffness(space: FESpace, coeff=1.0) -> SparseOperator:
    return space.stiffness(coeff)


def assemble_mass(space: FESpace, coeff=1.0) -> SparseOperator:
    return space.mass(coeff)


def assemble_boundary_mass(points, triangles, coeff, n_nodes: int) -> SparseOperator:
    """Surface mass matrix on ``triangles`` (ids into ``points``) of size ``n_nodes``.

    ``coeff`` is a scalar or a nodal array of length ``n_nodes``; only its
    values on triangle vertices are used and they must be finite.
    """
    triangles = np.asarray(triangles, np.int64)
    if np.isscalar(coeff):
        if coeff < 0:
            raise ValueError("coefficient must be non-negative")
        ce = np.full(triangles.shape, float(coeff))
    else:
        c = np.asarray(coeff, float)
        if c.shape != (n_nodes,):
            raise ValueError(f"coefficient has {c.size} values, expected {n_nodes}")
        ce = c[triangles]
        if not np.all(np.isfinite(ce)):
            raise ValueError("coefficient missing (non-finite) on a surface node")
        if np.any(ce < 0):
            raise ValueError("coefficient must be non-negative")
    p = points[triangles]
    areas = 0.5 * np.linalg.norm(np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]), axis=1)
    asm = Assembler(triangles, n_nodes)
    return SparseOperator(asm.matrix(boundary_mass_elements(areas, ce)))


def dirichlet_reduce(A, free: np.ndarray):
    """Rows and columns of ``A`` restricted to the ``free`` index set."""
    M = A.matrix if isinstance(A, SparseOperator) else A
    return M[free][:, free].tocsr()
