"""Lagrange P1/P2 spaces, sparse assembly, and residual-controlled solves.

Dual norms of discrete residual functionals use the H1 Riesz map of the
space (stiffness plus mass), so tolerances passed down from the optimizer
are mesh-independent quantities.
"""

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .mesh import EDGE_DIRICHLET, CellField

# order-2 rule (edge midpoints) and order-5 Radon rule, barycentric + weights
QUAD_O2 = (
    np.array([[0.5, 0.5, 0.0], [0.0, 0.5, 0.5], [0.5, 0.0, 0.5]]),
    np.array([1.0, 1.0, 1.0]) / 3.0,
)
_a1, _b1 = 0.059715871789770, 0.470142064105115
_a2, _b2 = 0.797426985353087, 0.101286507323456
QUAD_O5 = (
    np.array([
        [1/3, 1/3, 1/3],
        [_a1, _b1, _b1], [_b1, _a1, _b1], [_b1, _b1, _a1],
        [_a2, _b2, _b2], [_b2, _a2, _b2], [_b2, _b2, _a2],
    ]),
    np.array([0.225,
              0.132394152788506, 0.132394152788506, 0.132394152788506,
              0.125939180544827, 0.125939180544827, 0.125939180544827]),
)
# 3-point Gauss on [0, 1], exact to degree 5
EDGE_GAUSS = (
    np.array([0.5 - np.sqrt(15) / 10, 0.5, 0.5 + np.sqrt(15) / 10]),
    np.array([5 / 18, 8 / 18, 5 / 18]),
)


class SolverError(RuntimeError):
    """Raised when an iterative solve exceeds its iteration cap."""


def quad_rule(degree):
    """Volume quadrature used for forms of the given polynomial degree."""
    return QUAD_O2 if degree == 1 else QUAD_O5


def shape_values(degree, bary):
    """Basis values at barycentric points, shape (nq, ndof_local)."""
    l0, l1, l2 = bary[:, 0], bary[:, 1], bary[:, 2]
    if degree == 1:
        return np.column_stack([l0, l1, l2])
    return np.column_stack([
        l0 * (2 * l0 - 1), l1 * (2 * l1 - 1), l2 * (2 * l2 - 1),
        4 * l1 * l2, 4 * l2 * l0, 4 * l0 * l1,
    ])


def shape_grad_bary(degree, bary):
    """d(basis)/d(lambda) at barycentric points, shape (nq, ndof_local, 3)."""
    nq = len(bary)
    if degree == 1:
        g = np.zeros((nq, 3, 3))
        g[:, 0, 0] = g[:, 1, 1] = g[:, 2, 2] = 1.0
        return g
    l0, l1, l2 = bary[:, 0], bary[:, 1], bary[:, 2]
    g = np.zeros((nq, 6, 3))
    g[:, 0, 0] = 4 * l0 - 1
    g[:, 1, 1] = 4 * l1 - 1
    g[:, 2, 2] = 4 * l2 - 1
    g[:, 3, 1] = 4 * l2
    g[:, 3, 2] = 4 * l1
    g[:, 4, 2] = 4 * l0
    g[:, 4, 0] = 4 * l2
    g[:, 5, 0] = 4 * l1
    g[:, 5, 1] = 4 * l0
    return g


class FeSpace:
    """Continuous Lagrange space of degree 1 or 2 on a mesh.

    Degrees of freedom are vertex values, plus edge-midpoint values for
    degree 2.  ``dirichlet_mask`` marks dofs sitting on Dirichlet-tagged
    boundary edges; assembled operators and loads eliminate them with
    zero prescribed values.
    """

    def __init__(self, mesh, degree, dirichlet_tags=(EDGE_DIRICHLET,)):
        if degree not in (1, 2):
            raise ValueError("only degrees 1 and 2 are supported")
        self.mesh = mesh
        self.degree = degree
        nv = mesh.num_vertices
        if degree == 1:
            self.num_dofs = nv
            self.cell_dofs = mesh.cells.copy()
        else:
            self.num_dofs = nv + mesh.num_edges
            self.cell_dofs = np.hstack([mesh.cells, nv + mesh.cell_edges])
        mask = np.zeros(self.num_dofs, dtype=bool)
        for tag in dirichlet_tags:
            eids = np.flatnonzero(mesh.edge_tags == tag)
            mask[mesh.edges[eids].ravel()] = True
            if degree == 2:
                mask[nv + eids] = True
        self.dirichlet_mask = mask
        self.dirichlet_tags = tuple(dirichlet_tags)
        # constant per-cell barycentric gradients: (nc, 3, 2)
        p = mesh.vertices[mesh.cells]
        area2 = 2.0 * mesh.cell_areas
        gl = np.empty((mesh.num_cells, 3, 2))
        for i in range(3):
            j, k = (i + 1) % 3, (i + 2) % 3
            gl[:, i, 0] = (p[:, j, 1] - p[:, k, 1]) / area2
            gl[:, i, 1] = (p[:, k, 0] - p[:, j, 0]) / area2
        self.grad_lambda = gl
        self._riesz_lu = None

    def dof_coords(self):
        if self.degree == 1:
            return self.mesh.vertices.copy()
        mids = 0.5 * (self.mesh.vertices[self.mesh.edges[:, 0]]
                      + self.mesh.vertices[self.mesh.edges[:, 1]])
        return np.vstack([self.mesh.vertices, mids])

    def quad_points(self, bary):
        """Physical coordinates of barycentric points, (nc, nq, 2)."""
        p = self.mesh.vertices[self.mesh.cells]
        return np.einsum("qi,cix->cqx", bary, p)

    def basis_grads(self, bary):
        """Physical basis gradients at barycentric points, (nc, nq, nl, 2)."""
        dN = shape_grad_bary(self.degree, bary)
        return np.einsum("qli,cix->cqlx", dN, self.grad_lambda)

    def function(self, coeffs=None):
        return FeFunction(self, coeffs)

    def interpolate(self, f):
        """Nodal interpolant of a callable f(x, y)."""
        xy = self.dof_coords()
        u = FeFunction(self, np.asarray(f(xy[:, 0], xy[:, 1]), dtype=float))
        u.coeffs[self.dirichlet_mask] = 0.0
        return u

    def _riesz_solver(self):
        """Cached factorization of the H1 inner-product matrix."""
        if self._riesz_lu is None:
            R = (assemble_diffusion(self, 1.0).matrix
                 + assemble_mass(self, 1.0).matrix)
            self._riesz_lu = spla.splu(R.tocsc())
        return self._riesz_lu


def build_space(mesh, degree, dirichlet_tags=(EDGE_DIRICHLET,)):
    return FeSpace(mesh, degree, dirichlet_tags)


class FeFunction:
    """Coefficient vector tied to a finite-element space."""

    def __init__(self, space, coeffs=None):
        if coeffs is None:
            coeffs = np.zeros(space.num_dofs)
        coeffs = np.asarray(coeffs, dtype=float)
        if coeffs.shape != (space.num_dofs,):
            raise ValueError("coefficient length does not match the space")
        self.space = space
        self.coeffs = coeffs

    def values_at(self, bary):
        """Cellwise values at barycentric points, (nc, nq)."""
        N = shape_values(self.space.degree, bary)
        return np.einsum("ql,cl->cq", N, self.coeffs[self.space.cell_dofs])

    def vertex_values(self):
        """Values at mesh vertices (for export; exact for P1 and P2)."""
        return self.coeffs[:self.space.mesh.num_vertices].copy()


class MappedCoefficient:
    """Scalar coefficient g(w(x)) composed from a finite-element function.

    Unlike a bare callback this knows how to evaluate itself on cell
    subsets (needed for edge-flux terms), so it can be passed wherever a
    coefficient is accepted.
    """

    def __init__(self, fef, fn=None):
        self.fef = fef
        self.fn = fn

    def values(self, bary, cells=None):
        space = self.fef.space
        dofs = space.cell_dofs if cells is None else space.cell_dofs[cells]
        coeffs = self.fef.coeffs[dofs]
        bary = np.asarray(bary, dtype=float)
        if bary.ndim == 2:
            N = shape_values(space.degree, bary)
            vals = np.einsum("ql,cl->cq", N, coeffs)
        else:
            flat = shape_values(space.degree, bary.reshape(-1, 3))
            N = flat.reshape(bary.shape[0], bary.shape[1], -1)
            vals = np.einsum("cql,cl->cq", N, coeffs)
        return self.fn(vals) if self.fn is not None else vals


class SparseOperator:
    """Symmetric sparse operator with Dirichlet dofs eliminated to identity."""

    def __init__(self, matrix, space, spd=True):
        self.matrix = matrix.tocsr()
        self.space = space
        self.spd = spd
        self._amg = None

    @property
    def shape(self):
        return self.matrix.shape

    def apply(self, x):
        return self.matrix @ x

    def __matmul__(self, x):
        return self.matrix @ x

    def preconditioner(self):
        if self._amg is None:
            n = self.shape[0]
            if n < 200 or not self.spd:
                d = self.matrix.diagonal()
                d = np.where(d > 0, 1.0 / d, 1.0)
                self._amg = spla.LinearOperator(self.shape, matvec=lambda x: d * x)
            else:
                import pyamg
                # the setup draws start vectors from the legacy global RNG;
                # pin it so repeated builds give identical hierarchies
                state = np.random.get_state()
                np.random.seed(0)
                try:
                    ml = pyamg.smoothed_aggregation_solver(self.matrix)
                finally:
                    np.random.set_state(state)
                self._amg = ml.aspreconditioner(cycle="V")
        return self._amg


def _coeff_at(coeff, space, bary, xy):
    """Evaluate a scalar coefficient: constant, per-cell, mapped, or callback."""
    nc, nq = xy.shape[0], xy.shape[1]
    if isinstance(coeff, MappedCoefficient):
        if coeff.fef.space.mesh is not space.mesh:
            raise ValueError("mapped coefficient lives on a different mesh")
        return np.broadcast_to(coeff.values(bary), (nc, nq))
    if callable(coeff):
        vals = np.asarray(coeff(xy, bary), dtype=float)
        return np.broadcast_to(vals, (nc, nq))
    if isinstance(coeff, CellField):
        if coeff.mesh is not space.mesh:
            raise ValueError("CellField coefficient lives on a different mesh")
        return np.broadcast_to(coeff.values[:, None], (nc, nq))
    coeff = np.asarray(coeff, dtype=float)
    if coeff.ndim == 0:
        return np.broadcast_to(coeff, (nc, nq))
    if coeff.shape == (nc,):
        return np.broadcast_to(coeff[:, None], (nc, nq))
    if coeff.shape == (nc, nq):
        return coeff
    raise ValueError("coefficient shape not understood")


def _scatter(space, local, spd=True):
    """Accumulate (nc, nl, nl) local matrices with Dirichlet elimination."""
    dofs = space.cell_dofs
    nl = dofs.shape[1]
    free = ~space.dirichlet_mask
    keep = free[dofs]                                # (nc, nl)
    local = local * keep[:, :, None] * keep[:, None, :]
    rows = np.repeat(dofs, nl, axis=1).ravel()
    cols = np.tile(dofs, (1, nl)).ravel()
    A = sp.coo_matrix((local.ravel(), (rows, cols)),
                      shape=(space.num_dofs, space.num_dofs)).tocsr()
    A.eliminate_zeros()
    fixed = np.flatnonzero(space.dirichlet_mask)
    if len(fixed):
        A = A + sp.coo_matrix((np.ones(len(fixed)), (fixed, fixed)),
                              shape=A.shape).tocsr()
    return SparseOperator(A, space, spd=spd)


def assemble_diffusion(space, coeff, coeff_quad=None):
    """Stiffness operator with scalar diffusion coefficient.

    ``coeff`` may be a positive scalar, a per-cell array / CellField, or a
    callback ``coeff(xy, bary) -> (nc, nq)`` evaluated at quadrature
    points.  ``coeff_quad`` overrides the quadrature rule (bary, weights).
    """
    bary, w = coeff_quad if coeff_quad is not None else quad_rule(space.degree)
    xy = space.quad_points(bary)
    a = _coeff_at(coeff, space, bary, xy)
    if np.any(a <= 0.0):
        raise ValueError("diffusion coefficient must be positive")
    G = space.basis_grads(bary)                      # (nc, nq, nl, 2)
    local = np.einsum("q,cq,cqlx,cqmx->clm", w, a, G, G)
    local *= space.mesh.cell_areas[:, None, None]
    return _scatter(space, local)


def assemble_mass(space, coeff, lumped=False):
    """Mass operator; row-sum lumped diagonal when ``lumped``."""
    bary, w = quad_rule(space.degree)
    xy = space.quad_points(bary)
    b = _coeff_at(coeff, space, bary, xy)
    if np.any(b < 0.0):
        raise ValueError("reaction coefficient must be nonnegative")
    N = shape_values(space.degree, bary)
    local = np.einsum("q,cq,ql,qm->clm", w, b, N, N)
    local *= space.mesh.cell_areas[:, None, None]
    if lumped:
        diag = local.sum(axis=2)
        local = np.zeros_like(local)
        idx = np.arange(diag.shape[1])
        local[:, idx, idx] = diag
    return _scatter(space, local)


def assemble_load(space, source, quad=None):
    """Load vector b_i = integral of source * phi_i, Dirichlet rows zeroed."""
    bary, w = quad if quad is not None else quad_rule(space.degree)
    xy = space.quad_points(bary)
    q = _coeff_at(source, space, bary, xy)
    N = shape_values(space.degree, bary)
    local = np.einsum("q,cq,ql->cl", w, q, N) * space.mesh.cell_areas[:, None]
    b = np.zeros(space.num_dofs)
    np.add.at(b, space.cell_dofs.ravel(), local.ravel())
    b[space.dirichlet_mask] = 0.0
    return b


def dual_norm(space, residual):
    """Norm of a residual functional in the dual of the discrete space.

    Computed as sqrt(r' R^-1 r) with R the H1 inner-product matrix of the
    space; components at Dirichlet dofs are ignored.
    """
    r = np.asarray(residual, dtype=float).copy()
    r[space.dirichlet_mask] = 0.0
    if not np.any(r):
        return 0.0
    y = space._riesz_solver().solve(r)
    return float(np.sqrt(max(r @ y, 0.0)))


def solve_spd(op, rhs, rel_tol=1e-10, max_iter=None):
    """Preconditioned CG with residual control in the dual norm.

    Returns ``(x, achieved)`` where ``achieved`` is the dual norm of
    ``rhs - op x``, guaranteed <= rel_tol times the dual norm of ``rhs``.
    Raises SolverError past ``max_iter`` (default 10x the dof count).
    """
    space = op.space
    b = np.asarray(rhs, dtype=float).copy()
    b[space.dirichlet_mask] = 0.0
    n = op.shape[0]
    if max_iter is None:
        max_iter = 10 * n
    b_dual = dual_norm(space, b)
    if b_dual == 0.0:
        return np.zeros(n), 0.0
    target = rel_tol * b_dual
    M = op.preconditioner()
    x = np.zeros(n)
    b_l2 = np.linalg.norm(b)
    atol = max(rel_tol, 1e-14) * b_l2
    used = 0
    while True:
        it = [0]

        def count(_):
            it[0] += 1

        x, _ = spla.cg(op.matrix, b, x0=x, atol=atol, rtol=0.0,
                       maxiter=max_iter - used, M=M, callback=count)
        used += it[0]
        r = b - op.matrix @ x
        r[space.dirichlet_mask] = 0.0
        achieved = dual_norm(space, r)
        if achieved <= target:
            return x, achieved
        if used >= max_iter:
            raise SolverError(
                f"CG failed to reach tolerance in {max_iter} iterations")
        atol *= 1e-2


def cell_gradients(fef, bary=None):
    """Gradients of a finite-element function on every cell.

    P1 returns one constant gradient per cell, (nc, 2).  P2 returns
    gradients at quadrature points, (nc, nq, 2); ``bary`` overrides the
    evaluation points.
    """
    space = fef.space
    if space.degree == 1 and bary is None:
        G = np.einsum("ci,cix->cx", fef.coeffs[space.cell_dofs], space.grad_lambda)
        return G
    if bary is None:
        bary = quad_rule(space.degree)[0]
    G = space.basis_grads(bary)
    return np.einsum("cl,cqlx->cqx", fef.coeffs[space.cell_dofs], G)


def cell_hessians(fef):
    """Constant per-cell Hessians of a P2 function, (nc, 2, 2)."""
    space = fef.space
    if space.degree == 1:
        return np.zeros((space.mesh.num_cells, 2, 2))
    gl = space.grad_lambda                           # (nc, 3, 2)
    c = fef.coeffs[space.cell_dofs]                  # (nc, 6)
    H = np.zeros((space.mesh.num_cells, 2, 2))
    for i in range(3):
        H += 4.0 * c[:, i, None, None] * np.einsum("cx,cy->cxy", gl[:, i], gl[:, i])
    for k, (i, j) in enumerate(((1, 2), (2, 0), (0, 1))):
        cross = (np.einsum("cx,cy->cxy", gl[:, i], gl[:, j])
                 + np.einsum("cx,cy->cxy", gl[:, j], gl[:, i]))
        H += 4.0 * c[:, 3 + k, None, None] * cross
    return H
