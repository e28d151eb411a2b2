"""Residual a posteriori error estimators for elliptic problems.

Two flavours are provided: the energy-norm triple (volume residual,
interior flux jumps, Neumann flux residuals, aggregated as sums of
squares) and the max-norm triple (same residuals aggregated as maxima,
with the total carrying a |log h|^2 factor).  Both report per-element
indicators usable for bulk-chasing refinement.
"""

import numpy as np

from .mesh import EDGE_INTERIOR, EDGE_NEUMANN, CellField
from .fem import (EDGE_GAUSS, MappedCoefficient, _coeff_at, cell_gradients,
                  cell_hessians, quad_rule, shape_grad_bary)


class EstimatorBreakdown:
    """Per-element indicators plus the three aggregated residual terms.

    For energy estimates ``per_element`` holds squared indicators whose
    sum recovers xi1^2 + xi2^2 + xi3^2 (interior edge terms split evenly
    between the two adjacent cells).  For max-norm estimates it holds the
    largest local contribution, and the maximum over elements recovers
    max(xi1, xi2, xi3).
    """

    def __init__(self, mesh, per_element, xi1, xi2, xi3, total, kind):
        self.mesh = mesh
        self.per_element = per_element
        self.xi1 = xi1
        self.xi2 = xi2
        self.xi3 = xi3
        self.total = total
        self.kind = kind


def _volume_residual(space, u_h, coeff, source, reaction, bary, coeff_grad=None):
    """Pointwise strong residual q + div(A grad u) - b u at barycentric points."""
    xy = space.quad_points(bary)
    a = _coeff_at(coeff, space, bary, xy)
    q = _coeff_at(source, space, bary, xy)
    b = _coeff_at(reaction, space, bary, xy)
    u = u_h.values_at(bary)
    lap = np.einsum("cxx->c", cell_hessians(u_h))            # constant per cell
    r = q + a * lap[:, None] - b * u
    if coeff_grad is not None:
        grad_a = np.asarray(coeff_grad(xy, bary), dtype=float)
        grad_u = cell_gradients(u_h, bary=bary)
        r = r + np.einsum("cqx,cqx->cq", grad_a, grad_u)
    return r


def _edge_fluxes(space, u_h, coeff, edge_ids):
    """Sided normal fluxes A grad(u_h) . n at Gauss points of given edges.

    Returns (flux_left, flux_right, lengths) with shapes (ne, ng); the
    right column is zero where an edge has a single adjacent cell.  The
    normal is fixed per edge so jumps are flux_left - flux_right.
    """
    mesh = space.mesh
    t, _ = EDGE_GAUSS
    ng = len(t)
    va = mesh.vertices[mesh.edges[edge_ids, 0]]
    vb = mesh.vertices[mesh.edges[edge_ids, 1]]
    tang = vb - va
    lengths = np.linalg.norm(tang, axis=1)
    normal = np.column_stack([tang[:, 1], -tang[:, 0]]) / lengths[:, None]

    fluxes = np.zeros((2, len(edge_ids), ng))
    for side in range(2):
        cells = mesh.edge_cells[edge_ids, side]
        valid = cells >= 0
        if not valid.any():
            continue
        cs = cells[valid]
        # barycentric coordinates of the Gauss points inside each cell
        loc_a = np.argmax(mesh.cells[cs] == mesh.edges[edge_ids[valid], 0][:, None], axis=1)
        loc_b = np.argmax(mesh.cells[cs] == mesh.edges[edge_ids[valid], 1][:, None], axis=1)
        nb = len(cs)
        bary = np.zeros((nb, ng, 3))
        rows = np.arange(nb)
        bary[rows[:, None], np.arange(ng)[None, :], loc_a[:, None]] = 1.0 - t[None, :]
        bary[rows[:, None], np.arange(ng)[None, :], loc_b[:, None]] += t[None, :]
        # gradients of u_h at those points from the owning cell
        coefs = u_h.coeffs[space.cell_dofs[cs]]             # (nb, nl)
        dN = shape_grad_bary(space.degree, bary.reshape(-1, 3))
        dN = dN.reshape(nb, ng, -1, 3)
        grad = np.einsum("cl,cqli,cix->cqx", coefs, dN, space.grad_lambda[cs])
        xy = np.einsum("cqi,cix->cqx", bary, mesh.vertices[mesh.cells[cs]])
        if isinstance(coeff, MappedCoefficient):
            a = coeff.values(bary, cells=cs)
        elif isinstance(coeff, CellField):
            a = np.broadcast_to(coeff.values[cs][:, None], (nb, ng))
        elif callable(coeff):
            a = np.broadcast_to(np.asarray(coeff(xy, bary), dtype=float), (nb, ng))
        else:
            arr = np.asarray(coeff, dtype=float)
            if arr.ndim == 0:
                a = np.broadcast_to(arr, (nb, ng))
            else:
                a = np.broadcast_to(arr[cs][:, None], (nb, ng))
        fluxes[side][valid] = a * np.einsum("cqx,cx->cq", grad, normal[valid])
    return fluxes[0], fluxes[1], lengths


def energy_estimator(space, u_h, coeff, source, reaction=0.0,
                     neumann_edges=None, coeff_grad=None):
    """Energy-norm residual estimator triple for -div(A grad u) + b u = q.

    ``coeff``/``source``/``reaction`` accept scalars, per-cell arrays or
    CellFields, or callbacks ``f(xy, bary)``; ``coeff_grad(xy, bary)``
    supplies the in-cell gradient of a smoothly varying coefficient
    (omit it for cellwise-constant coefficients).  Neumann edges default
    to the mesh's Neumann-tagged boundary edges.
    """
    mesh = space.mesh
    if u_h.space is not space:
        raise ValueError("function does not belong to the given space")
    bary, w = quad_rule(2)
    r = _volume_residual(space, u_h, coeff, source, reaction, bary, coeff_grad)
    h2 = mesh.cell_diams**2
    vol = h2 * mesh.cell_areas * np.einsum("q,cq->c", w, r**2)
    per_element = vol.copy()
    xi1 = float(np.sqrt(vol.sum()))

    interior = np.flatnonzero(mesh.edge_tags == EDGE_INTERIOR)
    xi2sq = 0.0
    if len(interior):
        fl, fr, lens = _edge_fluxes(space, u_h, coeff, interior)
        jump_sq = np.einsum("g,eg->e", EDGE_GAUSS[1], (fl - fr)**2) * lens
        term = lens * jump_sq                                # h_e * ||jump||^2
        xi2sq = float(term.sum())
        for side in range(2):
            cells = mesh.edge_cells[interior, side]
            np.add.at(per_element, cells, 0.5 * term)
    xi2 = float(np.sqrt(xi2sq))

    if neumann_edges is None:
        neumann_edges = np.flatnonzero(mesh.edge_tags == EDGE_NEUMANN)
    neumann_edges = np.asarray(neumann_edges, dtype=np.int64)
    xi3sq = 0.0
    if len(neumann_edges):
        fl, fr, lens = _edge_fluxes(space, u_h, coeff, neumann_edges)
        flux_sq = np.einsum("g,eg->e", EDGE_GAUSS[1], (fl + fr)**2) * lens
        term = lens * flux_sq
        xi3sq = float(term.sum())
        cells = np.where(mesh.edge_cells[neumann_edges, 0] >= 0,
                         mesh.edge_cells[neumann_edges, 0],
                         mesh.edge_cells[neumann_edges, 1])
        np.add.at(per_element, cells, term)
    xi3 = float(np.sqrt(xi3sq))

    total = float(np.sqrt(xi1**2 + xi2**2 + xi3**2))
    return EstimatorBreakdown(mesh, per_element, xi1, xi2, xi3, total, "energy")


def linf_estimator(space, u_h, coeff, source, reaction=0.0,
                   neumann_edges=None, coeff_grad=None):
    """Max-norm residual estimator triple.

    Local max norms are sampled at quadrature points and vertices (exact
    for the affine residuals of P1 with cellwise data).  The combined
    total carries the |log h_max|^2 reliability factor.
    """
    mesh = space.mesh
    bary_q, _ = quad_rule(2)
    bary = np.vstack([bary_q, np.eye(3)])                    # quad points + vertices
    r = _volume_residual(space, u_h, coeff, source, reaction, bary, coeff_grad)
    h2 = mesh.cell_diams**2
    vol = h2 * np.abs(r).max(axis=1)
    per_element = vol.copy()
    xi1 = float(vol.max()) if len(vol) else 0.0

    interior = np.flatnonzero(mesh.edge_tags == EDGE_INTERIOR)
    xi2 = 0.0
    if len(interior):
        fl, fr, lens = _edge_fluxes(space, u_h, coeff, interior)
        term = lens * np.abs(fl - fr).max(axis=1)
        xi2 = float(term.max())
        for side in range(2):
            cells = mesh.edge_cells[interior, side]
            np.maximum.at(per_element, cells, term)
    if neumann_edges is None:
        neumann_edges = np.flatnonzero(mesh.edge_tags == EDGE_NEUMANN)
    neumann_edges = np.asarray(neumann_edges, dtype=np.int64)
    xi3 = 0.0
    if len(neumann_edges):
        fl, fr, lens = _edge_fluxes(space, u_h, coeff, neumann_edges)
        term = lens * np.abs(fl + fr).max(axis=1)
        xi3 = float(term.max())
        cells = np.where(mesh.edge_cells[neumann_edges, 0] >= 0,
                         mesh.edge_cells[neumann_edges, 0],
                         mesh.edge_cells[neumann_edges, 1])
        np.maximum.at(per_element, cells, term)

    total = log_factor(mesh) * (xi1 + xi2 + xi3)
    return EstimatorBreakdown(mesh, per_element, xi1, xi2, xi3, total, "linf")


def log_factor(mesh):
    """|log h_max|^2, guarded away from h = 1 and machine epsilon."""
    h = max(float(mesh.cell_diams.max()), np.finfo(float).eps)
    return float(np.log(h)**2)


def combined_indicator(state_bd, adjoint_bd=None):
    """Sum of per-element indicators of one or two breakdowns."""
    if adjoint_bd is None:
        return state_bd.per_element.copy()
    if adjoint_bd.mesh is not state_bd.mesh:
        raise ValueError("breakdowns live on different meshes")
    return state_bd.per_element + adjoint_bd.per_element
