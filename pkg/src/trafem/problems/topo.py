"""Heat-conduction topology optimization with a Helmholtz-filtered
cubic material law.

The design variable is a per-cell material fraction z in [0, 1] with a
fixed total volume.  A screened-Poisson filter with a lumped reaction
term smooths z into a nodal density (the lumping keeps the filter
monotone, so densities stay inside the design bounds), conductivity
follows the cubic interpolation K(rho) = K_min + (K_max - K_min) rho^3,
and the objective is the thermal compliance.  The state problem is
self-adjoint with adjoint equal to minus the state, so gradients need no
extra adjoint solve and refinement is driven by the filter max-norm
estimator combined with the state energy estimator.
"""

import numpy as np

from ..estimate import energy_estimator, linf_estimator, log_factor
from ..fem import (QUAD_O5, MappedCoefficient, SparseOperator,
                   assemble_diffusion, assemble_load, assemble_mass,
                   build_space, cell_gradients, solve_spd)
from ..mesh import CellField, create_rect_mesh
from ..prox import BoxVolume, phi_value
from ..vtk_io import write_vtk
from .afem import MeshProblem, refine_to_tolerance

DEFAULT_RADIUS = 1e-2 / (2.0 * np.sqrt(3.0))


def symmetry_half_domain(example_id, n=64):
    """Initial half-domain mesh exploiting the symmetry of each layout.

    Example 1 keeps the triangle below the falling diagonal (Dirichlet on
    the left side, symmetry line natural); example 2 keeps the lower half
    rectangle (Dirichlet on a strip of the left side around mid-height).
    ``n`` is the quad count across the full unit square before halving.
    """
    if example_id == 1:
        def rule(x, y):
            return "dirichlet" if x < 1e-9 else "neumann"
        return create_rect_mesh(n, n, mask=lambda x, y: x + y <= 1.0,
                                boundary_rule=rule)
    if example_id == 2:
        if n % 2:
            raise ValueError("example 2 needs an even grid so the symmetry "
                             "line is a mesh line")
        def rule(x, y):
            return "dirichlet" if x < 1e-9 and 0.4 <= y <= 0.6 else "neumann"
        return create_rect_mesh(n, n, mask=lambda x, y: y <= 0.5,
                                boundary_rule=rule)
    raise ValueError(f"unknown example id {example_id!r}")


class TopoOpt(MeshProblem):
    """Oracle for the compliance-minimization material distribution problem."""

    def __init__(self, example=1, n0=64, v0=None, k_min=1e-3, k_max=1.0,
                 source_q=1e-2, filter_radius=DEFAULT_RADIUS,
                 dof_budget=150_000, theta=0.05, tau_max_val=1.0,
                 tau_max_der=1.0, solve_safety=0.1, solve_rel_cap=1e-8):
        if not 0 < k_min < k_max:
            raise ValueError("need 0 < k_min < k_max")
        if filter_radius <= 0:
            raise ValueError("filter radius must be positive")
        self.example = example
        self.k_min = k_min
        self.k_max = k_max
        self.source_q = source_q
        self.radius = filter_radius
        self.v0 = {1: 0.4, 2: 0.1}[example] if v0 is None else v0
        if not 0 < self.v0 < 1:
            raise ValueError("volume fraction must lie in (0, 1)")
        mesh = symmetry_half_domain(example, n0)
        self.phi = BoxVolume(0.0, 1.0, self.v0 * mesh.total_area)
        super().__init__(mesh, dof_budget, theta, tau_max_val, tau_max_der,
                         solve_safety, solve_rel_cap)

    def _on_mesh(self, mesh):
        self.filter_space = build_space(mesh, 1, dirichlet_tags=())
        self.state_space = build_space(mesh, 2)
        filt = (self.radius * assemble_diffusion(self.filter_space, 1.0).matrix
                + assemble_mass(self.filter_space, 1.0, lumped=True).matrix)
        self.filter_op = SparseOperator(filt, self.filter_space)

    def dof_count(self):
        return self.state_space.num_dofs

    def initial_control(self):
        return CellField.constant(self.mesh, self.v0)

    # -- material law ------------------------------------------------------

    def _rho_at(self, rho, bary):
        return np.clip(rho.values_at(bary), 0.0, 1.0)

    def conductivity(self, rho):
        def law(r):
            r = np.clip(r, 0.0, 1.0)
            return self.k_min + (self.k_max - self.k_min) * r**3
        return MappedCoefficient(rho, law)

    def conductivity_grad(self, rho):
        grad_rho = cell_gradients(rho)                     # (nc, 2), constant

        def coeff_grad(xy, bary):
            dk = 3.0 * (self.k_max - self.k_min) * self._rho_at(rho, bary)**2
            return dk[..., None] * grad_rho[:, None, :]
        return coeff_grad

    # -- single solves -----------------------------------------------------

    def solve_filter(self, z, abs_tol):
        b = assemble_load(self.filter_space, z)
        x, res = self.solve_abs(self.filter_op, b, abs_tol)
        return self.filter_space.function(x), res

    def solve_state(self, rho, abs_tol):
        A = assemble_diffusion(self.state_space, self.conductivity(rho))
        b = assemble_load(self.state_space, self.source_q)
        x, res = self.solve_abs(A, b, abs_tol)
        return self.state_space.function(x), res

    def compliance(self, u):
        bary, w = QUAD_O5
        return self.source_q * float(self.mesh.cell_areas @ (u.values_at(bary) @ w))

    def gradient_field(self, rho, u, abs_tol):
        """Filter pullback of the density sensitivity, cell-averaged."""
        bary, _ = QUAD_O5
        gu = cell_gradients(u, bary=bary)
        sens = -3.0 * (self.k_max - self.k_min) * self._rho_at(rho, bary)**2 \
            * np.einsum("cqx,cqx->cq", gu, gu)
        b = assemble_load(self.filter_space, sens, quad=QUAD_O5)
        x, res = self.solve_abs(self.filter_op, b, abs_tol)
        g = x[self.mesh.cells].mean(axis=1)
        return CellField(self.mesh, g), res

    def estimators(self, z, rho, u):
        """Filter max-norm plus state energy breakdowns and marking data."""
        filt_bd = linf_estimator(self.filter_space, rho, self.radius, z,
                                 reaction=1.0,
                                 neumann_edges=self.mesh.boundary_edges())
        state_bd = energy_estimator(self.state_space, u,
                                    self.conductivity(rho), self.source_q,
                                    coeff_grad=self.conductivity_grad(rho))
        total = filt_bd.total + state_bd.total
        indicators = state_bd.per_element \
            + (log_factor(self.mesh) * filt_bd.per_element)**2
        return total, indicators, filt_bd, state_bd

    # -- optimizer oracle ----------------------------------------------------

    def value_pair(self, z_a, z_b, tau_val):
        tol = min(self.tau_max_val, tau_val)
        same = z_b is z_a
        fields = [self.align(z_a)] + ([] if same else [self.align(z_b)])

        def evaluate(fields):
            sols, totals, ind = [], [], 0.0
            for zf in fields:
                rho, _ = self.solve_filter(zf, self.solve_safety * tol)
                u, _ = self.solve_state(rho, self.solve_safety * tol)
                total, indicators, _, _ = self.estimators(zf, rho, u)
                sols.append(u)
                totals.append(total)
                ind = ind + indicators
            return sols, max(totals), ind

        sols, fields, _, _, _ = refine_to_tolerance(self, fields, evaluate, tol)
        values = [self.compliance(u) + phi_value(self.phi, zf)
                  for zf, u in zip(fields, sols)]
        if same:
            return values[0], values[0]
        return values[0], values[1]

    def gradient(self, z, tau_der):
        tol = min(self.tau_max_der, tau_der)

        def evaluate(fields):
            zf = fields[0]
            rho, res_f = self.solve_filter(zf, self.solve_safety * tol)
            u, res_u = self.solve_state(rho, self.solve_safety * tol)
            total, indicators, _, _ = self.estimators(zf, rho, u)
            return (rho, u, res_f, res_u, total), total, indicators

        payload, fields, _, _, _ = refine_to_tolerance(self, [self.align(z)],
                                                       evaluate, tol)
        rho, u, res_f, res_u, est_total = payload
        g, res_g = self.gradient_field(rho, u, self.solve_safety * tol)
        # the adjoint is -u, so its residual norm equals the state's
        xi = est_total + res_f + 2.0 * res_u + res_g
        return g, xi

    hessian_apply = None

    def snapshot(self, z, path):
        """Write the current mesh, material layout, filtered density, and state."""
        z = self.align(z)
        tol = self.tau_max_val * self.solve_safety
        rho, _ = self.solve_filter(z, tol)
        u, _ = self.solve_state(rho, tol)
        write_vtk(path, self.mesh, cell_data={"control": z},
                  point_data={"density": rho, "state": u})

    # -- fixed-mesh evaluation for verification oracles ----------------------

    def smooth_value_fixed(self, z, rel_tol=1e-12):
        z = self.align(z)
        rho = self.filter_space.function(
            solve_spd(self.filter_op, assemble_load(self.filter_space, z),
                      rel_tol)[0])
        A = assemble_diffusion(self.state_space, self.conductivity(rho))
        u = self.state_space.function(
            solve_spd(A, assemble_load(self.state_space, self.source_q),
                      rel_tol)[0])
        return self.compliance(u)

    def smooth_gradient_fixed(self, z, rel_tol=1e-12):
        z = self.align(z)
        rho = self.filter_space.function(
            solve_spd(self.filter_op, assemble_load(self.filter_space, z),
                      rel_tol)[0])
        A = assemble_diffusion(self.state_space, self.conductivity(rho))
        u = self.state_space.function(
            solve_spd(A, assemble_load(self.state_space, self.source_q),
                      rel_tol)[0])
        bary, _ = QUAD_O5
        gu = cell_gradients(u, bary=bary)
        sens = -3.0 * (self.k_max - self.k_min) * self._rho_at(rho, bary)**2 \
            * np.einsum("cqx,cqx->cq", gu, gu)
        b = assemble_load(self.filter_space, sens, quad=QUAD_O5)
        x = solve_spd(self.filter_op, b, rel_tol)[0]
        return CellField(self.mesh, x[self.mesh.cells].mean(axis=1))
