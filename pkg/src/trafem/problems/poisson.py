"""Sparse-control oracle: Poisson equation on an L-shaped domain.

Minimizes 0.5||S(z) - u_d||^2 + (alpha/2)||z||^2 + beta||z||_L1 where
-Laplace(S(z)) = z with homogeneous Dirichlet conditions.  States and
adjoints are quadratic elements; the control is piecewise constant on
the same hierarchy.  The reduced smooth objective is convex quadratic,
so an exact Hessian-vector product is available to the optimizer.
"""

import numpy as np
import scipy.sparse.linalg as spla

from ..estimate import combined_indicator, energy_estimator
from ..fem import (QUAD_O5, assemble_diffusion, assemble_load,
                   build_space, solve_spd)
from ..mesh import CellField, create_rect_mesh
from ..prox import L1, phi_value
from ..vtk_io import write_vtk
from .afem import MeshProblem, refine_to_tolerance


def default_target(x, y):
    """Localized profile with the canonical re-entrant corner behaviour.

    The r^(2/3) wedge mode is harmonic away from the corner and decays
    under a Gaussian envelope, so the interesting control action (and the
    mesh refinement it drives) concentrates around the corner while most
    of the domain stays in the sparsity dead zone.
    """
    dx, dy = np.asarray(x) - 0.5, np.asarray(y) - 0.5
    r = np.hypot(dx, dy)
    theta = np.arctan2(dy, dx)
    theta = np.where(theta < np.pi / 2 - 1e-14, theta + 2 * np.pi, theta)
    wedge = np.sin((2.0 / 3.0) * (theta - np.pi / 2))
    return 25.0 * r**(2.0 / 3.0) * wedge * np.exp(-(r / 0.25)**2)


def sine_target(x, y):
    return np.sin(2 * np.pi * x) * np.sin(2 * np.pi * y)


def l_shape_mesh(n):
    """Unit square minus the open upper-right quadrant, n cells across."""
    return create_rect_mesh(n, n, mask=lambda x, y: ~((x > 0.5) & (y > 0.5)))


class PoissonControl(MeshProblem):
    """Oracle for the sparse Poisson control problem.

    Exposes the optimizer protocol (value_pair / gradient /
    hessian_apply / dof_count / align) plus fixed-mesh evaluation
    helpers used by the finite-difference verification oracles.
    """

    def __init__(self, alpha=1e-4, beta=1e-2, u_d=None, n0=8,
                 dof_budget=10_000, theta=0.05, tau_max_val=1.0,
                 tau_max_der=1.0, solve_safety=0.1, solve_rel_cap=1e-8,
                 flip_adjoint=False):
        if alpha <= 0:
            raise ValueError("alpha must be positive")
        if beta < 0:
            raise ValueError("beta must be nonnegative")
        self.alpha = alpha
        self.beta = beta
        self.u_d = default_target if u_d is None else u_d
        self.flip_adjoint = flip_adjoint
        self.phi = L1(beta)
        super().__init__(l_shape_mesh(n0), dof_budget, theta, tau_max_val,
                         tau_max_der, solve_safety, solve_rel_cap)

    def _on_mesh(self, mesh):
        self.space = build_space(mesh, 2)
        self.stiffness = assemble_diffusion(self.space, 1.0)
        self._lu = None

    def _state_lu(self):
        if self._lu is None:
            self._lu = spla.splu(self.stiffness.matrix.tocsc())
        return self._lu

    def dof_count(self):
        return self.space.num_dofs

    def initial_control(self):
        return CellField.constant(self.mesh, 0.0)

    # -- single solves ---------------------------------------------------

    def _misfit_source(self, u):
        def src(xy, bary):
            return -(u.values_at(bary) - self.u_d(xy[..., 0], xy[..., 1]))
        return src

    def solve_state(self, z, abs_tol):
        b = assemble_load(self.space, z)
        x, res = self.solve_abs(self.stiffness, b, abs_tol)
        return self.space.function(x), res

    def solve_adjoint(self, u, abs_tol):
        b = assemble_load(self.space, self._misfit_source(u))
        x, res = self.solve_abs(self.stiffness, b, abs_tol)
        return self.space.function(x), res

    def gradient_field(self, z, lam):
        bary, w = QUAD_O5
        lam_avg = lam.values_at(bary) @ w
        sign = 1.0 if self.flip_adjoint else -1.0
        return CellField(self.mesh, sign * lam_avg + self.alpha * z.values)

    def smooth_value(self, z, u):
        bary, w = QUAD_O5
        xy = self.space.quad_points(bary)
        mis = u.values_at(bary) - self.u_d(xy[..., 0], xy[..., 1])
        misfit = float(self.mesh.cell_areas @ (mis**2 @ w))
        return 0.5 * misfit + 0.5 * self.alpha * z.norm()**2

    def state_estimator(self, z, u):
        return energy_estimator(self.space, u, 1.0, z)

    def adjoint_estimator(self, u, lam):
        return energy_estimator(self.space, lam, 1.0, self._misfit_source(u))

    # -- optimizer oracle ------------------------------------------------

    def value_pair(self, z_a, z_b, tau_val):
        tol = min(self.tau_max_val, tau_val)
        same = z_b is z_a
        fields = [self.align(z_a)] + ([] if same else [self.align(z_b)])

        def evaluate(fields):
            sols, totals, ind = [], [], 0.0
            for zf in fields:
                u, _ = self.solve_state(zf, self.solve_safety * tol)
                bd = self.state_estimator(zf, u)
                sols.append(u)
                totals.append(bd.total)
                ind = ind + bd.per_element
            return sols, max(totals), ind

        sols, fields, _, _, _ = refine_to_tolerance(self, fields, evaluate, tol)
        values = [self.smooth_value(zf, u) + phi_value(self.phi, zf)
                  for zf, u in zip(fields, sols)]
        if same:
            return values[0], values[0]
        return values[0], values[1]

    def gradient(self, z, tau_der):
        tol = min(self.tau_max_der, tau_der)

        def evaluate(fields):
            zf = fields[0]
            u, res_u = self.solve_state(zf, self.solve_safety * tol)
            lam, res_l = self.solve_adjoint(u, self.solve_safety * tol)
            bd_s = self.state_estimator(zf, u)
            bd_a = self.adjoint_estimator(u, lam)
            payload = (u, lam, res_u, res_l, bd_s, bd_a)
            return payload, bd_s.total + bd_a.total, combined_indicator(bd_s, bd_a)

        payload, fields, _, _, _ = refine_to_tolerance(self, [self.align(z)],
                                                       evaluate, tol)
        u, lam, res_u, res_l, bd_s, bd_a = payload
        g = self.gradient_field(fields[0], lam)
        xi = bd_s.total + bd_a.total + res_u + res_l
        return g, xi

    def hessian_apply(self, z, v):
        """Exact Hessian-vector product of the reduced quadratic objective."""
        v = self.align(v)
        lu = self._state_lu()
        b1 = assemble_load(self.space, v)
        u_v = self.space.function(lu.solve(b1))
        b2 = assemble_load(self.space, lambda xy, bary: u_v.values_at(bary))
        mu = self.space.function(lu.solve(b2))
        bary, w = QUAD_O5
        avg = mu.values_at(bary) @ w
        return CellField(self.mesh, self.alpha * v.values + avg)

    def snapshot(self, z, path):
        """Write the current mesh, control, and a fresh state solve."""
        z = self.align(z)
        u, _ = self.solve_state(z, self.tau_max_val * self.solve_safety)
        write_vtk(path, self.mesh, cell_data={"control": z},
                  point_data={"state": u})

    # -- fixed-mesh evaluation for verification oracles --------------------

    def smooth_value_fixed(self, z, rel_tol=1e-12):
        z = self.align(z)
        b = assemble_load(self.space, z)
        u = self.space.function(solve_spd(self.stiffness, b, rel_tol)[0])
        return self.smooth_value(z, u)

    def smooth_gradient_fixed(self, z, rel_tol=1e-12):
        z = self.align(z)
        b = assemble_load(self.space, z)
        u = self.space.function(solve_spd(self.stiffness, b, rel_tol)[0])
        lam = self.space.function(
            solve_spd(self.stiffness,
                      assemble_load(self.space, self._misfit_source(u)),
                      rel_tol)[0])
        return self.gradient_field(z, lam)
