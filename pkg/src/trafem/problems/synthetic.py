"""Synthetic oracles with exact values/gradients, for driver testing.

The quadratic oracle mirrors the protocol of the PDE oracles on a tiny
fixed mesh, optionally injecting value noise scaled by the requested
tolerance so that the robustness of the acceptance test can be probed.
"""

import numpy as np

from ..mesh import CellField, create_rect_mesh
from ..prox import Zero, phi_value


def two_cell_mesh():
    return create_rect_mesh(1, 1)


class QuadraticOracle:
    """f(z) = 0.5 <z - z*, H (z - z*)> in the weighted geometry.

    ``curvature`` is a symmetric positive matrix S acting on coefficient
    vectors; the operator H = diag(areas)^-1 S is then self-adjoint for
    the area-weighted inner product.  ``noise(call_index, tau_val)`` may
    return a pair added to the two reported objective values.
    """

    def __init__(self, target, curvature=None, phi=None, noise=None,
                 with_hessian=True):
        self.mesh = target.mesh
        self.target = target
        areas = self.mesh.cell_areas
        if curvature is None:
            curvature = np.diag(areas)          # H = identity
        curvature = np.asarray(curvature, dtype=float)
        if not np.allclose(curvature, curvature.T):
            raise ValueError("curvature matrix must be symmetric")
        self._S = curvature
        self._inv_areas = 1.0 / areas
        self.phi = Zero() if phi is None else phi
        self.noise = noise
        self.calls = 0
        self.budget_exhausted = False
        if not with_hessian:
            self.hessian_apply = None

    def _H(self, v):
        return CellField(self.mesh, self._inv_areas * (self._S @ v.values))

    def smooth_value(self, z):
        d = z - self.target
        return 0.5 * d.inner(self._H(d))

    def value_pair(self, z, z_plus, tau_val):
        f1 = self.smooth_value(z) + phi_value(self.phi, z)
        f2 = self.smooth_value(z_plus) + phi_value(self.phi, z_plus)
        if self.noise is not None:
            d1, d2 = self.noise(self.calls, tau_val)
            f1, f2 = f1 + d1, f2 + d2
        self.calls += 1
        return f1, f2

    def gradient(self, z, tau_der):
        return self._H(z - self.target), 0.0

    def hessian_apply(self, z, v):
        return self._H(v)

    def dof_count(self):
        return self.mesh.num_cells
