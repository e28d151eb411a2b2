"""Shared solve / estimate / mark / refine machinery for problem oracles."""

import logging

import numpy as np
import scipy.sparse.linalg as spla

from ..fem import SolverError, dual_norm, solve_spd
from ..mesh import bisect, dorfler_mark, prolong_cellfield

log = logging.getLogger(__name__)


class MeshProblem:
    """Base for oracles that own a mesh hierarchy and refine on demand.

    Subclasses implement ``_on_mesh(mesh)`` to rebuild spaces and cached
    operators, and ``dof_count()`` for the budget bookkeeping.
    """

    def __init__(self, mesh, dof_budget, theta=0.05, tau_max_val=1.0,
                 tau_max_der=1.0, solve_safety=0.1, solve_rel_cap=1e-8):
        self.dof_budget = int(dof_budget)
        self.theta = theta
        self.tau_max_val = tau_max_val
        self.tau_max_der = tau_max_der
        self.solve_safety = solve_safety
        self.solve_rel_cap = solve_rel_cap
        self._set_mesh(mesh)

    def _set_mesh(self, mesh):
        self.mesh = mesh
        self._on_mesh(mesh)

    def _on_mesh(self, mesh):
        raise NotImplementedError

    def dof_count(self):
        raise NotImplementedError

    @property
    def budget_exhausted(self):
        return self.dof_count() >= self.dof_budget

    def refine(self, marked):
        self._set_mesh(bisect(self.mesh, marked))

    def align(self, field):
        if field.mesh is self.mesh:
            return field
        return prolong_cellfield(field, self.mesh)

    def solve_abs(self, op, rhs, abs_tol):
        """SPD solve with an absolute dual-norm residual target.

        The relative tolerance handed to the solver is additionally capped
        (solve_rel_cap) so the solution stays a stable function of the
        data even when the optimizer requests very loose accuracy.  If the
        Krylov solver cannot reach the target on a badly graded mesh, a
        cached direct factorization takes over; the residual contract is
        checked either way.
        """
        nb = dual_norm(op.space, rhs)
        if nb == 0.0:
            return np.zeros(op.shape[0]), 0.0
        rel = max(min(abs_tol / nb, self.solve_rel_cap), 1e-12)
        try:
            return solve_spd(op, rhs, rel_tol=rel)
        except SolverError:
            log.debug("CG stalled at rel_tol=%.1e on %d dofs; "
                      "falling back to a direct solve", rel, op.shape[0])
            if getattr(op, "_lu", None) is None:
                op._lu = spla.splu(op.matrix.tocsc())
            b = np.asarray(rhs, dtype=float).copy()
            b[op.space.dirichlet_mask] = 0.0
            x = op._lu.solve(b)
            achieved = dual_norm(op.space, b - op.matrix @ x)
            if achieved > abs_tol and achieved > rel * nb:
                raise SolverError(
                    f"direct fallback residual {achieved:.3e} exceeds "
                    f"tolerance {abs_tol:.3e}")
            return x, achieved


def refine_to_tolerance(problem, fields, evaluate, tol, max_passes=60):
    """Drive ``evaluate`` below ``tol`` by bulk-chasing refinement.

    ``evaluate(fields)`` solves on the problem's current mesh and returns
    ``(payload, total, indicators)``.  Stops on tolerance, on the dof
    budget, when marking selects nothing, or after ``max_passes``.
    Returns ``(payload, fields, total, passes, status)``.
    """
    passes = 0
    while True:
        payload, total, indicators = evaluate(fields)
        passes += 1
        if total <= tol:
            return payload, fields, total, passes, "tol"
        if problem.dof_count() >= problem.dof_budget:
            log.debug("dof budget %d reached with estimator %.3e > tol %.3e",
                      problem.dof_budget, total, tol)
            return payload, fields, total, passes, "budget"
        if passes >= max_passes:
            return payload, fields, total, passes, "passes"
        marked = dorfler_mark(indicators, problem.theta)
        if len(marked) == 0:
            return payload, fields, total, passes, "stalled"
        problem.refine(marked)
        fields = [problem.align(f) for f in fields]
