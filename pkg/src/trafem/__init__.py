"""trafem: nonsmooth trust-region optimization on adaptive finite elements."""

from .estimate import EstimatorBreakdown, combined_indicator, energy_estimator, linf_estimator
from .fem import (FeFunction, FeSpace, SparseOperator, assemble_diffusion,
                  assemble_load, assemble_mass, build_space, cell_gradients,
                  dual_norm, solve_spd)
from .mesh import (CellField, Mesh, bisect, create_rect_mesh, dorfler_mark,
                   mesh_stats, prolong_cellfield)
from .prox import L1, BoxVolume, Zero, phi_value, prox_apply
from .trust_region import (TrParams, TrResult, accept_and_update, cauchy_point,
                           derivative_loop, run, solve_subproblem,
                           stationarity, value_tolerance)
from .vtk_io import write_vtk

__version__ = "0.1.0"
