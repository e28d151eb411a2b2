"""Problem oracles: PDE-constrained objectives evaluated by adaptive FEM."""

from .afem import refine_to_tolerance
from .poisson import PoissonControl, l_shape_mesh
from .synthetic import QuadraticOracle
from .topo import TopoOpt, symmetry_half_domain

__all__ = [
    "PoissonControl", "QuadraticOracle", "TopoOpt",
    "l_shape_mesh", "refine_to_tolerance", "symmetry_half_domain",
]
