"""Verification studies: manufactured-solution rates and FD gradient checks."""

import numpy as np

from ..estimate import energy_estimator
from ..fem import QUAD_O5, assemble_diffusion, assemble_load, build_space, cell_gradients, solve_spd
from ..mesh import CellField, bisect, create_rect_mesh
from ..prox import BoxVolume, prox_apply
from .poisson import PoissonControl
from .topo import TopoOpt


def _exact(x, y):
    return np.sin(np.pi * x) * np.sin(np.pi * y)


def _exact_grad(x, y):
    return (np.pi * np.cos(np.pi * x) * np.sin(np.pi * y),
            np.pi * np.sin(np.pi * x) * np.cos(np.pi * y))


def _forcing(xy, bary):
    return 2 * np.pi**2 * _exact(xy[..., 0], xy[..., 1])


def manufactured_poisson_study(degree, levels, n0=4):
    """Solve -Laplace(u) = f with a known smooth solution on finer and
    finer uniformly refined meshes; report energy errors, estimator
    totals, effectivity indices, and observed rates versus h.
    """
    mesh = create_rect_mesh(n0, n0)
    rows = []
    for _ in range(levels):
        space = build_space(mesh, degree)
        A = assemble_diffusion(space, 1.0)
        b = assemble_load(space, _forcing)
        u = space.function(solve_spd(A, b, rel_tol=1e-12)[0])
        bary, w = QUAD_O5
        xy = space.quad_points(bary)
        gx, gy = _exact_grad(xy[..., 0], xy[..., 1])
        gh = cell_gradients(u, bary=bary)
        err2 = (gh[..., 0] - gx)**2 + (gh[..., 1] - gy)**2
        error = float(np.sqrt(mesh.cell_areas @ (err2 @ w)))
        est = energy_estimator(space, u, 1.0, _forcing).total
        rows.append({
            "dofs": space.num_dofs,
            "h": float(mesh.cell_diams.max()),
            "error": error,
            "estimator": est,
            "effectivity": est / error if error > 0 else np.inf,
        })
        # one uniform level quarters every cell: two mark-all bisections
        mesh = bisect(mesh, np.arange(mesh.num_cells))
        mesh = bisect(mesh, np.arange(mesh.num_cells))
    for i, row in enumerate(rows):
        if i == 0:
            row["rate"] = None
        else:
            prev = rows[i - 1]
            row["rate"] = (np.log(prev["error"] / row["error"])
                           / np.log(prev["h"] / row["h"]))
    return rows


def fitted_rate(rows):
    """Least-squares slope of log(error) against log(h)."""
    h = np.log([r["h"] for r in rows])
    e = np.log([r["error"] for r in rows])
    return float(np.polyfit(h, e, 1)[0])


def _directional_check(problem, z_points, directions, h):
    """Max relative error of central differences against <g, dz>."""
    worst = 0.0
    for z, dz in zip(z_points, directions):
        g = problem.smooth_gradient_fixed(z)
        f_plus = problem.smooth_value_fixed(z + h * dz)
        f_minus = problem.smooth_value_fixed(z - h * dz)
        fd = (f_plus - f_minus) / (2 * h)
        exact = g.inner(dz)
        rel = abs(fd - exact) / max(abs(exact), 1e-14)
        worst = max(worst, rel)
    return worst


def poisson_fd_check(n_points=5, seed=0, h=1e-5, n0=4, flip_adjoint=False):
    if n_points < 1:
        raise ValueError("need at least one check point")
    problem = PoissonControl(n0=n0, flip_adjoint=flip_adjoint)
    rng = np.random.default_rng(seed)
    nc = problem.mesh.num_cells
    points, dirs = [], []
    for _ in range(n_points):
        points.append(CellField(problem.mesh, rng.normal(0.0, 10.0, nc)))
        d = CellField(problem.mesh, rng.normal(0.0, 1.0, nc))
        dirs.append(d * (1.0 / d.norm()))
    return _directional_check(problem, points, dirs, h)


def topo_fd_check(n_points=5, seed=0, h=1e-5, n0=6, example=1,
                  flip_sign=False):
    if n_points < 1:
        raise ValueError("need at least one check point")
    problem = TopoOpt(example=example, n0=n0)
    if flip_sign:
        inner = problem.smooth_gradient_fixed
        problem.smooth_gradient_fixed = lambda z: -1.0 * inner(z)
    rng = np.random.default_rng(seed)
    nc = problem.mesh.num_cells
    box = BoxVolume(0.0, 1.0, problem.phi.volume)
    points, dirs = [], []
    for _ in range(n_points):
        raw = CellField(problem.mesh, rng.uniform(0.0, 1.0, nc))
        points.append(prox_apply(box, raw, 1.0))
        d = CellField(problem.mesh, rng.normal(0.0, 1.0, nc))
        dirs.append(d * (1.0 / d.norm()))
    return _directional_check(problem, points, dirs, h)
