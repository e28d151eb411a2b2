"""Acceptance suite: one test per release criterion, each printing a
PASS/FAIL line (run with ``pytest -s`` to stream them)."""

import os
import time
import warnings

import numpy as np
import pytest

from trafem.mesh import CellField, bisect, check_mesh, create_rect_mesh, dorfler_mark
from trafem.problems import PoissonControl, QuadraticOracle, TopoOpt
from trafem.problems.studies import (fitted_rate, manufactured_poisson_study,
                                     poisson_fd_check, topo_fd_check)
from trafem.problems.synthetic import two_cell_mesh
from trafem.prox import BoxVolume, L1, Zero, prox_apply
from trafem.trust_region import TrParams, run

warnings.filterwarnings("ignore", message="gamma")


def report(num, ok, detail):
    status = "PASS" if ok else "FAIL"
    print(f"\nACCEPTANCE {num}: {status} ({detail})")
    assert ok, f"criterion {num}: {detail}"


@pytest.fixture(scope="module")
def poisson_run():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        prob = PoissonControl()          # reference settings: alpha, beta, n0, cap
        params = TrParams(max_iter=40)
        start = time.perf_counter()
        result = run(prob, prob.phi, prob.initial_control(), params)
        wall = time.perf_counter() - start
    return prob, result, wall


@pytest.fixture(scope="module")
def topo_run():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        prob = TopoOpt(example=1, n0=16, dof_budget=30_000)
        params = TrParams(max_iter=300, kappa_val_bar=1e9, kappa_der_bar=1e9,
                          hessian="lbfgs")
        iterates = []
        start = time.perf_counter()
        result = run(prob, prob.phi, prob.initial_control(), params,
                     callback=lambda k, z, rec: iterates.append(z))
        wall = time.perf_counter() - start
    return prob, result, wall, iterates


def test_criterion_1_poisson_run(poisson_run):
    prob, result, wall = poisson_run
    converged = result.status == "converged" and result.psi <= 1e-6
    iters_ok = result.iterations <= 40
    cap_hit = max(r.dofs for r in result.history) >= prob.dof_budget
    sparsity = float(np.mean(result.z.values == 0.0))
    runtime_ok = wall <= 300.0
    ok = converged and iters_ok and cap_hit and sparsity >= 0.20 and runtime_ok
    report(1, ok,
           f"psi={result.psi:.2e} in {result.iterations} iters, "
           f"dofs={max(r.dofs for r in result.history)} (cap {prob.dof_budget}), "
           f"zero fraction={sparsity:.2f}, wall={wall:.0f}s")


def test_criterion_2_corner_concentration(poisson_run):
    _, result, _ = poisson_run
    mesh = result.z.mesh
    cen = mesh.centroids()
    dist = np.hypot(cen[:, 0] - 0.5, cen[:, 1] - 0.5)
    near = np.median(mesh.cell_diams[dist <= 0.2])
    overall = np.median(mesh.cell_diams)
    ok = near <= 0.5 * overall
    report(2, ok, f"median h near corner {near:.4f} vs global {overall:.4f} "
                  f"(ratio {near / overall:.3f} <= 0.5)")


def test_criterion_3_topology_run(topo_run):
    prob, result, wall, iterates = topo_run
    converged = result.status == "converged" and result.psi <= 1e-6
    iters_ok = result.iterations <= 300
    feasible = True
    for z in iterates:
        if z.values.min() < 0.0 or z.values.max() > 1.0:
            feasible = False
        if abs(z.integral() - prob.phi.volume) > 1e-9:
            feasible = False
    runtime_ok = wall <= 900.0
    ok = converged and iters_ok and feasible and runtime_ok
    report(3, ok,
           f"psi={result.psi:.2e} in {result.iterations} iters, "
           f"feasible at all {len(iterates)} iterates, wall={wall:.0f}s")


@pytest.mark.skipif(not os.environ.get("TRAFEM_FULL_SCALE"),
                    reason="full-scale topology run is optional "
                           "(set TRAFEM_FULL_SCALE=1)")
def test_criterion_3_full_scale_optional():
    prob = TopoOpt(example=1, n0=64, dof_budget=150_000)
    params = TrParams(max_iter=400, kappa_val_bar=1e9, kappa_der_bar=1e9,
                      hessian="lbfgs")
    result = run(prob, prob.phi, prob.initial_control(), params)
    assert result.status == "converged"


def test_criterion_4_estimator_reliability():
    details = []
    ok = True
    for degree, nominal in ((1, 1.0), (2, 2.0)):
        rows = manufactured_poisson_study(degree, 5)   # 4 refinements
        rate = fitted_rate(rows)
        effs = [r["effectivity"] for r in rows]
        ok &= abs(rate - nominal) <= 0.15
        ok &= all(0.5 <= e <= 50.0 for e in effs)
        details.append(f"P{degree}: rate {rate:.3f} "
                       f"eff [{min(effs):.1f}, {max(effs):.1f}]")
    report(4, ok, "; ".join(details))


def test_criterion_5_gradient_oracles():
    p_err = poisson_fd_check(n_points=5)
    t_err = topo_fd_check(n_points=5)
    ok = p_err <= 1e-5 and t_err <= 1e-4
    report(5, ok, f"FD rel errors: poisson {p_err:.2e} (<=1e-5), "
                  f"topology {t_err:.2e} (<=1e-4)")


def test_criterion_6_prox_oracles():
    from test_prox import brute_force_box
    from scipy.optimize import minimize_scalar
    rng = np.random.default_rng(21)
    m = create_rect_mesh(3, 1)
    worst_box = worst_l1 = worst_vol = 0.0
    for _ in range(25):
        z = CellField(m, rng.normal(0.3, 1.2, m.num_cells))
        box = BoxVolume(0.0, 1.0, rng.uniform(0.2, 0.8) * m.total_area)
        r = rng.uniform(0.2, 4.0)
        y = prox_apply(box, z, r)
        worst_box = max(worst_box, np.abs(y.values - brute_force_box(z, box, r)).max())
        worst_vol = max(worst_vol, abs(y.integral() - box.volume))
        beta = rng.uniform(0.05, 0.8)
        yl = prox_apply(L1(beta), z, r)
        for zi, yi in zip(z.values, yl.values):
            res = minimize_scalar(
                lambda t: 0.5 / r * (t - zi)**2 + beta * abs(t),
                bounds=(-abs(zi) - 1, abs(zi) + 1), method="bounded",
                options={"xatol": 1e-10})
            worst_l1 = max(worst_l1, abs(yi - res.x))
    ok = worst_box <= 1e-6 and worst_l1 <= 1e-6 and worst_vol <= 1e-10
    report(6, ok, f"brute-force gaps: box {worst_box:.1e}, L1 {worst_l1:.1e}; "
                  f"volume error {worst_vol:.1e}")


def test_criterion_7_certificates(poisson_run, topo_run):
    ok = True
    details = []
    for name, result in (("poisson", poisson_run[1]), ("topology", topo_run[1])):
        rows = [r for r in result.history if np.isfinite(r.pred)]
        fcd_ok = all(r.pred > 0 and np.isfinite(r.kappa_fcd) and r.kappa_fcd > 0
                     for r in rows)
        contain_ok = all(r.step_norm <= r.delta for r in rows)
        mono_ok = not result.monotone_violations
        f_prev, prev_acc = None, False
        for r in rows:
            if prev_acc and f_prev is not None and r.F > f_prev + 1e-8 * (1 + abs(f_prev)):
                mono_ok = False
            f_prev, prev_acc = r.F, r.accepted
        ok &= fcd_ok and contain_ok and mono_ok
        kmin = min((r.kappa_fcd for r in rows), default=np.nan)
        details.append(f"{name}: kappa_fcd>= {kmin:.2e}, containment "
                       f"{'ok' if contain_ok else 'violated'}, "
                       f"monotone {'ok' if mono_ok else 'violated'}")
    report(7, ok, "; ".join(details))


def test_criterion_8_inexactness_robustness():
    mesh = two_cell_mesh()
    target = CellField(mesh, [1.5, -2.0])
    curv = np.diag(mesh.cell_areas) @ np.array([[4.0, 0.3], [0.3, 1.0]])
    curv = 0.5 * (curv + curv.T)

    def make_noise(scale):
        def noise(i, tau):
            s = scale * tau
            return (s if i % 2 else -s), -s
        return noise

    def solve(scale):
        oracle = QuadraticOracle(
            target, curvature=curv,
            noise=make_noise(scale) if scale else None)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            params = TrParams(delta0=10.0, max_iter=400, kappa_val_bar=1.0,
                              psi_tol=1e-8, hessian="zero", gamma=0.04,
                              eps_decay=0.995)
        return run(oracle, Zero(), CellField.constant(mesh, 0.0), params)

    compliant = solve(0.5)
    dist = (compliant.z - target).norm()
    noisy = solve(50.0)
    ok = (compliant.status == "converged" and dist <= 1e-5
          and len(noisy.monotone_violations) > 0)
    report(8, ok, f"compliant noise: |z-z*|={dist:.1e} (<=1e-5); "
                  f"100x noise: {len(noisy.monotone_violations)} "
                  f"monotonicity violations detected")


def test_criterion_9_mesh_suite():
    rng = np.random.default_rng(2024)
    mesh = create_rect_mesh(2, 2)
    cycles = 0
    try:
        while cycles < 10_000:
            ind = rng.uniform(0.0, 1.0, mesh.num_cells)**2
            theta = rng.uniform(0.1, 0.9)
            mesh = bisect(mesh, dorfler_mark(ind, theta))
            check_mesh(mesh)
            cycles += 1
            if mesh.num_cells > 2000:
                mesh = create_rect_mesh(int(rng.integers(1, 4)),
                                        int(rng.integers(1, 4)))
        ok = True
    except AssertionError:
        ok = False
    report(9, ok, f"{cycles} random mark/bisect cycles kept conformity, "
                  f"orientation, area, and angle bounds")
