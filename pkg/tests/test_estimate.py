import numpy as np
import pytest

from trafem.estimate import (combined_indicator, energy_estimator,
                             linf_estimator, log_factor)
from trafem.fem import MappedCoefficient, build_space
from trafem.mesh import CellField, Mesh, create_rect_mesh

UNIT_TRI = Mesh(np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]),
                np.array([[0, 1, 2]]))


def forcing(xy, bary):
    return np.cos(xy[..., 0]) + xy[..., 1]


def test_zero_residuals():
    s = build_space(UNIT_TRI, 1)
    bd = energy_estimator(s, s.function(), 1.0, 0.0)
    assert bd.total == 0.0 and np.all(bd.per_element == 0.0)


def test_single_cell_volume_terms():
    s = build_space(UNIT_TRI, 1)
    u0 = s.function()
    bd = energy_estimator(s, u0, 1.0, 1.0)
    # h^2 |T| = 2 * 0.5 with unit residual and no interior/Neumann edges
    assert abs(bd.xi1**2 - 1.0) < 1e-12
    assert bd.xi2 == 0.0 and bd.xi3 == 0.0
    bdi = linf_estimator(s, u0, 1.0, 1.0)
    assert abs(bdi.xi1 - 2.0) < 1e-12
    assert abs(bdi.total - log_factor(UNIT_TRI) * 2.0) < 1e-12


def test_pure_dirichlet_has_no_neumann_term():
    m = create_rect_mesh(3, 3)
    s = build_space(m, 2)
    u = s.interpolate(lambda x, y: x * (1 - x) * y * (1 - y))
    bd = energy_estimator(s, u, 1.0, forcing)
    assert bd.xi3 == 0.0


def test_per_element_decomposition():
    m = create_rect_mesh(4, 3, boundary_rule=lambda x, y:
                         "neumann" if x < 1e-9 else "dirichlet")
    s = build_space(m, 2)
    u = s.interpolate(lambda x, y: np.sin(x + 0.3 * y**2))
    bd = energy_estimator(s, u, 1.0, forcing, reaction=0.5)
    lhs = bd.per_element.sum()
    rhs = bd.xi1**2 + bd.xi2**2 + bd.xi3**2
    assert abs(lhs - rhs) <= 1e-12 * rhs
    assert bd.xi3 > 0.0


def test_linf_per_element_max_recovers_totals():
    m = create_rect_mesh(3, 3, boundary_rule=lambda x, y: "neumann")
    s = build_space(m, 1, dirichlet_tags=())
    u = s.interpolate(lambda x, y: x**2 - y)
    bd = linf_estimator(s, u, 1.0, forcing, reaction=1.0)
    assert abs(bd.per_element.max() - max(bd.xi1, bd.xi2, bd.xi3)) < 1e-12


def test_p1_volume_term_reduces_to_data():
    # for P1 with cellwise-constant coefficient the volume residual is
    # exactly q - b*u, independent of the (vanishing) second derivatives
    m = create_rect_mesh(2, 2)
    s = build_space(m, 1, dirichlet_tags=())
    u = s.interpolate(lambda x, y: x + y)
    coeff = CellField(m, np.linspace(1.0, 2.0, m.num_cells))
    bd = energy_estimator(s, u, coeff, 0.0, reaction=0.0)
    assert bd.xi1 == 0.0


def test_linf_homogeneity():
    m = create_rect_mesh(3, 3)
    s = build_space(m, 2)
    u = s.interpolate(lambda x, y: np.sin(x) * y)
    b1 = linf_estimator(s, u, 1.0, forcing)
    u2 = s.function(2 * u.coeffs)
    b2 = linf_estimator(s, u2, 1.0, lambda xy, bary: 2 * forcing(xy, bary))
    for a, b in ((b1.xi1, b2.xi1), (b1.xi2, b2.xi2), (b1.total, b2.total)):
        assert abs(b - 2 * a) < 1e-12 * max(1.0, a)


def test_combined_indicator():
    m = create_rect_mesh(2, 2)
    s = build_space(m, 2)
    u = s.interpolate(lambda x, y: x * y)
    bd = energy_estimator(s, u, 1.0, forcing)
    assert np.array_equal(combined_indicator(bd), bd.per_element)
    assert np.allclose(combined_indicator(bd, bd), 2 * bd.per_element)
    s_other = build_space(create_rect_mesh(1, 1), 2)
    other = energy_estimator(s_other, s_other.function(), 1.0, 0.0)
    with pytest.raises(ValueError):
        combined_indicator(bd, other)


def test_two_cell_hand_jump():
    # hat function on the upper-right vertex: gradient jumps across the
    # diagonal from (0,0) to (1,1)-ward direction by sqrt(2)
    m = create_rect_mesh(1, 1)
    s = build_space(m, 1, dirichlet_tags=())
    u = s.interpolate(lambda x, y: np.maximum(x + y - 1.0, 0.0))
    bd = energy_estimator(s, u, 1.0, 0.0)
    assert abs(bd.xi2**2 - 4.0) < 1e-12
    assert abs(bd.per_element.sum() - (bd.xi1**2 + bd.xi2**2)) < 1e-12
    # the interior edge term splits evenly between the two cells
    assert abs(bd.per_element[0] - bd.per_element[1]) < 1e-12


def test_mapped_coefficient_matches_callable():
    m = create_rect_mesh(3, 3)
    sp1 = build_space(m, 1, dirichlet_tags=())
    rho = sp1.interpolate(lambda x, y: 0.2 + 0.3 * x + 0.1 * y)
    s = build_space(m, 2)
    u = s.interpolate(lambda x, y: np.sin(2 * x) * y)
    mapped = MappedCoefficient(rho, lambda r: 0.1 + r**3)

    def cb(xy, bary):
        r = 0.2 + 0.3 * xy[..., 0] + 0.1 * xy[..., 1]
        return 0.1 + r**3

    bd1 = energy_estimator(s, u, mapped, 1.0)
    bd2 = energy_estimator(s, u, cb, 1.0)
    assert abs(bd1.total - bd2.total) < 1e-10 * bd2.total


def test_estimator_decay_tracks_error():
    from trafem.problems.studies import manufactured_poisson_study
    rows = manufactured_poisson_study(1, 4)
    for prev, cur in zip(rows[:-1], rows[1:]):
        est_rate = np.log(prev["estimator"] / cur["estimator"]) \
            / np.log(prev["h"] / cur["h"])
        assert abs(est_rate - cur["rate"]) < 0.2
