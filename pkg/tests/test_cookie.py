import numpy as np
import pytest

from ltvrom.cookie import (CENTERS, CookieConfig, Mesh, assemble_cookie, background_conductivity,
                           random_parameters, reference_behavior_check, subdomain_labels, training_grid)


@pytest.fixture(scope='module')
def problem():
    return assemble_cookie(CookieConfig(grid_resolution=12))


@pytest.mark.parametrize('res', [8, 13])
def test_mesh_size_and_area(res):
    mesh = Mesh.structured(res)
    assert mesh.n == (res + 1) ** 2 + res ** 2
    assert len(mesh.triangles) == 4 * res ** 2
    P = mesh.coords[mesh.triangles]
    d1, d2 = P[:, 1] - P[:, 0], P[:, 2] - P[:, 0]
    area = 0.5 * np.abs(d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])
    assert area.sum() == pytest.approx(1.)
    assert area.min() > 0


def test_coarse_resolution_rejected():
    with pytest.raises(ValueError):
        CookieConfig(grid_resolution=4)


def test_every_inclusion_has_elements(problem):
    labels = subdomain_labels(problem.mesh)
    for i in range(1, 5):
        assert np.any(labels == i)


def test_background_conductivity_polynomial():
    t = np.linspace(0, 1, 7)
    sys_coef = assemble_cookie(CookieConfig(grid_resolution=8)).system.A.coefficients[0]
    assert np.allclose([sys_coef((1., 1.), s) for s in t], background_conductivity(t))
    assert background_conductivity(0.25) == pytest.approx(0.125)


def test_mass_matrix_integrates_constants(problem):
    ones = np.ones(problem.system.n)
    assert ones @ (problem.mass @ ones) == pytest.approx(1.)


def test_stiffness_annihilates_constants_before_boundary_treatment():
    from ltvrom.cookie import _assemble, _local_matrices
    mesh = Mesh.structured(8)
    _, stiff, _ = _local_matrices(mesh.coords, mesh.triangles)
    K = _assemble(mesh.triangles, stiff, mesh.n)
    assert np.abs(K @ np.ones(mesh.n)).max() < 1e-12


def test_output_averages_constants(problem):
    sys = problem.system
    assert np.allclose(sys.C @ np.ones(sys.n), 1.)
    assert sys.M.shape == (sys.n, sys.n)
    assert np.linalg.matrix_rank(sys.C.toarray()) == 4


def test_control_vector_is_left_edge_integral(problem):
    b = problem.system.B.components[0].toarray().ravel()
    assert b.sum() == pytest.approx(1.)
    left = np.isclose(problem.mesh.coords[:, 0], 0.)
    assert np.all(b[~left] == 0.)


def test_dirichlet_rows_decouple(problem):
    sys = problem.system
    d = problem.dirichlet_dofs
    for Aq in sys.A.components:
        assert abs(Aq[d]).max() == 0. and abs(Aq[:, d]).max() == 0.
    E = sys.E.toarray()
    assert np.allclose(E[np.ix_(d, d)], np.diag(problem.mass.diagonal()[d]))


def test_system_is_symmetric_and_dissipative(problem):
    sys = problem.system
    assert abs(sys.E - sys.E.T).max() == 0.
    for Aq in sys.A.components:
        assert abs(Aq - Aq.T).max() < 1e-14
    A = sys.A.evaluate((0.1, 0.1), 0.25).toarray()
    assert np.linalg.eigvalsh(0.5 * (A + A.T)).max() <= 1e-12


def test_training_grid_is_log_uniform_with_first_parameter_fastest():
    grid = training_grid(5)
    assert len(grid) == 25
    assert grid[0] == pytest.approx((0.1, 0.1)) and grid[-1] == pytest.approx((100., 100.))
    assert grid[1][1] == grid[0][1] and grid[1][0] > grid[0][0]
    steps = np.diff(np.log10([g[0] for g in grid[:5]]))
    assert np.allclose(steps, steps[0])


def test_random_parameters_are_seeded_and_in_box():
    a, b = random_parameters(20, 3), random_parameters(20, 3)
    assert a == b and a != random_parameters(20, 4)
    arr = np.array(a)
    assert arr.min() >= 0.1 and arr.max() <= 100.


def test_reference_behavior(problem):
    report = reference_behavior_check(problem)
    assert report['passed'], report['final_outputs']
    assert len(report['times']) == problem.grid.nt + 1


def test_centers_inside_unit_square():
    for c in CENTERS:
        assert 0 < c[0] < 1 and 0 < c[1] < 1
