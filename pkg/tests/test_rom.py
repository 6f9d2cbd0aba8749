import zipfile

import numpy as np
import pytest

from ltvrom.fom import GramianOperator, apply_gramian, fta_residual_norm, solve_fom, solve_fta_rom
from ltvrom.linalg import BasisMatrix, orthonormalize
from ltvrom.ltv import control_from_adjoint, integrate_adjoint, integrate_primal
from ltvrom.rom import (BiorthogonalityError, RedundantBasisError, ReducedBases, ReducedSystem,
                        apply_reduced_gramian, build_reduced_system, integrate_reduced_adjoint,
                        integrate_reduced_primal, reduced_control, solve_fully_reduced)
from systems import random_parameter, random_system, small_grid


def random_bases(sys, k_pr, k_ad, N, seed=0):
    rng = np.random.default_rng(seed)
    return ReducedBases.galerkin(sys, rng.standard_normal((sys.n, k_pr)), rng.standard_normal((sys.n, k_ad)),
                                 rng.standard_normal((sys.n, N)))


def test_galerkin_bases_are_orthonormal_in_mass_matrix():
    sys = random_system(0, n=9)
    b = random_bases(sys, 4, 3, 2)
    b.check(sys)
    assert b.V_pr.metric == 'E' and b.V_N.metric == 'G'
    assert (b.k_pr, b.k_ad, b.N) == (4, 3, 2)


def test_full_bases_reproduce_full_trajectories():
    sys = random_system(1, n=6, m=2, parametric_B=True)
    grid = small_grid(7)
    mu = random_parameter(np.random.default_rng(1))
    red = build_reduced_system(sys, ReducedBases.full(sys))
    u = np.random.default_rng(2).standard_normal((grid.nt, 2))
    x0 = sys.x0.evaluate(mu)
    assert np.allclose(integrate_reduced_primal(red, grid, mu, red.x0_hat(mu), u),
                       integrate_primal(sys, grid, mu, x0, u), rtol=1e-10, atol=1e-12)
    p = np.random.default_rng(3).standard_normal(sys.n)
    P = integrate_reduced_adjoint(red, grid, mu, p)
    assert np.allclose(P, integrate_adjoint(sys, grid, mu, p), rtol=1e-10, atol=1e-12)
    assert np.allclose(reduced_control(red, grid, mu, P), control_from_adjoint(sys, grid, mu, P), atol=1e-12)
    gr = GramianOperator(sys, grid, mu)
    assert np.allclose(apply_reduced_gramian(red, grid, mu, p), apply_gramian(gr, p), rtol=1e-10, atol=1e-12)


def test_batched_reduced_integration_matches_columns():
    sys = random_system(2, n=8, m=2)
    grid = small_grid(5)
    mu = (1., 1.)
    red = build_reduced_system(sys, random_bases(sys, 4, 4, 3))
    P0 = np.random.default_rng(0).standard_normal((4, 3))
    batch = integrate_reduced_adjoint(red, grid, mu, P0)
    for j in range(3):
        assert np.allclose(batch[..., j], integrate_reduced_adjoint(red, grid, mu, P0[:, j]))


def test_fully_reduced_model_with_full_dynamics_equals_full_dynamics_rom():
    """With ``V = W = I`` the fully reduced problem is the full-dynamics problem on ``span(V_N)``."""
    sys = random_system(3, n=7, m=2)
    grid = small_grid(6)
    mu = random_parameter(np.random.default_rng(3))
    V_N = orthonormalize(sys.space, np.random.default_rng(4).standard_normal((7, 3)))
    bases = ReducedBases.full(sys, V_N.columns)
    sol = solve_fully_reduced(build_reduced_system(sys, bases), grid, mu, bases)
    ref = solve_fta_rom(sys, grid, mu, bases.V_N)
    assert np.allclose(sol.alpha, ref.alpha, rtol=1e-8, atol=1e-12)
    assert sol.reduced_residual == pytest.approx(ref.residual, rel=1e-8)
    assert sol.reduced_residual == pytest.approx(fta_residual_norm(sys, grid, mu, sol.phi_N), rel=1e-8)
    assert sol.integrations == 2 * 3 + 1


def test_fully_reduced_solution_exact_with_complete_bases():
    sys = random_system(4, n=6)
    grid = small_grid(5)
    mu = (0.5, 5.)
    bases = ReducedBases.full(sys, np.eye(6))
    sol = solve_fully_reduced(build_reduced_system(sys, bases), grid, mu, bases)
    ref = solve_fom(sys, grid, mu, rel_tol=1e-13)
    assert sys.space.norm(sol.phi_N - ref.phi_T) <= 1e-9 * sys.space.norm(ref.phi_T)
    assert sol.reduced_residual <= 1e-10
    P, U, X = sol.trajectories()
    assert np.allclose(U, ref.u, rtol=1e-8, atol=1e-10)


def test_residual_at_other_coefficients():
    sys = random_system(5, n=8, m=2)
    grid = small_grid(5)
    mu = (2., 2.)
    red = build_reduced_system(sys, random_bases(sys, 5, 5, 2))
    sol = solve_fully_reduced(red, grid, mu)
    assert sol.residual(sol.alpha) == pytest.approx(sol.reduced_residual)
    assert sol.residual(sol.alpha + [0.1, -0.2]) >= sol.reduced_residual


def test_redundant_final_time_basis_is_rejected():
    sys = random_system(6, n=6)
    grid = small_grid(4)
    v = orthonormalize(sys.space, np.ones((6, 1))).columns
    bases = ReducedBases.full(sys).with_V_N(BasisMatrix(np.hstack([v, v]), 'G'))
    with pytest.raises(RedundantBasisError):
        solve_fully_reduced(build_reduced_system(sys, bases), grid, (1., 1.))


def test_singular_reduced_mass_matrix_is_rejected():
    sys = random_system(7, n=6)
    V = orthonormalize(sys.space, np.eye(6)[:, :2], metric=sys.E, metric_tag='E')
    W = BasisMatrix(np.zeros((6, 2)))
    with pytest.raises(BiorthogonalityError):
        build_reduced_system(sys, ReducedBases(V, W, V, V, BasisMatrix(np.zeros((6, 0)), 'G')))


def test_reduced_system_archive_round_trip(tmp_path):
    sys = random_system(8, n=7, m=2)
    grid = small_grid(5)
    red = build_reduced_system(sys, random_bases(sys, 3, 3, 2))
    with zipfile.ZipFile(tmp_path / 'r.zip', 'w') as zf:
        manifest = red.to_archive(zf)
    with zipfile.ZipFile(tmp_path / 'r.zip') as zf:
        back = ReducedSystem.from_archive(zf, manifest)
    a, b = solve_fully_reduced(red, grid, (1., 3.)), solve_fully_reduced(back, grid, (1., 3.))
    assert np.array_equal(a.alpha, b.alpha)
    assert back.system_fingerprint == sys.fingerprint()
