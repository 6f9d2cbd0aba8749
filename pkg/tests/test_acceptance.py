"""End-to-end acceptance checks.

Each test records one PASS/FAIL line (see ``conftest.py``).  The benchmark
checks share one set of builds on the resolution-32 cookie problem, cached per
module; building all strategies takes tens of minutes on one core.
"""

import time
from collections import defaultdict

import numpy as np
import pytest

from ltvrom import compression
from ltvrom.cli import ROUNDOFF_RTOL, evaluate
from ltvrom.cookie import CookieConfig, assemble_cookie, random_parameters, training_grid
from ltvrom.estimators import (OfflineCache, adjoint_residual_coefficients, compute_constants, estimate_adjoint,
                               estimate_fta_full, estimate_gramian, estimate_primal, primal_residual_coefficients)
from ltvrom.fom import GramianOperator, apply_gramian, solve_fom, solve_fta_rom
from ltvrom.ltv import integrate_adjoint, integrate_primal
from ltvrom.rom import (ReducedBases, apply_reduced_gramian, build_reduced_system, integrate_reduced_adjoint,
                        integrate_reduced_primal)
from ltvrom.strategies import CONVERGED, ENRICHED, STRATEGIES, StrategyConfig, build
from oracles import (DenseProblem, dense_adjoint_residual_norms, dense_optimal_control,
                     dense_primal_residual_norms, g_norm)
from systems import random_parameter, random_system, small_grid

RESOLUTION = 32
NT = 50
TEST_SIZE = 50
TEST_SEED = 0
REFERENCE_REL_TOL = 1e-14
FULLY_REDUCED = ('sr-g', 'g-sr', 'gc', 'dg')


# -- small random systems ---------------------------------------------------------

def test_optimal_control_matches_dense_oracle(verdict):
    start = time.perf_counter()
    worst_phi = worst_u = 0.
    count = 0
    for seed in range(24):
        rng = np.random.default_rng(1000 + seed)
        sys = random_system(1000 + seed, n=int(rng.integers(3, 11)), m=int(rng.integers(1, 3)),
                            parametric_B=seed % 2 == 1, separate_gram=seed % 3 == 2,
                            time_dependent_R=seed % 4 == 3)
        grid = small_grid(int(rng.integers(2, 13)))
        mu = random_parameter(rng)
        dp = DenseProblem.from_system(sys, grid, mu)
        u, _, phi_T = dense_optimal_control(dp)
        sol = solve_fom(sys, grid, mu)
        worst_phi = max(worst_phi, g_norm(dp, sol.phi_T - phi_T) / g_norm(dp, phi_T))
        worst_u = max(worst_u, np.linalg.norm(sol.u - u) / np.linalg.norm(u))
        count += 1
    elapsed = time.perf_counter() - start
    ok = count >= 20 and worst_phi <= 1e-6 and worst_u <= 1e-6 and elapsed < 30
    verdict(1, 'optimal control vs dense oracle', ok,
            f'{count} systems, max rel err phi_T {worst_phi:.1e}, u {worst_u:.1e}, {elapsed:.1f} s')


def test_decomposed_residuals_match_dense_evaluation(verdict):
    start = time.perf_counter()
    worst = 0.
    cases = 0
    for seed in range(110):
        rng = np.random.default_rng(2000 + seed)
        n = int(rng.integers(10, 201))
        sys = random_system(2000 + seed, n=n, m=int(rng.integers(1, 3)), parametric_B=seed % 2 == 0,
                            separate_gram=seed % 3 == 0)
        grid = small_grid(int(rng.integers(3, 9)))
        mu = random_parameter(rng)
        k_pr, k_ad, N = (int(v) for v in rng.integers(1, 9, 3))
        bases = ReducedBases.galerkin(sys, rng.standard_normal((n, k_pr)), rng.standard_normal((n, k_ad)),
                                      rng.standard_normal((n, N)))
        red = build_reduced_system(sys, bases)
        cache = OfflineCache.build(sys, bases)
        dp = DenseProblem.from_system(sys, grid, mu)
        U = rng.standard_normal((grid.nt, sys.m))
        X = integrate_reduced_primal(red, grid, mu, red.x0_hat(mu), U)
        rho = cache.norms('primal', primal_residual_coefficients(red, grid, mu, X, U))
        rho_dense = dense_primal_residual_norms(dp, X @ bases.V_pr.columns.T, U)
        P = integrate_reduced_adjoint(red, grid, mu, rng.standard_normal(k_ad))
        eta = cache.norms('adjoint', adjoint_residual_coefficients(red, grid, mu, P))
        eta_dense = dense_adjoint_residual_norms(dp, P @ bases.V_ad.columns.T)
        for a, b in ((rho, rho_dense), (eta, eta_dense)):
            worst = max(worst, float(np.max(np.abs(a - b) / np.abs(b))))
        cases += 1
    elapsed = time.perf_counter() - start
    ok = cases >= 100 and worst <= 1e-6 and elapsed < 120
    verdict(4, 'offline/online residual norms vs dense', ok,
            f'{cases} cases (n <= 200), max rel deviation {worst:.1e}, {elapsed:.1f} s')


# -- benchmark ----------------------------------------------------------------------

@pytest.fixture(scope='module')
def problem():
    return assemble_cookie(CookieConfig(grid_resolution=RESOLUTION, nt=NT))


@pytest.fixture(scope='module')
def config():
    return StrategyConfig(training=training_grid(10), training_sys=training_grid(5))


@pytest.fixture(scope='module')
def consts(problem):
    return compute_constants(problem.system, problem.grid)


@pytest.fixture(scope='module')
def certificates():
    """Every compression certificate checked while the module's builds run."""
    calls = []
    original = compression._certify

    def recording(space, basis, S, tol, capped, what):
        err = original(space, basis, S, tol, capped, what)
        calls.append({'what': what, 'error': err, 'tol': tol, 'capped': capped})
        return err

    with pytest.MonkeyPatch.context() as mp:
        mp.setattr(compression, 'CHECK_CERTIFICATES', True)
        mp.setattr(compression, '_certify', recording)
        yield calls


@pytest.fixture(scope='module')
def builds(problem, config, consts, certificates):
    out = {}
    for strategy in STRATEGIES:
        start = time.perf_counter()
        result = build(strategy, problem.system, problem.grid, config, consts)
        out[strategy] = (result, time.perf_counter() - start)
    return out


@pytest.fixture(scope='module')
def test_parameters():
    return random_parameters(TEST_SIZE, TEST_SEED)


@pytest.fixture(scope='module')
def reliability(problem, builds, test_parameters):
    """Estimates and true errors of every estimator at every test parameter."""
    sys, grid = problem.system, problem.grid
    rows = defaultdict(list)
    for mu in test_parameters:
        ref = solve_fom(sys, grid, mu, rel_tol=REFERENCE_REL_TOL)
        ref_norm = sys.space.norm(ref.phi_T)
        grom = solve_fta_rom(sys, grid, mu, builds['grom'][0].V_N)
        rows['fta_full'].append({
            'estimate': estimate_fta_full(sys, grid, mu, grom.phi_N),
            'true': sys.space.norm(ref.phi_T - grom.phi_N), 'scale': ref_norm})
        x0 = sys.x0.evaluate(mu)
        for strategy in FULLY_REDUCED:
            model = builds[strategy][0].model
            red, bases, cache, c = model.red, model.bases, model.cache, model.consts
            sol = model.solve(grid, mu)
            _, U, _ = sol.trajectories()
            rows[f'full/{strategy}'].append({'estimate': model.estimate(grid, mu, sol)[0].total,
                                             'true': sys.space.norm(ref.phi_T - sol.phi_N), 'scale': ref_norm})
            est = estimate_primal(cache, red, grid, mu, U, consts=c)
            Xr = integrate_reduced_primal(red, grid, mu, red.x0_hat(mu), U) @ bases.V_pr.columns.T
            X = integrate_primal(sys, grid, mu, x0, U)
            true = np.array([sys.space.norm(a - b) for a, b in zip(X, Xr)])
            scale = max(sys.space.norm(x) for x in X)
            rows[f'primal/{strategy}'].append({'estimate': est, 'true': true, 'scale': scale})
            est = estimate_adjoint(cache, red, grid, mu, sol.alpha, consts=c)
            Pr = integrate_reduced_adjoint(red, grid, mu, red.blocks['M11'] @ sol.alpha) @ bases.V_ad.columns.T
            P = integrate_adjoint(sys, grid, mu, sol.phi_N)
            true = np.array([sys.space.norm(a - b) for a, b in zip(P, Pr)])
            scale = max(sys.space.norm(p) for p in P)
            rows[f'adjoint/{strategy}'].append({'estimate': est, 'true': true, 'scale': scale})
            approx = bases.V_pr.columns @ apply_reduced_gramian(red, grid, mu, red.blocks['M11'] @ sol.alpha)
            exact = apply_gramian(GramianOperator(sys, grid, mu), sol.phi_N)
            rows[f'gramian/{strategy}'].append({'estimate': estimate_gramian(cache, red, grid, mu, sol.alpha, c, sol),
                                                'true': sys.space.norm(approx - exact),
                                                'scale': sys.space.norm(exact)})
    return rows


def test_every_estimator_is_reliable(reliability, consts, verdict):
    assert consts.C1 == 1. and consts.c == 1.
    violations = defaultdict(int)
    worst = {}
    for name, rows in reliability.items():
        ratio = 0.
        for r in rows:
            est, true = np.atleast_1d(r['estimate']), np.atleast_1d(r['true'])
            # both sides carry round-off of the size of the approximated quantity
            bound = est + ROUNDOFF_RTOL * r['scale']
            if np.any(true > bound):
                violations[name] += 1
            ratio = max(ratio, float(np.max(np.divide(true, est, out=np.zeros_like(true), where=est > 0))))
        worst[name] = ratio
    detail = (f'{sum(violations.values())} violations {dict(violations)} over {TEST_SIZE} parameters and '
              f'{len(reliability)} estimators, '
              f'C2 = {consts.C2:.4g}; max true/estimate ' +
              ', '.join(f'{k} {v:.2g}' for k, v in sorted(worst.items())))
    verdict(2, 'estimator reliability', not violations, detail)


def test_full_estimate_efficiency(reliability, verdict):
    means = {}
    for strategy in FULLY_REDUCED:
        rows = reliability[f'full/{strategy}']
        means[strategy] = float(np.mean([r['estimate'] / r['true'] for r in rows]))
    ok = all(1. <= m <= 1e4 for m in means.values())
    verdict(3, 'mean efficiency of the full estimate in [1, 1e4]', ok,
            ', '.join(f'{s} {m:.3g}' for s, m in means.items()))


def test_rank_four_termination(builds, verdict):
    summary = {s: (r.log.stop_reason, r.V_N.k, r.log.iterations, t) for s, (r, t) in builds.items()}
    ok = all(summary[s][0] == CONVERGED and summary[s][1] == 4 for s in ('grom', 'sr-g', 'g-sr', 'dg', 'gc'))
    ok = ok and summary['gc'][2] > summary['sr-g'][2]
    total = sum(t for _, t in builds.values())
    ok = ok and total < 45 * 60
    verdict(5, 'termination with N = 4', ok,
            '; '.join(f'{s} {st} N={N} it={it} {t:.0f}s' for s, (st, N, it, t) in summary.items()) +
            f'; total {total:.0f} s')


def test_full_order_solve_counts(builds, config, verdict):
    gc, srg = builds['gc'][0].log, builds['sr-g'][0].log
    ok = gc.fom_solves == gc.iterations and srg.fom_solves == len(config.training_sys) + srg.iterations
    verdict(6, 'full-order solve counts', ok,
            f'gc {gc.fom_solves} solves / {gc.iterations} iterations; sr-g {srg.fom_solves} solves = '
            f'{len(config.training_sys)} + {srg.iterations} iterations')


def test_dg_inner_loops_reach_tolerance(builds, config, verdict):
    log = builds['dg'][0].log
    final = {}
    for q in log.inner_records:
        final[q.outer_iteration] = q
    outer = [r.iteration for r in log.records if r.action == ENRICHED]
    missing = [it for it in outer if it not in final]
    worst = max((q.max_gramian for q in final.values()), default=float('inf'))
    ok = not missing and bool(final) and all(q.max_gramian <= config.eps_inner for q in final.values())
    verdict(7, 'inner loop max Gramian estimate <= eps_inner', ok,
            f'{len(final)} outer steps, worst final inner max {worst:.3g} vs {config.eps_inner:g}, '
            f'outcomes {[q.action for q in final.values()]}' + (f', no inner loop after {missing}' if missing else ''))


def test_online_time_ordering(problem, builds, test_parameters, verdict):
    sys, grid = problem.system, problem.grid
    rom = evaluate(sys, grid, 'gc', builds['gc'][0].model, test_parameters, true_errors=False, fom_timing=True)
    grom = evaluate(sys, grid, 'grom', builds['grom'][0].V_N, test_parameters, true_errors=False,
                    fom_timing=False)
    t_rom = float(np.mean([r['rom_time_ms'] for r in rom]))
    t_grom = float(np.mean([r['rom_time_ms'] for r in grom]))
    t_fom = float(np.mean([r['fom_time_ms'] for r in rom]))
    verdict(8, 'mean solve time fully reduced < full-dynamics reduced < full order', t_rom < t_grom < t_fom,
            f'{t_rom:.3g} ms < {t_grom:.3g} ms < {t_fom:.3g} ms')


def test_compression_certificates(builds, certificates, verdict):
    checked = [c for c in certificates if c['error'] is not None]
    bad = [c for c in checked if c['capped'] or c['error'] > c['tol']]
    ok = bool(checked) and len(checked) == len(certificates) and not bad
    worst = max((c['error'] / c['tol'] for c in checked), default=float('nan'))
    verdict(9, 'compression certificates', ok,
            f'{len(checked)}/{len(certificates)} calls checked, {len(bad)} above tolerance, '
            f'max error/tol {worst:.3g}')


def test_builds_are_deterministic(problem, builds, config, consts, verdict):
    again = {s: build(s, problem.system, problem.grid, config, consts) for s in ('gc', 'dg')}
    same = {s: r.log.csv_text() == builds[s][0].log.csv_text() and
            r.log.inner_csv_text() == builds[s][0].log.inner_csv_text() for s, r in again.items()}
    verdict(10, 'byte-identical logs from repeated builds', all(same.values()),
            ', '.join(f'{s} {"identical" if v else "differs"}' for s, v in same.items()))
