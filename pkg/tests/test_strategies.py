import csv
import io
import json

import numpy as np
import pytest

from ltvrom.cookie import CookieConfig, assemble_cookie, training_grid
from ltvrom.estimators import compute_constants
from ltvrom.linalg import orthonormalize
from ltvrom.strategies import (CAPPED, CONVERGED, CSV_COLUMNS, ENRICHED, EXHAUSTED, INNER_CSV_COLUMNS, REJECTED,
                               STRATEGIES, FullyReducedModel, GreedyLog, IterationRecord, StrategyConfig, build,
                               enrich_basis)


@pytest.fixture(scope='module')
def problem():
    return assemble_cookie(CookieConfig(grid_resolution=8, nt=20))


@pytest.fixture(scope='module')
def config():
    return StrategyConfig(training=training_grid(3), training_sys=training_grid(2), training_inner=training_grid(3),
                          track_true_errors=True)


@pytest.fixture(scope='module')
def consts(problem):
    return compute_constants(problem.system, problem.grid)


@pytest.fixture(scope='module')
def results(problem, config, consts):
    return {s: build(s, problem.system, problem.grid, config, consts) for s in STRATEGIES}


def test_config_validation():
    with pytest.raises(ValueError):
        StrategyConfig(eps=0.)
    with pytest.raises(ValueError):
        StrategyConfig(max_inner_iters=-1)
    cfg = StrategyConfig(training=[[1, 2]], mu_init=[3, 4])
    assert cfg.training == ((1., 2.),) and cfg.mu_init == (3., 4.)
    with pytest.raises(ValueError):
        cfg.require('training_sys')
    assert cfg.pod.tol == cfg.eps_sys


def test_unknown_strategy(problem, config):
    with pytest.raises(ValueError):
        build('pod-greedy', problem.system, problem.grid, config)


def test_enrich_basis_accepts_new_and_rejects_dependent_directions(problem):
    sys = problem.system
    rng = np.random.default_rng(0)
    V = orthonormalize(sys.space, rng.standard_normal((sys.n, 2))).columns
    v = rng.standard_normal(sys.n)
    W, ok = enrich_basis(sys, V, v)
    assert ok and W.shape[1] == 3
    assert np.allclose(W.T @ (sys.space.gram @ W), np.eye(3), atol=1e-12)
    same, ok = enrich_basis(sys, W, V @ [1., -2.])
    assert not ok and same is W
    assert not enrich_basis(sys, W, np.zeros(sys.n))[1]


@pytest.mark.parametrize('strategy', STRATEGIES)
def test_logs_satisfy_invariants(results, strategy):
    log = results[strategy].log
    log.check_invariants()
    assert log.records[-1].action in (CONVERGED, EXHAUSTED, CAPPED)
    assert all(r.action in (ENRICHED, REJECTED) for r in log.records[:-1])
    assert log.stop_reason == log.records[-1].action
    assert results[strategy].V_N.k == log.final_N


@pytest.mark.parametrize('strategy', STRATEGIES)
def test_final_time_basis_never_exceeds_output_rank(results, strategy):
    """The optimal final-time adjoints lie in the range of ``E^{-T} C^T``, of dimension four."""
    assert results[strategy].V_N.k <= 4


@pytest.mark.parametrize('strategy', ['grom', 'g-sr'])
def test_full_dynamics_greedies_terminate_with_four_vectors(results, strategy):
    r = results[strategy]
    assert r.converged and r.V_N.k == 4


@pytest.mark.parametrize('strategy', STRATEGIES)
def test_tracked_true_errors_are_bounded_by_estimates(results, strategy, config):
    slack = 1e2 * config.fom_rel_tol
    for r in results[strategy].log.records:
        assert r.max_true_error <= r.max_estimate + slack


def test_full_order_solve_counts(results, config):
    gc = results['gc'].log
    assert gc.fom_solves == gc.iterations
    srg = results['sr-g'].log
    assert srg.fom_solves == len(config.training_sys) + srg.iterations
    grom = results['grom'].log
    assert grom.fom_solves == grom.iterations


def test_grom_and_g_sr_share_the_final_time_basis(results):
    # the system reduction re-orthonormalizes V_N, which may change the last bits
    assert np.allclose(results['grom'].V_N.columns, results['g-sr'].V_N.columns, rtol=0, atol=1e-10)


def test_dg_inner_loops_follow_every_outer_enrichment(results, config):
    log = results['dg'].log
    assert log.inner_records
    outer_enriched = {r.iteration for r in log.records if r.action == ENRICHED}
    for it in outer_enriched:
        rows = [q for q in log.inner_records if q.outer_iteration == it]
        assert rows, f'no inner loop after outer iteration {it}'
        assert rows[-1].action in (CONVERGED, EXHAUSTED, CAPPED)
        assert all(q.action == ENRICHED for q in rows[:-1])
        if rows[-1].action == CONVERGED:
            assert rows[-1].max_gramian <= config.eps_inner


def test_csv_schema(results):
    for strategy, r in results.items():
        rows = list(csv.reader(io.StringIO(r.log.csv_text())))
        assert tuple(rows[0]) == CSV_COLUMNS
        assert all(row[0] == '1' and row[1] == strategy for row in rows[1:])
        assert len(rows) == len(r.log.records) + 1
    inner = list(csv.reader(io.StringIO(results['dg'].log.inner_csv_text())))
    assert tuple(inner[0]) == INNER_CSV_COLUMNS


def test_log_files(results, tmp_path):
    paths = results['dg'].log.write(tmp_path)
    assert [p.name for p in paths] == ['greedy_dg.csv', 'greedy_dg.json', 'greedy_dg_inner.csv']
    data = json.loads(paths[1].read_text())
    assert data['iterations'] == results['dg'].log.iterations
    nested = sum(len(r['inner']) for r in data['records'])
    assert nested == len(results['dg'].log.inner_records)


def test_builds_are_deterministic(problem, config, consts, results):
    for strategy in ('grom', 'gc'):
        again = build(strategy, problem.system, problem.grid, config, consts)
        assert again.log.csv_text() == results[strategy].log.csv_text()


def test_invariant_violations_are_detected():
    rec = lambda it, est, N: IterationRecord(it, ENRICHED, 0, (1., 1.), est, est, 0., N, 0, 0, 1)
    log = GreedyLog('gc', 1e-4, [rec(0, 1., 2), rec(1, 0.5, 1)])
    with pytest.raises(AssertionError):
        log.check_invariants()
    log = GreedyLog('gc', 1e-4, [rec(0, 1e-5, 1)], converged=False)
    with pytest.raises(AssertionError):
        log.check_invariants()


def test_model_archive_round_trip(results, problem, tmp_path):
    model = results['gc'].model
    path = tmp_path / 'model.zip'
    model.save(path, {'strategy': 'gc'})
    back = FullyReducedModel.load(path, problem.system)
    mu = (5., 0.5)
    a, _ = model.estimate(problem.grid, mu)
    b, _ = back.estimate(problem.grid, mu)
    assert a.total == b.total
    assert np.array_equal(model.solve(problem.grid, mu).alpha, back.solve(problem.grid, mu).alpha)


def test_model_archive_refuses_other_system(results, tmp_path):
    path = tmp_path / 'model.zip'
    results['gc'].model.save(path)
    other = assemble_cookie(CookieConfig(grid_resolution=9, nt=20)).system
    with pytest.raises(ValueError):
        FullyReducedModel.load(path, other)
