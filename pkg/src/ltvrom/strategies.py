"""Greedy and POD-based construction of reduced final-time adjoint models.

Five drivers are provided:

``build_grom``
    Greedy on the final-time adjoint basis ``V_N`` with full dynamics,
    driven by the residual estimator of the final-time adjoint system.
``build_sr_g_rom``
    System reduction first (HaPOD of optimal trajectories over the training
    set), then a greedy for ``V_N`` driven by the fully reduced estimator on
    the same training set.
``build_g_sr_rom``
    The full-dynamics greedy for ``V_N`` first, then an independent system
    reduction.
``build_gc_rom``
    One greedy loop on the fully reduced estimator that enriches ``V_N`` and
    both system bases with the winner's optimal solution only.
``build_dg_rom``
    Outer greedy on the fully reduced estimator enriching ``V_N``; after each
    outer step an inner greedy on the scaled Gramian estimator enriches the
    system bases until the Gramian estimate is small on the inner training
    set.

Selection takes the maximizer over the training set, ties broken by the
lowest index.  A parameter is exhausted once it has been selected: its
optimal solution is then already part of every basis the driver enriches, so
selecting it again cannot change the model and the loop stops unconverged.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import time
import zipfile
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from ltvrom.compression import PodConfig, hapod, split_chunks
from ltvrom.estimators import (EstimateBreakdown, EstimatorConstants, OfflineCache, compute_constants,
                               estimate_full, estimate_gramian)
from ltvrom.fom import (GramianOperator, OptimalSolution, fta_apply, fta_rhs, solve_fom, solve_fta_rom)
from ltvrom.linalg import BasisMatrix, block_bytes, block_from_bytes, block_header
from ltvrom.ltv import ControlSystem, TimeGrid, parameter_key
from ltvrom.rom import (FullyReducedSolution, ReducedBases, ReducedSystem, build_reduced_system,
                        solve_fully_reduced)

logger = logging.getLogger(__name__)

CSV_VERSION = 1
CSV_COLUMNS = ('version', 'strategy', 'iteration', 'action', 'selected_index', 'selected_mu', 'max_estimate',
               'max_reduced_residual', 'max_gramian', 'N', 'k_pr', 'k_ad', 'fom_solves', 'max_true_error')
INNER_CSV_COLUMNS = ('version', 'outer_iteration', 'inner_iteration', 'action', 'selected_index', 'selected_mu',
                     'max_gramian', 'k_pr', 'k_ad', 'fom_solves', 'true_gramian_error')

#: actions of a log row; only the first two perform a full-order solve
ENRICHED, REJECTED, CONVERGED, EXHAUSTED, CAPPED = 'enriched', 'rejected', 'converged', 'exhausted', 'cap'
STRATEGIES = ('grom', 'sr-g', 'g-sr', 'gc', 'dg')


# -- configuration and logs -------------------------------------------------------

@dataclass(frozen=True)
class StrategyConfig:
    """Tolerances, training sets and safety caps of the construction drivers.

    Attributes
    ----------
    eps
        Tolerance for the fully reduced estimator in GC and the DG outer loop.
    eps_fta
        Tolerance of the final-time adjoint greedies of GROM, G-SR and SR-G.
    eps_sys
        Root-mean-square HaPOD tolerance of the system reductions.
    eps_inner
        Tolerance for the scaled Gramian estimate in DG's inner loop.
    training
        Greedy training set of GROM, G-SR, GC and the DG outer loop.
    training_sys
        Training set of the system reductions; SR-G uses it for both phases.
    training_inner
        Inner training set of DG; defaults to `training`.
    mu_init
        Parameter whose optimal trajectories initialize DG's system bases.
    """

    eps: float = 1e-4
    eps_fta: float = 1e-4
    eps_sys: float = 1e-9
    eps_inner: float = 1e-5
    training: tuple = ()
    training_sys: tuple = ()
    training_inner: tuple = ()
    mu_init: tuple = (1., 1.)
    max_outer_iters: int = 100
    max_inner_iters: int = 200
    c: float = 1.
    fom_rel_tol: float = 1e-8
    hapod_slices: int = 50
    omega: float = 0.9
    reject_rtol: float = 1e-10
    constants_mode: str = 'dissipative'
    track_true_errors: bool = False

    def __post_init__(self):
        for name in ('eps', 'eps_fta', 'eps_sys', 'eps_inner', 'c', 'fom_rel_tol'):
            if not getattr(self, name) > 0:
                raise ValueError(f'{name} must be positive')
        if self.max_outer_iters < 0 or self.max_inner_iters < 0:
            raise ValueError('iteration caps must be nonnegative')
        for name in ('training', 'training_sys', 'training_inner'):
            object.__setattr__(self, name, tuple(parameter_key(mu) for mu in getattr(self, name)))
        object.__setattr__(self, 'mu_init', parameter_key(self.mu_init))

    @property
    def pod(self) -> PodConfig:
        return PodConfig(tol=self.eps_sys, hapod_slices=self.hapod_slices, omega=self.omega)

    def require(self, *names: str) -> None:
        for name in names:
            if not getattr(self, name):
                raise ValueError(f'training set {name!r} must not be empty')


@dataclass
class IterationRecord:
    """One greedy step: the model state, the selection and what was done with it."""

    iteration: int
    action: str
    selected_index: int
    selected_mu: tuple
    max_estimate: float
    max_reduced_residual: float
    max_gramian: float
    N: int
    k_pr: int
    k_ad: int
    fom_solves: int
    max_true_error: Optional[float] = None
    inner_status: Optional[str] = None
    wall_time: float = 0.


@dataclass
class InnerRecord:
    """One step of DG's inner greedy on the scaled Gramian estimate."""

    outer_iteration: int
    inner_iteration: int
    action: str
    selected_index: int
    selected_mu: tuple
    max_gramian: float
    k_pr: int
    k_ad: int
    fom_solves: int
    true_gramian_error: Optional[float] = None
    wall_time: float = 0.


def _fmt(value) -> str:
    if value is None:
        return ''
    if isinstance(value, (tuple, list)):
        return ';'.join(repr(float(v)) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass
class GreedyLog:
    """Iteration history of a construction driver.

    The CSV export omits wall times so that identical builds give identical
    files; the JSON export contains everything, with DG's inner loops nested
    under their outer iteration.
    """

    strategy: str
    tolerance: float
    records: list = field(default_factory=list)
    inner_records: list = field(default_factory=list)
    converged: bool = False
    stop_reason: str = ''
    fom_solves: int = 0

    @property
    def iterations(self) -> int:
        """Number of greedy steps that solved the full-order problem for the selected parameter."""
        return sum(r.action in (ENRICHED, REJECTED) for r in self.records)

    @property
    def final_N(self) -> int:
        return self.records[-1].N if self.records else 0

    def csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator='\n')
        w.writerow(CSV_COLUMNS)
        for r in self.records:
            w.writerow([CSV_VERSION, self.strategy] + [_fmt(getattr(r, c)) for c in CSV_COLUMNS[2:]])
        return buf.getvalue()

    def inner_csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator='\n')
        w.writerow(INNER_CSV_COLUMNS)
        for r in self.inner_records:
            w.writerow([CSV_VERSION] + [_fmt(getattr(r, c)) for c in INNER_CSV_COLUMNS[1:]])
        return buf.getvalue()

    def to_dict(self) -> dict:
        outer = []
        for r in self.records:
            row = asdict(r)
            row['inner'] = [asdict(q) for q in self.inner_records if q.outer_iteration == r.iteration]
            outer.append(row)
        return {'csv_version': CSV_VERSION, 'strategy': self.strategy, 'tolerance': self.tolerance,
                'converged': self.converged, 'stop_reason': self.stop_reason, 'fom_solves': self.fom_solves,
                'iterations': self.iterations, 'records': outer}

    def write(self, directory, stem: Optional[str] = None) -> list:
        """Write ``<stem>.csv``, ``<stem>.json`` and, with inner records, ``<stem>_inner.csv``."""
        import pathlib
        directory = pathlib.Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        stem = stem or f'greedy_{self.strategy}'
        paths = [directory / f'{stem}.csv', directory / f'{stem}.json']
        paths[0].write_text(self.csv_text())
        paths[1].write_text(json.dumps(self.to_dict(), indent=1))
        if self.inner_records:
            paths.append(directory / f'{stem}_inner.csv')
            paths[2].write_text(self.inner_csv_text())
        return paths

    def check_invariants(self) -> None:
        """Estimates nonnegative, basis sizes nondecreasing, flag consistent with the last estimate."""
        prev = (0, 0, 0)
        for r in self.records:
            if not r.max_estimate >= 0:
                raise AssertionError(f'negative estimate in iteration {r.iteration}')
            sizes = (r.N, r.k_pr, r.k_ad)
            if any(a < b for a, b in zip(sizes, prev)):
                raise AssertionError(f'basis sizes decreased in iteration {r.iteration}')
            prev = sizes
        if self.records and self.converged != (self.records[-1].max_estimate <= self.tolerance):
            raise AssertionError('convergence flag inconsistent with the final estimate')


# -- fully reduced models -----------------------------------------------------------

@dataclass
class FullyReducedModel:
    """Reduced bases, projected system, estimator cache and constants."""

    bases: ReducedBases
    red: ReducedSystem
    cache: OfflineCache
    consts: EstimatorConstants

    @property
    def N(self) -> int:
        return self.bases.N

    def solve(self, grid: TimeGrid, mu) -> FullyReducedSolution:
        return solve_fully_reduced(self.red, grid, mu, self.bases)

    def estimate(self, grid: TimeGrid, mu, sol: Optional[FullyReducedSolution] = None):
        """Return ``(EstimateBreakdown, FullyReducedSolution)`` at `mu`."""
        sol = self.solve(grid, mu) if sol is None else sol
        return estimate_full(self.cache, self.red, grid, mu, self.consts, sol=sol), sol

    def scaled_gramian(self, grid: TimeGrid, mu, sol: Optional[FullyReducedSolution] = None) -> float:
        """``c ||M|| Delta_Gr`` at the fully reduced solution."""
        sol = self.solve(grid, mu) if sol is None else sol
        return (self.consts.c * self.consts.M_norm *
                estimate_gramian(self.cache, self.red, grid, mu, sol.alpha, self.consts, sol))

    def save(self, path, extra: Optional[dict] = None) -> None:
        """Archive as a zip of binary blocks with a JSON manifest."""
        with zipfile.ZipFile(path, 'w', compression=zipfile.ZIP_STORED) as zf:
            manifest = {'format': 'ltvrom-model', 'version': 1,
                        'constants': asdict(self.consts),
                        'bases_fingerprint': self.bases.fingerprint(),
                        'system_fingerprint': self.red.system_fingerprint,
                        'reduced': self.red.to_archive(zf),
                        'cache': {'dims': self.cache.dims, 'method': self.cache.method, 'blocks': {}},
                        'bases': {}}
            for name, arr in self.cache.to_arrays().items():
                manifest['cache']['blocks'][name] = block_header(arr)
                zf.writestr(f'cache/{name}.bin', block_bytes(arr))
            for name in ('V_pr', 'W_pr', 'V_ad', 'W_ad', 'V_N'):
                b = getattr(self.bases, name)
                manifest['bases'][name] = block_header(b.columns, b.metric)
                zf.writestr(f'bases/{name}.bin', block_bytes(b.columns))
            manifest['extra'] = extra or {}
            zf.writestr('manifest.json', json.dumps(manifest, indent=1, sort_keys=True))

    @classmethod
    def load(cls, path, sys: Optional[ControlSystem] = None) -> 'FullyReducedModel':
        """Load an archive; with `sys` given its fingerprint must match the archived one."""
        with zipfile.ZipFile(path) as zf:
            manifest = json.loads(zf.read('manifest.json'))
            if manifest.get('format') != 'ltvrom-model':
                raise ValueError('not a reduced model archive')
            if sys is not None and sys.fingerprint() != manifest['system_fingerprint']:
                raise ValueError('archive was built for a different system')
            red = ReducedSystem.from_archive(zf, manifest['reduced'])
            arrays = {name: block_from_bytes(zf.read(f'cache/{name}.bin'), hdr)
                      for name, hdr in manifest['cache']['blocks'].items()}
            cache = OfflineCache.from_arrays(arrays, manifest['cache']['dims'], manifest['cache']['method'])
            bases = {name: BasisMatrix(block_from_bytes(zf.read(f'bases/{name}.bin'), hdr), hdr.get('metric'))
                     for name, hdr in manifest['bases'].items()}
        model = cls(ReducedBases(**bases), red, cache, EstimatorConstants(**manifest['constants']))
        if model.bases.fingerprint() != manifest['bases_fingerprint']:
            raise ValueError('archived bases are corrupted')
        return model


def assemble_model(sys: ControlSystem, bases: ReducedBases, consts: EstimatorConstants) -> FullyReducedModel:
    """Project the system onto `bases` and build the estimator cache."""
    return FullyReducedModel(bases, build_reduced_system(sys, bases), OfflineCache.build(sys, bases), consts)


@dataclass
class BuildResult:
    """Outcome of a construction driver."""

    strategy: str
    log: GreedyLog
    V_N: BasisMatrix
    model: Optional[FullyReducedModel] = None

    @property
    def converged(self) -> bool:
        return self.log.converged


# -- building blocks ----------------------------------------------------------------

class _FomSolver:
    """Counting wrapper around the full-order solve."""

    def __init__(self, sys: ControlSystem, grid: TimeGrid, cfg: StrategyConfig):
        self.sys, self.grid, self.cfg = sys, grid, cfg
        self.count = 0

    def __call__(self, mu) -> OptimalSolution:
        self.count += 1
        return solve_fom(self.sys, self.grid, mu, rel_tol=self.cfg.fom_rel_tol)


class _Truth:
    """Lazily computed full-order solutions for true-error columns."""

    def __init__(self, sys, grid, cfg):
        self.sys, self.grid, self.cfg = sys, grid, cfg
        self.solutions = {}

    def phi_T(self, mu) -> np.ndarray:
        mu = parameter_key(mu)
        if mu not in self.solutions:
            self.solutions[mu] = solve_fom(self.sys, self.grid, mu, rel_tol=self.cfg.fom_rel_tol).phi_T
        return self.solutions[mu]

    def max_error(self, params, approximations) -> float:
        return max(self.sys.space.norm(self.phi_T(mu) - p) for mu, p in zip(params, approximations))


def enrich_basis(sys: ControlSystem, V: np.ndarray, v, reject_rtol: float = 1e-10):
    """G-orthogonalize `v` against the G-orthonormal columns of `V` (two passes) and append it.

    Returns ``(V_new, accepted)``; vectors whose remainder is below
    ``reject_rtol`` times their norm are rejected.
    """
    G = sys.space.gram
    v = np.asarray(v, dtype=float).copy()
    norm0 = sys.space.norm(v)
    if norm0 == 0:
        return V, False
    for _ in range(2):
        if V.shape[1]:
            v -= V @ (V.T @ (G @ v))
    nrm = sys.space.norm(v)
    if nrm < reject_rtol * norm0:
        return V, False
    return np.column_stack([V, v / nrm]), True


def _compress(sys: ControlSystem, cfg: StrategyConfig, snapshots: np.ndarray) -> np.ndarray:
    if snapshots.shape[1] == 0:
        return np.zeros((sys.n, 0))
    return hapod(sys.space, split_chunks(snapshots, cfg.hapod_slices), cfg.pod).basis.columns


def system_reduction(sys: ControlSystem, cfg: StrategyConfig, solutions: Sequence[OptimalSolution]):
    """HaPOD of the primal and adjoint optimal trajectories; returns ``(V_pr, V_ad)`` G-orthonormal."""
    X = np.hstack([s.x.T for s in solutions])
    P = np.hstack([s.phi.T for s in solutions])
    return _compress(sys, cfg, X), _compress(sys, cfg, P)


def _merge(sys, cfg, Phi: np.ndarray, trajectory: np.ndarray) -> np.ndarray:
    """HaPOD of the current modes together with a new trajectory (rows are time steps)."""
    return _compress(sys, cfg, np.hstack([Phi, trajectory.T]))


def _argmax(values) -> int:
    """Index of the maximum, lowest index on ties."""
    return int(np.argmax(np.asarray(values)))


def _constants(sys, grid, cfg, consts):
    return consts if consts is not None else compute_constants(sys, grid, cfg.constants_mode, cfg.c)


def _full_sweep(model: FullyReducedModel, grid: TimeGrid, params):
    out = [model.estimate(grid, mu) for mu in params]
    return [b for b, _ in out], [s for _, s in out]


# -- drivers --------------------------------------------------------------------------

def _grom_greedy(sys, grid, cfg, fom: _FomSolver, log: GreedyLog, truth: Optional[_Truth]):
    """Full-dynamics greedy on the final-time adjoint residual estimator."""
    train = cfg.training
    rhs = [fta_rhs(sys, grid, mu) for mu in train]
    KV = [np.zeros((sys.n, 0)) for _ in train]
    V = np.zeros((sys.n, 0))
    exhausted = set()
    it = 0
    t0 = time.monotonic()
    while True:
        sols = [solve_fta_rom(sys, grid, mu, V, KV[i], rhs[i]) for i, mu in enumerate(train)]
        ests = [cfg.c * s.residual for s in sols]
        i = _argmax(ests)
        true_err = truth.max_error(train, [s.phi_N for s in sols]) if truth else None
        rec = IterationRecord(it, '', i, train[i], float(ests[i]), float(ests[i]), 0., V.shape[1], 0, 0,
                              fom.count, true_err)
        if ests[i] <= cfg.eps_fta:
            rec.action = CONVERGED
        elif it >= cfg.max_outer_iters:
            rec.action = CAPPED
        elif i in exhausted:
            rec.action = EXHAUSTED
        if rec.action:
            rec.wall_time = time.monotonic() - t0
            log.records.append(rec)
            break
        sol = fom(train[i])
        exhausted.add(i)
        V, accepted = enrich_basis(sys, V, sol.phi_T, cfg.reject_rtol)
        if accepted:
            for j, mu in enumerate(train):
                gr = GramianOperator(sys, grid, mu)
                KV[j] = np.column_stack([KV[j], fta_apply(gr, V[:, -1])])
        rec.action = ENRICHED if accepted else REJECTED
        rec.fom_solves = fom.count
        rec.wall_time = time.monotonic() - t0
        log.records.append(rec)
        logger.info('%s iteration %d: max estimate %.3e at index %d, N=%d', log.strategy, it, ests[i], i, V.shape[1])
        it += 1
    log.converged = log.records[-1].action == CONVERGED
    log.stop_reason = log.records[-1].action
    return BasisMatrix(V, 'G')


def build_grom(sys: ControlSystem, grid: TimeGrid, cfg: StrategyConfig):
    """Greedy for the final-time adjoint basis with full dynamics.

    Returns ``(V_N, GreedyLog)``.
    """
    cfg.require('training')
    fom = _FomSolver(sys, grid, cfg)
    log = GreedyLog('grom', cfg.eps_fta)
    V_N = _grom_greedy(sys, grid, cfg, fom, log, _Truth(sys, grid, cfg) if cfg.track_true_errors else None)
    log.fom_solves = fom.count
    return V_N, log


def build_g_sr_rom(sys: ControlSystem, grid: TimeGrid, cfg: StrategyConfig,
                   consts: Optional[EstimatorConstants] = None) -> BuildResult:
    """Full-dynamics greedy for ``V_N``, then an independent HaPOD system reduction."""
    cfg.require('training', 'training_sys')
    fom = _FomSolver(sys, grid, cfg)
    log = GreedyLog('g-sr', cfg.eps_fta)
    V_N = _grom_greedy(sys, grid, cfg, fom, log, _Truth(sys, grid, cfg) if cfg.track_true_errors else None)
    V_pr, V_ad = system_reduction(sys, cfg, [fom(mu) for mu in cfg.training_sys])
    log.fom_solves = fom.count
    bases = ReducedBases.galerkin(sys, V_pr, V_ad, V_N)
    model = assemble_model(sys, bases, _constants(sys, grid, cfg, consts))
    return BuildResult('g-sr', log, bases.V_N, model)


def _full_greedy(sys, grid, cfg, train, fom, log, truth, consts, Phi_pr, Phi_ad, enrich_system: bool,
                 tol: float, after_enrichment=None):
    """Greedy on the fully reduced estimator.

    With `enrich_system` the winner's trajectories are merged into the system
    bases (GC); `after_enrichment` is a hook run after every enrichment that
    may update the system bases (DG's inner loop).
    """
    V = np.zeros((sys.n, 0))
    exhausted = set()
    it = 0
    t0 = time.monotonic()
    while True:
        bases = ReducedBases.galerkin(sys, Phi_pr, Phi_ad, V)
        model = assemble_model(sys, bases, consts)
        ests, sols = _full_sweep(model, grid, train)
        totals = [b.total for b in ests]
        i = _argmax(totals)
        true_err = truth.max_error(train, [s.phi_N for s in sols]) if truth else None
        rec = IterationRecord(it, '', i, train[i], float(totals[i]),
                              float(max(b.reduced_residual for b in ests)), float(max(b.gramian for b in ests)),
                              bases.N, bases.k_pr, bases.k_ad, fom.count, true_err)
        if totals[i] <= tol:
            rec.action = CONVERGED
        elif it >= cfg.max_outer_iters:
            rec.action = CAPPED
        elif i in exhausted:
            rec.action = EXHAUSTED
        if rec.action:
            rec.wall_time = time.monotonic() - t0
            log.records.append(rec)
            break
        sol = fom(train[i])
        exhausted.add(i)
        V, accepted = enrich_basis(sys, V, sol.phi_T, cfg.reject_rtol)
        if enrich_system:
            Phi_pr = _merge(sys, cfg, Phi_pr, sol.x)
            Phi_ad = _merge(sys, cfg, Phi_ad, sol.phi)
        rec.action = ENRICHED if accepted else REJECTED
        if after_enrichment is not None:
            Phi_pr, Phi_ad, rec.inner_status = after_enrichment(it, V, Phi_pr, Phi_ad, sol)
        rec.fom_solves = fom.count
        rec.wall_time = time.monotonic() - t0
        log.records.append(rec)
        logger.info('%s iteration %d: max estimate %.3e at index %d, N=%d, k=(%d, %d)', log.strategy, it,
                    totals[i], i, V.shape[1], Phi_pr.shape[1], Phi_ad.shape[1])
        it += 1
    log.converged = log.records[-1].action == CONVERGED
    log.stop_reason = log.records[-1].action
    return model


def build_sr_g_rom(sys: ControlSystem, grid: TimeGrid, cfg: StrategyConfig,
                   consts: Optional[EstimatorConstants] = None) -> BuildResult:
    """System reduction over `training_sys`, then a fully reduced greedy on the same set.

    Every selected parameter is solved again at full order, so the number of
    full-order solves is ``|training_sys|`` plus the number of iterations.
    """
    cfg.require('training_sys')
    consts = _constants(sys, grid, cfg, consts)
    fom = _FomSolver(sys, grid, cfg)
    log = GreedyLog('sr-g', cfg.eps_fta)
    V_pr, V_ad = system_reduction(sys, cfg, [fom(mu) for mu in cfg.training_sys])
    truth = _Truth(sys, grid, cfg) if cfg.track_true_errors else None
    model = _full_greedy(sys, grid, cfg, cfg.training_sys, fom, log, truth, consts, V_pr, V_ad, False,
                         cfg.eps_fta)
    log.fom_solves = fom.count
    return BuildResult('sr-g', log, model.bases.V_N, model)


def build_gc_rom(sys: ControlSystem, grid: TimeGrid, cfg: StrategyConfig,
                 consts: Optional[EstimatorConstants] = None) -> BuildResult:
    """Fully reduced greedy that enriches all bases with the winner's solution only.

    The system bases start empty; only selected parameters are solved at full
    order.
    """
    cfg.require('training')
    consts = _constants(sys, grid, cfg, consts)
    fom = _FomSolver(sys, grid, cfg)
    log = GreedyLog('gc', cfg.eps)
    truth = _Truth(sys, grid, cfg) if cfg.track_true_errors else None
    empty = np.zeros((sys.n, 0))
    model = _full_greedy(sys, grid, cfg, cfg.training, fom, log, truth, consts, empty, empty, True, cfg.eps)
    log.fom_solves = fom.count
    return BuildResult('gc', log, model.bases.V_N, model)


def build_dg_rom(sys: ControlSystem, grid: TimeGrid, cfg: StrategyConfig,
                 consts: Optional[EstimatorConstants] = None) -> BuildResult:
    """Double greedy: outer loop enriches ``V_N``, inner loop the system bases.

    The system bases are initialized with the optimal trajectories at
    `mu_init`.  After every outer enrichment the inner loop selects the
    maximizer of ``c ||M|| Delta_Gr`` over the inner training set and merges
    its optimal trajectories into the system bases until the maximum is at
    most `eps_inner`.
    """
    cfg.require('training')
    consts = _constants(sys, grid, cfg, consts)
    inner_train = cfg.training_inner or cfg.training
    fom = _FomSolver(sys, grid, cfg)
    log = GreedyLog('dg', cfg.eps)
    truth = _Truth(sys, grid, cfg) if cfg.track_true_errors else None
    init = fom(cfg.mu_init)
    Phi_pr = _compress(sys, cfg, init.x.T)
    Phi_ad = _compress(sys, cfg, init.phi.T)
    inner_done = {i for i, mu in enumerate(inner_train) if mu == cfg.mu_init}
    t0 = time.monotonic()

    def inner_loop(outer_it, V, Phi_pr, Phi_ad, _sol):
        for inner_it in range(cfg.max_inner_iters + 1):
            bases = ReducedBases.galerkin(sys, Phi_pr, Phi_ad, V)
            model = assemble_model(sys, bases, consts)
            sols = [model.solve(grid, mu) for mu in inner_train]
            gram = [model.scaled_gramian(grid, mu, s) for mu, s in zip(inner_train, sols)]
            j = _argmax(gram)
            true_err = None
            if truth is not None:
                true_err = _true_gramian_error(sys, grid, model, inner_train[j], sols[j])
            rec = InnerRecord(outer_it, inner_it, '', j, inner_train[j], float(gram[j]), bases.k_pr, bases.k_ad,
                              fom.count, true_err)
            if gram[j] <= cfg.eps_inner:
                rec.action = CONVERGED
            elif inner_it >= cfg.max_inner_iters:
                rec.action = CAPPED
            elif j in inner_done:
                rec.action = EXHAUSTED
            if rec.action:
                rec.wall_time = time.monotonic() - t0
                log.inner_records.append(rec)
                return Phi_pr, Phi_ad, rec.action
            sol = fom(inner_train[j])
            inner_done.add(j)
            Phi_pr = _merge(sys, cfg, Phi_pr, sol.x)
            Phi_ad = _merge(sys, cfg, Phi_ad, sol.phi)
            rec.action = ENRICHED
            rec.fom_solves = fom.count
            rec.wall_time = time.monotonic() - t0
            log.inner_records.append(rec)
            logger.info('dg inner %d.%d: max Gramian estimate %.3e at index %d', outer_it, inner_it, gram[j], j)
        raise AssertionError('unreachable')

    model = _full_greedy(sys, grid, cfg, cfg.training, fom, log, truth, consts, Phi_pr, Phi_ad, False, cfg.eps,
                         after_enrichment=inner_loop)
    log.fom_solves = fom.count
    return BuildResult('dg', log, model.bases.V_N, model)


def _true_gramian_error(sys, grid, model: FullyReducedModel, mu, sol: FullyReducedSolution) -> float:
    """``||(V_pr G_hat P_ad - G_mu) V_N alpha||_G`` with the full-order Gramian."""
    from ltvrom.fom import apply_gramian
    phi_N = model.bases.V_N.columns @ sol.alpha
    _, _, X = sol.trajectories()
    lifted = -model.bases.V_pr.columns @ X[-1]
    return sys.space.norm(lifted - apply_gramian(GramianOperator(sys, grid, mu), phi_N))


def build(strategy: str, sys: ControlSystem, grid: TimeGrid, cfg: StrategyConfig,
          consts: Optional[EstimatorConstants] = None) -> BuildResult:
    """Dispatch to the driver named `strategy` (one of :data:`STRATEGIES`)."""
    if strategy == 'grom':
        V_N, log = build_grom(sys, grid, cfg)
        return BuildResult('grom', log, V_N, None)
    drivers = {'sr-g': build_sr_g_rom, 'g-sr': build_g_sr_rom, 'gc': build_gc_rom, 'dg': build_dg_rom}
    if strategy not in drivers:
        raise ValueError(f'unknown strategy {strategy!r}')
    return drivers[strategy](sys, grid, cfg, consts)
