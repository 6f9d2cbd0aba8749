"""Command line interface: assemble, build, evaluate and report.

All runs are driven by one JSON configuration document (see
``docs/config.example.json``); command line flags override single fields.
Relative output directories are resolved against ``$LTVROM_OUTPUT_ROOT`` (or
the working directory).  Exit codes: 0 success, 2 a greedy did not reach its
tolerance (artifacts are still written), 3 invalid configuration or
incompatible inputs.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys as _sys
import time
import zipfile
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from ltvrom.cookie import CookieConfig, assemble_cookie, random_parameters, training_grid
from ltvrom.estimators import compute_constants
from ltvrom.fom import solve_fom, solve_fta_rom
from ltvrom.linalg import BasisMatrix, block_bytes, block_from_bytes, block_header
from ltvrom.ltv import control_from_adjoint, integrate_adjoint, save_system
from ltvrom.strategies import STRATEGIES, FullyReducedModel, StrategyConfig, build

logger = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = 'LTVROM_OUTPUT_ROOT'
EXIT_OK, EXIT_NOT_CONVERGED, EXIT_CONFIG = 0, 2, 3
#: errors below this fraction of the reference norm count as round-off in the reliability column
ROUNDOFF_RTOL = 1e-12
EVALUATION_CSV_VERSION = 1
EVALUATION_COLUMNS = ('version', 'strategy', 'index', 'mu', 'rom_time_ms', 'estimator_time_ms', 'fom_time_ms',
                      'true_error', 'estimate', 'efficiency', 'control_error', 'reliable')


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration."""


# -- configuration ---------------------------------------------------------------------

#: keys allowed in the nested sections, mirroring docs/config.schema.json
_SECTION_KEYS = {
    'cookie': ('grid_resolution', 'T', 'nt', 'R', 'target', 'cache_size'),
    'tolerances': ('eps', 'eps_fta', 'eps_sys', 'eps_inner'),
    'training': ('points_per_dim', 'sys_points_per_dim', 'inner_points_per_dim'),
    'caps': ('max_outer_iters', 'max_inner_iters'),
    'constants': ('c', 'mode'),
    'test': ('size', 'seed', 'true_errors', 'fom_timing', 'reference_rel_tol'),
}


@dataclass
class ExperimentConfig:
    """Everything needed to reproduce one experiment.

    Training sets are log-uniform tensor grids given by their number of points
    per parameter; test parameters are drawn log-uniformly from `seed`.
    """

    benchmark: str = 'cookie'
    cookie: dict = field(default_factory=dict)
    strategy: str = 'gc'
    tolerances: dict = field(default_factory=dict)
    training: dict = field(default_factory=lambda: {'points_per_dim': 10, 'sys_points_per_dim': 5,
                                                    'inner_points_per_dim': None})
    mu_init: list = field(default_factory=lambda: [1., 1.])
    caps: dict = field(default_factory=lambda: {'max_outer_iters': 100, 'max_inner_iters': 200})
    constants: dict = field(default_factory=lambda: {'c': 1., 'mode': 'dissipative'})
    test: dict = field(default_factory=lambda: {'size': 50, 'seed': 0, 'true_errors': True, 'fom_timing': True,
                                                'reference_rel_tol': 1e-14})
    output_dir: str = 'runs'

    @classmethod
    def from_dict(cls, data: dict) -> 'ExperimentConfig':
        if not isinstance(data, dict):
            raise ConfigError('configuration must be a JSON object')
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f'unknown configuration keys: {sorted(unknown)}')
        cfg = cls()
        for key, value in data.items():
            default = getattr(cfg, key)
            if isinstance(default, dict):
                if not isinstance(value, dict):
                    raise ConfigError(f'{key} must be an object')
                merged = dict(default)
                merged.update(value)
                value = merged
            setattr(cfg, key, value)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> 'ExperimentConfig':
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f'cannot read configuration {path}: {e}') from None
        return cls.from_dict(data)

    def validate(self) -> None:
        if self.benchmark != 'cookie':
            raise ConfigError(f'unknown benchmark {self.benchmark!r}')
        if self.strategy not in ('fom',) + STRATEGIES:
            raise ConfigError(f'unknown strategy {self.strategy!r}')
        for section, allowed in _SECTION_KEYS.items():
            bad = set(getattr(self, section)) - set(allowed)
            if bad:
                raise ConfigError(f'unknown {section} keys: {sorted(bad)}')
        for key in ('size', 'seed'):
            if not isinstance(self.test.get(key), int) or self.test[key] < 0:
                raise ConfigError(f'test.{key} must be a nonnegative integer')
        try:
            self.cookie_config()
            self.strategy_config()
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from None

    def cookie_config(self) -> CookieConfig:
        return CookieConfig(**self.cookie)

    def strategy_config(self) -> StrategyConfig:
        tr = self.training
        inner = tr.get('inner_points_per_dim')
        return StrategyConfig(
            training=training_grid(int(tr['points_per_dim'])),
            training_sys=training_grid(int(tr['sys_points_per_dim'])),
            training_inner=training_grid(int(inner)) if inner else (),
            mu_init=tuple(self.mu_init), c=float(self.constants.get('c', 1.)),
            constants_mode=self.constants.get('mode', 'dissipative'),
            **{k: float(v) for k, v in self.tolerances.items()},
            **{k: int(v) for k, v in self.caps.items()})

    def test_parameters(self) -> list:
        return random_parameters(self.test['size'], self.test['seed'])

    def output_path(self) -> Path:
        out = Path(self.output_dir)
        if not out.is_absolute():
            out = Path(os.environ.get(OUTPUT_ROOT_ENV, '.')) / out
        return out

    def to_dict(self) -> dict:
        return asdict(self)


# -- archives of the full-dynamics model ------------------------------------------------

def save_grom(path, V_N: BasisMatrix, system_fingerprint: str, extra: Optional[dict] = None) -> None:
    with zipfile.ZipFile(path, 'w', compression=zipfile.ZIP_STORED) as zf:
        zf.writestr('V_N.bin', block_bytes(V_N.columns))
        zf.writestr('manifest.json', json.dumps({'format': 'ltvrom-grom', 'version': 1,
                                                 'system_fingerprint': system_fingerprint,
                                                 'V_N': block_header(V_N.columns, V_N.metric),
                                                 'extra': extra or {}}, indent=1))


def load_grom(path, system_fingerprint: Optional[str] = None) -> BasisMatrix:
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read('manifest.json'))
        if manifest.get('format') != 'ltvrom-grom':
            raise ValueError('not a full-dynamics model archive')
        if system_fingerprint is not None and manifest['system_fingerprint'] != system_fingerprint:
            raise ValueError('archive was built for a different system')
        cols = block_from_bytes(zf.read('V_N.bin'), manifest['V_N'])
    return BasisMatrix(cols, manifest['V_N'].get('metric'))


def _archive_name(strategy: str) -> str:
    return f'model_{strategy}.zip'


def load_model(path, sys):
    """Return ``('grom', V_N)`` or ``(strategy, FullyReducedModel)`` from an archive."""
    with zipfile.ZipFile(path) as zf:
        fmt = json.loads(zf.read('manifest.json')).get('format')
    if fmt == 'ltvrom-grom':
        return 'grom', load_grom(path, sys.fingerprint())
    model = FullyReducedModel.load(path, sys)
    with zipfile.ZipFile(path) as zf:
        strategy = json.loads(zf.read('manifest.json'))['extra'].get('strategy', 'rom')
    return strategy, model


# -- commands --------------------------------------------------------------------------------

def _write_json(path: Path, data) -> None:
    path.write_text(json.dumps(data, indent=1, sort_keys=True))


def run_assemble(cfg: ExperimentConfig) -> int:
    out = cfg.output_path()
    problem = assemble_cookie(cfg.cookie_config())
    save_system(problem.system, out / 'system', extra={'benchmark': 'cookie', 'cookie': cfg.cookie,
                                                       'T': problem.grid.T, 'nt': problem.grid.nt})
    print(f'system with n={problem.system.n} written to {out / "system"}')
    return EXIT_OK


def run_build(cfg: ExperimentConfig) -> int:
    out = cfg.output_path()
    out.mkdir(parents=True, exist_ok=True)
    problem = assemble_cookie(cfg.cookie_config())
    sys, grid = problem.system, problem.grid
    t0 = time.monotonic()
    if cfg.strategy == 'fom':
        sol = solve_fom(sys, grid, cfg.mu_init)
        report = {'strategy': 'fom', 'mu': list(sol.mu), 'objective': sol.objective,
                  'solver_residual': sol.solver_residual, 'iterations': sol.iterations,
                  'time_ms': 1e3 * (time.monotonic() - t0)}
        _write_json(out / 'build_fom.json', report)
        print(f'fom solved at mu={sol.mu}: relative residual {sol.solver_residual:.2e}')
        return EXIT_OK
    scfg = cfg.strategy_config()
    result = build(cfg.strategy, sys, grid, scfg)
    elapsed = time.monotonic() - t0
    result.log.write(out)
    extra = {'strategy': cfg.strategy, 'config': cfg.to_dict()}
    if result.model is None:
        save_grom(out / _archive_name(cfg.strategy), result.V_N, sys.fingerprint(), extra)
        sizes = {'N': result.V_N.k}
    else:
        result.model.save(out / _archive_name(cfg.strategy), extra)
        b = result.model.bases
        sizes = {'N': b.N, 'k_pr': b.k_pr, 'k_ad': b.k_ad}
    summary = {'strategy': cfg.strategy, 'converged': result.converged, 'stop_reason': result.log.stop_reason,
               'iterations': result.log.iterations, 'fom_solves': result.log.fom_solves,
               'offline_time_s': elapsed, **sizes}
    _write_json(out / f'build_{cfg.strategy}.json', summary)
    print(json.dumps(summary))
    return EXIT_OK if result.converged else EXIT_NOT_CONVERGED


def _control_error(grid, u, u_hat) -> float:
    return float(np.sqrt(grid.dt * np.sum((np.asarray(u) - np.asarray(u_hat).reshape(np.shape(u))) ** 2)))


def evaluate(sys, grid, strategy: str, model, params, true_errors: bool = True, fom_timing: bool = True,
             c: float = 1., reference_rel_tol: float = 1e-14) -> list:
    """Per-parameter rows of online timings, errors and estimates.

    The step factorization cache is cleared before every timed solve so that
    full-order and full-dynamics timings include their factorizations.  `c`
    scales the residual of full-dynamics models into an error bound.  True
    errors are taken against a full-order solve at `reference_rel_tol`, tighter
    than the timed solve, so that accurate models are not measured against
    solver error; an error counts as reliably estimated if it exceeds the
    estimate by at most ``ROUNDOFF_RTOL`` times the reference norm.
    """
    rows = []
    for idx, mu in enumerate(params):
        row = {'strategy': strategy, 'index': idx, 'mu': list(mu)}
        if strategy == 'grom':
            sys.cache.clear()
            t = time.perf_counter()
            sol = solve_fta_rom(sys, grid, mu, model)
            row['rom_time_ms'] = 1e3 * (time.perf_counter() - t)
            row['estimator_time_ms'] = 0.
            row['estimate'] = c * float(sol.residual)
            phi_N = sol.phi_N
            u_hat = None
        else:
            t = time.perf_counter()
            sol = model.solve(grid, mu)
            row['rom_time_ms'] = 1e3 * (time.perf_counter() - t)
            t = time.perf_counter()
            br, _ = model.estimate(grid, mu, sol)
            row['estimator_time_ms'] = 1e3 * (time.perf_counter() - t)
            row['estimate'] = float(br.total)
            phi_N = sol.phi_N
            u_hat = sol.trajectories()[1]
        if fom_timing:
            sys.cache.clear()
            t = time.perf_counter()
            solve_fom(sys, grid, mu)
            row['fom_time_ms'] = 1e3 * (time.perf_counter() - t)
        if true_errors:
            ref = solve_fom(sys, grid, mu, rel_tol=reference_rel_tol)
            err = sys.space.norm(ref.phi_T - phi_N)
            row['true_error'] = float(err)
            row['efficiency'] = float(row['estimate'] / err) if err > 0 else float('inf')
            floor = ROUNDOFF_RTOL * sys.space.norm(ref.phi_T)
            row['reliable'] = bool(err <= row['estimate'] + floor)
            if u_hat is None:
                u_hat = control_from_adjoint(sys, grid, mu, integrate_adjoint(sys, grid, mu, phi_N))
            row['control_error'] = _control_error(grid, ref.u, u_hat)
        rows.append(row)
    return rows


def summarize(rows: list) -> dict:
    """Means over the rows; speedup is mean full-order time over mean reduced time."""
    def mean(key):
        vals = [r[key] for r in rows if r.get(key) is not None]
        return float(np.mean(vals)) if vals else None
    out = {k: mean(k) for k in ('rom_time_ms', 'estimator_time_ms', 'fom_time_ms', 'true_error', 'estimate',
                                'efficiency', 'control_error')}
    out['count'] = len(rows)
    rel = [r['reliable'] for r in rows if 'reliable' in r]
    out['reliable_fraction'] = float(np.mean(rel)) if rel else None
    out['speedup'] = (out['fom_time_ms'] / out['rom_time_ms']
                      if out['fom_time_ms'] and out['rom_time_ms'] else None)
    return out


def rows_csv(rows: list) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator='\n')
    w.writerow(EVALUATION_COLUMNS)
    for r in rows:
        w.writerow([EVALUATION_CSV_VERSION] + [
            ';'.join(repr(float(v)) for v in r['mu']) if c == 'mu' else
            ('' if r.get(c) is None else repr(r[c]) if isinstance(r.get(c), float) else str(r[c]))
            for c in EVALUATION_COLUMNS[1:]])
    return buf.getvalue()


def run_evaluate(cfg: ExperimentConfig, model_path: Optional[str] = None) -> int:
    out = cfg.output_path()
    out.mkdir(parents=True, exist_ok=True)
    problem = assemble_cookie(cfg.cookie_config())
    sys, grid = problem.system, problem.grid
    path = Path(model_path) if model_path else out / _archive_name(cfg.strategy)
    try:
        strategy, model = load_model(path, sys)
    except (OSError, KeyError, zipfile.BadZipFile) as e:
        raise ConfigError(f'cannot read model archive {path}: {e}') from None
    except ValueError as e:
        raise ConfigError(str(e)) from None
    rows = evaluate(sys, grid, strategy, model, cfg.test_parameters(), bool(cfg.test.get('true_errors', True)),
                    bool(cfg.test.get('fom_timing', True)), float(cfg.constants.get('c', 1.)),
                    float(cfg.test.get('reference_rel_tol', 1e-14)))
    summary = summarize(rows)
    summary['strategy'] = strategy
    summary['N'] = model.k if strategy == 'grom' else model.N
    if strategy != 'grom':
        summary['k_pr'], summary['k_ad'] = model.bases.k_pr, model.bases.k_ad
    (out / f'evaluation_{strategy}.csv').write_text(rows_csv(rows))
    _write_json(out / f'evaluation_{strategy}.json', {'summary': summary, 'rows': rows})
    print(json.dumps(summary))
    return EXIT_OK


REPORT_COLUMNS = ('strategy', 'N', 'k_pr', 'k_ad', 'offline_time_s', 'iterations', 'fom_solves', 'converged',
                  'rom_time_ms', 'speedup', 'estimator_time_ms', 'true_error', 'estimate', 'efficiency',
                  'control_error', 'reliable_fraction')


def run_report(cfg: ExperimentConfig, directories=None) -> int:
    """Collect build and evaluation summaries into ``report.csv`` and ``report.md``."""
    out = cfg.output_path()
    dirs = [Path(d) for d in directories] if directories else [out]
    table = []
    for d in dirs:
        for ev in sorted(d.glob('evaluation_*.json')):
            summary = json.loads(ev.read_text())['summary']
            b = d / f'build_{summary["strategy"]}.json'
            if b.exists():
                build_info = json.loads(b.read_text())
                summary.update({k: build_info.get(k) for k in ('offline_time_s', 'iterations', 'fom_solves',
                                                               'converged')})
            table.append(summary)
    if not table:
        raise ConfigError(f'no evaluation results found in {", ".join(map(str, dirs))}')
    out.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator='\n')
    w.writerow(REPORT_COLUMNS)
    for s in table:
        w.writerow(['' if s.get(c) is None else s[c] for c in REPORT_COLUMNS])
    (out / 'report.csv').write_text(buf.getvalue())

    def cell(v):
        if v is None:
            return '-'
        return f'{v:.3g}' if isinstance(v, float) else str(v)
    lines = ['| ' + ' | '.join(REPORT_COLUMNS) + ' |', '|' + '---|' * len(REPORT_COLUMNS)]
    lines += ['| ' + ' | '.join(cell(s.get(c)) for c in REPORT_COLUMNS) + ' |' for s in table]
    lines.append('')
    lines.append('Timings are machine-dependent; speedup is mean full-order time over mean reduced solve time.')
    (out / 'report.md').write_text('\n'.join(lines) + '\n')
    print('\n'.join(lines))
    return EXIT_OK


# -- entry point --------------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    """Argument parser reporting usage errors as configuration errors (exit code 3, not 2)."""

    def error(self, message):
        raise ConfigError(message)


def _parser() -> argparse.ArgumentParser:
    parser = _Parser(prog='ltvrom', description=__doc__.split('\n')[0])
    parser.add_argument('-v', '--verbose', action='store_true', help='log progress')
    sub = parser.add_subparsers(dest='command', required=True)
    for name in ('assemble', 'build', 'evaluate', 'report'):
        p = sub.add_parser(name)
        p.add_argument('--config', help='JSON experiment configuration')
        p.add_argument('--strategy', choices=('fom',) + STRATEGIES)
        p.add_argument('--resolution', type=int, help='cookie grid resolution')
        p.add_argument('--output-dir')
        p.add_argument('--test-size', type=int)
        p.add_argument('--seed', type=int)
        if name == 'evaluate':
            p.add_argument('--model', help='model archive, defaults to the one in the output directory')
        if name == 'report':
            p.add_argument('directories', nargs='*', help='directories with evaluation results')
    return parser


def config_from_args(args) -> ExperimentConfig:
    data = json.loads(Path(args.config).read_text()) if args.config else {}
    if not isinstance(data, dict):
        raise ConfigError('configuration must be a JSON object')
    if args.strategy:
        data['strategy'] = args.strategy
    if args.resolution is not None:
        data.setdefault('cookie', {})['grid_resolution'] = args.resolution
    if args.output_dir:
        data['output_dir'] = args.output_dir
    if args.test_size is not None:
        data.setdefault('test', {})['size'] = args.test_size
    if args.seed is not None:
        data.setdefault('test', {})['seed'] = args.seed
    return ExperimentConfig.from_dict(data)


def main(argv=None) -> int:
    try:
        args = _parser().parse_args(argv)
    except ConfigError as e:
        print(f'configuration error: {e}', file=_sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format='%(asctime)s %(name)s %(message)s')
    try:
        cfg = config_from_args(args)
        if args.command == 'assemble':
            return run_assemble(cfg)
        if args.command == 'build':
            return run_build(cfg)
        if args.command == 'evaluate':
            return run_evaluate(cfg, args.model)
        return run_report(cfg, args.directories)
    except (ConfigError, json.JSONDecodeError, OSError) as e:
        print(f'configuration error: {e}', file=_sys.stderr)
        return EXIT_CONFIG


if __name__ == '__main__':
    _sys.exit(main())
