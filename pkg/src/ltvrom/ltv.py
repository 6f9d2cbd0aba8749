"""Parameter-separable linear time-varying control systems.

A system ``E x'(t) = A(mu; t) x(t) + B(mu; t) u(t)`` is discretized in time by
the implicit Euler method on a uniform grid.  Operators are affine in scalar
coefficient functions, ``A(mu; t) = sum_q theta_q(mu, t) A_q``.

The adjoint stepper is the exact transpose of the primal stepper: on the
interval ``(t_{k-1}, t_k]`` both use the step matrix ``E - dt A(mu; t_k)``, and
the control on that interval is recovered from the adjoint at ``t_{k-1}``.
With this pairing the discrete optimality system is exactly the stationarity
condition of the discretized objective.
"""

from __future__ import annotations

import hashlib
import threading
from collections import OrderedDict
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.sparse as sps
import scipy.sparse.linalg as spla

import json
from pathlib import Path

from ltvrom.linalg import InnerProductSpace, as_csr, read_block, read_mtx, write_block, write_mtx


class SingularStepError(RuntimeError):
    """A time-step matrix could not be factorized."""

    def __init__(self, step: int, message: str = ''):
        super().__init__(f'step matrix at time index {step} is singular' + (f': {message}' if message else ''))
        self.step = step


def parameter_key(mu) -> tuple:
    return tuple(float(v) for v in np.atleast_1d(np.asarray(mu, dtype=float)))


# -- coefficient functions ---------------------------------------------------

class Coefficient:
    """Named scalar coefficient ``theta(mu, t)``.

    The identifier makes the coefficient reconstructible from a serialized
    system, see :func:`coefficient_from_id`.
    """

    def __init__(self, ident: str, func: Callable[[tuple, float], float]):
        self.ident = ident
        self._func = func

    def __call__(self, mu, t: float = 0.) -> float:
        return float(self._func(mu, t))

    def __repr__(self):
        return f'Coefficient({self.ident!r})'


def constant(value: float = 1.) -> Coefficient:
    value = float(value)
    return Coefficient(f'const:{value!r}', lambda mu, t: value)


def parameter_component(i: int) -> Coefficient:
    return Coefficient(f'mu:{int(i)}', lambda mu, t: np.atleast_1d(mu)[i])


def polynomial_in_time(coeffs: Sequence[float]) -> Coefficient:
    """Coefficient ``sum_j coeffs[j] t^j`` independent of the parameter."""
    c = [float(v) for v in coeffs]
    return Coefficient('poly_t:' + ','.join(repr(v) for v in c),
                       lambda mu, t: np.polynomial.polynomial.polyval(t, c))


def coefficient_from_id(ident: str) -> Coefficient:
    kind, _, arg = ident.partition(':')
    if kind == 'const':
        return constant(float(arg))
    if kind == 'mu':
        return parameter_component(int(arg))
    if kind == 'poly_t':
        return polynomial_in_time([float(v) for v in arg.split(',')])
    raise ValueError(f'unknown coefficient identifier {ident!r}')


def _as_coefficient(c) -> Coefficient:
    if isinstance(c, Coefficient):
        return c
    if callable(c):
        return Coefficient(getattr(c, '__name__', 'callable'), c)
    return constant(c)


class AffineOperator:
    """Operator ``sum_q theta_q(mu, t) A_q`` with fixed sparse or dense components."""

    def __init__(self, components, coefficients):
        if len(components) != len(coefficients) or not components:
            raise ValueError('need one coefficient per component and at least one component')
        comps = [as_csr(c) for c in components]
        if any(c.shape != comps[0].shape for c in comps):
            raise ValueError('all affine components must share one shape')
        self.components = comps
        self.coefficients = [_as_coefficient(c) for c in coefficients]
        self.shape = comps[0].shape

    @property
    def Q(self) -> int:
        return len(self.components)

    def thetas(self, mu, t: float) -> np.ndarray:
        return np.array([c(mu, t) for c in self.coefficients])

    def evaluate(self, mu, t: float) -> sps.csr_matrix:
        th = self.thetas(mu, t)
        out = th[0] * self.components[0]
        for q in range(1, self.Q):
            out = out + th[q] * self.components[q]
        return as_csr(out)

    def is_time_dependent(self) -> bool:
        return any(not c.ident.startswith(('const:', 'mu:')) for c in self.coefficients)


class AffineVector:
    """Vector ``sum_q theta_q(mu) v_q``."""

    def __init__(self, components, coefficients):
        if len(components) != len(coefficients) or not components:
            raise ValueError('need one coefficient per component and at least one component')
        comps = [np.asarray(c, dtype=float).ravel() for c in components]
        if any(c.shape != comps[0].shape for c in comps):
            raise ValueError('all affine components must share one dimension')
        self.components = comps
        self.coefficients = [_as_coefficient(c) for c in coefficients]
        self.dim = comps[0].shape[0]

    @property
    def Q(self) -> int:
        return len(self.components)

    def thetas(self, mu) -> np.ndarray:
        return np.array([c(mu, 0.) for c in self.coefficients])

    def evaluate(self, mu) -> np.ndarray:
        th = self.thetas(mu)
        return sum(th[q] * self.components[q] for q in range(self.Q))

    def as_matrix(self) -> np.ndarray:
        return np.column_stack(self.components)


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid ``t_k = k dt`` on ``[0, T]`` with ``nt`` steps."""

    T: float = 1.
    nt: int = 50

    def __post_init__(self):
        if self.nt < 1 or self.T <= 0:
            raise ValueError('need nt >= 1 and T > 0')

    @property
    def dt(self) -> float:
        return self.T / self.nt

    @property
    def nodes(self) -> np.ndarray:
        return np.arange(self.nt + 1) * self.dt

    def t(self, k: int) -> float:
        return k * self.dt


class StepFactorCache:
    """Thread-safe LRU cache of LU factors of ``E - dt A(mu; t_k)``."""

    def __init__(self, maxsize: int = 64):
        self.maxsize = maxsize
        self._data = OrderedDict()
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    def get(self, key, factory):
        with self._lock:
            if key in self._data:
                self._data.move_to_end(key)
                self.hits += 1
                return self._data[key]
        value = factory()
        with self._lock:
            self.misses += 1
            self._data[key] = value
            self._data.move_to_end(key)
            while len(self._data) > self.maxsize:
                self._data.popitem(last=False)
        return value

    def clear(self):
        with self._lock:
            self._data.clear()

    def __len__(self):
        return len(self._data)


class ControlSystem:
    """Discrete LTV control system with quadratic terminal-output cost.

    Parameters
    ----------
    E
        Invertible mass matrix.
    A, B
        :class:`AffineOperator` of shapes ``n x n`` and ``n x m``.
    C
        Output matrix ``s x n``; the terminal weight is ``M = C^T C``.
    R
        Control weight, an SPD ``m x m`` array or a callable ``t -> array``.
    space
        Inner product space with Gram matrix ``G``.
    x0, xT
        :class:`AffineVector` initial and target states.
    cache_size
        Number of step factorizations kept.
    """

    def __init__(self, E, A: AffineOperator, B: AffineOperator, C, R, space: InnerProductSpace,
                 x0: AffineVector, xT: AffineVector, cache_size: int = 64, name: str = 'system'):
        self.E = as_csr(E)
        self.A, self.B = A, B
        self.C = as_csr(C)
        self.space = space
        self.x0, self.xT = x0, xT
        self.name = name
        n = self.E.shape[0]
        if A.shape != (n, n) or B.shape[0] != n or self.C.shape[1] != n or space.dim != n:
            raise ValueError('inconsistent system dimensions')
        if x0.dim != n or xT.dim != n:
            raise ValueError('initial/target states have wrong dimension')
        self.n, self.m, self.s = n, B.shape[1], self.C.shape[0]
        self.M = as_csr(self.C.T @ self.C)
        if callable(R):
            self._R = R
            self.R_constant = None
        else:
            Rm = np.atleast_2d(np.asarray(R, dtype=float))
            if Rm.shape != (self.m, self.m):
                raise ValueError('R must be m x m')
            self.R_constant = Rm
            self._R = lambda t: Rm
        try:
            self._E_lu = spla.splu(self.E.tocsc())
        except RuntimeError as e:
            raise ValueError(f'mass matrix E is singular: {e}') from None
        self.cache = StepFactorCache(cache_size)
        self._fingerprint = None

    def R(self, t: float) -> np.ndarray:
        return np.atleast_2d(np.asarray(self._R(t), dtype=float))

    def R_solve(self, t: float, v):
        Rt = self.R(t)
        try:
            c = np.linalg.cholesky(Rt)
        except np.linalg.LinAlgError:
            raise ValueError(f'control weight R({t}) is not positive definite') from None
        return np.linalg.solve(c.T, np.linalg.solve(c, v))

    def solve_E(self, v):
        return self._E_lu.solve(np.asarray(v, dtype=float))

    def solve_ET(self, v):
        return self._E_lu.solve(np.asarray(v, dtype=float), trans='T')

    def step_factor(self, grid: TimeGrid, mu, k: int):
        key = (parameter_key(mu), grid.T, grid.nt, k)

        def factory():
            S = (self.E - grid.dt * self.A.evaluate(mu, grid.t(k))).tocsc()
            try:
                return spla.splu(S)
            except RuntimeError as e:
                raise SingularStepError(k, str(e)) from None
        return self.cache.get(key, factory)

    def fingerprint(self) -> str:
        """Hash of all matrices, vectors and coefficient identifiers."""
        if self._fingerprint is None:
            h = hashlib.sha256()

            def add_sparse(mat):
                mat = as_csr(mat).copy()
                mat.sum_duplicates()
                mat.eliminate_zeros()
                mat.sort_indices()
                h.update(np.asarray(mat.shape, dtype='<i8').tobytes())
                h.update(np.asarray(mat.indptr, dtype='<i8').tobytes())
                h.update(np.asarray(mat.indices, dtype='<i8').tobytes())
                h.update(np.asarray(mat.data, dtype='<f8').tobytes())
            for mat in [self.E, self.C, self.space.gram] + self.A.components + self.B.components:
                add_sparse(mat)
            for vec in self.x0.components + self.xT.components:
                h.update(np.asarray(vec, dtype='<f8').tobytes())
            for c in self.A.coefficients + self.B.coefficients + self.x0.coefficients + self.xT.coefficients:
                h.update(c.ident.encode())
            if self.R_constant is not None:
                h.update(np.asarray(self.R_constant, dtype='<f8').tobytes())
            self._fingerprint = h.hexdigest()
        return self._fingerprint


# -- time integration ----------------------------------------------------------

def integrate_primal(sys: ControlSystem, grid: TimeGrid, mu, x_init, u=None) -> np.ndarray:
    """Implicit Euler trajectory of the primal system.

    Solves ``(E - dt A(mu; t_k)) x_k = E x_{k-1} + dt B(mu; t_k) u_k`` for
    ``k = 1, ..., nt``; ``u`` has shape ``(nt, m)`` with row ``k-1`` the control at
    ``t_k``.  Returns an ``(nt+1, n)`` array.
    """
    x_init = np.asarray(x_init, dtype=float)
    if x_init.shape != (sys.n,):
        raise ValueError('initial state has wrong dimension')
    if u is not None:
        u = np.asarray(u, dtype=float).reshape(grid.nt, sys.m)
    X = np.empty((grid.nt + 1, sys.n))
    X[0] = x_init
    for k in range(1, grid.nt + 1):
        rhs = sys.E @ X[k - 1]
        if u is not None:
            rhs = rhs + grid.dt * (sys.B.evaluate(mu, grid.t(k)) @ u[k - 1])
        X[k] = sys.step_factor(grid, mu, k).solve(rhs)
    return X


def integrate_adjoint(sys: ControlSystem, grid: TimeGrid, mu, phi_terminal) -> np.ndarray:
    """Backward adjoint trajectory, transpose of the primal stepper.

    ``phi_nt = phi_terminal`` and ``(E - dt A(mu; t_k))^T phi_{k-1} = E^T phi_k``
    for ``k = nt, ..., 1``.  Returns an ``(nt+1, n)`` array indexed by time node.
    """
    p = np.asarray(phi_terminal, dtype=float)
    if p.shape != (sys.n,):
        raise ValueError('terminal adjoint has wrong dimension')
    P = np.empty((grid.nt + 1, sys.n))
    P[grid.nt] = p
    ET = sys.E.T
    for k in range(grid.nt, 0, -1):
        P[k - 1] = sys.step_factor(grid, mu, k).solve(ET @ P[k], trans='T')
    return P


def apply_state_transition(sys: ControlSystem, grid: TimeGrid, mu, x) -> np.ndarray:
    """Final state of the homogeneous system started in `x`."""
    return integrate_primal(sys, grid, mu, x)[-1]


def control_from_adjoint(sys: ControlSystem, grid: TimeGrid, mu, phi_traj) -> np.ndarray:
    """Control ``u_k = -R(t_k)^{-1} B(mu; t_k)^T phi_{k-1}``, shape ``(nt, m)``."""
    P = np.asarray(phi_traj, dtype=float)
    U = np.empty((grid.nt, sys.m))
    for k in range(1, grid.nt + 1):
        t = grid.t(k)
        U[k - 1] = -sys.R_solve(t, sys.B.evaluate(mu, t).T @ P[k - 1])
    return U


# -- system bundles -------------------------------------------------------------

BUNDLE_FORMAT = 'ltvrom-system'


def save_system(sys: ControlSystem, directory, extra: Optional[dict] = None) -> Path:
    """Write `sys` as Matrix Market files and dense blocks with a JSON manifest.

    Only constant control weights can be stored.  Returns the manifest path.
    """
    if sys.R_constant is None:
        raise ValueError('time-dependent control weights cannot be serialized')
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    files = {'E': 'E.mtx', 'C': 'C.mtx', 'G': 'G.mtx'}
    write_mtx(d / 'E.mtx', sys.E)
    write_mtx(d / 'C.mtx', sys.C)
    write_mtx(d / 'G.mtx', sys.space.gram)
    manifest = {'format': BUNDLE_FORMAT, 'version': 1, 'name': sys.name, 'n': sys.n, 'm': sys.m, 's': sys.s,
                'R': sys.R_constant.tolist(), 'files': files, 'A': [], 'B': [], 'x0': [], 'xT': [],
                'fingerprint': sys.fingerprint(), 'extra': extra or {}}
    for key, op in (('A', sys.A), ('B', sys.B)):
        for q, (mat, coef) in enumerate(zip(op.components, op.coefficients)):
            fname = f'{key}_{q}.mtx'
            write_mtx(d / fname, mat)
            manifest[key].append({'file': fname, 'coefficient': coef.ident})
    for key, vec in (('x0', sys.x0), ('xT', sys.xT)):
        for q, (v, coef) in enumerate(zip(vec.components, vec.coefficients)):
            stem = f'{key}_{q}'
            write_block(d / stem, v)
            manifest[key].append({'file': stem, 'coefficient': coef.ident})
    path = d / 'manifest.json'
    path.write_text(json.dumps(manifest, indent=1))
    return path


def load_system(directory, cache_size: int = 64) -> ControlSystem:
    """Read a bundle written by :func:`save_system` and verify its fingerprint."""
    d = Path(directory)
    manifest = json.loads((d / 'manifest.json').read_text())
    if manifest.get('format') != BUNDLE_FORMAT:
        raise ValueError(f'{d} does not contain a system bundle')
    ops = {}
    for key in ('A', 'B'):
        ops[key] = AffineOperator([read_mtx(d / e['file']) for e in manifest[key]],
                                  [coefficient_from_id(e['coefficient']) for e in manifest[key]])
    vecs = {}
    for key in ('x0', 'xT'):
        vecs[key] = AffineVector([read_block(d / e['file'])[0] for e in manifest[key]],
                                 [coefficient_from_id(e['coefficient']) for e in manifest[key]])
    sys = ControlSystem(read_mtx(d / 'E.mtx'), ops['A'], ops['B'], read_mtx(d / 'C.mtx'), np.array(manifest['R']),
                        InnerProductSpace(read_mtx(d / 'G.mtx')), vecs['x0'], vecs['xT'], cache_size=cache_size,
                        name=manifest['name'])
    if sys.fingerprint() != manifest['fingerprint']:
        raise ValueError('system bundle is corrupted: fingerprint mismatch')
    return sys
