"""Reduced dynamical systems and the fully reduced final-time adjoint model.

Primal and adjoint dynamics are projected by Petrov-Galerkin onto
``(V_pr, W_pr)`` and ``(V_ad, W_ad)``; final-time adjoints are sought in
``span(V_N)``.  Everything needed online is compressed into a
:class:`ReducedSystem` whose arrays have no dimension equal to the state
dimension, so online solves cost nothing that scales with ``n``.

The fully reduced final-time adjoint ``V_N alpha`` minimizes the dual norm of

    r(alpha) = M (V_pr x_free(T) - xT) - (E^T + M V_pr G_hat P_ad) V_N alpha,

where ``x_free`` is the reduced homogeneous trajectory and ``G_hat`` the
reduced Gramian.  Since ``M = C^T C`` the Riesz representative of ``r``
lies in the span of ``[G^{-1} C^T, G^{-1} E^T V_N]``; a metric QR factor of
these columns turns the minimization into a small dense least-squares problem
without forming normal equations.
"""

from __future__ import annotations

import hashlib
import io
import json
import threading
import zipfile
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg as sla

from ltvrom.linalg import BasisMatrix, block_bytes, block_from_bytes, block_header, metric_r_factor, orthonormalize
from ltvrom.ltv import (Coefficient, ControlSystem, TimeGrid, coefficient_from_id, constant,
                        parameter_key)


class BiorthogonalityError(RuntimeError):
    """A reduced mass matrix is singular."""


class RedundantBasisError(np.linalg.LinAlgError):
    """The final-time adjoint least-squares system is rank deficient."""


def basis_fingerprint(*bases: BasisMatrix) -> str:
    h = hashlib.sha256()
    for b in bases:
        h.update(np.asarray(b.columns.shape, dtype='<i8').tobytes())
        h.update(block_bytes(b.columns))
    return h.hexdigest()


@dataclass(frozen=True)
class ReducedBases:
    """Trial and test bases of the primal and adjoint systems and the final-time adjoint basis."""

    V_pr: BasisMatrix
    W_pr: BasisMatrix
    V_ad: BasisMatrix
    W_ad: BasisMatrix
    V_N: BasisMatrix

    @property
    def k_pr(self) -> int:
        return self.V_pr.k

    @property
    def k_ad(self) -> int:
        return self.V_ad.k

    @property
    def N(self) -> int:
        return self.V_N.k

    @classmethod
    def galerkin(cls, sys: ControlSystem, V_pr, V_ad, V_N) -> 'ReducedBases':
        """Galerkin bases ``W = V`` with E-orthonormal system bases and a G-orthonormal ``V_N``.

        Inputs may be arrays or :class:`BasisMatrix`; spans are kept up to
        numerically dependent directions.
        """
        def cols(v):
            if v is None:
                return np.zeros((sys.n, 0))
            return v.columns if isinstance(v, BasisMatrix) else np.asarray(v, dtype=float).reshape(sys.n, -1)
        symmetric_E = (sys.E - sys.E.T).count_nonzero() == 0
        metric, tag = (sys.E, 'E') if symmetric_E else (sys.space.gram, 'G')
        Vp = orthonormalize(sys.space, cols(V_pr), metric=metric, metric_tag=tag)
        Va = orthonormalize(sys.space, cols(V_ad), metric=metric, metric_tag=tag)
        VN = orthonormalize(sys.space, cols(V_N), metric_tag='G')
        return cls(Vp, Vp, Va, Va, VN)

    @classmethod
    def full(cls, sys: ControlSystem, V_N=None) -> 'ReducedBases':
        """Unreduced dynamics, ``V = W = I``."""
        eye = BasisMatrix(np.eye(sys.n), None)
        VN = orthonormalize(sys.space, np.zeros((sys.n, 0)) if V_N is None else np.asarray(V_N).reshape(sys.n, -1))
        return cls(eye, eye, eye, eye, VN)

    def with_V_N(self, V_N: BasisMatrix) -> 'ReducedBases':
        return ReducedBases(self.V_pr, self.W_pr, self.V_ad, self.W_ad, V_N)

    def check(self, sys: ControlSystem, tol: float = 1e-10) -> None:
        """Verify biorthogonality of the system pairs and G-orthonormality of ``V_N``."""
        for name, V, W, E in (('primal', self.V_pr, self.W_pr, sys.E), ('adjoint', self.V_ad, self.W_ad, sys.E.T)):
            if V.k != W.k:
                raise BiorthogonalityError(f'{name} trial and test bases differ in size')
            if V.metric == 'E' and V is W:
                if np.max(np.abs(W.columns.T @ (E @ V.columns) - np.eye(V.k)), initial=0.) > tol:
                    raise BiorthogonalityError(f'{name} bases are not E-biorthogonal')
        if not self.V_N.is_orthonormal(sys.space.gram, tol):
            raise ValueError('V_N is not G-orthonormal')

    def fingerprint(self) -> str:
        return basis_fingerprint(self.V_pr, self.W_pr, self.V_ad, self.W_ad, self.V_N)


class ReducedSystem:
    """Projected operators and the offline blocks of the fully reduced model.

    Attributes
    ----------
    E_pr, E_ad
        Reduced mass matrices ``W_pr^T E V_pr`` and ``W_ad^T E^T V_ad``.
    A_pr, A_ad
        Per-term blocks ``W_pr^T A_q V_pr`` and ``W_ad^T A_q^T V_ad``.
    B_pr, B_ad
        Per-term blocks ``W_pr^T B_q`` and ``V_ad^T B_q``; the reduced control
        is ``-R^{-1} B_ad(t)^T phi_hat``.
    x0_hat
        G-projection coefficients of the initial-state components onto ``V_pr``.
    M11
        Coefficients of the G-projection of ``V_N`` onto ``V_ad``.
    CV_pr, CxT
        Output of the primal basis and of the target components.
    R_fta
        Metric QR factor of ``[G^{-1} C^T, G^{-1} E^T V_N]``.
    """

    def __init__(self, blocks: dict, coefficients: dict, R_matrix=None, R_func=None,
                 bases_fingerprint: str = '', system_fingerprint: str = ''):
        # one memory layout regardless of origin keeps archived and in-memory models bit-identical
        self.blocks = {k: np.ascontiguousarray(v, dtype=float) for k, v in blocks.items()}
        for v in self.blocks.values():
            v.setflags(write=False)
        self.coefficients = coefficients
        self.A_coeffs = [coefficient_from_id(c) if isinstance(c, str) else c for c in coefficients['A']]
        self.B_coeffs = [coefficient_from_id(c) if isinstance(c, str) else c for c in coefficients['B']]
        self.x0_coeffs = [coefficient_from_id(c) if isinstance(c, str) else c for c in coefficients['x0']]
        self.xT_coeffs = [coefficient_from_id(c) if isinstance(c, str) else c for c in coefficients['xT']]
        self.R_matrix = None if R_matrix is None else np.atleast_2d(np.asarray(R_matrix, dtype=float))
        self._R_func = R_func
        self.bases_fingerprint = bases_fingerprint
        self.system_fingerprint = system_fingerprint
        self._factors = OrderedDict()
        self._lock = threading.Lock()
        for pair, Ehat in (('primal', self.blocks['E_pr']), ('adjoint', self.blocks['E_ad'])):
            if Ehat.shape[0] and np.linalg.cond(Ehat) > 1e12:
                raise BiorthogonalityError(f'reduced {pair} mass matrix is singular, the {pair} trial/test pair '
                                           'violates biorthogonality')

    def __getattr__(self, name):
        blocks = self.__dict__.get('blocks', {})
        if name in blocks:
            return blocks[name]
        raise AttributeError(name)

    @property
    def k_pr(self) -> int:
        return self.blocks['E_pr'].shape[0]

    @property
    def k_ad(self) -> int:
        return self.blocks['E_ad'].shape[0]

    @property
    def N(self) -> int:
        return self.blocks['M11'].shape[1]

    @property
    def m(self) -> int:
        return self.blocks['B_pr'].shape[2]

    @property
    def s(self) -> int:
        return self.blocks['CV_pr'].shape[0]

    def R(self, t: float) -> np.ndarray:
        if self.R_matrix is not None:
            return self.R_matrix
        return np.atleast_2d(np.asarray(self._R_func(t), dtype=float))

    def thetas_A(self, mu, t):
        return np.array([c(mu, t) for c in self.A_coeffs])

    def thetas_B(self, mu, t):
        return np.array([c(mu, t) for c in self.B_coeffs])

    def A_pr_at(self, mu, t):
        return np.tensordot(self.thetas_A(mu, t), self.blocks['A_pr'], axes=1)

    def A_ad_at(self, mu, t):
        return np.tensordot(self.thetas_A(mu, t), self.blocks['A_ad'], axes=1)

    def B_pr_at(self, mu, t):
        return np.tensordot(self.thetas_B(mu, t), self.blocks['B_pr'], axes=1)

    def B_ad_at(self, mu, t):
        return np.tensordot(self.thetas_B(mu, t), self.blocks['B_ad'], axes=1)

    def x0_hat(self, mu):
        th = np.array([c(mu, 0.) for c in self.x0_coeffs])
        return self.blocks['x0_hat'] @ th

    def xT_output(self, mu):
        th = np.array([c(mu, 0.) for c in self.xT_coeffs])
        return self.blocks['CxT'] @ th

    def step_factors(self, grid: TimeGrid, mu, maxsize: int = 8):
        """LU factors of the reduced primal and adjoint step matrices at all stage times."""
        key = (parameter_key(mu), grid.T, grid.nt)
        with self._lock:
            if key in self._factors:
                self._factors.move_to_end(key)
                return self._factors[key]
        pr, ad = [None], [None]
        for k in range(1, grid.nt + 1):
            t = grid.t(k)
            pr.append(sla.lu_factor(self.blocks['E_pr'] - grid.dt * self.A_pr_at(mu, t), check_finite=False)
                      if self.k_pr else None)
            ad.append(sla.lu_factor(self.blocks['E_ad'] - grid.dt * self.A_ad_at(mu, t), check_finite=False)
                      if self.k_ad else None)
        with self._lock:
            self._factors[key] = (pr, ad)
            while len(self._factors) > maxsize:
                self._factors.popitem(last=False)
        return pr, ad

    # -- serialization ---------------------------------------------------------

    def to_archive(self, zf: zipfile.ZipFile, prefix: str = 'rom/') -> dict:
        manifest = {'coefficients': {k: [c.ident for c in v] for k, v in
                                     (('A', self.A_coeffs), ('B', self.B_coeffs),
                                      ('x0', self.x0_coeffs), ('xT', self.xT_coeffs))},
                    'bases_fingerprint': self.bases_fingerprint,
                    'system_fingerprint': self.system_fingerprint,
                    'blocks': {}}
        if self.R_matrix is None:
            raise ValueError('time-dependent control weights cannot be serialized')
        manifest['R'] = self.R_matrix.tolist()
        for name, arr in self.blocks.items():
            manifest['blocks'][name] = block_header(arr)
            zf.writestr(prefix + name + '.bin', block_bytes(arr))
        return manifest

    @classmethod
    def from_archive(cls, zf: zipfile.ZipFile, manifest: dict, prefix: str = 'rom/') -> 'ReducedSystem':
        blocks = {name: block_from_bytes(zf.read(prefix + name + '.bin'), hdr)
                  for name, hdr in manifest['blocks'].items()}
        return cls(blocks, manifest['coefficients'], R_matrix=np.array(manifest['R']),
                   bases_fingerprint=manifest['bases_fingerprint'],
                   system_fingerprint=manifest['system_fingerprint'])


def _g_projection_coefficients(sys: ControlSystem, V: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Coefficients of the G-orthogonal projection of the columns of `X` onto ``span(V)``."""
    if V.shape[1] == 0:
        return np.zeros((0, X.shape[1]))
    GV = sys.space.gram @ V
    return np.linalg.solve(V.T @ GV, GV.T @ X)


def build_reduced_system(sys: ControlSystem, bases: ReducedBases) -> ReducedSystem:
    """Project the system onto the reduced bases and precompute the fully reduced model blocks."""
    Vp, Wp = bases.V_pr.columns, bases.W_pr.columns
    Va, Wa = bases.V_ad.columns, bases.W_ad.columns
    VN = bases.V_N.columns
    if Vp.shape[1] != Wp.shape[1] or Va.shape[1] != Wa.shape[1]:
        raise BiorthogonalityError('trial and test bases differ in size')
    blocks = {
        'E_pr': Wp.T @ (sys.E @ Vp),
        'E_ad': Wa.T @ (sys.E.T @ Va),
        'A_pr': np.stack([Wp.T @ (Aq @ Vp) for Aq in sys.A.components]),
        'A_ad': np.stack([Wa.T @ (Aq.T @ Va) for Aq in sys.A.components]),
        'B_pr': np.stack([Wp.T @ Bq.toarray() for Bq in sys.B.components]),
        'B_ad': np.stack([Va.T @ Bq.toarray() for Bq in sys.B.components]),
        'x0_hat': _g_projection_coefficients(sys, Vp, sys.x0.as_matrix()),
        'M11': _g_projection_coefficients(sys, Va, VN),
        'CV_pr': sys.C @ Vp,
        'CxT': sys.C @ sys.xT.as_matrix(),
    }
    riesz = np.column_stack([sys.space.riesz_inverse(c) for c in sys.C.toarray()] +
                            [sys.space.riesz_inverse(sys.E.T @ v) for v in VN.T])
    blocks['R_fta'] = metric_r_factor(sys.space, riesz)
    if sys.R_constant is not None:
        R_matrix, R_func = sys.R_constant, None
    else:
        R_matrix, R_func = None, sys.R
    coefficients = {'A': sys.A.coefficients, 'B': sys.B.coefficients,
                    'x0': sys.x0.coefficients, 'xT': sys.xT.coefficients}
    return ReducedSystem(blocks, coefficients, R_matrix, R_func, bases.fingerprint(), sys.fingerprint())


# -- reduced time integration ---------------------------------------------------

def integrate_reduced_primal(red: ReducedSystem, grid: TimeGrid, mu, x_init, u=None) -> np.ndarray:
    """Reduced implicit Euler trajectory.

    ``x_init`` has shape ``(k_pr,)`` or ``(k_pr, N)`` for a batch of ``N``
    initial values; ``u`` then has shape ``(nt, m)`` or ``(nt, m, N)``.
    Returns ``(nt+1, k_pr)`` or ``(nt+1, k_pr, N)``.
    """
    x_init = np.asarray(x_init, dtype=float)
    batch = x_init.shape[1:]
    X = np.zeros((grid.nt + 1,) + x_init.shape)
    X[0] = x_init
    if red.k_pr == 0:
        return X
    pr, _ = red.step_factors(grid, mu)
    Ep = red.blocks['E_pr']
    if u is not None:
        u = np.asarray(u, dtype=float).reshape((grid.nt, red.m) + batch)
    for k in range(1, grid.nt + 1):
        rhs = Ep @ X[k - 1]
        if u is not None:
            rhs = rhs + grid.dt * (red.B_pr_at(mu, grid.t(k)) @ u[k - 1])
        X[k] = sla.lu_solve(pr[k], rhs, check_finite=False)
    return X


def integrate_reduced_adjoint(red: ReducedSystem, grid: TimeGrid, mu, p_terminal) -> np.ndarray:
    """Reduced backward adjoint trajectory, ``(E_ad - dt A_ad(t_k)) phi_{k-1} = E_ad phi_k``."""
    p = np.asarray(p_terminal, dtype=float)
    P = np.zeros((grid.nt + 1,) + p.shape)
    P[grid.nt] = p
    if red.k_ad == 0:
        return P
    _, ad = red.step_factors(grid, mu)
    Ea = red.blocks['E_ad']
    for k in range(grid.nt, 0, -1):
        P[k - 1] = sla.lu_solve(ad[k], Ea @ P[k], check_finite=False)
    return P


def reduced_control(red: ReducedSystem, grid: TimeGrid, mu, phi_hat) -> np.ndarray:
    """``u_k = -R(t_k)^{-1} B_ad(t_k)^T phi_hat_{k-1}``; shape ``(nt, m[, N])``."""
    P = np.asarray(phi_hat, dtype=float)
    U = np.zeros((grid.nt, red.m) + P.shape[2:])
    for k in range(1, grid.nt + 1):
        t = grid.t(k)
        U[k - 1] = -np.linalg.solve(red.R(t), red.B_ad_at(mu, t).T @ P[k - 1])
    return U


def apply_reduced_gramian(red: ReducedSystem, grid: TimeGrid, mu, p_hat) -> np.ndarray:
    """Reduced Gramian ``p_hat -> -x_hat(T)`` (batched along a trailing axis)."""
    p_hat = np.asarray(p_hat, dtype=float)
    phi = integrate_reduced_adjoint(red, grid, mu, p_hat)
    u = reduced_control(red, grid, mu, phi)
    x_init = np.zeros((red.k_pr,) + p_hat.shape[1:])
    return -integrate_reduced_primal(red, grid, mu, x_init, u)[-1]


@dataclass
class FullyReducedSolution:
    """Solution of the fully reduced final-time adjoint problem at one parameter.

    Attributes
    ----------
    alpha
        Coefficients with respect to ``V_N``.
    reduced_residual
        Minimal dual residual norm, the reduced estimator value.
    x_free
        Reduced homogeneous primal trajectory ``(nt+1, k_pr)``.
    phi_batch, u_batch, x_batch
        Reduced adjoint, control and primal trajectories started from the
        projected columns of ``V_N`` (trailing axis of length ``N``).
    integrations
        Number of reduced trajectory integrations used online.
    """

    mu: tuple
    alpha: np.ndarray
    reduced_residual: float
    x_free: np.ndarray
    phi_batch: np.ndarray
    u_batch: np.ndarray
    x_batch: np.ndarray
    z0: np.ndarray
    J: np.ndarray
    integrations: int
    phi_N: Optional[np.ndarray] = None

    def trajectories(self, alpha=None):
        """Reduced adjoint, control and Gramian-chain primal trajectories for ``V_N alpha``."""
        a = self.alpha if alpha is None else np.asarray(alpha, dtype=float)
        return self.phi_batch @ a, self.u_batch @ a, self.x_batch @ a

    def residual(self, alpha) -> float:
        """Reduced estimator value at arbitrary coefficients (same parameter)."""
        return residual_from_factors(self, alpha)


def residual_from_factors(sol: FullyReducedSolution, alpha) -> float:
    return float(np.linalg.norm(sol.z0 + sol.J @ np.asarray(alpha, dtype=float)))


def solve_fully_reduced(red: ReducedSystem, grid: TimeGrid, mu, bases: Optional[ReducedBases] = None,
                        rank_rtol: float = 1e-12) -> FullyReducedSolution:
    """Solve the fully reduced final-time adjoint least-squares problem.

    Uses one homogeneous reduced primal integration and ``N`` reduced adjoint
    plus ``N`` reduced primal integrations for the reduced Gramian applied to
    the projected ``V_N``.  With ``bases`` given, the lifted ``V_N alpha`` is
    attached.

    Raises
    ------
    RedundantBasisError
        If the least-squares matrix is numerically rank deficient.
    """
    mu = parameter_key(mu)
    N = red.N
    x_free = integrate_reduced_primal(red, grid, mu, red.x0_hat(mu))
    phi_batch = integrate_reduced_adjoint(red, grid, mu, red.blocks['M11'])
    u_batch = reduced_control(red, grid, mu, phi_batch)
    x_batch = integrate_reduced_primal(red, grid, mu, np.zeros((red.k_pr, N)), u_batch)
    CV = red.blocks['CV_pr']
    y0 = CV @ x_free[-1] - red.xT_output(mu)
    # residual coefficients: [y0 + C V_pr X_T alpha ; -alpha], since G_hat M11 = -X_T
    Rf = red.blocks['R_fta']
    z0 = Rf @ np.concatenate([y0, np.zeros(N)])
    J = Rf @ np.vstack([CV @ x_batch[-1], -np.eye(N)]) if N else np.zeros((Rf.shape[0], 0))
    if N:
        sv = np.linalg.svd(J, compute_uv=False)
        if sv[-1] <= rank_rtol * sv[0] or sv[0] == 0:
            raise RedundantBasisError('fully reduced least-squares system is singular; V_N has redundant '
                                      'columns and should be re-orthonormalized')
        alpha = np.linalg.lstsq(J, -z0, rcond=None)[0]
    else:
        alpha = np.zeros(0)
    res = float(np.linalg.norm(z0 + J @ alpha))
    sol = FullyReducedSolution(mu, alpha, res, x_free, phi_batch, u_batch, x_batch, z0, J, 2 * N + 1)
    if bases is not None:
        sol.phi_N = bases.V_N.columns @ alpha
    return sol
