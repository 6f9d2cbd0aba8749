"""A-posteriori error estimators for the reduced models.

Residual norms are evaluated offline-online: every residual is a linear
combination ``S z`` of fixed high-dimensional columns ``S`` with small
parameter- and time-dependent coefficients ``z``.  Offline the columns are
factorized, ``||S z||_G = ||R z||_2``, and online only ``R z`` is formed.  This
avoids the loss of half the significant digits that expanding the squared norm
into a quadratic form ``z^T (S^T G S) z`` suffers from; the quadratic-form
route is kept as an alternative (``method='gram'``) and clamps negative values
to zero with a counter.

Time integrals use the right-endpoint sums of the implicit Euler scheme,
``dt sum_k ||E^{-1} r_k||``, which is the exact form in which the stepper's
defects propagate into the error; the bounds are therefore certified for the
discrete trajectories and involve no quadrature error.
"""

from __future__ import annotations

import json
import logging
import threading
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ltvrom.fom import GramianOperator, fta_apply, fta_rhs
from ltvrom.linalg import metric_r_factor
from ltvrom.ltv import ControlSystem, TimeGrid, parameter_key
from ltvrom.rom import (FullyReducedSolution, ReducedBases, ReducedSystem, integrate_reduced_adjoint,
                        integrate_reduced_primal, reduced_control, solve_fully_reduced)

logger = logging.getLogger(__name__)


class PowerIterationError(RuntimeError):
    """Power iteration did not converge."""

    def __init__(self, message, rayleigh_quotient):
        super().__init__(message)
        self.rayleigh_quotient = rayleigh_quotient


@dataclass(frozen=True)
class EstimatorConstants:
    """Constants entering the estimators.

    Attributes
    ----------
    C1
        Bound on the G-norm of the discrete state transition (primal and adjoint).
    C2
        Bound on ``||E^{-1} B R^{-1} B^T||`` from G to G.
    c
        Bound on the inverse of the final-time adjoint operator.
    M_norm
        Norm of ``M`` as a map from the state space to its dual.
    """

    C1: float = 1.
    C2: float = 0.
    c: float = 1.
    M_norm: float = 0.

    def __post_init__(self):
        if self.C1 <= 0 or self.c <= 0 or self.C2 < 0 or self.M_norm < 0:
            raise ValueError('estimator constants must be positive')


def _power_iteration(apply, norm_sq, x0, tol=1e-6, max_iter=500):
    """Largest eigenvalue of a G-selfadjoint positive semidefinite operator."""
    x = x0 / np.sqrt(norm_sq(x0))
    lam = 0.
    for _ in range(max_iter):
        y = apply(x)
        ny = norm_sq(y)
        if ny == 0:
            return 0.
        lam_new = float(np.sqrt(ny))
        x = y / lam_new
        if abs(lam_new - lam) <= tol * lam_new:
            return lam_new
        lam = lam_new
    raise PowerIterationError(f'power iteration stagnated, last Rayleigh quotient {lam:.6e}', lam)


def _start_vector(n, seed=0):
    return np.ones(n) + 0.1 * np.random.default_rng(seed).standard_normal(n)


def operator_norm_M(sys: ControlSystem, tol: float = 1e-10, max_iter: int = 500) -> float:
    """``sup ||M x||_{G^{-1}} / ||x||_G``, the largest eigenvalue of ``M x = lambda G x``."""
    G = sys.space.gram
    return _power_iteration(lambda x: sys.space.riesz_inverse(sys.M @ x), lambda x: float(x @ (G @ x)),
                            _start_vector(sys.n), tol, max_iter)


def control_operator_norm(sys: ControlSystem, mu, t: float, tol: float = 1e-6, max_iter: int = 500) -> float:
    """``||E^{-1} B R^{-1} B^T||`` in the G-norm, by power iteration on ``G^{-1} A^T G A``.

    This equals the spectral norm of ``G^{1/2} E^{-1} B R^{-1} B^T G^{-1/2}``.
    """
    G = sys.space.gram
    Bt = sys.B.evaluate(mu, t)

    def A(x):
        return sys.solve_E(Bt @ sys.R_solve(t, Bt.T @ x))

    def AT(y):
        return Bt @ sys.R_solve(t, Bt.T @ sys.solve_ET(y))

    def normal(x):
        return sys.space.riesz_inverse(AT(G @ A(x)))
    if Bt.nnz == 0:
        return 0.
    lam = _power_iteration(normal, lambda x: float(x @ (G @ x)), _start_vector(sys.n), tol ** 2, max_iter)
    return float(np.sqrt(lam))


def compute_constants(sys: ControlSystem, grid: TimeGrid, mode: str = 'dissipative', c: float = 1.,
                      dissipative: bool = True, parameters=None, tol: float = 1e-6,
                      max_iter: int = 500) -> EstimatorConstants:
    """Estimator constants.

    ``C2`` and ``||M||`` are always computed by power iteration; ``C2`` is
    maximized over the stage times if ``B`` or ``R`` vary in time and over
    `parameters` if ``B`` depends on the parameter.

    Parameters
    ----------
    mode
        ``'dissipative'``: ``C1 = 1``, valid for uniformly dissipative
        systems (asserted by the caller through `dissipative`).
        ``'power_iteration'``: ``C1`` is bounded by ``max(1, q)^nt`` where
        ``q`` is the largest G-norm of a single step map over the stage times
        and `parameters`.
    c
        Inverse-operator bound, a configuration value.
    """
    if mode not in ('dissipative', 'power_iteration'):
        raise ValueError(f'unknown mode {mode!r}')
    params = [parameter_key(p) for p in (parameters or [(0.,)])]
    B_varies = sys.B.is_time_dependent() or sys.R_constant is None
    times = [grid.t(k) for k in range(1, grid.nt + 1)] if B_varies else [grid.t(1)]
    B_params = params if any(cf.ident.startswith('mu:') or not cf.ident.startswith('const:')
                             for cf in sys.B.coefficients) else params[:1]
    C2 = max(control_operator_norm(sys, mu, t, tol, max_iter) for mu in B_params for t in times)
    if mode == 'dissipative':
        if not dissipative:
            raise ValueError('C1 = 1 requires a uniformly dissipative system; use mode="power_iteration"')
        C1 = 1.
    else:
        G = sys.space.gram
        q = 0.
        for mu in params:
            for k in range(1, grid.nt + 1):
                lu = sys.step_factor(grid, mu, k)
                step = lambda x: lu.solve(sys.E @ x)
                step_T = lambda y: sys.E.T @ lu.solve(y, trans='T')
                normal = lambda x: sys.space.riesz_inverse(step_T(G @ step(x)))
                q = max(q, np.sqrt(_power_iteration(normal, lambda x: float(x @ (G @ x)),
                                                    _start_vector(sys.n, k), tol ** 2, max_iter)))
        C1 = max(1., q) ** grid.nt
    return EstimatorConstants(C1=C1, C2=C2, c=float(c), M_norm=operator_norm_M(sys))


# -- offline cache --------------------------------------------------------------

class OfflineCache:
    """Parameter-independent factors of the stacked residual columns.

    Stacks (each factorized as ``||S z||_G = ||R z||_2``):

    ``primal``
        ``[E^{-1} A_q V_pr, E^{-1} B_q, V_pr]``; its Gram matrix holds the
        blocks of the expanded primal residual norm.
    ``initial``
        ``[x0_q, V_pr]`` for the initial projection error.
    ``adjoint``
        ``[E^{-T} A_q^T V_ad, V_ad]`` for the adjoint residual.
    ``terminal``
        ``[V_N, V_ad]`` for the projection error of final-time adjoints onto
        the adjoint basis.
    """

    STACKS = ('primal', 'initial', 'adjoint', 'terminal')

    def __init__(self, factors: dict, grams: dict, dims: dict, method: str = 'qr'):
        if method not in ('qr', 'gram'):
            raise ValueError("method must be 'qr' or 'gram'")
        self.factors = {k: np.ascontiguousarray(v, dtype=float) for k, v in factors.items()}
        self.grams = {k: np.ascontiguousarray(v, dtype=float) for k, v in grams.items()}
        self.dims = dims
        self.method = method
        self.clamp_count = 0
        self._lock = threading.Lock()

    @classmethod
    def build(cls, sys: ControlSystem, bases: ReducedBases, method: str = 'qr') -> 'OfflineCache':
        Vp, Va, VN = bases.V_pr.columns, bases.V_ad.columns, bases.V_N.columns
        stacks = {
            'primal': np.column_stack([sys.solve_E(Aq @ Vp) for Aq in sys.A.components] +
                                      [sys.solve_E(Bq.toarray()) for Bq in sys.B.components] + [Vp]),
            'initial': np.column_stack([sys.x0.as_matrix(), Vp]),
            'adjoint': np.column_stack([sys.solve_ET(Aq.T @ Va) for Aq in sys.A.components] + [Va]),
            'terminal': np.column_stack([VN, Va]),
        }
        G = sys.space.gram
        factors = {k: metric_r_factor(sys.space, S) for k, S in stacks.items()}
        grams = {k: S.T @ (G @ S) for k, S in stacks.items()}
        dims = {'QA': sys.A.Q, 'QB': sys.B.Q, 'Qx0': sys.x0.Q, 'm': sys.m,
                'k_pr': Vp.shape[1], 'k_ad': Va.shape[1], 'N': VN.shape[1]}
        return cls(factors, grams, dims, method)

    def norms(self, stack: str, Z: np.ndarray) -> np.ndarray:
        """G-norms of ``S_stack z`` for the coefficient vectors in the rows of `Z`."""
        Z = np.atleast_2d(Z)
        if self.method == 'qr':
            return np.linalg.norm(Z @ self.factors[stack].T, axis=1)
        sq = np.einsum('ij,jk,ik->i', Z, self.grams[stack], Z)
        neg = sq < 0
        if np.any(neg):
            with self._lock:
                self.clamp_count += int(neg.sum())
            logger.warning('clamped %d negative squared residual norms', int(neg.sum()))
        return np.sqrt(np.maximum(sq, 0.))

    def to_arrays(self) -> dict:
        out = {f'R_{k}': v for k, v in self.factors.items()}
        out.update({f'Gram_{k}': v for k, v in self.grams.items()})
        return out

    @classmethod
    def from_arrays(cls, arrays: dict, dims: dict, method: str = 'qr') -> 'OfflineCache':
        factors = {k: arrays[f'R_{k}'] for k in cls.STACKS}
        grams = {k: arrays[f'Gram_{k}'] for k in cls.STACKS}
        return cls(factors, grams, dims, method)


def primal_residual_coefficients(red: ReducedSystem, grid: TimeGrid, mu, X, U) -> np.ndarray:
    """Rows ``z_k`` with ``E^{-1} r_k = S_primal z_k``, ``k = 1..nt``.

    ``r_k = A(t_k) V x_k + B(t_k) u_k - E V (x_k - x_{k-1}) / dt``.
    """
    X = np.asarray(X, dtype=float)
    U = np.asarray(U, dtype=float).reshape(grid.nt, -1)
    thA = np.array([red.thetas_A(mu, grid.t(k)) for k in range(1, grid.nt + 1)])
    thB = np.array([red.thetas_B(mu, grid.t(k)) for k in range(1, grid.nt + 1)])
    parts = [thA[:, [q]] * X[1:] for q in range(thA.shape[1])]
    parts += [thB[:, [q]] * U for q in range(thB.shape[1])]
    parts.append(-(X[1:] - X[:-1]) / grid.dt)
    return np.hstack(parts)


def adjoint_residual_coefficients(red: ReducedSystem, grid: TimeGrid, mu, P) -> np.ndarray:
    """Rows ``z_k`` with ``E^{-T} r_k = S_adjoint z_k``, ``k = 1..nt``.

    ``r_k = A(t_k)^T V phi_{k-1} + E^T V (phi_k - phi_{k-1}) / dt``.
    """
    P = np.asarray(P, dtype=float)
    thA = np.array([red.thetas_A(mu, grid.t(k)) for k in range(1, grid.nt + 1)])
    parts = [thA[:, [q]] * P[:-1] for q in range(thA.shape[1])]
    parts.append((P[1:] - P[:-1]) / grid.dt)
    return np.hstack(parts)


def _node_value(values, grid, t):
    if t is None:
        return values
    k = int(round(t / grid.dt))
    if not np.isclose(k * grid.dt, t) or not 0 <= k <= grid.nt:
        raise ValueError('t must be a node of the time grid')
    return float(values[k])


def primal_estimate_trajectory(cache: OfflineCache, red: ReducedSystem, grid: TimeGrid, mu, X, U,
                               initial_error: float, C1: float = 1.):
    """Primal estimate at every node: ``C1 e_0 + C1 dt sum_{k<=j} ||E^{-1} r_k||``."""
    rho = cache.norms('primal', primal_residual_coefficients(red, grid, mu, X, U))
    return C1 * initial_error + C1 * grid.dt * np.concatenate([[0.], np.cumsum(rho)]), rho


def adjoint_estimate_trajectory(cache: OfflineCache, red: ReducedSystem, grid: TimeGrid, mu, P,
                                terminal_error: float, C1: float = 1.):
    """Adjoint estimate at every node: ``C1 e_T + C1 dt sum_{k>j} ||E^{-T} r_k||``."""
    eta = cache.norms('adjoint', adjoint_residual_coefficients(red, grid, mu, P))
    tail = np.concatenate([np.cumsum(eta[::-1])[::-1], [0.]])
    return C1 * terminal_error + C1 * grid.dt * tail, eta


def estimate_primal(cache: OfflineCache, red: ReducedSystem, grid: TimeGrid, mu, u=None, t=None,
                    consts: Optional[EstimatorConstants] = None, x_init_hat=None):
    """Bound on ``||x(t) - V_pr x_hat(t)||_G`` for the control `u`.

    The reduced trajectory starts from the G-projection of the initial state
    unless `x_init_hat` is given.  Returns the value at node time `t`, or
    all node values if `t` is `None`.
    """
    mu = parameter_key(mu)
    C1 = consts.C1 if consts else 1.
    x_init_hat = red.x0_hat(mu) if x_init_hat is None else np.asarray(x_init_hat, dtype=float)
    U = np.zeros((grid.nt, red.m)) if u is None else np.asarray(u, dtype=float).reshape(grid.nt, red.m)
    X = integrate_reduced_primal(red, grid, mu, x_init_hat, U)
    th0 = np.array([c(mu, 0.) for c in red.x0_coeffs])
    e0 = cache.norms('initial', np.concatenate([th0, -x_init_hat]))[0]
    values, _ = primal_estimate_trajectory(cache, red, grid, mu, X, U, e0, C1)
    return _node_value(values, grid, t)


def estimate_adjoint(cache: OfflineCache, red: ReducedSystem, grid: TimeGrid, mu, phi_bar, t=None,
                     consts: Optional[EstimatorConstants] = None, sys: Optional[ControlSystem] = None,
                     bases: Optional[ReducedBases] = None, terminal_hat=None):
    """Bound on ``||phi(t) - V_ad phi_hat(t)||_G`` for the terminal value `phi_bar`.

    `phi_bar` is either a full state vector (then `sys` and `bases` are
    needed for its projection and projection error) or coefficients with
    respect to ``V_N``.
    """
    mu = parameter_key(mu)
    C1 = consts.C1 if consts else 1.
    phi_bar = np.asarray(phi_bar, dtype=float)
    if sys is not None:
        Va = bases.V_ad.columns
        G = sys.space.gram
        if terminal_hat is None:
            terminal_hat = (np.linalg.solve(Va.T @ (G @ Va), Va.T @ (G @ phi_bar)) if Va.shape[1]
                            else np.zeros(0))
        eT = sys.space.norm(phi_bar - Va @ terminal_hat)
    else:
        terminal_hat = red.blocks['M11'] @ phi_bar if terminal_hat is None else terminal_hat
        eT = cache.norms('terminal', np.concatenate([phi_bar, -terminal_hat]))[0]
    P = integrate_reduced_adjoint(red, grid, mu, terminal_hat)
    values, _ = adjoint_estimate_trajectory(cache, red, grid, mu, P, eT, C1)
    return _node_value(values, grid, t)


def estimate_fta_full(sys: ControlSystem, grid: TimeGrid, mu, p, c: float = 1.) -> float:
    """``c ||M (Phi x0 - xT) - (E^T + M G_mu) p||_{G^{-1}}`` with the full dynamics."""
    mu = parameter_key(mu)
    gr = GramianOperator(sys, grid, mu)
    return c * sys.space.dual_norm(fta_rhs(sys, grid, mu) - fta_apply(gr, np.asarray(p, dtype=float)))


def estimate_fta_reduced(red: ReducedSystem, grid: TimeGrid, mu, alpha,
                         sol: Optional[FullyReducedSolution] = None) -> float:
    """Reduced residual norm of ``V_N alpha`` using only reduced dynamics."""
    if sol is None or sol.mu != parameter_key(mu):
        sol = solve_fully_reduced(red, grid, mu)
    return sol.residual(alpha)


def gramian_estimate_parts(cache: OfflineCache, red: ReducedSystem, grid: TimeGrid, mu, alpha,
                           consts: EstimatorConstants, sol: Optional[FullyReducedSolution] = None) -> dict:
    """Terms of the Gramian estimate for ``phi_N = V_N alpha``."""
    if sol is None or sol.mu != parameter_key(mu):
        sol = solve_fully_reduced(red, grid, mu)
    alpha = np.asarray(alpha, dtype=float)
    P, U, X = sol.trajectories(alpha)
    term = red.blocks['M11'] @ alpha
    eT = cache.norms('terminal', np.concatenate([alpha, -term]))[0] if len(alpha) else 0.
    ad_values, eta = adjoint_estimate_trajectory(cache, red, grid, mu, P, eT, consts.C1)
    rho = cache.norms('primal', primal_residual_coefficients(red, grid, mu, X, U))
    adjoint_part = consts.C1 * consts.C2 * grid.dt * float(np.sum(ad_values[:-1]))
    primal_part = consts.C1 * grid.dt * float(np.sum(rho))
    return {'value': adjoint_part + primal_part, 'adjoint_part': adjoint_part, 'primal_part': primal_part,
            'adjoint_estimates': ad_values, 'primal_residuals': rho, 'adjoint_residuals': eta}


def estimate_gramian(cache: OfflineCache, red: ReducedSystem, grid: TimeGrid, mu, alpha,
                     consts: EstimatorConstants, sol: Optional[FullyReducedSolution] = None) -> float:
    """Bound on ``||(V_pr G_hat P_ad - G_mu) V_N alpha||_G``.

    ``C1 C2 dt sum_k Delta_ad(t_{k-1}) + C1 dt sum_k ||E^{-1} r_k||`` along the
    reduced chain started from the projection of ``V_N alpha`` onto ``V_ad``.
    """
    return gramian_estimate_parts(cache, red, grid, mu, alpha, consts, sol)['value']


@dataclass
class EstimateBreakdown:
    """Combined estimate and its three contributions."""

    total: float
    primal_free_dynamics: float
    reduced_residual: float
    gramian: float
    samples: dict = field(default_factory=dict)

    def to_row(self) -> dict:
        return {'total': self.total, 'primal_free_dynamics': self.primal_free_dynamics,
                'reduced_residual': self.reduced_residual, 'gramian': self.gramian}

    def to_json(self) -> str:
        return json.dumps(self.to_row())


def estimate_full(cache: OfflineCache, red: ReducedSystem, grid: TimeGrid, mu, consts: EstimatorConstants,
                  alpha=None, sol: Optional[FullyReducedSolution] = None) -> EstimateBreakdown:
    """``c (||M|| Delta_pr^0(T) + Delta_hat + ||M|| Delta_Gr)`` for ``V_N alpha``.

    Without `alpha` the fully reduced solution at `mu` is estimated.
    """
    mu = parameter_key(mu)
    if sol is None or sol.mu != mu:
        sol = solve_fully_reduced(red, grid, mu)
    alpha = sol.alpha if alpha is None else np.asarray(alpha, dtype=float)
    th0 = np.array([c(mu, 0.) for c in red.x0_coeffs])
    x0_hat = red.x0_hat(mu)
    e0 = cache.norms('initial', np.concatenate([th0, -x0_hat]))[0]
    free_values, _ = primal_estimate_trajectory(cache, red, grid, mu, sol.x_free,
                                                np.zeros((grid.nt, red.m)), e0, consts.C1)
    parts = gramian_estimate_parts(cache, red, grid, mu, alpha, consts, sol)
    free = consts.c * consts.M_norm * float(free_values[-1])
    reduced = consts.c * sol.residual(alpha)
    gram = consts.c * consts.M_norm * parts['value']
    return EstimateBreakdown(free + reduced + gram, free, reduced, gram,
                             {'primal_residuals': parts['primal_residuals'],
                              'adjoint_residuals': parts['adjoint_residuals']})
