"""Full-order optimal control through the final-time adjoint.

The optimal final-time adjoint ``phi_T`` solves the linear system

    (E^T + M G_mu) phi_T = M (Phi(T, 0) x0 - xT),

where ``G_mu p = -x(T)`` is the controllability Gramian: integrate the adjoint
backward from ``p``, form the control from it, integrate the primal forward
from zero.  The Gramian is only ever applied, never assembled.

Residuals of this system are functionals; their size is measured in the dual
norm ``||r||_{G^{-1}} = sqrt(r^T G^{-1} r)``, which makes the residual norm
comparable to G-norm errors of ``phi_T``.
"""

from __future__ import annotations

import json
import zipfile
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ltvrom.linalg import (ConvergenceError, IterativeResult, block_bytes, block_from_bytes,
                           block_header, jacobi_preconditioner, metric_r_factor, solve_iterative)
from ltvrom.ltv import (ControlSystem, TimeGrid, apply_state_transition, control_from_adjoint,
                        integrate_adjoint, integrate_primal, parameter_key)


class GramianOperator:
    """Matrix-free controllability Gramian ``p -> -x(T)`` at a fixed parameter."""

    def __init__(self, sys: ControlSystem, grid: TimeGrid, mu):
        self.sys, self.grid, self.mu = sys, grid, parameter_key(mu)
        self.applications = 0

    def apply(self, p) -> np.ndarray:
        return apply_gramian(self, p)

    __call__ = apply


def apply_gramian(gr: GramianOperator, p) -> np.ndarray:
    """Apply the Gramian: adjoint backward from `p`, control, primal forward from zero."""
    sys, grid, mu = gr.sys, gr.grid, gr.mu
    p = np.asarray(p, dtype=float)
    gr.applications += 1
    if not np.any(p):
        return np.zeros(sys.n)
    phi = integrate_adjoint(sys, grid, mu, p)
    u = control_from_adjoint(sys, grid, mu, phi)
    return -integrate_primal(sys, grid, mu, np.zeros(sys.n), u)[-1]


def fta_rhs(sys: ControlSystem, grid: TimeGrid, mu) -> np.ndarray:
    """Right-hand side ``M (Phi(T, 0) x0 - xT)``."""
    x0 = sys.x0.evaluate(mu)
    free = apply_state_transition(sys, grid, mu, x0) if np.any(x0) else np.zeros(sys.n)
    return sys.M @ (free - sys.xT.evaluate(mu))


def fta_apply(gr: GramianOperator, p) -> np.ndarray:
    """Apply ``E^T + M G_mu`` to `p`."""
    return gr.sys.E.T @ p + gr.sys.M @ apply_gramian(gr, p)


def fta_residual_norm(sys: ControlSystem, grid: TimeGrid, mu, p, rhs=None) -> float:
    """Dual norm of ``M (Phi x0 - xT) - (E^T + M G_mu) p``."""
    gr = GramianOperator(sys, grid, mu)
    rhs = fta_rhs(sys, grid, mu) if rhs is None else rhs
    return sys.space.dual_norm(rhs - fta_apply(gr, p))


@dataclass
class OptimalSolution:
    """Optimal final-time adjoint with the trajectories it generates.

    Attributes
    ----------
    phi_T
        Final-time adjoint.
    u
        Control, shape ``(nt, m)``.
    x, phi
        State and adjoint trajectories, shape ``(nt+1, n)``.
    objective
        Value of the discrete objective.
    solver_residual
        Relative dual-norm residual of the final-time adjoint system.
    """

    mu: tuple
    phi_T: np.ndarray
    u: np.ndarray
    x: np.ndarray
    phi: np.ndarray
    objective: float
    solver_residual: float
    iterations: int = 0

    def save(self, path) -> None:
        """Store as a zip of binary blocks with a JSON manifest."""
        with zipfile.ZipFile(path, 'w', compression=zipfile.ZIP_STORED) as zf:
            manifest = {'mu': list(self.mu), 'objective': self.objective,
                        'solver_residual': self.solver_residual, 'iterations': self.iterations,
                        'blocks': {}}
            for name in ('phi_T', 'u', 'x', 'phi'):
                arr = np.atleast_1d(getattr(self, name))
                manifest['blocks'][name] = block_header(arr)
                zf.writestr(name + '.bin', block_bytes(arr))
            zf.writestr('manifest.json', json.dumps(manifest, indent=1))

    @classmethod
    def load(cls, path) -> 'OptimalSolution':
        with zipfile.ZipFile(path) as zf:
            manifest = json.loads(zf.read('manifest.json'))
            arrays = {name: block_from_bytes(zf.read(name + '.bin'), hdr)
                      for name, hdr in manifest['blocks'].items()}
        return cls(tuple(manifest['mu']), arrays['phi_T'], arrays['u'], arrays['x'], arrays['phi'],
                   manifest['objective'], manifest['solver_residual'], manifest['iterations'])


def objective(sys: ControlSystem, grid: TimeGrid, mu, u, x) -> float:
    """``1/2 |C (x(T) - xT)|^2 + 1/2 dt sum_k u_k^T R(t_k) u_k``."""
    u = np.asarray(u, dtype=float).reshape(grid.nt, sys.m)
    y = sys.C @ (np.asarray(x)[-1] - sys.xT.evaluate(mu))
    cost = 0.5 * float(y @ y)
    for k in range(1, grid.nt + 1):
        cost += 0.5 * grid.dt * float(u[k - 1] @ sys.R(grid.t(k)) @ u[k - 1])
    return cost


def solve_fom(sys: ControlSystem, grid: TimeGrid, mu, rel_tol: float = 1e-8, max_iter: int = 200,
              preconditioner: Optional[str] = 'mass', max_restarts: int = 5) -> OptimalSolution:
    """Solve the optimal control problem at `mu` through the final-time adjoint system.

    Parameters
    ----------
    rel_tol
        Bi-CGSTAB tolerance; the returned solution additionally satisfies a
        relative dual-norm residual of at most `rel_tol`.
    preconditioner
        ``'mass'`` solves the equivalent system ``(I + E^{-T} M G_mu) phi_T =
        E^{-T} rhs``, ``'jacobi'`` uses the diagonal of ``E`` as right
        preconditioner on the original system, `None` applies no
        preconditioning.

    Raises
    ------
    ConvergenceError
        If the tolerance is not reached; the exception carries the best iterate.
    """
    mu = parameter_key(mu)
    gr = GramianOperator(sys, grid, mu)
    rhs = fta_rhs(sys, grid, mu)
    rhs_norm = sys.space.dual_norm(rhs)

    if preconditioner == 'mass':
        def op(p):
            return p + sys.solve_ET(sys.M @ apply_gramian(gr, p))
        b = sys.solve_ET(rhs)
        prec = None
    elif preconditioner in ('jacobi', None):
        def op(p):
            return fta_apply(gr, p)
        b = rhs
        prec = jacobi_preconditioner(sys.E) if preconditioner == 'jacobi' else None
    else:
        raise ValueError(f'unknown preconditioner {preconditioner!r}')

    phi_T = np.zeros(sys.n)
    iterations = 0
    rel_res = 0.
    tol = rel_tol
    for _ in range(max_restarts + 1):
        result = solve_iterative(op, b, rel_tol=tol, max_iter=max_iter, preconditioner=prec,
                                 x0=phi_T if iterations else None)
        iterations += result.iterations
        phi_T = result.x
        if not result.converged:
            raise ConvergenceError(f'Bi-CGSTAB did not converge at mu={mu}, residual {result.residual:.3e}',
                                   result)
        if rhs_norm == 0:
            rel_res = 0.
            break
        rel_res = sys.space.dual_norm(rhs - fta_apply(gr, phi_T)) / rhs_norm
        if rel_res <= rel_tol:
            break
        # the inner residual is Euclidean; tighten by at least a decade per restart
        tol = max(tol * min(0.1, rel_tol / rel_res), 1e-16)
    else:
        raise ConvergenceError(f'final-time adjoint residual {rel_res:.3e} above {rel_tol:.1e} at mu={mu}',
                               IterativeResult(phi_T, False, rel_res, iterations))

    phi = integrate_adjoint(sys, grid, mu, phi_T)
    u = control_from_adjoint(sys, grid, mu, phi)
    x = integrate_primal(sys, grid, mu, sys.x0.evaluate(mu), u)
    return OptimalSolution(mu, phi_T, u, x, phi, objective(sys, grid, mu, u, x), rel_res, iterations)


# -- reduced final-time adjoints with full dynamics ------------------------------

@dataclass
class FtaRomSolution:
    """Best approximation of the final-time adjoint in ``span(V_N)`` under full dynamics.

    Attributes
    ----------
    alpha
        Coefficients with respect to ``V_N``.
    phi_N
        The lifted final-time adjoint ``V_N alpha``.
    residual
        Minimal dual residual norm of the final-time adjoint system; times the
        inverse-operator bound ``c`` it bounds the G-norm error.
    """

    mu: tuple
    alpha: np.ndarray
    phi_N: np.ndarray
    residual: float


def fta_operator_columns(sys: ControlSystem, grid: TimeGrid, mu, V) -> np.ndarray:
    """``(E^T + M G_mu) V`` column by column (one Gramian application per column)."""
    gr = GramianOperator(sys, grid, mu)
    V = np.asarray(V, dtype=float).reshape(sys.n, -1)
    return np.column_stack([fta_apply(gr, v) for v in V.T]) if V.shape[1] else np.zeros((sys.n, 0))


def solve_fta_rom(sys: ControlSystem, grid: TimeGrid, mu, V_N, KV=None, rhs=None) -> FtaRomSolution:
    """Minimize the dual residual norm of the final-time adjoint system over ``span(V_N)``.

    The minimizer is the reduced solution of the final-time adjoint model
    with full dynamics; `KV` may hold precomputed ``(E^T + M G_mu) V_N``
    columns, otherwise ``N`` Gramian applications are performed.
    """
    mu = parameter_key(mu)
    V = np.asarray(getattr(V_N, 'columns', V_N), dtype=float).reshape(sys.n, -1)
    rhs = fta_rhs(sys, grid, mu) if rhs is None else rhs
    KV = fta_operator_columns(sys, grid, mu, V) if KV is None else np.asarray(KV).reshape(sys.n, -1)
    N = V.shape[1]
    # residual rhs - KV alpha = G (G^{-1} [KV, rhs]) [-alpha; 1]; its dual norm is a G-norm
    riesz = sys.space.riesz_inverse(np.column_stack([KV, rhs]))
    Rf = metric_r_factor(sys.space, riesz)
    if N:
        alpha = np.linalg.lstsq(Rf[:, :N], Rf[:, N], rcond=None)[0]
    else:
        alpha = np.zeros(0)
    res = float(np.linalg.norm(Rf[:, N] - Rf[:, :N] @ alpha))
    return FtaRomSolution(mu, alpha, V @ alpha, res)
