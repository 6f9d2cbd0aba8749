"""Linear algebra in Gram-matrix inner product spaces.

Sparse operators are stored as CSR matrices, dense bases column-major.  All
norms of state-space vectors are measured in the inner product induced by a
symmetric positive definite Gram matrix ``G``.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.io
import scipy.sparse as sps
import scipy.sparse.linalg as spla


ORTHO_TOL = 1e-10
#: largest dimension for which a dense Cholesky factor of the Gram matrix is used
DENSE_CHOLESKY_LIMIT = 12000


def as_csr(matrix) -> sps.csr_matrix:
    """Return `matrix` as a CSR matrix with summed duplicates and sorted indices."""
    mat = sps.csr_matrix(matrix, dtype=float)
    mat.sum_duplicates()
    mat.sort_indices()
    return mat


class InnerProductSpace:
    """Real vector space with inner product ``<x, y> = x^T G y``.

    Parameters
    ----------
    gram
        Symmetric positive definite Gram matrix.
    check
        If `True`, verify exact structural symmetry of `gram`.
    """

    def __init__(self, gram, check: bool = True):
        self.gram = as_csr(gram)
        if self.gram.shape[0] != self.gram.shape[1]:
            raise ValueError('Gram matrix must be square')
        if check and (self.gram - self.gram.T).count_nonzero() != 0:
            raise ValueError('Gram matrix is not symmetric')
        self.dim = self.gram.shape[0]
        self._lu = None
        self._chol = None
        self._lock = threading.Lock()

    def _check(self, x):
        if x.shape[0] != self.dim:
            raise ValueError(f'vector of length {x.shape[0]} does not belong to space of dimension {self.dim}')

    def inner(self, x, y):
        x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
        self._check(x)
        self._check(y)
        return x.T @ (self.gram @ y)

    def norm(self, x) -> float:
        return g_norm(self, x)

    def riesz_inverse(self, f):
        """Solve ``G y = f``; maps a functional to its Riesz representative."""
        with self._lock:
            if self._lu is None:
                self._lu = spla.splu(self.gram.tocsc())
        return self._lu.solve(np.asarray(f, dtype=float))

    def cholesky_factor(self) -> Optional[np.ndarray]:
        """Dense lower Cholesky factor ``L`` with ``G = L L^T``, or `None` above the size limit."""
        if self.dim > DENSE_CHOLESKY_LIMIT:
            return None
        with self._lock:
            if self._chol is None:
                self._chol = np.linalg.cholesky(self.gram.toarray())
        return self._chol

    def dual_norm(self, f) -> float:
        """Norm ``sqrt(f^T G^{-1} f)`` of the functional `f`."""
        f = np.asarray(f, dtype=float)
        return float(np.sqrt(max(f @ self.riesz_inverse(f), 0.)))


@dataclass(frozen=True)
class BasisMatrix:
    """Dense basis with metadata on the metric it is orthonormal in.

    Attributes
    ----------
    columns
        ``n x k`` array, column-major.
    metric
        Tag of the matrix the columns are orthonormal with respect to
        (``'G'``, ``'E'``, or ``None`` if no orthonormality is claimed).
    """

    columns: np.ndarray
    metric: Optional[str] = None

    def __post_init__(self):
        cols = np.asfortranarray(np.asarray(self.columns, dtype=float))
        if cols.ndim != 2:
            raise ValueError('basis must be two-dimensional')
        cols.setflags(write=False)
        object.__setattr__(self, 'columns', cols)

    @property
    def ambient_dim(self) -> int:
        return self.columns.shape[0]

    @property
    def k(self) -> int:
        return self.columns.shape[1]

    @classmethod
    def empty(cls, n: int, metric: Optional[str] = None) -> 'BasisMatrix':
        return cls(np.zeros((n, 0)), metric)

    def is_orthonormal(self, metric_matrix, tol: float = ORTHO_TOL) -> bool:
        if self.k == 0:
            return True
        V = self.columns
        return bool(np.max(np.abs(V.T @ (metric_matrix @ V) - np.eye(self.k))) <= tol)


def g_norm(space: InnerProductSpace, x) -> float:
    """Return ``sqrt(x^T G x)``."""
    x = np.asarray(x, dtype=float)
    space._check(x)
    return float(np.sqrt(max(x @ (space.gram @ x), 0.)))


def g_project(space: InnerProductSpace, basis: BasisMatrix, x):
    """Coefficients ``V^T G x`` of the G-orthogonal projection onto a G-orthonormal basis."""
    x = np.asarray(x, dtype=float)
    space._check(x)
    if basis.ambient_dim != space.dim:
        raise ValueError('basis and space dimensions differ')
    if not basis.is_orthonormal(space.gram):
        raise ValueError('basis is not G-orthonormal, projection formula V^T G x is invalid')
    return basis.columns.T @ (space.gram @ x)


def _gram_schmidt(metric, vectors: np.ndarray, drop_rtol: float):
    """Classical Gram-Schmidt with a full second pass, returning (Q, R, kept).

    The columns of ``Q`` are metric-orthonormal and ``vectors ~= Q @ R``;
    columns whose orthogonal remainder falls below the drop threshold get no
    new direction.
    """
    S = np.asarray(vectors, dtype=float)
    n, L = S.shape
    Q = np.zeros((n, min(n, L)), order='F')
    R = np.zeros((min(n, L), L))
    r = 0
    if L == 0:
        return Q[:, :0], R[:0], []
    MS = metric @ S
    norms = np.sqrt(np.maximum(np.einsum('ij,ij->j', S, MS), 0.))
    threshold = drop_rtol * (norms.max() if L else 0.)
    kept = []
    for j in range(L):
        v = S[:, j].copy()
        coeff = np.zeros(r)
        for _ in range(2):
            if r == 0:
                break
            c = Q[:, :r].T @ (metric @ v)
            v -= Q[:, :r] @ c
            coeff += c
        nv = np.sqrt(max(v @ (metric @ v), 0.))
        R[:r, j] = coeff
        if nv > threshold and nv > 0 and r < n:
            Q[:, r] = v / nv
            R[r, j] = nv
            kept.append(j)
            r += 1
    return Q[:, :r], R[:r], kept


def orthonormalize(space: InnerProductSpace, vectors, metric=None, metric_tag: str = 'G',
                   drop_rtol: float = 1e-12) -> BasisMatrix:
    """Metric-orthonormal basis of the span of `vectors`.

    Gram-Schmidt with one re-orthogonalization pass.  Directions whose
    remainder is smaller than ``drop_rtol`` times the largest input norm are
    dropped, so an all-null input gives an empty basis.

    Parameters
    ----------
    space
        The ambient space; its Gram matrix is the default metric.
    vectors
        Sequence of vectors or an ``n x L`` array.
    metric
        SPD matrix to orthonormalize in, defaults to ``space.gram``.
    """
    S = _as_columns(vectors, space.dim)
    metric = space.gram if metric is None else metric
    Q, _, _ = _gram_schmidt(metric, S, drop_rtol)
    return BasisMatrix(Q, metric_tag)


def metric_qr(metric, vectors, drop_rtol: float = 1e-14):
    """Metric QR factorization ``S = Q R`` with ``Q^T metric Q = I``.

    ``R`` has as many rows as retained directions and one column per input
    vector; it is used to evaluate ``||S z||_metric = ||R z||_2`` without
    cancellation in squared norms.
    """
    S = np.asarray(vectors, dtype=float)
    Q, R, _ = _gram_schmidt(metric, S, drop_rtol)
    return Q, R


def metric_r_factor(space: InnerProductSpace, vectors) -> np.ndarray:
    """Triangular factor ``R`` with ``||S z||_G = ||R z||_2`` for all ``z``.

    Computed by a Householder QR of ``L^T S`` where ``G = L L^T``; for very
    large spaces Gram-Schmidt in the G-metric is used instead.
    """
    S = np.asarray(vectors, dtype=float)
    if S.shape[1] == 0:
        return np.zeros((0, 0))
    L = space.cholesky_factor()
    if L is None:
        return metric_qr(space.gram, S)[1]
    return np.linalg.qr(L.T @ S, mode='r')


def _as_columns(vectors, n: int) -> np.ndarray:
    if isinstance(vectors, np.ndarray) and vectors.ndim == 2:
        S = vectors
    else:
        vecs = list(vectors)
        S = np.column_stack(vecs) if vecs else np.zeros((n, 0))
    if S.shape[0] != n:
        raise ValueError('vectors do not belong to the space')
    return np.asarray(S, dtype=float)


@dataclass
class IterativeResult:
    """Outcome of an iterative solve."""

    x: np.ndarray
    converged: bool
    residual: float
    iterations: int
    history: list = field(default_factory=list)


class ConvergenceError(RuntimeError):
    """Raised when an iterative solve does not reach its tolerance."""

    def __init__(self, message: str, result: IterativeResult):
        super().__init__(message)
        self.result = result


def jacobi_preconditioner(matrix) -> Callable[[np.ndarray], np.ndarray]:
    """Return the diagonal scaling ``x -> D^{-1} x`` of `matrix`."""
    d = np.asarray(sps.csr_matrix(matrix).diagonal(), dtype=float)
    if np.any(d == 0):
        raise ValueError('zero diagonal entry, Jacobi preconditioner undefined')
    inv = 1. / d
    return lambda x: inv * x


def solve_iterative(op: Callable[[np.ndarray], np.ndarray], rhs, rel_tol: float = 1e-8,
                    max_iter: int = 500, preconditioner: Optional[Callable] = None,
                    x0=None) -> IterativeResult:
    """Right-preconditioned Bi-CGSTAB for ``op(x) = rhs``.

    Convergence means ``||op(x) - rhs||_2 <= rel_tol ||rhs||_2`` for the
    returned `x`.  On breakdown or when `max_iter` is exceeded the best iterate
    found so far is returned with ``converged=False``.
    """
    if rel_tol <= 0:
        raise ValueError('rel_tol must be positive')
    b = np.asarray(rhs, dtype=float)
    nb = np.linalg.norm(b)
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=float)
    if nb == 0:
        return IterativeResult(np.zeros_like(b), True, 0., 0, [0.])
    prec = preconditioner if preconditioner is not None else (lambda v: v)
    r = b - op(x) if x0 is not None else b.copy()
    res = np.linalg.norm(r)
    history = [res / nb]
    best_x, best_res = x.copy(), res
    if res <= rel_tol * nb:
        return IterativeResult(x, True, res / nb, 0, history)
    r_hat = r.copy()
    rho = alpha = omega = 1.
    v = np.zeros_like(b)
    p = np.zeros_like(b)
    for it in range(1, max_iter + 1):
        rho_new = r_hat @ r
        if rho_new == 0 or omega == 0:
            break
        beta = (rho_new / rho) * (alpha / omega)
        rho = rho_new
        p = r + beta * (p - omega * v)
        p_hat = prec(p)
        v = op(p_hat)
        denom = r_hat @ v
        if denom == 0:
            break
        alpha = rho / denom
        s = r - alpha * v
        if np.linalg.norm(s) <= rel_tol * nb:
            x = x + alpha * p_hat
            res = np.linalg.norm(b - op(x))
            history.append(res / nb)
            if res <= rel_tol * nb:
                return IterativeResult(x, True, res / nb, it, history)
            if res < best_res:
                best_x, best_res = x.copy(), res
            r, r_hat = b - op(x), b - op(x)
            rho = alpha = omega = 1.
            p, v = np.zeros_like(b), np.zeros_like(b)
            continue
        s_hat = prec(s)
        t = op(s_hat)
        tt = t @ t
        if tt == 0:
            break
        omega = (t @ s) / tt
        x = x + alpha * p_hat + omega * s_hat
        r = s - omega * t
        res = np.linalg.norm(r)
        history.append(res / nb)
        if res < best_res:
            best_x, best_res = x.copy(), res
        if res <= rel_tol * nb:
            # guard against drift of the recursively updated residual
            true_res = np.linalg.norm(b - op(x))
            if true_res <= rel_tol * nb:
                return IterativeResult(x, True, true_res / nb, it, history)
            r = b - op(x)
            r_hat = r.copy()
            rho = alpha = omega = 1.
            p, v = np.zeros_like(b), np.zeros_like(b)
    true_res = np.linalg.norm(b - op(best_x))
    return IterativeResult(best_x, bool(true_res <= rel_tol * nb), true_res / nb, it, history)


# -- file formats -----------------------------------------------------------

def write_mtx(path, matrix) -> None:
    """Write a sparse matrix in Matrix Market coordinate format."""
    scipy.io.mmwrite(str(path), sps.coo_matrix(matrix), precision=17)


def read_mtx(path) -> sps.csr_matrix:
    """Read a Matrix Market file into CSR storage."""
    return as_csr(scipy.io.mmread(str(path)))


def block_header(array: np.ndarray, metric: Optional[str] = None) -> dict:
    return {'shape': list(array.shape), 'dtype': 'float64', 'order': 'F',
            'endianness': 'little', 'metric': metric}


def block_bytes(array) -> bytes:
    return np.asarray(array, dtype='<f8').tobytes(order='F')


def block_from_bytes(data: bytes, header: dict) -> np.ndarray:
    if header.get('endianness', 'little') != 'little' or header.get('dtype') != 'float64':
        raise ValueError('unsupported block encoding')
    shape = tuple(header['shape'])
    return np.frombuffer(data, dtype='<f8').reshape(shape, order='F').astype(float)


def write_block(path, array, metric: Optional[str] = None) -> None:
    """Write a dense block as ``<path>.bin`` plus a JSON header ``<path>.json``."""
    path = Path(path)
    array = np.atleast_1d(np.asarray(array, dtype=float))
    path.with_suffix('.bin').write_bytes(block_bytes(array))
    path.with_suffix('.json').write_text(json.dumps(block_header(array, metric), indent=1))


def read_block(path):
    """Read a block written by :func:`write_block`; returns ``(array, metric)``."""
    path = Path(path)
    header = json.loads(path.with_suffix('.json').read_text())
    return block_from_bytes(path.with_suffix('.bin').read_bytes(), header), header.get('metric')


def read_basis(path) -> BasisMatrix:
    array, metric = read_block(path)
    return BasisMatrix(array.reshape(array.shape[0], -1), metric)


def write_basis(path, basis: BasisMatrix) -> None:
    write_block(path, basis.columns, basis.metric)

