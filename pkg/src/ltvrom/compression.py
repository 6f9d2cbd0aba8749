"""POD and distributed HaPOD of snapshot sets in a Gram-matrix inner product.

Tolerances bound the root-mean-square projection error,

    sqrt( sum_i ||s_i - P s_i||^2 / #snapshots ) <= tol,

which also bounds the mean squared error by ``tol**2 <= tol`` for ``tol <= 1``.
The POD is computed from a metric-orthonormal basis of the snapshot span and
an SVD of the snapshot coefficients in that basis; unlike the eigenvalue
decomposition of the snapshot Gram matrix this resolves singular values down to
machine precision relative to the largest one, which tolerances like 1e-9
require.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import scipy.linalg as sla

from ltvrom.linalg import BasisMatrix, InnerProductSpace, _as_columns, metric_qr

logger = logging.getLogger(__name__)

#: when set, every call verifies its error certificate by direct projection
CHECK_CERTIFICATES = True


class CertificateError(AssertionError):
    """The projection error of a compression exceeded its tolerance."""


@dataclass(frozen=True)
class PodConfig:
    """Compression parameters.

    Attributes
    ----------
    tol
        Bound on the root-mean-square projection error.
    max_modes
        Optional cap on the number of modes; the certificate is then not
        guaranteed and only checked if the cap was not active.
    hapod_slices
        Number of chunks of the distributed HaPOD.
    omega
        Split of the error budget between local PODs and the final merge.
    """

    tol: float = 1e-9
    max_modes: Optional[int] = None
    hapod_slices: int = 50
    omega: float = 0.9

    def __post_init__(self):
        if self.tol <= 0:
            raise ValueError('tol must be positive')
        if not 0 < self.omega < 1:
            raise ValueError('omega must lie in (0, 1)')
        if self.hapod_slices < 1:
            raise ValueError('need at least one slice')


@dataclass
class PodResult:
    """Modes, singular values and the achieved root-mean-square error."""

    basis: BasisMatrix
    singular_values: np.ndarray
    rms_error: float
    count: int


def _fix_signs(U):
    for j in range(U.shape[1]):
        nz = np.flatnonzero(np.abs(U[:, j]) > 0)
        if len(nz) and U[nz[0], j] < 0:
            U[:, j] *= -1
    return U


def _svd_modes(space, S, abs_err, max_modes=None):
    """Return ``(modes, svals, err_sq)`` with ``sum ||s - P s||^2 = err_sq <= abs_err**2``.

    With ``G = L L^T`` the G-POD of ``S`` is the Euclidean SVD of ``L^T S``
    mapped back by ``L^{-T}``.
    """
    n, L = S.shape
    chol = space.cholesky_factor()
    if chol is not None:
        U, svals, _ = np.linalg.svd(chol.T @ S, full_matrices=False)
        back = lambda X: sla.solve_triangular(chol.T, X, lower=False)
    else:
        Q, R = metric_qr(space.gram, S)
        if Q.shape[1] == 0:
            return np.zeros((n, 0)), np.zeros(0), float(np.sum(_sq_norms(space.gram, S)))
        U, svals, _ = np.linalg.svd(R, full_matrices=False)
        back = lambda X: Q @ X
    # tail[r] = sum of squared singular values discarded when r modes are kept
    tail = np.concatenate([np.cumsum((svals ** 2)[::-1])[::-1], [0.]])
    r = int(np.argmax(tail <= abs_err ** 2))
    if max_modes is not None:
        r = min(r, max_modes)
    return back(U[:, :r]), svals, float(tail[r])


def _sq_norms(metric, S):
    return np.einsum('ij,ij->j', S, metric @ S)


def projection_rms_error(space: InnerProductSpace, basis: BasisMatrix, snapshots) -> float:
    """Root-mean-square G-norm projection error of `snapshots` onto a G-orthonormal basis."""
    S = _as_columns(snapshots, space.dim)
    if S.shape[1] == 0:
        return 0.
    V = basis.columns
    D = S - V @ (V.T @ (space.gram @ S))
    return float(np.sqrt(max(np.sum(_sq_norms(space.gram, D)), 0.) / S.shape[1]))


def _certify(space, basis, S, tol, capped, what):
    """Check the certificate by direct projection; returns the measured error."""
    if not CHECK_CERTIFICATES:
        return None
    err = projection_rms_error(space, basis, S)
    if capped:
        return err
    # the direct evaluation carries its own round-off of size eps * ||S||
    slack = 1e-12 * float(np.sqrt(np.max(_sq_norms(space.gram, S)))) if S.shape[1] else 0.
    if err > tol + slack:
        raise CertificateError(f'{what}: rms projection error {err:.3e} exceeds tolerance {tol:.3e}')
    return err


def pod(space: InnerProductSpace, snapshots, cfg: PodConfig) -> PodResult:
    """Proper orthogonal decomposition in the G-inner product.

    Returns the leading G-orthonormal modes, ordered by decreasing singular
    value, such that the root-mean-square projection error over the snapshots
    is at most ``cfg.tol``.
    """
    S = _as_columns(snapshots, space.dim)
    L = S.shape[1]
    if L == 0:
        raise ValueError('pod needs at least one snapshot')
    modes, svals, err_sq = _svd_modes(space, S, cfg.tol * np.sqrt(L), cfg.max_modes)
    basis = BasisMatrix(_fix_signs(modes), 'G')
    capped = cfg.max_modes is not None and basis.k == cfg.max_modes
    _certify(space, basis, S, cfg.tol, capped, 'pod')
    return PodResult(basis, svals, float(np.sqrt(err_sq / L)), L)


def hapod(space: InnerProductSpace, snapshot_chunks: Sequence, cfg: PodConfig) -> PodResult:
    """Distributed hierarchical approximate POD.

    Every chunk is compressed by a local POD, the local modes are scaled by
    their singular values and compressed again by a final POD.  With
    ``L`` snapshots in total and ``L_i`` in chunk ``i`` the local absolute
    ℓ²-errors are ``sqrt(1 - omega**2) tol sqrt(L_i)`` and the final one
    ``omega tol sqrt(L)``, so the overall root-mean-square error is at most
    ``tol``.
    """
    chunks = [_as_columns(c, space.dim) for c in snapshot_chunks]
    chunks = [c for c in chunks if c.shape[1] > 0]
    if not chunks:
        raise ValueError('hapod needs at least one snapshot')
    L = sum(c.shape[1] for c in chunks)
    if len(chunks) == 1:
        return pod(space, chunks[0], cfg)
    local_tol = np.sqrt(1. - cfg.omega ** 2) * cfg.tol
    weighted = []
    for c in chunks:
        modes, svals, _ = _svd_modes(space, c, local_tol * np.sqrt(c.shape[1]))
        weighted.append(modes * svals[:modes.shape[1]])
    W = np.hstack(weighted)
    if W.shape[1] == 0:
        modes = np.zeros((space.dim, 0))
        svals = np.zeros(0)
    else:
        modes, svals, _ = _svd_modes(space, W, cfg.omega * cfg.tol * np.sqrt(L), cfg.max_modes)
    basis = BasisMatrix(_fix_signs(modes), 'G')
    S = np.hstack(chunks)
    capped = cfg.max_modes is not None and basis.k == cfg.max_modes
    err = _certify(space, basis, S, cfg.tol, capped, 'hapod')
    err = projection_rms_error(space, basis, S) if err is None else err
    logger.debug('hapod: %d snapshots in %d chunks -> %d modes, rms error %.2e', L, len(chunks), basis.k, err)
    return PodResult(basis, svals, err, L)


def split_chunks(snapshots, slices: int) -> list:
    """Split snapshot columns into `slices` contiguous chunks of near-equal size."""
    S = np.asarray(snapshots)
    return [c for c in np.array_split(S, min(slices, max(S.shape[1], 1)), axis=1)]
