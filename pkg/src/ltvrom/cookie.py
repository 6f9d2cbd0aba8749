"""Heat conduction benchmark with four circular inclusions ("cookies").

The unit square is heated through its left edge by a scalar Neumann control,
the right edge is held at zero temperature, and the goal is to reach the mean
temperature 0.25 in each inclusion at the final time.  The conductivity is
``q(t)`` in the background, ``mu_1`` in inclusions 1 and 3 and ``mu_2`` in
inclusions 2 and 4, so that

    A(mu; t) = q(t) A_0 + mu_1 (A_1 + A_3) + mu_2 (A_2 + A_4),
    q(t) = 14 (t - 0.25)^2 + 0.125.

Piecewise linear finite elements are used on a structured criss-cross
triangulation: every square cell is split into four triangles through an added
center node.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sps

from ltvrom.linalg import InnerProductSpace
from ltvrom.ltv import (AffineOperator, AffineVector, ControlSystem, TimeGrid, constant,
                        parameter_component, polynomial_in_time)

CENTERS = ((0.3, 0.3), (0.7, 0.3), (0.7, 0.7), (0.3, 0.7))
RADIUS = 0.1
PARAMETER_BOX = ((0.1, 100.), (0.1, 100.))


def background_conductivity(t):
    """``q(t) = 14 (t - 0.25)^2 + 0.125``."""
    return 14. * (np.asarray(t) - 0.25) ** 2 + 0.125


# 14 (t - 1/4)^2 + 1/8 = 1 - 7 t + 14 t^2
Q_POLY = (1., -7., 14.)


@dataclass(frozen=True)
class CookieConfig:
    """Discretization and problem data of the benchmark."""

    grid_resolution: int = 32
    T: float = 1.
    nt: int = 50
    R: float = 0.02
    target: float = 0.25
    centers: tuple = CENTERS
    radius: float = RADIUS
    parameter_box: tuple = PARAMETER_BOX
    cache_size: int = 64

    def __post_init__(self):
        if self.grid_resolution < 8:
            raise ValueError('grid_resolution must be at least 8 so that every inclusion contains elements')

    @property
    def time_grid(self) -> TimeGrid:
        return TimeGrid(self.T, self.nt)


@dataclass
class Mesh:
    """Criss-cross triangulation of the unit square."""

    coords: np.ndarray
    triangles: np.ndarray
    resolution: int

    @classmethod
    def structured(cls, res: int) -> 'Mesh':
        h = 1. / res
        g = np.arange(res + 1) * h
        X, Y = np.meshgrid(g, g, indexing='xy')
        corners = np.column_stack([X.ravel(), Y.ravel()])
        c = (np.arange(res) + 0.5) * h
        CX, CY = np.meshgrid(c, c, indexing='xy')
        centers = np.column_stack([CX.ravel(), CY.ravel()])
        coords = np.vstack([corners, centers])
        i, j = np.meshgrid(np.arange(res), np.arange(res), indexing='xy')
        i, j = i.ravel(), j.ravel()
        v00 = i + (res + 1) * j
        v10 = v00 + 1
        v01 = v00 + res + 1
        v11 = v01 + 1
        vc = (res + 1) ** 2 + i + res * j
        tris = np.concatenate([np.column_stack(t) for t in
                               ((v00, v10, vc), (v10, v11, vc), (v11, v01, vc), (v01, v00, vc))])
        return cls(coords, tris, res)

    @property
    def n(self) -> int:
        return self.coords.shape[0]

    def centroids(self) -> np.ndarray:
        return self.coords[self.triangles].mean(axis=1)


def _local_matrices(coords, tris):
    P = coords[tris]
    d1 = P[:, 1] - P[:, 0]
    d2 = P[:, 2] - P[:, 0]
    det = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
    area = 0.5 * np.abs(det)
    # gradients of the barycentric coordinates
    grads = np.empty((len(tris), 3, 2))
    grads[:, 1] = np.column_stack([d2[:, 1], -d2[:, 0]]) / det[:, None]
    grads[:, 2] = np.column_stack([-d1[:, 1], d1[:, 0]]) / det[:, None]
    grads[:, 0] = -grads[:, 1] - grads[:, 2]
    stiff = area[:, None, None] * np.einsum('eik,ejk->eij', grads, grads)
    mass = area[:, None, None] / 12. * (np.ones((3, 3)) + np.eye(3))[None]
    return area, stiff, mass


def _assemble(tris, local, n, mask=None):
    if mask is not None:
        tris, local = tris[mask], local[mask]
    rows = np.repeat(tris, 3, axis=1).ravel()
    cols = np.tile(tris, (1, 3)).ravel()
    mat = sps.coo_matrix((local.ravel(), (rows, cols)), shape=(n, n)).tocsr()
    mat.sum_duplicates()
    return mat


def _symmetrize(mat):
    return ((mat + mat.T) * 0.5).tocsr()


def subdomain_labels(mesh: Mesh, centers=CENTERS, radius=RADIUS) -> np.ndarray:
    """Label 0 for background elements, ``i`` for elements whose centroid lies in inclusion ``i``."""
    cent = mesh.centroids()
    labels = np.zeros(len(cent), dtype=int)
    for i, c in enumerate(centers, start=1):
        inside = np.hypot(cent[:, 0] - c[0], cent[:, 1] - c[1]) < radius
        labels[inside] = i
    return labels


@dataclass
class CookieProblem:
    """Assembled benchmark: control system, time grid and the finite element data."""

    system: ControlSystem
    grid: TimeGrid
    mesh: Mesh
    stiffness_blocks: list
    mass: sps.csr_matrix
    dirichlet_dofs: np.ndarray
    labels: np.ndarray
    config: CookieConfig = field(default_factory=CookieConfig)


def assemble_cookie(cfg: Optional[CookieConfig] = None) -> CookieProblem:
    """Assemble the benchmark system.

    The mass matrix without boundary treatment is the Gram matrix ``G``.  The
    Dirichlet degrees of freedom on the right edge are eliminated: their rows
    and columns are removed from all stiffness blocks and from ``E``, whose
    Dirichlet diagonal keeps the entries of ``G``.
    """
    cfg = cfg or CookieConfig()
    mesh = Mesh.structured(cfg.grid_resolution)
    n = mesh.n
    area, stiff, mass_loc = _local_matrices(mesh.coords, mesh.triangles)
    labels = subdomain_labels(mesh, cfg.centers, cfg.radius)
    if any(not np.any(labels == i) for i in range(1, len(cfg.centers) + 1)):
        raise ValueError('resolution too coarse, an inclusion contains no element')
    K = [_symmetrize(_assemble(mesh.triangles, stiff, n, labels == i)) for i in range(len(cfg.centers) + 1)]
    G = _symmetrize(_assemble(mesh.triangles, mass_loc, n))

    dirichlet = np.flatnonzero(np.isclose(mesh.coords[:, 0], 1.))
    keep = np.ones(n)
    keep[dirichlet] = 0.
    P = sps.diags(keep)
    E = (P @ G @ P + sps.diags(G.diagonal() * (1. - keep))).tocsr()
    Kd = [(P @ k @ P).tocsr() for k in K]

    # Neumann control on the left edge: boundary integral of the hat functions
    h = 1. / cfg.grid_resolution
    left = np.flatnonzero(np.isclose(mesh.coords[:, 0], 0.))
    b = np.zeros(n)
    y = mesh.coords[left, 1]
    b[left] = np.where(np.isclose(y, 0.) | np.isclose(y, 1.), h / 2., h)

    # subdomain averages
    C = np.zeros((len(cfg.centers), n))
    for i in range(1, len(cfg.centers) + 1):
        mask = labels == i
        np.add.at(C[i - 1], mesh.triangles[mask].ravel(), np.repeat(area[mask] / 3., 3))
        C[i - 1] /= area[mask].sum()
    C = sps.csr_matrix(C)

    A = AffineOperator([-Kd[0], -(Kd[1] + Kd[3]), -(Kd[2] + Kd[4])],
                       [polynomial_in_time(Q_POLY), parameter_component(0), parameter_component(1)])
    B = AffineOperator([sps.csr_matrix(b[:, None])], [constant(1.)])
    x0 = AffineVector([np.zeros(n)], [constant(1.)])
    xT = AffineVector([np.full(n, cfg.target)], [constant(1.)])
    system = ControlSystem(E, A, B, C, np.array([[cfg.R]]), InnerProductSpace(G), x0, xT,
                           cache_size=cfg.cache_size, name=f'cookie-{cfg.grid_resolution}')
    return CookieProblem(system, cfg.time_grid, mesh, Kd, G, dirichlet, labels, cfg)


def training_grid(points_per_dim: int, box=PARAMETER_BOX) -> list:
    """Log-uniform tensor grid, first parameter varying fastest."""
    axes = [np.logspace(np.log10(lo), np.log10(hi), points_per_dim) for lo, hi in box]
    m1, m2 = np.meshgrid(*axes, indexing='xy')
    return [(float(a), float(b)) for a, b in zip(m1.ravel(), m2.ravel())]


def random_parameters(count: int, seed: int, box=PARAMETER_BOX) -> list:
    """Log-uniformly distributed random parameters from a seeded generator."""
    rng = np.random.default_rng(seed)
    lo = np.log10([b[0] for b in box])
    hi = np.log10([b[1] for b in box])
    return [tuple(float(v) for v in 10 ** rng.uniform(lo, hi)) for _ in range(count)]


def reference_behavior_check(problem: CookieProblem, mu=(100., 0.1), rel_tol: float = 1e-8) -> dict:
    """Solve at `mu` and check the qualitative behavior of the outputs.

    Checks are reported, not raised: inclusions 1 and 4 should end close to
    the target, inclusion 2 should stay cold.
    """
    from ltvrom.fom import solve_fom

    sys, grid = problem.system, problem.grid
    sol = solve_fom(sys, grid, mu, rel_tol=rel_tol)
    outputs = (sys.C @ sol.x.T).T
    yT = outputs[-1]
    checks = {
        'y1_near_target': bool(0.2 <= yT[0] <= 0.3),
        'y4_near_target': bool(0.2 <= yT[3] <= 0.3),
        'y2_cold': bool(yT[1] < 0.15),
    }
    return {'mu': list(map(float, mu)), 'final_outputs': yT.tolist(), 'checks': checks,
            'passed': all(checks.values()), 'times': grid.nodes.tolist(),
            'outputs': outputs.tolist(), 'control': sol.u[:, 0].tolist(), 'solution': sol}
