import itertools
import time
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve
from tqdm import tqdm

from .assembly import LcpSlice, SparseOperator, build_time_step
from .coefficients import CoefficientField, verify_ellipticity
from .fields import GridSpec, ScalarField, kolmogorov_mask, norm_hm1_v, norm_W

ORDERING_TOL = 1e-12


class SolverError(RuntimeError):
    pass


@dataclass(frozen=True)
class SolverConfig:
    method: str = 'psor'
    omega: float = 1.5
    tol: float = 1e-8
    max_iter: Optional[int] = None
    epsilon_penalty: float = 1e-8
    newton_max: int = 50
    progress: bool = False

    def __post_init__(self):
        if self.method not in ('psor', 'penalized'):
            raise ValueError('Unknown solver method: {}. Must be psor or penalized'.format(self.method))
        if not 0 < self.omega < 2:
            raise ValueError('omega must lie in (0, 2), got {}'.format(self.omega))
        if not self.tol > 0:
            raise ValueError('tol must be positive, got {}'.format(self.tol))
        if self.max_iter is not None and self.max_iter < 1:
            raise ValueError('max_iter must be >= 1, got {}'.format(self.max_iter))
        if not self.epsilon_penalty > 0:
            raise ValueError('epsilon_penalty must be positive, got {}'.format(self.epsilon_penalty))
        if self.newton_max < 1:
            raise ValueError('newton_max must be >= 1, got {}'.format(self.newton_max))


@dataclass
class SolveReport:
    method: str
    iterations: List[int] = field(default_factory=list)
    complementarity_residual: float = 0.0
    linear_residual: float = 0.0
    min_obstacle_gap: float = float('inf')
    norm_u_W: float = float('nan')
    norm_f: float = float('nan')
    norm_g_W: float = float('nan')
    stability_ratio: float = float('nan')
    wall_time: float = 0.0

    def as_dict(self, with_timing: bool = False):
        out = {
            'method': self.method,
            'iterations': list(self.iterations),
            'total_iterations': int(sum(self.iterations)),
            'complementarity_residual': self.complementarity_residual,
            'linear_residual': self.linear_residual,
            'min_obstacle_gap': self.min_obstacle_gap,
            'norm_u_W': self.norm_u_W,
            'norm_f_L2Hm1': self.norm_f,
            'norm_g_W': self.norm_g_W,
            'stability_ratio': self.stability_ratio,
        }
        if with_timing:
            out['wall_time'] = self.wall_time
        return out


def lcp_from_dense(M, q, psi, tag: int = 0) -> LcpSlice:
    """Wrap a plain LCP (no boundary data) as a one-level slice."""
    M = sp.csr_matrix(np.asarray(M, dtype=float) if not sp.issparse(M) else M)
    n = M.shape[0]
    op = SparseOperator(M, sp.csr_matrix((n, 0)), np.arange(n), np.arange(0), (n,))
    return LcpSlice(M=op, q=np.asarray(q, dtype=float), psi=np.broadcast_to(np.asarray(psi, dtype=float), (n,)).copy(),
                    tag=tag)


def random_m_matrix_lcp(n: int, rng: np.random.Generator, density: float = 0.5) -> LcpSlice:
    """Random symmetric M-matrix instance with a nontrivial active set.

    Rows are strictly diagonally dominant by a margin in [1, 2], so the
    matrix is positive definite and PSOR converges for every omega in (0, 2).
    """
    off = -rng.uniform(0.0, 1.0, (n, n)) * (rng.uniform(size=(n, n)) < density)
    off = np.triu(off, 1)
    off = off + off.T
    M = off + np.diag(np.abs(off).sum(axis=1) + rng.uniform(1.0, 2.0, n))
    return lcp_from_dense(M, rng.normal(size=n), rng.normal(scale=0.5, size=n))


def complementarity_residual(s: LcpSlice, u: np.ndarray) -> float:
    """max |min(M u - q, u - psi)| over the nodes of the slice."""
    r = s.M.matrix @ u - s.q
    return float(np.max(np.abs(np.minimum(r, u - s.psi)))) if len(u) else 0.0


def _uncoupled(M: sp.csr_matrix, rows: np.ndarray) -> bool:
    block = M[rows][:, rows].tocoo()
    return not np.any((block.row != block.col) & (block.data != 0))


def node_classes(s: LcpSlice):
    """Groups of nodes that one PSOR sweep may update together.

    Grid slices split into classes of equal index parities, which the
    difference stencils never couple. When a class does contain a coupled
    pair (a plain LCP matrix) every node is its own class and the sweep is
    ordinary node-by-node Gauss-Seidel.
    """
    M = s.M.matrix.tocsr()
    diag = M.diagonal()
    coords = np.unravel_index(s.M.active, s.M.slice_shape)
    colour = np.zeros(len(s.M.active), dtype=int)
    for k, c in enumerate(coords):
        colour += (c % 2) << k
    classes = [np.flatnonzero(colour == c) for c in np.unique(colour)]
    if not all(_uncoupled(M, rows) for rows in classes):
        classes = [np.array([i]) for i in range(s.dimension)]
    return [(rows, M[rows], diag[rows]) for rows in classes]


def psor_sweep(s: LcpSlice, u: np.ndarray, omega: float, classes) -> np.ndarray:
    """One projected SOR sweep over the node classes, in place."""
    for rows, M_rows, diag in classes:
        r = s.q[rows] - M_rows @ u
        u[rows] = np.maximum(s.psi[rows], u[rows] + omega * r / diag)
    return u


def _polish(s: LcpSlice, u: np.ndarray) -> np.ndarray:
    """Solve M u = q on the nodes left free by u with psi held on the rest; keep it only if it is at least as good."""
    M = s.M.matrix.tocsr()
    r = M @ u - s.q
    active = u - s.psi <= r
    free = ~active
    if not np.any(free):
        return u
    w = s.psi.copy()
    rhs = s.q[free] - M[free][:, active] @ s.psi[active]
    try:
        w[free] = _linear_solve(M[free][:, free], rhs, s.tag)
    except SolverError:
        return u
    w = np.maximum(w, s.psi)
    return w if complementarity_residual(s, w) <= complementarity_residual(s, u) else u


def _psor(s: LcpSlice, cfg: SolverConfig, u0: np.ndarray) -> Tuple[np.ndarray, int]:
    if np.any(s.M.matrix.diagonal() <= 0):
        raise SolverError('PSOR needs a positive diagonal')
    u = np.maximum(np.asarray(u0, dtype=float).copy(), s.psi)
    max_iter = cfg.max_iter if cfg.max_iter is not None else 10 * max(s.dimension, 1)
    classes = node_classes(s)
    residual = complementarity_residual(s, u)
    it = 0
    while residual >= cfg.tol:
        if it == max_iter:
            raise SolverError('PSOR did not converge on slice {} in {} sweeps: residual {:.3e} > tol {:.1e} '
                              '(omega={})'.format(s.tag, max_iter, residual, cfg.tol, cfg.omega))
        psor_sweep(s, u, cfg.omega, classes)
        residual = complementarity_residual(s, u)
        it += 1
    return _polish(s, u), it


def solve_lcp_psor(s: LcpSlice, cfg: SolverConfig, u0: np.ndarray) -> np.ndarray:
    """Projected SOR: u_i <- max(psi_i, u_i + omega (q - M u)_i / M_ii), stopped once
    max |min(M u - q, u - psi)| < tol and finished with one active-set solve."""
    return _psor(s, cfg, u0)[0]


def _linear_solve(M: sp.spmatrix, rhs: np.ndarray, tag: int) -> np.ndarray:
    u = spsolve(sp.csc_matrix(M), rhs)
    u = np.atleast_1d(u)
    if not np.all(np.isfinite(u)):
        raise SolverError('Linear solve failed on slice {}'.format(tag))
    return u


def _penalized(s: LcpSlice, cfg: SolverConfig) -> Tuple[np.ndarray, int]:
    M = s.M.matrix
    u = _linear_solve(M, s.q, s.tag)
    active = u < s.psi
    if not np.any(active):
        return u, 1
    inv_eps = 1.0 / cfg.epsilon_penalty
    for it in range(1, cfg.newton_max + 1):
        J = M + sp.diags(inv_eps * active.astype(float))
        u = _linear_solve(J, s.q + inv_eps * np.where(active, s.psi, 0.0), s.tag)
        new_active = u < s.psi
        if np.array_equal(new_active, active):
            return u, it + 1
        active = new_active
    raise SolverError('Semismooth Newton did not settle the active set on slice {} in {} steps'.format(
        s.tag, cfg.newton_max))


def solve_lcp_penalized(s: LcpSlice, cfg: SolverConfig) -> np.ndarray:
    """Semismooth Newton on M u + (1/eps) min(u - psi, 0) = q."""
    return _penalized(s, cfg)[0]


def solve_lcp_enumeration(s: LcpSlice, tol: float = 1e-12) -> np.ndarray:
    """Reference solver trying every active set; only for small instances."""
    n = s.dimension
    if n > 16:
        raise ValueError('Active-set enumeration is limited to 16 unknowns, got {}'.format(n))
    M = s.M.matrix.toarray()
    b = M @ s.psi - s.q
    for size in range(n + 1):
        for free in itertools.combinations(range(n), size):
            free = list(free)
            z = np.zeros(n)
            if free:
                try:
                    z[free] = np.linalg.solve(M[np.ix_(free, free)], -b[free])
                except np.linalg.LinAlgError:
                    continue
            w = M @ z + b
            if np.all(z >= -tol) and np.all(w >= -tol):
                return s.psi + np.maximum(z, 0.0)
    raise SolverError('No active set solves the LCP')


def check_ordering(psi: ScalarField, g: ScalarField, boundary: Optional[np.ndarray] = None) -> bool:
    """psi <= g at every Kolmogorov-boundary node."""
    if boundary is None:
        boundary = kolmogorov_mask(g.grid)
    return bool(np.all(g.values[boundary] - psi.values[boundary] >= -ORDERING_TOL))


def stability_ratio(u: ScalarField, f: ScalarField, g: ScalarField) -> float:
    """||u||_W / (||g||_W + ||f||_{L2 H^-1}), the constant of the quantitative estimate."""
    num = norm_W(u)
    denom = norm_W(g) + norm_hm1_v(f)
    if denom == 0.0:
        return 0.0 if num == 0.0 else float('inf')
    return float(num / denom)


def _march(A: CoefficientField, grid: GridSpec, f: ScalarField, psi: Optional[ScalarField], g: ScalarField,
           cfg: SolverConfig, solve_slice) -> Tuple[ScalarField, SolveReport]:
    ok, report = verify_ellipticity(A)
    if not ok:
        raise ValueError('Coefficients fail the ellipticity check: {}'.format(report.as_dict()))
    for name, fld in (('f', f), ('g', g), ('psi', psi)):
        if fld is not None and fld.grid != grid:
            raise ValueError('Field {} lives on a different grid'.format(name))
    if psi is not None and not check_ordering(psi, g):
        raise ValueError('Obstacle exceeds the boundary datum on the Kolmogorov boundary (psi <= g required)')

    start_time = time.time()
    out = SolveReport(method=cfg.method if psi is not None else 'direct')
    u = g.values.copy()
    steps = tqdm(range(1, grid.n_t), disable=not cfg.progress, desc='march')
    for k in steps:
        s = build_time_step(A, grid, k, f.time_slice(k), g.time_slice(k), u[..., k - 1],
                            None if psi is None else psi.time_slice(k))
        u0 = np.maximum(u[..., k - 1].ravel()[s.M.active], s.psi)
        sol, iters = solve_slice(s, u0)
        out.iterations.append(int(iters))
        residual = s.M.matrix @ sol - s.q
        gap = sol - s.psi
        inactive = gap > cfg.tol
        out.complementarity_residual = max(out.complementarity_residual,
                                           float(np.max(np.abs(np.minimum(residual, gap)), initial=0.0)))
        out.linear_residual = max(out.linear_residual, float(np.max(np.abs(residual[inactive]), initial=0.0)))
        out.min_obstacle_gap = min(out.min_obstacle_gap, float(np.min(gap, initial=np.inf)))
        level = u[..., k].ravel()
        level[s.M.active] = sol
        u[..., k] = level.reshape(grid.slice_shape)
        if cfg.progress:
            steps.set_postfix({'iters': iters})

    solution = ScalarField(grid, u)
    out.norm_u_W = norm_W(solution)
    out.norm_f = norm_hm1_v(f)
    out.norm_g_W = norm_W(g)
    denom = out.norm_g_W + out.norm_f
    out.stability_ratio = out.norm_u_W / denom if denom > 0 else 0.0
    out.wall_time = time.time() - start_time
    return solution, out


def march(A: CoefficientField, grid: GridSpec, f: ScalarField, psi: ScalarField, g: ScalarField,
          cfg: SolverConfig) -> Tuple[ScalarField, SolveReport]:
    """March the obstacle problem forward from the t_lo face, one complementarity problem per time level."""
    if cfg.method == 'psor':
        def solve_slice(s, u0):
            return _psor(s, cfg, u0)
    else:
        def solve_slice(s, u0):
            return _penalized(s, cfg)
    return _march(A, grid, f, psi, g, cfg, solve_slice)


def solve_dirichlet(A: CoefficientField, grid: GridSpec, f: ScalarField, g: ScalarField,
                    cfg: Optional[SolverConfig] = None) -> Tuple[ScalarField, SolveReport]:
    """Unconstrained problem L u = f, u = g on the Kolmogorov boundary (the psi -> -infinity case)."""
    cfg = cfg or SolverConfig()

    def solve_slice(s, u0):
        return _linear_solve(s.M.matrix, s.q, s.tag), 1
    return _march(A, grid, f, None, g, cfg, solve_slice)
