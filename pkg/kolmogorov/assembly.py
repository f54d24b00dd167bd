import warnings
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional, Tuple

import numpy as np
import scipy.sparse as sp

from .coefficients import CoefficientField, verify_ellipticity
from .fields import GridSpec, ScalarField, apply_Y, kolmogorov_slice_mask, v_boundary_mask


@dataclass(frozen=True)
class SparseOperator:
    """Operator on one time level, restricted to the `active` nodes.

    `matrix` couples active nodes among themselves, `coupling` carries the
    columns of the remaining (boundary) nodes whose values are data. Node
    indices are flat C-order indices over grid.slice_shape.
    """
    matrix: sp.csr_matrix
    coupling: sp.csr_matrix
    active: np.ndarray
    boundary: np.ndarray
    slice_shape: Tuple[int, ...]

    def __post_init__(self):
        n, m = len(self.active), len(self.boundary)
        if self.matrix.shape != (n, n) or self.coupling.shape != (n, m):
            raise ValueError('Operator blocks {} / {} do not match {} active and {} boundary nodes'.format(
                self.matrix.shape, self.coupling.shape, n, m))
        if not (np.all(np.isfinite(self.matrix.data)) and np.all(np.isfinite(self.coupling.data))):
            raise ValueError('Operator entries must be finite')

    @property
    def dimension(self) -> int:
        return len(self.active)

    def apply(self, u_slice: np.ndarray) -> np.ndarray:
        """Apply to a full time level (boundary values included); returns values on the active nodes."""
        flat = np.asarray(u_slice, dtype=float).ravel()
        return self.matrix @ flat[self.active] + self.coupling @ flat[self.boundary]

    def scatter(self, values: np.ndarray, fill: float = 0.0) -> np.ndarray:
        out = np.full(int(np.prod(self.slice_shape)), fill, dtype=float)
        out[self.active] = values
        return out.reshape(self.slice_shape)


@dataclass(frozen=True)
class LcpSlice:
    """Find u >= psi with M u - q >= 0 and (M u - q) . (u - psi) = 0 on one time level."""
    M: SparseOperator
    q: np.ndarray
    psi: np.ndarray
    tag: int

    def __post_init__(self):
        n = self.M.dimension
        if self.q.shape != (n,) or self.psi.shape != (n,):
            raise ValueError('LCP vectors of shape {} / {} do not match dimension {}'.format(
                self.q.shape, self.psi.shape, n))

    @property
    def dimension(self) -> int:
        return self.M.dimension


def restrict(full: sp.spmatrix, active_mask: np.ndarray) -> SparseOperator:
    flat = active_mask.ravel()
    active = np.flatnonzero(flat)
    boundary = np.flatnonzero(~flat)
    rows = sp.csr_matrix(full)[active]
    return SparseOperator(
        matrix=sp.csr_matrix(rows[:, active]),
        coupling=sp.csr_matrix(rows[:, boundary]),
        active=active,
        boundary=boundary,
        slice_shape=tuple(active_mask.shape),
    )


def _lift(op: sp.spmatrix, axis: int, shape: Tuple[int, ...]) -> sp.csr_matrix:
    """Act with a 1d operator along one axis of a C-ordered array of the given shape."""
    out = None
    for k, n in enumerate(shape):
        block = op if k == axis else sp.identity(n, format='csr')
        out = block if out is None else sp.kron(out, block, format='csr')
    return sp.csr_matrix(out)


def _gradient_1d(n: int, h: float) -> sp.csr_matrix:
    """Nodes -> faces, (u[k+1] - u[k]) / h."""
    return sp.diags([-np.ones(n - 1), np.ones(n - 1)], [0, 1], shape=(n - 1, n), format='csr') / h


def _divergence_1d(n: int, h: float) -> sp.csr_matrix:
    """Faces -> nodes, (F[k+1/2] - F[k-1/2]) / h on interior nodes, zero rows at both ends."""
    main = np.ones(n - 1)
    main[0] = 0.0
    lower = -np.ones(n - 1)
    lower[-1] = 0.0
    return sp.diags([main, lower], [0, -1], shape=(n, n - 1), format='csr') / h


def _face_average_1d(n: int) -> sp.csr_matrix:
    """Faces -> interior nodes, mean of the two adjacent faces; zero rows at both ends."""
    main = np.full(n - 1, 0.5)
    main[0] = 0.0
    lower = np.full(n - 1, 0.5)
    lower[-1] = 0.0
    return sp.diags([main, lower], [0, -1], shape=(n, n - 1), format='csr')


def _centered_1d(n: int, h: float) -> sp.csr_matrix:
    return sp.csr_matrix(_face_average_1d(n) @ _gradient_1d(n, h))


def _upwind_1d(n: int, h: float, forward: bool) -> sp.csr_matrix:
    """One-sided difference; the node at the end lacking a neighbour uses the other side."""
    g = sp.lil_matrix((n, n))
    for k in range(n):
        if (forward and k < n - 1) or k == 0:
            g[k, k], g[k, k + 1] = -1.0, 1.0
        else:
            g[k, k - 1], g[k, k] = -1.0, 1.0
    return sp.csr_matrix(g) / h


def velocity_gradient(grid: GridSpec, i: int) -> sp.csr_matrix:
    return _lift(_gradient_1d(grid.n_v[i], grid.h_v[i]), i, grid.slice_shape)


def velocity_divergence(grid: GridSpec, i: int) -> sp.csr_matrix:
    shape = list(grid.slice_shape)
    shape[i] -= 1
    return _lift(_divergence_1d(grid.n_v[i], grid.h_v[i]), i, tuple(shape))


def velocity_face_average(grid: GridSpec, i: int) -> sp.csr_matrix:
    shape = list(grid.slice_shape)
    shape[i] -= 1
    return _lift(_face_average_1d(grid.n_v[i]), i, tuple(shape))


def velocity_centered(grid: GridSpec, i: int) -> sp.csr_matrix:
    return _lift(_centered_1d(grid.n_v[i], grid.h_v[i]), i, grid.slice_shape)


def diffusion_full(A: CoefficientField, time_index: int) -> sp.csr_matrix:
    """-div_v(A grad_v .) on every node of one time level.

    Diagonal entries of A enter through harmonic face averages, mixed entries
    through centered cross differences. Rows of velocity-boundary nodes carry
    no meaning.
    """
    grid = A.grid
    d = grid.d
    op = sp.csr_matrix((int(np.prod(grid.slice_shape)),) * 2)
    for i in range(d):
        a_face = A.face_coefficients(i, time_index).ravel()
        op = op + velocity_divergence(grid, i) @ sp.diags(a_face) @ velocity_gradient(grid, i)
        for j in range(d):
            if j == i:
                continue
            a_ij = A.entry(i, j, time_index).ravel()
            if np.any(a_ij != 0.0):
                op = op + velocity_centered(grid, i) @ sp.diags(a_ij) @ velocity_centered(grid, j)
    return sp.csr_matrix(-op)


def assemble_diffusion(A: CoefficientField, time_index: int,
                       active: Optional[np.ndarray] = None) -> SparseOperator:
    ok, report = verify_ellipticity(A)
    if not ok:
        raise ValueError('Coefficients fail the ellipticity check: {}'.format(report.as_dict()))
    if active is None:
        active = ~v_boundary_mask(A.grid)
    op = restrict(diffusion_full(A, time_index), active)
    if not A.is_diagonal:
        offdiag = op.matrix - sp.diags(op.matrix.diagonal())
        if offdiag.nnz and offdiag.data.max() > 0 or (op.coupling.nnz and op.coupling.data.max() > 0):
            warnings.warn('Mixed-derivative stencil produced positive off-diagonal entries at time index {}; '
                          'the scheme is not monotone there'.format(time_index))
    return op


@lru_cache(maxsize=8)
def transport_full(grid: GridSpec) -> sp.csr_matrix:
    """Upwind v . grad_x on every node of one time level, following the apply_Y convention."""
    d = grid.d
    v, _ = grid.slice_mesh()
    op = sp.csr_matrix((int(np.prod(grid.slice_shape)),) * 2)
    for i in range(d):
        vi = np.broadcast_to(v[i], grid.slice_shape).ravel()
        axis = d + i
        forward = _lift(_upwind_1d(grid.n_x[i], grid.h_x[i], True), axis, grid.slice_shape)
        backward = _lift(_upwind_1d(grid.n_x[i], grid.h_x[i], False), axis, grid.slice_shape)
        op = op + sp.diags(np.where(vi > 0, vi, 0.0)) @ forward + sp.diags(np.where(vi < 0, vi, 0.0)) @ backward
    return sp.csr_matrix(op)


def assemble_transport(grid: GridSpec, active: Optional[np.ndarray] = None) -> SparseOperator:
    if active is None:
        active = ~kolmogorov_slice_mask(grid)
    return restrict(transport_full(grid), active)


def build_time_step(A: CoefficientField, grid: GridSpec, time_index: int, f_slice: np.ndarray,
                    g_slice: np.ndarray, u_prev: np.ndarray, psi_slice: Optional[np.ndarray] = None) -> LcpSlice:
    """Implicit Euler step from level time_index-1 to time_index.

    M = I/h_t + D - T on the nodes off the Kolmogorov boundary and
    q = u_prev/h_t - f - (boundary couplings) . g.
    """
    if not 1 <= time_index < grid.n_t:
        raise ValueError('time_index must lie in [1, {}), got {}'.format(grid.n_t, time_index))
    unknown = ~kolmogorov_slice_mask(grid)
    diffusion = assemble_diffusion(A, time_index, unknown)
    transport = assemble_transport(grid, unknown)
    n = diffusion.dimension
    M = SparseOperator(
        matrix=sp.csr_matrix(sp.identity(n) / grid.h_t + diffusion.matrix - transport.matrix),
        coupling=sp.csr_matrix(diffusion.coupling - transport.coupling),
        active=diffusion.active,
        boundary=diffusion.boundary,
        slice_shape=diffusion.slice_shape,
    )
    g_flat = np.asarray(g_slice, dtype=float).ravel()
    q = (np.asarray(u_prev, dtype=float).ravel()[M.active] / grid.h_t
         - np.asarray(f_slice, dtype=float).ravel()[M.active]
         - M.coupling @ g_flat[M.boundary])
    if psi_slice is None:
        psi = np.full(n, -np.inf)
    else:
        psi = np.asarray(psi_slice, dtype=float).ravel()[M.active]
    return LcpSlice(M=M, q=q, psi=psi, tag=time_index)


def apply_operator(A: CoefficientField, u: ScalarField) -> ScalarField:
    """Discrete L u = div_v(A grad_v u) + Y u at every node; meaningful off the velocity boundary."""
    grid = u.grid
    out = np.empty(grid.shape)
    for k in range(grid.n_t):
        out[..., k] = -(diffusion_full(A, k) @ u.values[..., k].ravel()).reshape(grid.slice_shape)
    out[v_boundary_mask(grid)] = 0.0
    return ScalarField(grid, out + apply_Y(u).values)


def diagonal_dominance_margin(op: SparseOperator) -> np.ndarray:
    diag = op.matrix.diagonal()
    off = abs(op.matrix).sum(axis=1).A1 - np.abs(diag) + abs(op.coupling).sum(axis=1).A1
    return diag - off


def is_m_matrix(op: SparseOperator, tol: float = 1e-10) -> bool:
    diag = op.matrix.diagonal()
    offdiag = sp.csr_matrix(op.matrix - sp.diags(diag))
    nonpositive = (offdiag.nnz == 0 or offdiag.data.max() <= tol) and \
                  (op.coupling.nnz == 0 or op.coupling.data.max() <= tol)
    scale = max(1.0, float(np.max(np.abs(diag))))
    return bool(np.all(diag > 0) and nonpositive and np.all(diagonal_dominance_margin(op) >= -tol * scale))
