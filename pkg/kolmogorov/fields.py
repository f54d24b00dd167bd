from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Tuple

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .geometry import BoxDomain


@dataclass(frozen=True)
class GridSpec:
    dom: BoxDomain
    n_v: Tuple[int, ...]
    n_x: Tuple[int, ...]
    n_t: int

    def __post_init__(self):
        object.__setattr__(self, 'n_v', tuple(int(n) for n in np.atleast_1d(self.n_v)))
        object.__setattr__(self, 'n_x', tuple(int(n) for n in np.atleast_1d(self.n_x)))
        object.__setattr__(self, 'n_t', int(self.n_t))
        d = self.dom.d
        if len(self.n_v) != d or len(self.n_x) != d:
            raise ValueError('Grid node counts must have length d={}, got n_v={} n_x={}'.format(d, self.n_v, self.n_x))
        if min(self.n_v + self.n_x + (self.n_t,)) < 3:
            raise ValueError('grid axis below minimum 3: n_v={} n_x={} n_t={}'.format(self.n_v, self.n_x, self.n_t))

    @property
    def d(self) -> int:
        return self.dom.d

    @property
    def h_v(self) -> Tuple[float, ...]:
        return tuple((hi - lo) / (n - 1) for lo, hi, n in zip(self.dom.v_lo, self.dom.v_hi, self.n_v))

    @property
    def h_x(self) -> Tuple[float, ...]:
        return tuple((hi - lo) / (n - 1) for lo, hi, n in zip(self.dom.x_lo, self.dom.x_hi, self.n_x))

    @property
    def h_t(self) -> float:
        return (self.dom.t_hi - self.dom.t_lo) / (self.n_t - 1)

    @property
    def slice_shape(self) -> Tuple[int, ...]:
        return self.n_v + self.n_x

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.n_v + self.n_x + (self.n_t,)

    @property
    def v_axes(self):
        return [np.linspace(lo, hi, n) for lo, hi, n in zip(self.dom.v_lo, self.dom.v_hi, self.n_v)]

    @property
    def x_axes(self):
        return [np.linspace(lo, hi, n) for lo, hi, n in zip(self.dom.x_lo, self.dom.x_hi, self.n_x)]

    @property
    def t_axis(self):
        return np.linspace(self.dom.t_lo, self.dom.t_hi, self.n_t)

    def mesh(self):
        """Broadcastable (v, x, t) coordinate arrays of the full grid: lists of d arrays and one array."""
        axes = self.v_axes + self.x_axes + [self.t_axis]
        grids = np.meshgrid(*axes, indexing='ij', sparse=True)
        d = self.d
        return grids[:d], grids[d:2 * d], grids[2 * d]

    def slice_mesh(self):
        """Broadcastable (v, x) coordinate arrays over one time level."""
        grids = np.meshgrid(*(self.v_axes + self.x_axes), indexing='ij', sparse=True)
        return grids[:self.d], grids[self.d:]

    def refine(self, factor: int = 2) -> 'GridSpec':
        return GridSpec(self.dom, tuple(factor * (n - 1) + 1 for n in self.n_v),
                        tuple(factor * (n - 1) + 1 for n in self.n_x), factor * (self.n_t - 1) + 1)


@dataclass(frozen=True)
class ScalarField:
    grid: GridSpec
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.shape != self.grid.shape:
            raise ValueError('Field of shape {} does not match grid shape {}'.format(values.shape, self.grid.shape))
        if not np.all(np.isfinite(values)):
            raise ValueError('Field values must be finite')
        object.__setattr__(self, 'values', values)

    @classmethod
    def from_function(cls, grid: GridSpec, fn: Callable) -> 'ScalarField':
        v, x, t = grid.mesh()
        return cls(grid, np.broadcast_to(np.asarray(fn(v, x, t), dtype=float), grid.shape).copy())

    @classmethod
    def constant(cls, grid: GridSpec, c: float) -> 'ScalarField':
        return cls(grid, np.full(grid.shape, float(c)))

    def like(self, values) -> 'ScalarField':
        return ScalarField(self.grid, values)

    def time_slice(self, k: int) -> np.ndarray:
        return self.values[..., k]


@dataclass(frozen=True)
class VFlux:
    """Velocity flux; component i lives on the faces between neighbours along v_i."""
    grid: GridSpec
    components: Tuple[np.ndarray, ...]

    def __post_init__(self):
        comps = tuple(np.asarray(c, dtype=float) for c in self.components)
        if len(comps) != self.grid.d:
            raise ValueError('VFlux needs {} components, got {}'.format(self.grid.d, len(comps)))
        for i, c in enumerate(comps):
            expected = face_shape(self.grid, i)
            if c.shape != expected:
                raise ValueError('Flux component {} has shape {}, expected {}'.format(i, c.shape, expected))
            if not np.all(np.isfinite(c)):
                raise ValueError('Flux values must be finite')
        object.__setattr__(self, 'components', comps)

    def __sub__(self, other: 'VFlux') -> 'VFlux':
        return VFlux(self.grid, tuple(a - b for a, b in zip(self.components, other.components)))


def face_shape(grid: GridSpec, i: int) -> Tuple[int, ...]:
    shape = list(grid.shape)
    shape[i] -= 1
    return tuple(shape)


def trapezoid_weights(n: int, h: float) -> np.ndarray:
    w = np.full(n, h)
    w[0] = w[-1] = 0.5 * h
    return w


def _outer(weights):
    out = np.ones(())
    for w in weights:
        out = np.multiply.outer(out, w)
    return out


def v_weights(grid: GridSpec) -> np.ndarray:
    return _outer([trapezoid_weights(n, h) for n, h in zip(grid.n_v, grid.h_v)])


def xt_weights(grid: GridSpec) -> np.ndarray:
    return _outer([trapezoid_weights(n, h) for n, h in zip(grid.n_x, grid.h_x)]
                  + [trapezoid_weights(grid.n_t, grid.h_t)])


def grid_weights(grid: GridSpec) -> np.ndarray:
    return np.multiply.outer(v_weights(grid), xt_weights(grid))


def face_v_weights(grid: GridSpec, i: int) -> np.ndarray:
    """Velocity quadrature on the faces along v_i: midpoint rule along i, trapezoid elsewhere."""
    ws = [trapezoid_weights(n, h) for n, h in zip(grid.n_v, grid.h_v)]
    ws[i] = np.full(grid.n_v[i] - 1, grid.h_v[i])
    return _outer(ws)


def face_weights(grid: GridSpec, i: int) -> np.ndarray:
    return np.multiply.outer(face_v_weights(grid, i), xt_weights(grid))


def inner_l2(a: ScalarField, b: ScalarField) -> float:
    return float(np.sum(grid_weights(a.grid) * a.values * b.values))


def grad_v(u: ScalarField) -> VFlux:
    return VFlux(u.grid, tuple(np.diff(u.values, axis=i) / h for i, h in enumerate(u.grid.h_v)))


def norm_flux(j: VFlux) -> float:
    return float(np.sqrt(sum(np.sum(face_weights(j.grid, i) * c ** 2) for i, c in enumerate(j.components))))


def norm_l2(u: ScalarField) -> float:
    return float(np.sqrt(np.sum(grid_weights(u.grid) * u.values ** 2)))


def _v_axes_sum(grid: GridSpec, weights: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Integrate over the velocity axes, leaving an (x, t) array."""
    weights = weights.reshape(weights.shape + (1,) * (grid.d + 1))
    return np.sum(weights * values, axis=tuple(range(grid.d)))


def _slice_gradient_sq(grid: GridSpec, values: np.ndarray) -> np.ndarray:
    total = 0.0
    for i, h in enumerate(grid.h_v):
        total = total + _v_axes_sum(grid, face_v_weights(grid, i), (np.diff(values, axis=i) / h) ** 2)
    return total


def _aggregate_xt(grid: GridSpec, per_slice: np.ndarray) -> float:
    return float(np.sqrt(np.sum(xt_weights(grid) * per_slice ** 2)))


def norm_h1_v(u: ScalarField) -> float:
    """L2 over (x,t) of ||u||_{L2(v)} + ||grad_v u||_{L2(v)}, the sum form of the H1 norm."""
    grid = u.grid
    l2 = np.sqrt(_v_axes_sum(grid, v_weights(grid), u.values ** 2))
    grad = np.sqrt(_slice_gradient_sq(grid, u.values))
    return _aggregate_xt(grid, l2 + grad)


def _laplacian_1d(n: int, h: float) -> sp.csr_matrix:
    m = n - 2
    return sp.diags([-np.ones(m - 1), 2.0 * np.ones(m), -np.ones(m - 1)], [-1, 0, 1], format='csr') / h ** 2


@lru_cache(maxsize=16)
def _dirichlet_laplacian_factor(n_v: Tuple[int, ...], h_v: Tuple[float, ...]):
    d = len(n_v)
    op = None
    for i in range(d):
        blocks = [sp.identity(n - 2, format='csr') for n in n_v]
        blocks[i] = _laplacian_1d(n_v[i], h_v[i])
        term = blocks[0]
        for b in blocks[1:]:
            term = sp.kron(term, b, format='csr')
        op = term if op is None else op + term
    return splu(op.tocsc())


def solve_v_dirichlet(grid: GridSpec, rhs: np.ndarray) -> np.ndarray:
    """Solve -Laplace_v w = rhs with w = 0 on the velocity boundary, for every (x, t) column at once."""
    d = grid.d
    interior = tuple(slice(1, -1) for _ in range(d))
    rest = rhs.shape[d:]
    b = rhs[interior].reshape(-1, int(np.prod(rest)) if rest else 1)
    try:
        w_int = _dirichlet_laplacian_factor(grid.n_v, grid.h_v).solve(np.ascontiguousarray(b))
    except RuntimeError as e:
        raise np.linalg.LinAlgError('Velocity Dirichlet solve failed: {}'.format(e))
    w = np.zeros(rhs.shape)
    w[interior] = w_int.reshape(tuple(n - 2 for n in grid.n_v) + rest)
    return w


def norm_hm1_v(g: ScalarField) -> float:
    """L2 over (x,t) of the H^-1(v) norm, realised as ||grad_v w|| with -Laplace_v w = g, w = 0 on the v-boundary."""
    grid = g.grid
    w = solve_v_dirichlet(grid, g.values)
    return _aggregate_xt(grid, np.sqrt(_slice_gradient_sq(grid, w)))


def _one_sided(values: np.ndarray, axis: int, h: float):
    """Forward and backward differences, each completed by the other one at the end lacking a neighbour."""
    diff = np.diff(values, axis=axis) / h
    first = np.take(diff, [0], axis=axis)
    last = np.take(diff, [-1], axis=axis)
    forward = np.concatenate([diff, last], axis=axis)
    backward = np.concatenate([first, diff], axis=axis)
    return forward, backward


def apply_Y(u: ScalarField) -> ScalarField:
    """Upwind transport Y u = v . grad_x u - d_t u.

    Along x_i the difference reaches towards sign(v_i), i.e. towards the face
    where v . N_x > 0; d_t is a backward difference.
    """
    grid = u.grid
    d = grid.d
    v, _, _ = grid.mesh()
    out = np.zeros(grid.shape)
    for i in range(d):
        forward, backward = _one_sided(u.values, d + i, grid.h_x[i])
        out += np.where(v[i] > 0, v[i] * forward, v[i] * backward)
    _, dt_backward = _one_sided(u.values, 2 * d, grid.h_t)
    return ScalarField(grid, out - dt_backward)


def norm_W(u: ScalarField) -> float:
    return norm_h1_v(u) + norm_hm1_v(apply_Y(u))


def v_boundary_mask(grid: GridSpec) -> np.ndarray:
    """Nodes of one time level lying on the velocity boundary."""
    mask = np.zeros(grid.slice_shape, dtype=bool)
    for i in range(grid.d):
        idx = [slice(None)] * len(grid.slice_shape)
        for end in (0, -1):
            idx[i] = end
            mask[tuple(idx)] = True
    return mask


def poincare_ratio(u: ScalarField) -> float:
    grid = u.grid
    scale = max(1.0, float(np.max(np.abs(u.values))))
    if np.any(np.abs(u.values[v_boundary_mask(grid)]) > 1e-12 * scale):
        raise ValueError('poincare_ratio needs a field vanishing on the velocity boundary')
    grad = norm_flux(grad_v(u))
    if grad == 0.0:
        raise ValueError('poincare_ratio is undefined for a field with zero velocity gradient')
    return norm_l2(u) / grad


def kolmogorov_slice_mask(grid: GridSpec) -> np.ndarray:
    """Kolmogorov-boundary nodes of a time level after the first one.

    Velocity faces, plus x_i = lo nodes with v_i < 0 and x_i = hi nodes with
    v_i > 0; an edge counts as soon as one adjacent face does.
    """
    d = grid.d
    mask = v_boundary_mask(grid)
    v, _ = grid.slice_mesh()
    for i in range(d):
        lo = [slice(None)] * (2 * d)
        hi = [slice(None)] * (2 * d)
        lo[d + i] = 0
        hi[d + i] = -1
        vi = np.broadcast_to(v[i], grid.slice_shape)
        mask[tuple(lo)] |= vi[tuple(lo)] < 0
        mask[tuple(hi)] |= vi[tuple(hi)] > 0
    return mask


def kolmogorov_mask(grid: GridSpec) -> np.ndarray:
    mask = np.repeat(kolmogorov_slice_mask(grid)[..., None], grid.n_t, axis=-1)
    mask[..., 0] = True
    return mask
