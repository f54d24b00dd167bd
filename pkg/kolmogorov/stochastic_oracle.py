"""Optimal stopping of the kinetic Langevin process, as an independent check of the obstacle solver.

The state (V, X) follows dV = sqrt(2) dW, dX = V dt, whose generator is
Laplace_v + v . grad_x, i.e. the operator with A = I. The stopping value
u(v, x, t) = sup_tau E[psi(V_tau, X_tau)] on [t, T] is compared with the
PDE solution written in time-to-horizon s = T - t: the PDE march starts
from psi on the s = 0 face and runs forward in s, the stopping recursion
runs backward in real time. Both live on one GridSpec whose t-axis is s.
"""
import itertools
import warnings
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Tuple

import numpy as np
from scipy.interpolate import RegularGridInterpolator
from scipy.special import roots_hermitenorm
from tqdm import tqdm

from .fields import GridSpec, ScalarField
from .geometry import BoxDomain

PAYOFF_BOUND = 1e12
INTERPOLATION = ('linear', 'cubic')


@dataclass(frozen=True)
class PathBatch:
    times: np.ndarray
    V: np.ndarray
    X: np.ndarray
    seed: int

    def __post_init__(self):
        if self.V.shape != self.X.shape or self.V.shape[1] != len(self.times):
            raise ValueError('Inconsistent path shapes: V {} X {} times {}'.format(
                self.V.shape, self.X.shape, self.times.shape))

    @property
    def n_paths(self) -> int:
        return self.V.shape[0]


@dataclass(frozen=True)
class StoppingValue:
    value: float
    standard_error: float
    n_paths: int
    basis_degree: Optional[int] = None
    rank_deficient: bool = False

    def __post_init__(self):
        if not self.standard_error >= 0:
            raise ValueError('standard_error must be nonnegative, got {}'.format(self.standard_error))

    def as_dict(self):
        return {
            'value': self.value,
            'standard_error': self.standard_error,
            'n_paths': self.n_paths,
            'basis_degree': self.basis_degree,
            'rank_deficient': self.rank_deficient,
        }


@dataclass(frozen=True)
class GapReport:
    max_gap: float
    mean_gap: float
    tolerance: float
    n_nodes: int

    @property
    def passed(self) -> bool:
        return self.max_gap <= self.tolerance

    def as_dict(self):
        return {
            'max_gap': self.max_gap,
            'mean_gap': self.mean_gap,
            'tolerance': self.tolerance,
            'n_nodes': self.n_nodes,
            'passed': self.passed,
        }


def to_time_to_horizon(t, T: float):
    """Map stopping-problem time t in [0, T] to the PDE time axis s = T - t."""
    return T - np.asarray(t, dtype=float)


def step_covariance(dt: float) -> np.ndarray:
    """Covariance of (V increment, X increment minus V dt) over one step of length dt."""
    return np.array([[2.0 * dt, dt ** 2], [dt ** 2, 2.0 * dt ** 3 / 3.0]])


def _rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed))


def simulate_paths(start: Tuple[Sequence[float], Sequence[float]], t0: float, T: float, n_steps: int,
                   n_paths: int, seed: int, antithetic: bool = False) -> PathBatch:
    """Sample (V, X) on a uniform time grid exactly in distribution, step by step.

    Each step draws the jointly Gaussian increment through the Cholesky factor
    of step_covariance. With antithetic=True the second half of the paths
    uses the negated normals of the first half.
    """
    v0 = np.atleast_1d(np.asarray(start[0], dtype=float))
    x0 = np.atleast_1d(np.asarray(start[1], dtype=float))
    if v0.shape != x0.shape:
        raise ValueError('Start velocity and position need the same length')
    if not T > t0:
        raise ValueError('Need T > t0, got t0={} T={}'.format(t0, T))
    if n_steps < 0 or n_paths < 1:
        raise ValueError('Invalid step/path counts: n_steps={} n_paths={}'.format(n_steps, n_paths))
    if antithetic and n_paths % 2:
        raise ValueError('Antithetic sampling needs an even number of paths, got {}'.format(n_paths))
    d = len(v0)
    times = np.linspace(t0, T, n_steps + 1)
    V = np.broadcast_to(v0, (n_paths, n_steps + 1, d)).copy()
    X = np.broadcast_to(x0, (n_paths, n_steps + 1, d)).copy()
    if n_steps == 0:
        return PathBatch(times, V, X, seed)

    dt = (T - t0) / n_steps
    L = np.linalg.cholesky(step_covariance(dt))
    rng = _rng(seed)
    if antithetic:
        half = rng.standard_normal((n_paths // 2, n_steps, d, 2))
        z = np.concatenate([half, -half], axis=0)
    else:
        z = rng.standard_normal((n_paths, n_steps, d, 2))
    dV = L[0, 0] * z[..., 0]
    noise = L[1, 0] * z[..., 0] + L[1, 1] * z[..., 1]
    V[:, 1:] = v0 + np.cumsum(dV, axis=1)
    X[:, 1:] = x0 + np.cumsum(V[:, :-1] * dt + noise, axis=1)
    return PathBatch(times, V, X, seed)


def _clip_payoff(values: np.ndarray) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    bad = ~np.isfinite(values) | (np.abs(values) > PAYOFF_BOUND)
    if np.any(bad):
        warnings.warn('Payoff unbounded on {} grid nodes; clipped to +-{:.0e}'.format(int(bad.sum()), PAYOFF_BOUND))
        values = np.clip(np.nan_to_num(values, nan=0.0, posinf=PAYOFF_BOUND, neginf=-PAYOFF_BOUND),
                         -PAYOFF_BOUND, PAYOFF_BOUND)
    return values


def _quadrature(d: int, order: int, dt: float):
    """Tensor Gauss-Hermite rule for the one-step increment of d independent (V, X) pairs.

    Returns velocity shifts and position noise, each of shape (n_points, d), and weights.
    """
    z, w = roots_hermitenorm(order)
    w = w / w.sum()
    L = np.linalg.cholesky(step_covariance(dt))
    idx = np.array(list(itertools.product(range(order), repeat=2 * d)))
    weights = np.prod(w[idx], axis=1)
    z0 = z[idx[:, :d]]
    z1 = z[idx[:, d:]]
    return L[0, 0] * z0, L[1, 0] * z0 + L[1, 1] * z1, weights


def _slice_points(grid: GridSpec) -> np.ndarray:
    axes = grid.v_axes + grid.x_axes
    mesh = np.meshgrid(*axes, indexing='ij')
    return np.stack([m.ravel() for m in mesh], axis=-1)


def value_by_dynamic_programming(payoff: np.ndarray, grid: GridSpec, gh_order: int = 8,
                                 early_exercise: bool = True, progress: bool = False,
                                 interpolation: str = 'linear') -> ScalarField:
    """Backward recursion u = max(psi, E[u after one exact Gaussian step]) on the (v, x) nodes.

    The returned field uses time-to-horizon on its t-axis: level 0 is the
    payoff, the last level is the value at real time 0. The conditional
    expectation uses Gauss-Hermite quadrature and interpolation on the grid,
    with transitions leaving the box clamped to it.

    interpolation='linear' keeps the recursion monotone in the payoff and
    smooths by O(h^2) per step. 'cubic' is not monotone and smooths by
    O(h^4) per step away from kinks.
    """
    if interpolation not in INTERPOLATION:
        raise ValueError('interpolation must be one of {}, got {}'.format(INTERPOLATION, interpolation))
    if interpolation == 'cubic' and min(grid.n_v + grid.n_x) < 4:
        raise ValueError('cubic interpolation needs at least 4 nodes per axis')
    psi = _clip_payoff(np.broadcast_to(payoff, grid.slice_shape))
    d = grid.d
    dt = grid.h_t
    shift_v, noise_x, weights = _quadrature(d, gh_order, dt)
    nodes = _slice_points(grid)
    lo = np.array(grid.dom.v_lo + grid.dom.x_lo)
    hi = np.array(grid.dom.v_hi + grid.dom.x_hi)

    v = nodes[:, None, :d]
    x = nodes[:, None, d:]
    targets = np.concatenate([v + shift_v[None], x + v * dt + noise_x[None]], axis=-1)
    targets = np.clip(targets, lo, hi).reshape(-1, 2 * d)

    values = np.empty(grid.shape)
    values[..., 0] = psi
    axes = tuple(grid.v_axes + grid.x_axes)
    for k in tqdm(range(1, grid.n_t), disable=not progress, desc='dp'):
        interp = RegularGridInterpolator(axes, values[..., k - 1], method=interpolation)
        cont = (interp(targets).reshape(len(nodes), -1) @ weights).reshape(grid.slice_shape)
        values[..., k] = np.maximum(psi, cont) if early_exercise else cont
    return ScalarField(grid, values)


def european_value_by_dynamic_programming(payoff: np.ndarray, grid: GridSpec, gh_order: int = 8,
                                          progress: bool = False, interpolation: str = 'linear') -> ScalarField:
    return value_by_dynamic_programming(payoff, grid, gh_order, early_exercise=False, progress=progress,
                                        interpolation=interpolation)


def interpolate_at(field: ScalarField, v: Sequence[float], x: Sequence[float], time_index: int = -1) -> float:
    grid = field.grid
    interp = RegularGridInterpolator(tuple(grid.v_axes + grid.x_axes), field.values[..., time_index],
                                     method='linear')
    return float(interp(np.concatenate([np.atleast_1d(v), np.atleast_1d(x)]).astype(float)[None])[0])


def _evaluate(payoff_fn: Callable, V: np.ndarray, X: np.ndarray) -> np.ndarray:
    d = V.shape[-1]
    out = payoff_fn([V[..., i] for i in range(d)], [X[..., i] for i in range(d)])
    return np.broadcast_to(np.asarray(out, dtype=float), V.shape[:-1]).copy()


def _mean_and_error(samples: np.ndarray) -> Tuple[float, float]:
    n = len(samples)
    se = float(np.std(samples, ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    return float(np.mean(samples)), se


def monte_carlo_terminal_value(payoff_fn: Callable, start, T: float, n_paths: int, seed: int,
                               antithetic: bool = False) -> StoppingValue:
    """Plain Monte-Carlo E[psi(V_T, X_T)] (no early exercise)."""
    paths = simulate_paths(start, 0.0, T, 1, n_paths, seed, antithetic)
    value, se = _mean_and_error(_evaluate(payoff_fn, paths.V[:, -1], paths.X[:, -1]))
    return StoppingValue(value, se, n_paths)


def _basis(V: np.ndarray, X: np.ndarray, degree: int) -> np.ndarray:
    """Monomials of total degree <= degree in the standardised (v, x) components."""
    z = np.concatenate([V, X], axis=-1)
    scale = z.std(axis=0)
    z = (z - z.mean(axis=0)) / np.where(scale > 0, scale, 1.0)
    columns = [np.ones(len(z))]
    for deg in range(1, degree + 1):
        for combo in itertools.combinations_with_replacement(range(z.shape[1]), deg):
            columns.append(np.prod(z[:, combo], axis=1))
    return np.stack(columns, axis=1)


def lsmc_value(payoff_fn: Callable, start, T: float, n_paths: int, basis_degree: int, seed: int,
               n_steps: int = 64, antithetic: bool = False) -> StoppingValue:
    """Longstaff-Schwartz estimate of the stopping value at (start, t = 0).

    Continuation values are regressed on polynomials in (v, x) over the paths
    with positive immediate payoff. When a regression is rank deficient the
    degree is lowered and the report flags it.
    """
    if basis_degree < 1:
        raise ValueError('basis_degree must be >= 1, got {}'.format(basis_degree))
    paths = simulate_paths(start, 0.0, T, n_steps, n_paths, seed, antithetic)
    payoff = _evaluate(payoff_fn, paths.V, paths.X)
    cash = payoff[:, -1].copy()
    degree = basis_degree
    deficient = False
    for k in range(n_steps - 1, 0, -1):
        itm = np.flatnonzero(payoff[:, k] > 0)
        if len(itm) == 0:
            continue
        while True:
            B = _basis(paths.V[itm, k], paths.X[itm, k], degree)
            beta, _, rank, _ = np.linalg.lstsq(B, cash[itm], rcond=None)
            if rank == B.shape[1] or degree == 0:
                break
            degree -= 1
            deficient = True
            warnings.warn('LSMC regression rank deficient at step {}; lowering basis degree to {}'.format(k, degree))
        exercise = payoff[itm, k] > B @ beta
        cash[itm[exercise]] = payoff[itm[exercise], k]
    immediate = float(payoff[0, 0])
    value, se = _mean_and_error(cash)
    if immediate >= value:
        return StoppingValue(immediate, 0.0, n_paths, degree, deficient)
    return StoppingValue(value, se, n_paths, degree, deficient)


def dirichlet_value_mc(boundary_fn: Callable, dom: BoxDomain, start, s: float, n_steps: int, n_paths: int,
                       seed: int) -> StoppingValue:
    """Feynman-Kac value of the unconstrained problem on the truncated box.

    Paths run for a time s from start; a path leaving the (v, x) box collects
    boundary_fn at its exit point (clamped to the box) and remaining horizon
    s - tau, a surviving path collects boundary_fn(V_s, X_s, 0). Exit is
    monitored on the step grid.
    """
    paths = simulate_paths(start, 0.0, s, n_steps, n_paths, seed)
    lo = np.array(dom.v_lo + dom.x_lo)
    hi = np.array(dom.v_hi + dom.x_hi)
    state = np.concatenate([paths.V, paths.X], axis=-1)
    outside = np.any((state < lo) | (state > hi), axis=-1)
    exited = outside.any(axis=1)
    first = np.where(exited, outside.argmax(axis=1), n_steps)
    rows = np.arange(n_paths)
    exit_state = np.clip(state[rows, first], lo, hi)
    remaining = s - paths.times[first]
    d = dom.d
    samples = boundary_fn([exit_state[:, i] for i in range(d)], [exit_state[:, d + i] for i in range(d)], remaining)
    value, se = _mean_and_error(np.broadcast_to(np.asarray(samples, dtype=float), (n_paths,)))
    return StoppingValue(value, se, n_paths)


def compare_with_pde(u_pde: ScalarField, oracle: ScalarField, probe: Optional[BoxDomain] = None,
                     tolerance: float = 5e-2, time_index: int = -1) -> GapReport:
    """Gap statistics between two fields on the (v, x) nodes of a probe box at one time level."""
    if u_pde.grid != oracle.grid:
        raise ValueError('PDE and oracle fields must share a grid')
    grid = u_pde.grid
    v, x = grid.slice_mesh()
    mask = np.ones(grid.slice_shape, dtype=bool)
    if probe is not None:
        for i in range(grid.d):
            mask &= (v[i] >= probe.v_lo[i] - 1e-12) & (v[i] <= probe.v_hi[i] + 1e-12)
            mask &= (x[i] >= probe.x_lo[i] - 1e-12) & (x[i] <= probe.x_hi[i] + 1e-12)
    gap = np.abs(u_pde.values[..., time_index] - oracle.values[..., time_index])[mask]
    if gap.size == 0:
        raise ValueError('Probe box contains no grid nodes')
    return GapReport(float(gap.max()), float(gap.mean()), tolerance, int(gap.size))
