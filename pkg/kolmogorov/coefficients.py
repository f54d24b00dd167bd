from dataclasses import dataclass
from functools import cached_property
from typing import Optional, Sequence, Tuple

import numpy as np

from .fields import GridSpec

SYMMETRY_TOL = 1e-12
SPECTRUM_TOL = 1e-10


@dataclass(frozen=True)
class EllipticityReport:
    ok: bool
    symmetric: bool
    min_eigenvalue: float
    min_node: Tuple[int, ...]
    max_eigenvalue: float
    max_node: Tuple[int, ...]
    lam: float
    Lam: float

    def as_dict(self):
        return {
            'ok': self.ok,
            'symmetric': self.symmetric,
            'min_eigenvalue': self.min_eigenvalue,
            'min_node': list(self.min_node),
            'max_eigenvalue': self.max_eigenvalue,
            'max_node': list(self.max_node),
            'lambda': self.lam,
            'Lambda': self.Lam,
        }


@dataclass(frozen=True)
class CoefficientField:
    """Nodal diffusion matrices A(v,x,t), shape grid.shape + (d, d), with declared bounds lam <= Lam."""
    grid: GridSpec
    matrices: np.ndarray
    lam: float
    Lam: float

    def __post_init__(self):
        d = self.grid.d
        matrices = np.asarray(self.matrices, dtype=float)
        if matrices.shape != self.grid.shape + (d, d):
            raise ValueError('Coefficient array of shape {} does not match {}'.format(
                matrices.shape, self.grid.shape + (d, d)))
        if not 0 < self.lam <= self.Lam:
            raise ValueError('Ellipticity bounds need 0 < lambda <= Lambda, got {} and {}'.format(self.lam, self.Lam))
        object.__setattr__(self, 'matrices', matrices)

    @property
    def d(self) -> int:
        return self.grid.d

    @cached_property
    def is_diagonal(self) -> bool:
        off = self.matrices * (1.0 - np.eye(self.d))
        return bool(np.all(off == 0.0))

    @cached_property
    def report(self) -> EllipticityReport:
        return _ellipticity_report(self)

    def entry(self, i: int, j: int, time_index: Optional[int] = None) -> np.ndarray:
        a = self.matrices[..., i, j]
        return a if time_index is None else a[..., time_index]

    def face_coefficients(self, i: int, time_index: Optional[int] = None) -> np.ndarray:
        """Harmonic average of a_ii between neighbours along v_i (on one time level when time_index is given)."""
        a = self.entry(i, i, time_index)
        lo = np.take(a, np.arange(a.shape[i] - 1), axis=i)
        hi = np.take(a, np.arange(1, a.shape[i]), axis=i)
        return 2.0 * lo * hi / (lo + hi)


def _ellipticity_report(A: CoefficientField) -> EllipticityReport:
    m = A.matrices
    symmetric = bool(np.all(np.abs(m - np.swapaxes(m, -1, -2)) <= SYMMETRY_TOL))
    eig = np.linalg.eigvalsh(0.5 * (m + np.swapaxes(m, -1, -2)))
    lo = eig[..., 0]
    hi = eig[..., -1]
    min_node = np.unravel_index(np.argmin(lo), lo.shape)
    max_node = np.unravel_index(np.argmax(hi), hi.shape)
    ok = symmetric and lo[min_node] >= A.lam - SPECTRUM_TOL and hi[max_node] <= A.Lam + SPECTRUM_TOL
    return EllipticityReport(
        ok=bool(ok),
        symmetric=symmetric,
        min_eigenvalue=float(lo[min_node]),
        min_node=tuple(int(k) for k in min_node),
        max_eigenvalue=float(hi[max_node]),
        max_node=tuple(int(k) for k in max_node),
        lam=A.lam,
        Lam=A.Lam,
    )


def verify_ellipticity(A: CoefficientField) -> Tuple[bool, EllipticityReport]:
    report = A.report
    return report.ok, report


def _broadcast(grid: GridSpec, matrix: np.ndarray) -> np.ndarray:
    return np.broadcast_to(matrix, grid.shape + matrix.shape).copy()


def _spectrum(matrix: np.ndarray) -> Tuple[float, float]:
    eig = np.linalg.eigvalsh(matrix)
    return float(eig[0]), float(eig[-1])


def _as_matrix(values, d: int, name: str) -> np.ndarray:
    a = np.asarray(values, dtype=float)
    if a.ndim == 1:
        a = np.diag(a)
    if a.shape != (d, d):
        raise ValueError('{} must be a length-{} diagonal or a {}x{} matrix, got shape {}'.format(name, d, d, d, a.shape))
    if not np.allclose(a, a.T, atol=SYMMETRY_TOL):
        raise ValueError('{} must be symmetric'.format(name))
    return a


def identity(grid: GridSpec) -> CoefficientField:
    return CoefficientField(grid, _broadcast(grid, np.eye(grid.d)), 1.0, 1.0)


def diagonal(grid: GridSpec, values: Sequence[float], lam: Optional[float] = None,
             Lam: Optional[float] = None) -> CoefficientField:
    a = _as_matrix(values, grid.d, 'diagonal values')
    if np.any(np.diag(a) <= 0):
        raise ValueError('diagonal values must be positive, got {}'.format(np.diag(a)))
    lo, hi = _spectrum(a)
    return CoefficientField(grid, _broadcast(grid, a), lo if lam is None else lam, hi if Lam is None else Lam)


def checkerboard(grid: GridSpec, a1, a2, period: int = 1, lam: Optional[float] = None,
                 Lam: Optional[float] = None) -> CoefficientField:
    """Alternate two matrices over blocks of `period` cells along every axis of the grid."""
    if period < 1:
        raise ValueError('checkerboard period must be >= 1, got {}'.format(period))
    m1 = _as_matrix(a1, grid.d, 'A1')
    m2 = _as_matrix(a2, grid.d, 'A2')
    lo1, hi1 = _spectrum(m1)
    lo2, hi2 = _spectrum(m2)
    if min(lo1, lo2) <= 0:
        raise ValueError('checkerboard matrices must be positive definite')
    parity = sum(np.indices(grid.shape) // period) % 2
    matrices = np.where(parity[..., None, None] == 0, m1, m2)
    return CoefficientField(grid, matrices, min(lo1, lo2) if lam is None else lam,
                            max(hi1, hi2) if Lam is None else Lam)


def random_spd(grid: GridSpec, lam: float, Lam: float, seed: int) -> CoefficientField:
    """Symmetric matrices Q diag(e) Q^T with e uniform in [lam, Lam] and a random orthogonal Q per node."""
    if not 0 < lam <= Lam:
        raise ValueError('random_spd needs 0 < lambda <= Lambda, got {} and {}'.format(lam, Lam))
    d = grid.d
    rng = np.random.default_rng(seed)
    eig = rng.uniform(lam, Lam, size=grid.shape + (d,))
    q, r = np.linalg.qr(rng.standard_normal(grid.shape + (d, d)))
    q = q * np.sign(np.diagonal(r, axis1=-2, axis2=-1))[..., None, :]
    matrices = np.einsum('...ik,...k,...jk->...ij', q, eig, q)
    matrices = 0.5 * (matrices + np.swapaxes(matrices, -1, -2))
    return CoefficientField(grid, matrices, lam, Lam)


def make_coefficients(kind: str, grid: GridSpec, **params) -> CoefficientField:
    if kind == 'identity':
        return identity(grid)
    elif kind == 'diagonal':
        return diagonal(grid, params['values'], params.get('lam'), params.get('Lam'))
    elif kind == 'checkerboard':
        return checkerboard(grid, params['a1'], params['a2'], params.get('period', 1),
                            params.get('lam'), params.get('Lam'))
    elif kind == 'random_spd':
        return random_spd(grid, params['lam'], params['Lam'], params.get('seed', 0))
    raise ValueError('Unknown coefficient kind: {}'.format(kind))
