from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.sparse.linalg import spsolve
import scipy.sparse as sp

from .assembly import (assemble_diffusion, velocity_centered, velocity_divergence, velocity_face_average,
                       velocity_gradient)
from .coefficients import CoefficientField, verify_ellipticity
from .fields import (GridSpec, ScalarField, VFlux, apply_Y, face_weights, grad_v, grid_weights, kolmogorov_mask,
                     norm_hm1_v, v_boundary_mask)

NONNEG_TOL = 1e-12


@dataclass(frozen=True)
class FluxCertificate:
    j: VFlux
    potential: ScalarField
    divergence_residual: float


def _require_elliptic(A: CoefficientField):
    ok, report = verify_ellipticity(A)
    if not ok:
        raise ValueError('Coefficients fail the ellipticity check: {}'.format(report.as_dict()))


def _full_v_boundary(grid: GridSpec) -> np.ndarray:
    return np.repeat(v_boundary_mask(grid)[..., None], grid.n_t, axis=-1)


def divergence_A(j: VFlux, A: CoefficientField) -> ScalarField:
    """Discrete div_v(A j) on velocity-interior nodes, built from the operators of the diffusion assembly."""
    grid = j.grid
    d = grid.d
    out = np.zeros(grid.shape)
    for k in range(grid.n_t):
        level = np.zeros(int(np.prod(grid.slice_shape)))
        for i in range(d):
            a_face = A.face_coefficients(i, k)
            level += velocity_divergence(grid, i) @ (a_face * j.components[i][..., k]).ravel()
            for m in range(d):
                if m == i:
                    continue
                a_im = A.entry(i, m, k).ravel()
                if np.any(a_im != 0.0):
                    averaged = velocity_face_average(grid, m) @ j.components[m][..., k].ravel()
                    level += velocity_centered(grid, i) @ (a_im * averaged)
        out[..., k] = level.reshape(grid.slice_shape)
    out[_full_v_boundary(grid)] = 0.0
    return ScalarField(grid, out)


def recover_flux(w: ScalarField, f: ScalarField, A: CoefficientField, lift: bool = False) -> FluxCertificate:
    """Flux j = grad_v phi with div_v(A grad_v phi) = f - Y w on every (x, t) slice.

    phi vanishes on the velocity boundary; with lift=True it takes the
    boundary values of w instead, which makes j the minimiser of the energy
    gap also for data that do not vanish there.
    """
    _require_elliptic(A)
    grid = w.grid
    rhs = f.values - apply_Y(w).values
    phi = np.zeros(grid.shape)
    if lift:
        phi[_full_v_boundary(grid)] = w.values[_full_v_boundary(grid)]
    for k in range(grid.n_t):
        op = assemble_diffusion(A, k)
        level = phi[..., k].ravel()
        b = -rhs[..., k].ravel()[op.active] - op.coupling @ level[op.boundary]
        sol = np.atleast_1d(spsolve(sp.csc_matrix(op.matrix), b))
        if not np.all(np.isfinite(sol)):
            raise np.linalg.LinAlgError('Flux recovery solve failed at time index {}'.format(k))
        level[op.active] = sol
        phi[..., k] = level.reshape(grid.slice_shape)
    potential = ScalarField(grid, phi)
    j = grad_v(potential)
    residual = divergence_A(j, A).values - rhs
    residual[_full_v_boundary(grid)] = 0.0
    return FluxCertificate(j=j, potential=potential, divergence_residual=norm_hm1_v(ScalarField(grid, residual)))


def _faces_to_nodes(c: np.ndarray, axis: int) -> np.ndarray:
    first = np.take(c, [0], axis=axis)
    last = np.take(c, [-1], axis=axis)
    lo = np.concatenate([first, c], axis=axis)
    hi = np.concatenate([c, last], axis=axis)
    return 0.5 * (lo + hi)


def _energy(A: CoefficientField, a: VFlux, b: VFlux) -> float:
    """int A a . b over the grid: diagonal terms on the faces, mixed terms at nodes."""
    grid = a.grid
    d = grid.d
    total = 0.0
    for i in range(d):
        total += np.sum(face_weights(grid, i) * A.face_coefficients(i) * a.components[i] * b.components[i])
    weights = grid_weights(grid)
    for i in range(d):
        for m in range(d):
            if m == i:
                continue
            a_im = A.entry(i, m)
            if np.any(a_im != 0.0):
                total += np.sum(weights * a_im * _faces_to_nodes(a.components[i], i) * _faces_to_nodes(b.components[m], m))
    return float(total)


def eval_J_pair(u: ScalarField, j: VFlux, A: CoefficientField) -> float:
    """1/2 int A (grad_v u - j) . (grad_v u - j)."""
    if j.grid != u.grid or A.grid != u.grid:
        raise ValueError('eval_J_pair needs u, j and A on one grid')
    gap = grad_v(u) - j
    return 0.5 * _energy(A, gap, gap)


def eval_J(w: ScalarField, f: ScalarField, A: CoefficientField, lift: bool = False) -> float:
    return eval_J_pair(w, recover_flux(w, f, A, lift=lift).j, A)


def _require_test_function(phi: ScalarField):
    mask = _full_v_boundary(phi.grid)
    scale = max(1.0, float(np.max(np.abs(phi.values))))
    if np.any(np.abs(phi.values[mask]) > NONNEG_TOL * scale):
        raise ValueError('Test function must vanish on the velocity boundary')


def weak_residual(u: ScalarField, f: ScalarField, A: CoefficientField, phi: ScalarField) -> float:
    """int A grad_v u . grad_v phi + <f - Y u | phi>; zero for weak solutions."""
    _require_test_function(phi)
    pairing = np.sum(grid_weights(u.grid) * (f.values - apply_Y(u).values) * phi.values)
    return _energy(A, grad_v(u), grad_v(phi)) + float(pairing)


def variational_inequality_gap(u: ScalarField, w: ScalarField, f: ScalarField, A: CoefficientField,
                               psi: Optional[ScalarField] = None) -> float:
    """Weak residual of u tested with w - u; nonnegative for obstacle solutions and admissible w.

    Admissible competitors lie above psi and share the Kolmogorov-boundary data of u.
    """
    if psi is not None and np.any(w.values < psi.values - NONNEG_TOL):
        raise ValueError('Competitor w falls below the obstacle')
    boundary = kolmogorov_mask(u.grid)
    scale = max(1.0, float(np.max(np.abs(u.values))))
    if np.any(np.abs(w.values[boundary] - u.values[boundary]) > NONNEG_TOL * scale):
        raise ValueError('Competitor w must coincide with u on the Kolmogorov boundary')
    return weak_residual(u, f, A, w.like(w.values - u.values))


def is_nonneg_W(w: ScalarField, region=None) -> bool:
    """w >= 0 in the W sense on a sub-box, which reduces to w >= 0 at every node of it."""
    values = w.values if region is None else w.values[region]
    return bool(np.all(values >= -NONNEG_TOL))
