import numpy as np
import pytest
import scipy.sparse as sp

from kolmogorov.assembly import apply_operator, assemble_diffusion, assemble_transport, build_time_step, \
    diagonal_dominance_margin, diffusion_full, is_m_matrix, restrict, transport_full
from kolmogorov.coefficients import CoefficientField, checkerboard, diagonal, identity, random_spd
from kolmogorov.expressions import ExpressionSpec, kfp_forcing
from kolmogorov.fields import GridSpec, ScalarField, kolmogorov_slice_mask, v_boundary_mask
from kolmogorov.geometry import BoxDomain


def _row(op, grid, index):
    return np.asarray(op[np.ravel_multi_index(index, grid.slice_shape)].todense()).ravel()


def test_identity_stencil(unit_grid):
    op = diffusion_full(identity(unit_grid), 0)
    h = unit_grid.h_v[0]
    row = _row(op, unit_grid, (5, 3))
    k = np.ravel_multi_index((5, 3), unit_grid.slice_shape)
    stride = unit_grid.n_x[0]
    np.testing.assert_allclose([row[k - stride], row[k], row[k + stride]], np.array([-1.0, 2.0, -1.0]) / h ** 2)
    assert np.count_nonzero(row) == 3


def test_checkerboard_harmonic_face(unit_grid):
    A = checkerboard(unit_grid, [1.0], [3.0], period=1)
    op = diffusion_full(A, 0)
    h = unit_grid.h_v[0]
    row = _row(op, unit_grid, (5, 3))
    k = np.ravel_multi_index((5, 3), unit_grid.slice_shape)
    stride = unit_grid.n_x[0]
    assert row[k + stride] == pytest.approx(-1.5 / h ** 2)
    assert row[k] == pytest.approx(3.0 / h ** 2)


def test_diffusion_of_quadratic(unit_grid):
    u = ScalarField.from_function(unit_grid, lambda v, x, t: v[0] ** 2 + 0.0 * x[0] + 0.0 * t)
    out = (diffusion_full(identity(unit_grid), 0) @ u.time_slice(0).ravel()).reshape(unit_grid.slice_shape)
    np.testing.assert_allclose(out[1:-1], -2.0, atol=1e-9)


def test_apply_operator_of_quadratic(unit_grid):
    u = ScalarField.from_function(unit_grid, lambda v, x, t: v[0] ** 2)
    out = apply_operator(identity(unit_grid), u)
    np.testing.assert_allclose(out.values[1:-1], 2.0, atol=1e-9)


def test_mixed_derivatives():
    dom = BoxDomain((0.0, 0.0), (1.0, 1.0), (0.0, 0.0), (1.0, 1.0), 0.0, 1.0)
    grid = GridSpec(dom, (9, 9), (3, 3), 3)
    matrices = np.broadcast_to(np.array([[2.0, 0.5], [0.5, 1.0]]), grid.shape + (2, 2)).copy()
    A = CoefficientField(grid, matrices, 0.5, 2.5)
    u = ScalarField.from_function(grid, lambda v, x, t: v[0] * v[1])
    out = apply_operator(A, u)
    # div(A grad(v1 v2)) = 2 a12
    np.testing.assert_allclose(out.values[1:-1, 1:-1], 1.0, atol=1e-9)


def test_transport_rows(sym_grid):
    op = transport_full(sym_grid)
    v = sym_grid.v_axes[0]
    zero = int(np.argmin(np.abs(v)))
    assert v[zero] == 0.0
    assert np.count_nonzero(_row(op, sym_grid, (zero, 4))) == 0
    u = ScalarField.from_function(sym_grid, lambda v, x, t: x[0])
    out = (op @ u.time_slice(0).ravel()).reshape(sym_grid.slice_shape)
    np.testing.assert_allclose(out, np.broadcast_to(v[:, None], sym_grid.slice_shape), atol=1e-12)


def test_transport_upwind_mirror(sym_grid):
    op = transport_full(sym_grid)
    n_v = sym_grid.n_v[0]
    h = sym_grid.h_x[0]
    k_pos = np.ravel_multi_index((n_v - 1, 4), sym_grid.slice_shape)
    k_neg = np.ravel_multi_index((0, 4), sym_grid.slice_shape)
    pos = _row(op, sym_grid, (n_v - 1, 4))
    neg = _row(op, sym_grid, (0, 4))
    assert (pos[k_pos], pos[k_pos + 1]) == pytest.approx((-1.0 / h, 1.0 / h))
    assert (neg[k_neg - 1], neg[k_neg]) == pytest.approx((1.0 / h, -1.0 / h))


def test_time_step_is_m_matrix(sym_grid):
    A = identity(sym_grid)
    zeros = np.zeros(sym_grid.slice_shape)
    s = build_time_step(A, sym_grid, 1, zeros, zeros, zeros)
    assert is_m_matrix(s.M)
    assert np.all(diagonal_dominance_margin(s.M) >= 1.0 / sym_grid.h_t - 1e-8)
    assert s.dimension == int(np.sum(~kolmogorov_slice_mask(sym_grid)))
    assert np.all(np.isneginf(s.psi))


def test_time_step_rhs(sym_grid):
    A = identity(sym_grid)
    u_prev = np.full(sym_grid.slice_shape, 2.0)
    f = np.full(sym_grid.slice_shape, 0.5)
    g = np.zeros(sym_grid.slice_shape)
    s = build_time_step(A, sym_grid, 1, f, g, u_prev)
    np.testing.assert_allclose(s.q, 2.0 / sym_grid.h_t - 0.5)


def test_time_step_constant_is_fixed_point(sym_grid):
    A = identity(sym_grid)
    c = np.full(sym_grid.slice_shape, 3.0)
    s = build_time_step(A, sym_grid, 2, np.zeros(sym_grid.slice_shape), c, c)
    np.testing.assert_allclose(s.M.matrix @ np.full(s.dimension, 3.0), s.q, atol=1e-9)


def test_time_step_rejects_index(sym_grid):
    zeros = np.zeros(sym_grid.slice_shape)
    with pytest.raises(ValueError):
        build_time_step(identity(sym_grid), sym_grid, 0, zeros, zeros, zeros)


def test_random_spd_d1_is_m_matrix(sym_grid):
    A = random_spd(sym_grid, 0.5, 2.0, seed=3)
    assert is_m_matrix(assemble_diffusion(A, 1))


def test_assemble_diffusion_rejects_bad_coefficients(unit_grid):
    with pytest.raises(ValueError):
        assemble_diffusion(diagonal(unit_grid, [0.5], lam=1.0, Lam=1.0), 0)


def test_restrict_splits_columns():
    full = sp.csr_matrix(np.arange(9, dtype=float).reshape(3, 3) + 1.0)
    op = restrict(full, np.array([True, False, True]))
    np.testing.assert_array_equal(op.matrix.toarray(), [[1.0, 3.0], [7.0, 9.0]])
    np.testing.assert_array_equal(op.coupling.toarray(), [[2.0], [8.0]])
    np.testing.assert_array_equal(op.apply(np.array([1.0, 1.0, 1.0])), [6.0, 24.0])


def test_assemble_transport_dimension(sym_grid):
    op = assemble_transport(sym_grid)
    assert op.dimension == int(np.sum(~kolmogorov_slice_mask(sym_grid)))


@pytest.mark.parametrize('source, min_order', [
    # linear in x and t: only the O(h_v^2) diffusion error remains
    ('sin(v1) * (1 + x1 + t)', 1.8),
    # first-order upwind in x and backward difference in t dominate
    ('cos(v1) * sin(2 * x1) * exp(-t)', 0.9),
])
def test_apply_operator_consistency_order(sym_box, source, min_order):
    u = ExpressionSpec(source, 1)
    Lu = kfp_forcing(u)
    errors = []
    for n in (9, 17, 33):
        grid = GridSpec(sym_box, (n,), (n,), n)
        err = np.abs(apply_operator(identity(grid), u.sample(grid)).values - Lu.sample(grid).values)
        errors.append(err[~v_boundary_mask(grid)].max())
    orders = np.log2(np.array(errors[:-1]) / np.array(errors[1:]))
    assert np.all(orders >= min_order)
