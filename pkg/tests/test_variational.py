import numpy as np
import pytest

from kolmogorov.coefficients import identity, random_spd
from kolmogorov.expressions import ExpressionSpec, kfp_forcing
from kolmogorov.fields import GridSpec, ScalarField, VFlux, face_shape, grad_v, kolmogorov_mask, norm_flux
from kolmogorov.obstacle_solver import SolverConfig, march, solve_dirichlet
from kolmogorov.variational import eval_J, eval_J_pair, is_nonneg_W, recover_flux, variational_inequality_gap, \
    weak_residual

EXACT = 'sin(pi*v1)*cos(x1)*exp(-t)'


def _random_test_function(grid, rng):
    values = rng.normal(size=grid.shape)
    values[0] = values[-1] = 0.0
    return ScalarField(grid, values)


def _zero_flux(grid):
    return VFlux(grid, tuple(np.zeros(face_shape(grid, i)) for i in range(grid.d)))


def test_recover_flux_zero_rhs(unit_grid):
    zero = ScalarField.constant(unit_grid, 0.0)
    cert = recover_flux(zero, zero, identity(unit_grid))
    assert np.all(cert.j.components[0] == 0.0)
    assert cert.divergence_residual == 0.0


def test_recover_flux_closed_form(unit_grid):
    cert = recover_flux(ScalarField.constant(unit_grid, 0.0), ScalarField.constant(unit_grid, 1.0),
                        identity(unit_grid))
    v = unit_grid.v_axes[0]
    midpoints = 0.5 * (v[1:] + v[:-1])
    np.testing.assert_allclose(cert.j.components[0], np.broadcast_to(
        (midpoints - 0.5)[:, None, None], cert.j.components[0].shape), atol=1e-10)
    assert cert.divergence_residual < 1e-10


def test_recover_flux_rough_coefficients_residual(sym_grid, rng):
    A = random_spd(sym_grid, 0.5, 2.0, seed=4)
    w = ScalarField(sym_grid, rng.normal(size=sym_grid.shape))
    f = ScalarField(sym_grid, rng.normal(size=sym_grid.shape))
    assert recover_flux(w, f, A).divergence_residual < 1e-8


def test_eval_J_pair_examples(unit_grid):
    A = identity(unit_grid)
    u = ScalarField.from_function(unit_grid, lambda v, x, t: np.sin(v[0]) * (1 + x[0]))
    assert eval_J_pair(u, grad_v(u), A) == 0.0
    ones = VFlux(unit_grid, (np.ones(face_shape(unit_grid, 0)),))
    assert eval_J_pair(ScalarField.constant(unit_grid, 0.0), ones, A) == pytest.approx(0.5, abs=1e-12)


def test_eval_J_pair_coercive(sym_grid, rng):
    A = random_spd(sym_grid, 0.5, 2.0, seed=9)
    for _ in range(10):
        u = ScalarField(sym_grid, rng.normal(size=sym_grid.shape))
        j = VFlux(sym_grid, (rng.normal(size=face_shape(sym_grid, 0)),))
        assert eval_J_pair(u, j, A) >= 0.5 * A.lam * norm_flux(grad_v(u) - j) ** 2 - 1e-12


def test_eval_J_trivial_and_nonnegative(sym_grid, rng):
    A = random_spd(sym_grid, 0.5, 2.0, seed=1)
    zero = ScalarField.constant(sym_grid, 0.0)
    assert eval_J(zero, zero, A) == 0.0
    w = ScalarField(sym_grid, rng.normal(size=sym_grid.shape))
    f = ScalarField(sym_grid, rng.normal(size=sym_grid.shape))
    assert eval_J(w, f, A) >= 0.0
    assert eval_J(w, f, A) == pytest.approx(eval_J_pair(w, recover_flux(w, f, A).j, A), abs=1e-12)


def test_eval_J_convex(sym_grid, rng):
    A = random_spd(sym_grid, 0.5, 2.0, seed=6)
    f = ScalarField(sym_grid, rng.normal(size=sym_grid.shape))
    for _ in range(5):
        w1 = ScalarField(sym_grid, rng.normal(size=sym_grid.shape))
        w2 = ScalarField(sym_grid, rng.normal(size=sym_grid.shape))
        mid = eval_J(w1.like(0.5 * (w1.values + w2.values)), f, A)
        assert mid <= 0.5 * (eval_J(w1, f, A) + eval_J(w2, f, A)) + 1e-10


def test_eval_J_quadratic_growth(unit_grid):
    A = identity(unit_grid)
    exact = ExpressionSpec(EXACT, 1)
    f = kfp_forcing(exact).sample(unit_grid)
    u, _ = solve_dirichlet(A, unit_grid, f, exact.sample(unit_grid))
    bump = ScalarField.from_function(unit_grid, lambda v, x, t: np.sin(np.pi * v[0]) + 0.0 * x[0] + 0.0 * t)
    base = eval_J(u, f, A)
    ratios = []
    for delta in (0.4, 0.2, 0.1):
        grown = eval_J(u.like(u.values + delta * bump.values), f, A)
        assert grown > base
        ratios.append((grown - base) / delta ** 2)
    assert ratios[-1] > 0.0
    assert ratios[-1] == pytest.approx(ratios[-2], rel=0.2)


@pytest.mark.slow
def test_eval_J_vanishes_under_refinement(unit_box):
    exact = ExpressionSpec(EXACT, 1)
    values = []
    for n in (9, 17, 33):
        grid = GridSpec(unit_box, (n,), (n,), n)
        A = identity(grid)
        f = kfp_forcing(exact).sample(grid)
        u, _ = solve_dirichlet(A, grid, f, exact.sample(grid))
        values.append(eval_J(u, f, A))
    assert np.all(np.diff(values) < 0)


def test_weak_residual_examples(sym_grid, rng):
    A = random_spd(sym_grid, 0.5, 2.0, seed=8)
    u = ScalarField(sym_grid, rng.normal(size=sym_grid.shape))
    f = ScalarField(sym_grid, rng.normal(size=sym_grid.shape))
    assert weak_residual(u, f, A, ScalarField.constant(sym_grid, 0.0)) == 0.0
    phi1 = _random_test_function(sym_grid, rng)
    phi2 = _random_test_function(sym_grid, rng)
    combined = weak_residual(u, f, A, phi1.like(2.5 * phi1.values + phi2.values))
    assert combined == pytest.approx(2.5 * weak_residual(u, f, A, phi1) + weak_residual(u, f, A, phi2), rel=1e-10)


def test_weak_residual_rejects_non_test_function(sym_grid):
    one = ScalarField.constant(sym_grid, 1.0)
    with pytest.raises(ValueError):
        weak_residual(one, one, identity(sym_grid), one)


def test_weak_residual_of_discrete_solution(sym_grid, rng):
    A = random_spd(sym_grid, 0.5, 2.0, seed=10)
    f = ScalarField(sym_grid, rng.normal(size=sym_grid.shape))
    g = ScalarField(sym_grid, rng.normal(size=sym_grid.shape))
    u, _ = solve_dirichlet(A, sym_grid, f, g)
    phi = _random_test_function(sym_grid, rng).values
    phi[kolmogorov_mask(sym_grid)] = 0.0
    assert abs(weak_residual(u, f, A, u.like(phi))) < 1e-8


def test_variational_inequality_active_instance(sym_grid, rng):
    A = identity(sym_grid)
    zero = ScalarField.constant(sym_grid, 0.0)
    f = ScalarField.constant(sym_grid, 1.0)
    u, _ = march(A, sym_grid, f, zero, zero, SolverConfig())
    assert variational_inequality_gap(u, u, f, A, zero) == 0.0
    free = ~kolmogorov_mask(sym_grid)
    for _ in range(100):
        w = u.values.copy()
        w[free] += rng.uniform(0.0, 1.0, size=int(free.sum()))
        assert variational_inequality_gap(u, u.like(w), f, A, zero) >= -1e-7


def test_variational_inequality_equality_when_unconstrained(sym_grid, rng):
    A = random_spd(sym_grid, 0.5, 2.0, seed=12)
    f = ScalarField(sym_grid, rng.normal(size=sym_grid.shape))
    g = ScalarField(sym_grid, rng.normal(size=sym_grid.shape))
    u, _ = solve_dirichlet(A, sym_grid, f, g)
    phi = rng.normal(size=sym_grid.shape)
    phi[kolmogorov_mask(sym_grid)] = 0.0
    for delta in (1e-2, -1e-2):
        assert abs(variational_inequality_gap(u, u.like(u.values + delta * phi), f, A)) < 1e-8


def test_variational_inequality_rejects_inadmissible(sym_grid):
    zero = ScalarField.constant(sym_grid, 0.0)
    with pytest.raises(ValueError):
        variational_inequality_gap(zero, ScalarField.constant(sym_grid, -1.0), zero, identity(sym_grid), zero)
    with pytest.raises(ValueError):
        variational_inequality_gap(zero, ScalarField.constant(sym_grid, 1.0), zero, identity(sym_grid))


def test_is_nonneg_W(unit_grid):
    assert is_nonneg_W(ScalarField.constant(unit_grid, 0.0))
    w = ScalarField.from_function(unit_grid, lambda v, x, t: v[0] - 0.5)
    assert not is_nonneg_W(w)
    assert is_nonneg_W(w.like(np.maximum(w.values, 0.0)))
    assert is_nonneg_W(w, region=(slice(16, None),))
