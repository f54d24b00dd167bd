# coding: utf-8

import argparse
import os
import time

import numpy as np
from tqdm import tqdm

from kolmogorov.assembly import apply_operator, build_time_step, is_m_matrix
from kolmogorov.coefficients import diagonal, identity, random_spd
from kolmogorov.expressions import ExpressionSpec, kfp_forcing
from kolmogorov.fields import GridSpec, ScalarField, kolmogorov_mask, norm_W, norm_hm1_v, poincare_ratio, \
    v_boundary_mask
from kolmogorov.geometry import BoxDomain, Point, dilate, group_compose, group_inverse, left_translate
from kolmogorov.obstacle_solver import SolverConfig, march, random_m_matrix_lcp, solve_dirichlet, \
    solve_lcp_enumeration, solve_lcp_psor
from kolmogorov.stochastic_oracle import dirichlet_value_mc, interpolate_at, value_by_dynamic_programming
from kolmogorov.variational import variational_inequality_gap
from utils import domain_from_config, level_grid, parse_config, write_report_json


class VerificationError(RuntimeError):
    """At least one check failed; `report` holds the results, `failed` names the failing checks."""

    def __init__(self, report, failed=None):
        self.report = report
        if failed is None:
            failed = [name for name, suite in report['suites'].items() if not suite['passed']]
        self.failed = list(failed)
        super().__init__('Verification failed: {}'.format(', '.join(failed)))


def _dyadic_point(rng, d):
    return Point(tuple(rng.integers(-64, 65, d) / 8.0), tuple(rng.integers(-64, 65, d) / 8.0),
                 float(rng.integers(-64, 65)) / 8.0)


def suite_group_algebra(config, rng):
    """Associativity, inverses and dilations on dyadic tuples, where every identity holds exactly."""
    n = int(config.verify.n_group)
    failures = 0
    for _ in range(n):
        a, b, c = (_dyadic_point(rng, 2) for _ in range(3))
        r, s = 2.0 ** rng.integers(-3, 4, 2)
        checks = (
            group_compose(group_compose(a, b), c) == group_compose(a, group_compose(b, c)),
            group_compose(a, group_inverse(a)) == Point.identity(2),
            group_compose(group_inverse(a), a) == Point.identity(2),
            dilate(r, dilate(s, a)) == dilate(r * s, a),
            dilate(r, group_compose(a, b)) == group_compose(dilate(r, a), dilate(r, b)),
        )
        failures += int(not all(checks))
    return {'passed': failures == 0, 'n_tuples': n, 'failures': failures}


def suite_galilean(config, rng):
    """Galilean invariance for A = I, on the discrete operator and on the discrete solve.

    L_h(u o tau_z0) is compared with the exact (L u) o tau_z0, and the
    Dirichlet solve on translated data with the translated solution; both
    errors must shrink under refinement.
    """
    dom = BoxDomain((-1.0,), (1.0,), (-1.0,), (1.0,), 0.0, 1.0)
    z0 = Point((0.25,), (-0.5,), 0.125)
    u = ExpressionSpec('sin(v1 + x1) * exp(-t / 2)', 1, 'u')
    Lu = kfp_forcing(u)
    errors = []
    solve_errors = []
    for level in (8, 16, 32):
        grid = level_grid(dom, level)
        A = identity(grid)
        w = ScalarField.from_function(grid, left_translate(z0, u))
        exact = ScalarField.from_function(grid, left_translate(z0, Lu))
        err = np.abs(apply_operator(A, w).values - exact.values)
        errors.append(float(err[~v_boundary_mask(grid)].max()))
        solved, _ = solve_dirichlet(A, grid, exact, w)
        solve_errors.append(float(np.max(np.abs(solved.values - w.values))))
    passed = errors[2] < errors[1] < errors[0] and solve_errors[2] < solve_errors[1] < solve_errors[0]
    return {'passed': bool(passed), 'max_errors': errors, 'solve_errors': solve_errors}


def suite_lcp_oracle(config, rng):
    n, dim = int(config.verify.n_lcp), int(config.verify.lcp_dim)
    cfg = SolverConfig()
    gaps = []
    for _ in tqdm(range(n), disable=not config.progress, desc='lcp'):
        s = random_m_matrix_lcp(dim, rng)
        reference = solve_lcp_enumeration(s)
        u = solve_lcp_psor(s, cfg, np.zeros(dim))
        gaps.append(float(np.max(np.abs(u - reference))))
    return {'passed': max(gaps) < 1e-8, 'max_gap': max(gaps), 'n_instances': n, 'dimension': dim}


def _active_instance(config):
    dom = domain_from_config(config.domain)
    grid = level_grid(dom, int(config.verify.active_grid))
    A = identity(grid)
    f = ScalarField.constant(grid, 1.0)
    psi = ScalarField.constant(grid, 0.0)
    g = ScalarField.constant(grid, 0.0)
    return grid, A, f, psi, g


def suite_complementarity(config, rng):
    grid, A, f, psi, g = _active_instance(config)
    u_psor, rep_psor = march(A, grid, f, psi, g, SolverConfig())
    u_pen, rep_pen = march(A, grid, f, psi, g, SolverConfig(method='penalized', epsilon_penalty=1e-8))
    gap = float(np.max(np.abs(u_psor.values - u_pen.values)))
    undershoot = float(np.min(u_psor.values - psi.values))
    passed = rep_psor.complementarity_residual < 1e-7 and undershoot >= -1e-10 and gap < 1e-5
    return {'passed': bool(passed), 'complementarity_residual': rep_psor.complementarity_residual,
            'min_obstacle_gap': undershoot, 'psor_penalized_gap': gap}


def suite_variational_inequality(config, rng):
    grid, A, f, psi, g = _active_instance(config)
    u, _ = march(A, grid, f, psi, g, SolverConfig(method='penalized', epsilon_penalty=1e-10))
    fixed = kolmogorov_mask(grid)
    gaps = []
    for _ in range(int(config.verify.n_competitors)):
        bump = rng.uniform(0.0, 1.0) * rng.random(grid.shape)
        w = np.where(fixed, u.values, np.maximum(psi.values, u.values + bump - 0.5 * rng.uniform() * bump.mean()))
        gaps.append(variational_inequality_gap(u, u.like(w), f, A, psi))
    return {'passed': min(gaps) >= -1e-6, 'min_gap': min(gaps), 'n_competitors': len(gaps)}


def suite_poincare(config, rng):
    dom = BoxDomain((0.0,), (1.0,), (0.0,), (1.0,), 0.0, 1.0)
    grid = GridSpec(dom, (65,), (3,), 3)
    ratios = []
    for _ in range(int(config.verify.n_poincare)):
        values = rng.normal(size=grid.shape)
        values[v_boundary_mask(grid)] = 0.0
        ratios.append(poincare_ratio(ScalarField(grid, values)))
    sine_grid = GridSpec(dom, (int(config.verify.poincare_n_v),), (3,), 3)
    sine = poincare_ratio(ScalarField.from_function(sine_grid, lambda v, x, t: np.sin(np.pi * v[0])))
    passed = max(ratios) <= 1.0 / np.pi + 0.02 and abs(sine - 1.0 / np.pi) <= 1e-3
    return {'passed': bool(passed), 'max_ratio': max(ratios), 'sine_ratio': sine, 'bound': 1.0 / np.pi}


def suite_m_matrix(config, rng):
    dom = BoxDomain((-1.0, -1.0), (1.0, 1.0), (-1.0, -1.0), (1.0, 1.0), 0.0, 1.0)
    grid = GridSpec(dom, (7, 5), (5, 7), 4)
    zero = np.zeros(grid.slice_shape)
    ok = []
    for A in (identity(grid), diagonal(grid, [0.5, 2.0])):
        s = build_time_step(A, grid, 1, zero, zero, zero)
        ok.append(is_m_matrix(s.M))
    return {'passed': all(ok), 'checked': len(ok)}


def suite_constant_solution(config, rng):
    dom = domain_from_config(config.domain)
    grid = level_grid(dom, 12)
    one = ScalarField.constant(grid, 1.0)
    zero = ScalarField.constant(grid, 0.0)
    u, report = march(identity(grid), grid, zero, zero, one, SolverConfig())
    err = float(np.max(np.abs(u.values - 1.0)))
    return {'passed': err < 1e-8 and report.complementarity_residual < 1e-8, 'max_error': err}


def suite_stopping_value(config, rng):
    """DP value lies above the payoff and is monotone in it."""
    dom = BoxDomain((-2.0,), (2.0,), (-1.0,), (3.0,), 0.0, 0.5)
    grid = level_grid(dom, 16)
    v, x = grid.slice_mesh()
    psi1 = np.broadcast_to(np.maximum(1.0 - x[0], 0.0), grid.slice_shape)
    psi2 = psi1 + 0.1 * np.exp(-v[0] ** 2)
    u1 = value_by_dynamic_programming(psi1, grid, gh_order=6).values
    u2 = value_by_dynamic_programming(psi2, grid, gh_order=6).values
    above = bool(np.all(u1 >= psi1[..., None] - 1e-12))
    monotone = bool(np.all(u1 <= u2 + 1e-12))
    return {'passed': above and monotone, 'above_payoff': above, 'monotone': monotone}


def _quadratic_martingale(v, x, t):
    return x[0] + v[0] * t + v[0] ** 2 + 2.0 * t


def suite_feynman_kac(config, rng):
    """Dirichlet solve with A = I and f = 0 against the Monte-Carlo exit value at a few nodes."""
    dom = BoxDomain((-4.0,), (4.0,), (-4.0,), (4.0,), 0.0, 0.25)
    grid = GridSpec(dom, (17,), (17,), 5)
    g = ScalarField.from_function(grid, _quadratic_martingale)
    u, _ = solve_dirichlet(identity(grid), grid, ScalarField.constant(grid, 0.0), g)
    n_paths = int(config.verify.n_paths_mc)
    rows = []
    for v0, x0 in ((0.0, 0.0), (1.0, 0.5), (-0.5, 1.0)):
        mc = dirichlet_value_mc(_quadratic_martingale, dom, ([v0], [x0]), dom.t_hi, 25, n_paths,
                                seed=int(rng.integers(2 ** 31)))
        pde = interpolate_at(u, [v0], [x0])
        rows.append({'v': v0, 'x': x0, 'pde': pde, 'mc': mc.value, 'standard_error': mc.standard_error,
                     'within_3se': bool(abs(mc.value - pde) <= 3.0 * mc.standard_error)})
    return {'passed': all(row['within_3se'] for row in rows), 'nodes': rows}


def _random_rough(rng, grid):
    """Smooth mode plus independent nodal noise of unit amplitude."""
    a, b, c = rng.uniform(-1.0, 1.0, 3)
    k = rng.uniform(0.5, 2.0, 3)
    smooth = ScalarField.from_function(
        grid, lambda v, x, t: a * np.sin(k[0] * v[0] + c) * np.cos(k[1] * x[0]) + b * np.exp(-k[2] * t))
    return smooth.like(smooth.values + rng.uniform(-1.0, 1.0, grid.shape))


def suite_stability(config, rng):
    """||u||_W / (||g||_W + ||f||_{L2 H^-1}) over random rough data, at two resolutions.

    The ratio is bounded independently of the grid: refinement may not grow it by more than a factor 2.
    """
    dom = domain_from_config(config.domain)
    level = int(config.verify.stability_grid)
    maxima = []
    seed = int(rng.integers(2 ** 31))
    for grid in (level_grid(dom, level), level_grid(dom, 2 * level)):
        ratios = []
        draws = np.random.default_rng(seed)
        for _ in tqdm(range(int(config.verify.n_stability)), disable=not config.progress, desc='stability'):
            A = random_spd(grid, 0.5, 2.0, int(draws.integers(2 ** 31)))
            f, g = _random_rough(draws, grid), _random_rough(draws, grid)
            u, _ = solve_dirichlet(A, grid, f, g)
            ratios.append(norm_W(u) / (norm_W(g) + norm_hm1_v(f)))
        maxima.append(float(max(ratios)))
    finite = all(np.isfinite(maxima)) and maxima[0] > 0
    growth = maxima[1] / maxima[0] if finite else float('inf')
    return {'passed': bool(finite and growth < 2.0), 'max_ratio': maxima, 'refinement_growth': growth}


SUITES = {
    'group_algebra': suite_group_algebra,
    'galilean': suite_galilean,
    'lcp_oracle': suite_lcp_oracle,
    'complementarity': suite_complementarity,
    'variational_inequality': suite_variational_inequality,
    'poincare': suite_poincare,
    'm_matrix': suite_m_matrix,
    'constant_solution': suite_constant_solution,
    'stopping_value': suite_stopping_value,
    'feynman_kac': suite_feynman_kac,
    'stability': suite_stability,
}


def verify(config, suites=None):
    """Run the invariant suites; every suite gets its own generator derived from the config seed."""
    names = list(suites or config.verify.get('suites') or SUITES)
    unknown = [name for name in names if name not in SUITES]
    if unknown:
        raise ValueError('Unknown verification suite(s): {}'.format(', '.join(unknown)))
    results = {}
    timings = {}
    for k, name in enumerate(names):
        start_time = time.time()
        rng = np.random.default_rng([int(config.seed), k])
        results[name] = SUITES[name](config, rng)
        timings[name] = time.time() - start_time
        print('{}: {} ({:.2f} sec)'.format(name, 'ok' if results[name]['passed'] else 'FAILED', timings[name]))
    report = {'mode': 'verify', 'passed': all(r['passed'] for r in results.values()), 'suites': results}
    return report, timings


def check_verification(args):
    parser = argparse.ArgumentParser()
    parser.add_argument("--config", type=str, default='configs/config_verify.yaml', help="path to config file")
    parser.add_argument("--out", type=str, default=None, help="output directory (overrides output_dir of the config)")
    parser.add_argument("--seed", type=int, default=None, help="random seed (overrides the config)")
    parser.add_argument("--suites", nargs='+', type=str, default=None, help="subset of suites to run")
    if args is None:
        args = parser.parse_args()
    else:
        args = parser.parse_args(args)

    config = parse_config(args.config, seed=args.seed)
    out_dir = args.out or config.output_dir
    os.makedirs(out_dir, exist_ok=True)
    report, _ = verify(config, args.suites)
    write_report_json(os.path.join(out_dir, 'verify.json'), report, config)
    if not report['passed']:
        raise VerificationError(report)
    return report


if __name__ == "__main__":
    check_verification(None)
