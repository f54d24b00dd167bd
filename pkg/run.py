# coding: utf-8

import argparse
import json
import os
import sys
import time

import numpy as np
import pandas as pd
from tqdm import tqdm

from kolmogorov.coefficients import identity
from kolmogorov.expressions import ExpressionSpec
from kolmogorov.fields import ScalarField, norm_l2
from kolmogorov.geometry import BoxDomain
from kolmogorov.obstacle_solver import march, solve_dirichlet
from kolmogorov.stochastic_oracle import compare_with_pde, interpolate_at, lsmc_value, value_by_dynamic_programming
from kolmogorov.variational import eval_J
from utils import ConfigError, MODES, coefficients_from_config, domain_from_config, expressions_from_config, \
    grid_from_config, level_grid, manual_seed, parse_config, solver_config, write_field_csv, write_json, \
    write_report_json
from valid import VerificationError, verify

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SOLVER = 3
EXIT_VERIFICATION = 4


def _solve(A, grid, exprs, cfg):
    f = exprs['f'].sample(grid)
    g = exprs['g'].sample(grid)
    if exprs['psi'] is None:
        return solve_dirichlet(A, grid, f, g, cfg)
    return march(A, grid, f, exprs['psi'].sample(grid), g, cfg)


def _grid_dict(grid):
    return {'n_v': list(grid.n_v), 'n_x': list(grid.n_x), 'n_t': grid.n_t,
            'h_v': list(grid.h_v), 'h_x': list(grid.h_x), 'h_t': grid.h_t}


def run_solve(config, out_dir):
    dom = domain_from_config(config.domain)
    grid = grid_from_config(config, dom)
    A = coefficients_from_config(config, grid)
    cfg = solver_config(config)
    u, report = _solve(A, grid, expressions_from_config(config, dom.d), cfg)
    print('Method: {} Iterations: {} Complementarity residual: {:.3e}'.format(
        report.method, sum(report.iterations), report.complementarity_residual))

    write_field_csv(os.path.join(out_dir, 'solution.csv'), u)
    write_report_json(os.path.join(out_dir, 'report.json'), {
        'mode': 'solve',
        'grid': _grid_dict(grid),
        'ellipticity': A.report.as_dict(),
        'solver': report.as_dict(),
    }, config)
    return {'solve': report.wall_time}


def _fitted_order(h, err):
    """Slope of log(err) against log(h) by least squares."""
    h, err = np.asarray(h, dtype=float), np.asarray(err, dtype=float)
    if np.any(err <= 0):
        return float('nan')
    return float(np.polyfit(np.log(h), np.log(err), 1)[0])


def _raise_on_failure(criteria, out_dir):
    """report.json is already written; a failed criterion still ends the run with the verification exit code."""
    failed = [name for name, ok in criteria.items() if not ok]
    if failed:
        with open(os.path.join(out_dir, 'report.json')) as f:
            report = json.load(f)
        raise VerificationError(report, failed)


def run_convergence(config, out_dir):
    dom = domain_from_config(config.domain)
    exprs = expressions_from_config(config, dom.d)
    cfg = solver_config(config, progress=False)
    rows = []
    timings = {}
    u = None
    for level in tqdm(config.convergence.levels, disable=not config.progress, desc='levels'):
        start_time = time.time()
        grid = level_grid(dom, level)
        A = coefficients_from_config(config, grid)
        u, report = _solve(A, grid, exprs, cfg)
        exact = exprs['exact'].sample(grid)
        rows.append({
            'level': int(level),
            'h': max(grid.h_v + grid.h_x + (grid.h_t,)),
            'max_error': float(np.max(np.abs(u.values - exact.values))),
            'l2_error': norm_l2(u.like(u.values - exact.values)),
            'J': eval_J(u, exprs['f'].sample(grid), A, lift=True),
            'iterations': int(sum(report.iterations)),
        })
        timings['level_{}'.format(level)] = time.time() - start_time

    table = pd.DataFrame(rows)
    table.to_csv(os.path.join(out_dir, 'convergence.csv'), index=False, float_format='%.17g')
    write_field_csv(os.path.join(out_dir, 'solution.csv'), u)

    orders = {key: _fitted_order(table['h'], table[key]) for key in ('max_error', 'l2_error')}
    J = table['J'].to_numpy()
    J_monotone = bool(np.all(np.diff(J) < 0))
    criteria = {
        'order': bool(orders['max_error'] >= float(config.convergence.min_order)),
        'J_monotone': J_monotone,
        'J_tol': bool(J[-1] < float(config.convergence.j_tol)),
    }
    passed = all(criteria.values())
    print(table.to_string(index=False))
    print('Fitted order (max error): {:.3f} (L2 error): {:.3f}'.format(orders['max_error'], orders['l2_error']))

    write_report_json(os.path.join(out_dir, 'report.json'), {
        'mode': 'convergence',
        'table': table.to_dict(orient='records'),
        'orders': orders,
        'J_monotone': J_monotone,
        'criteria': criteria,
        'passed': bool(passed),
    }, config)
    _raise_on_failure(criteria, out_dir)
    return timings


def _middle_half(lo, hi):
    return (tuple(a + 0.25 * (b - a) for a, b in zip(lo, hi)),
            tuple(a + 0.75 * (b - a) for a, b in zip(lo, hi)))


def _probe(config, dom):
    probe = config.oracle.probe
    if probe is None:
        v_lo, v_hi = _middle_half(dom.v_lo, dom.v_hi)
        x_lo, x_hi = _middle_half(dom.x_lo, dom.x_hi)
        return BoxDomain(v_lo, v_hi, x_lo, x_hi, dom.t_lo, dom.t_hi)
    return domain_from_config(dict(probe, t_lo=dom.t_lo, t_hi=dom.t_hi))


def run_oracle(config, out_dir):
    """PDE obstacle solution against the dynamic-programming stopping value under joint refinement."""
    dom = domain_from_config(config.domain)
    oracle = config.oracle
    payoff = ExpressionSpec(str(oracle.payoff), dom.d, 'oracle.payoff')
    probe = _probe(config, dom)
    cfg = solver_config(config, progress=False)
    rows = []
    timings = {}
    fields = []
    for level in tqdm(oracle.levels, disable=not config.progress, desc='levels'):
        start_time = time.time()
        grid = level_grid(dom, level)
        psi = ScalarField.from_function(grid, lambda v, x, t: payoff(v, x, 0.0 * t))
        dp = value_by_dynamic_programming(psi.time_slice(0), grid, int(oracle.gh_order),
                                          interpolation=str(oracle.interpolation))
        u, report = march(identity(grid), grid, ScalarField.constant(grid, 0.0), psi, dp, cfg)
        gap = compare_with_pde(u, dp, probe, float(oracle.tolerance))
        rows.append(dict(level=int(level), iterations=int(sum(report.iterations)), **gap.as_dict()))
        fields.append((u, dp))
        timings['level_{}'.format(level)] = time.time() - start_time

    table = pd.DataFrame(rows)
    table.to_csv(os.path.join(out_dir, 'oracle_gaps.csv'), index=False, float_format='%.17g')
    u, dp = fields[-1]
    write_field_csv(os.path.join(out_dir, 'solution.csv'), u)
    write_field_csv(os.path.join(out_dir, 'oracle.csv'), dp)

    start = oracle.start
    if start is None:
        v0 = [0.5 * (a + b) for a, b in zip(probe.v_lo, probe.v_hi)]
        x0 = [0.5 * (a + b) for a, b in zip(probe.x_lo, probe.x_hi)]
    else:
        v0, x0 = list(np.atleast_1d(start['v'])), list(np.atleast_1d(start['x']))
    start_time = time.time()
    lsmc = lsmc_value(lambda v, x: payoff(v, x, 0.0), (v0, x0), dom.t_hi, int(oracle.n_paths),
                      int(oracle.basis_degree), int(config.seed), n_steps=int(oracle.lsmc_steps),
                      antithetic=bool(oracle.antithetic))
    timings['lsmc'] = time.time() - start_time
    dp_start = interpolate_at(dp, v0, x0)
    grid_error = abs(dp_start - interpolate_at(fields[-2][1], v0, x0))
    difference = abs(lsmc.value - dp_start)

    gaps = table['max_gap'].to_numpy()
    monotone = bool(np.all(np.diff(gaps) < 0))
    criteria = {
        'gap_monotone': monotone,
        'gap_tolerance': bool(table['passed'].iloc[-1]),
        'lsmc_agreement': bool(difference <= max(3.0 * lsmc.standard_error, grid_error)),
    }
    passed = all(criteria.values())
    print(table.to_string(index=False))
    print('LSMC: {:.6f} +- {:.6f} DP: {:.6f}'.format(lsmc.value, lsmc.standard_error, dp_start))

    write_report_json(os.path.join(out_dir, 'report.json'), {
        'mode': 'oracle',
        'probe': {'v_lo': probe.v_lo, 'v_hi': probe.v_hi, 'x_lo': probe.x_lo, 'x_hi': probe.x_hi},
        'levels': table.to_dict(orient='records'),
        'gap_monotone': monotone,
        'lsmc': dict(lsmc.as_dict(), start={'v': v0, 'x': x0}),
        'dp_value_at_start': dp_start,
        'dp_grid_error_at_start': grid_error,
        'lsmc_dp_difference': difference,
        'lsmc_within_3se': bool(difference <= 3.0 * lsmc.standard_error),
        'lsmc_below_dp': bool(lsmc.value <= dp_start + 3.0 * lsmc.standard_error),
        'criteria': criteria,
        'passed': bool(passed),
    }, config)
    _raise_on_failure(criteria, out_dir)
    return timings


def run_verify(config, out_dir):
    report, timings = verify(config)
    write_report_json(os.path.join(out_dir, 'verify.json'), report, config)
    if not report['passed']:
        raise VerificationError(report)
    return timings


RUNNERS = {
    'solve': run_solve,
    'verify': run_verify,
    'convergence': run_convergence,
    'oracle': run_oracle,
}


def run(config, out_dir):
    """Execute one mode; artifacts go to out_dir, wall-clock timings to the timings.json sidecar."""
    os.makedirs(out_dir, exist_ok=True)
    manual_seed(int(config.seed))
    start_time = time.time()
    timings = RUNNERS[config.mode](config, out_dir)
    timings['total'] = time.time() - start_time
    write_json(os.path.join(out_dir, 'timings.json'), timings)
    print('Elapsed time: {:.2f} sec'.format(timings['total']))
    return EXIT_OK


def _error_payload(e, code):
    details = None
    if isinstance(e, ConfigError):
        details = e.errors
    elif isinstance(e, VerificationError):
        details = e.report
    return {'type': type(e).__name__, 'message': str(e), 'details': details, 'exit_code': code}


def _exit_code(e):
    if isinstance(e, VerificationError):
        return EXIT_VERIFICATION
    if isinstance(e, ValueError):
        return EXIT_CONFIG
    return EXIT_SOLVER


def main(args=None):
    parser = argparse.ArgumentParser()
    subparsers = parser.add_subparsers(dest='mode', required=True)
    for mode in MODES:
        sub = subparsers.add_parser(mode, help='run the {} mode'.format(mode))
        sub.add_argument("--config", type=str, required=True, help="path to config file (YAML or JSON)")
        sub.add_argument("--out", type=str, default=None, help="output directory (overrides output_dir)")
        sub.add_argument("--seed", type=int, default=None, help="random seed (overrides the config)")
        sub.add_argument("--no-progress", action='store_true', help="disable progress bars")
    if args is None:
        args = parser.parse_args()
    else:
        args = parser.parse_args(args)

    out_dir = args.out
    try:
        config = parse_config(args.config, seed=args.seed, mode=args.mode,
                              progress=False if args.no_progress else None)
        out_dir = out_dir or config.output_dir
        return run(config, out_dir)
    except Exception as e:
        code = _exit_code(e)
        payload = _error_payload(e, code)
        out_dir = out_dir or 'results'
        os.makedirs(out_dir, exist_ok=True)
        write_json(os.path.join(out_dir, 'error.json'), payload)
        print(json.dumps(payload, default=str), file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main(None))
