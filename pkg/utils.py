# coding: utf-8

import copy
import json
import os
import random

import numpy as np
import pandas as pd
import yaml
from ml_collections import ConfigDict

from kolmogorov.coefficients import make_coefficients
from kolmogorov.expressions import ExpressionError, ExpressionSpec, kfp_forcing
from kolmogorov.fields import GridSpec, ScalarField
from kolmogorov.geometry import BoxDomain
from kolmogorov.obstacle_solver import SolverConfig, check_ordering
from kolmogorov.stochastic_oracle import INTERPOLATION

SCHEMA_VERSION = 1
MODES = ('solve', 'verify', 'convergence', 'oracle')
COEFFICIENT_KINDS = ('identity', 'diagonal', 'checkerboard', 'random_spd')

DEFAULTS = {
    'seed': 0,
    'output_dir': 'results',
    'progress': True,
    'coefficients': {'kind': 'identity'},
    'data': {'f': None, 'psi': None, 'g': None, 'exact': None},
    'solver': {
        'method': 'psor',
        'omega': 1.5,
        'tol': 1.0e-8,
        'max_iter': None,
        'epsilon_penalty': 1.0e-8,
        'newton_max': 50,
    },
    'convergence': {'levels': [16, 32, 64], 'min_order': 0.9, 'j_tol': 1.0e-2},
    'oracle': {
        'payoff': 'max(1 - x1, 0)',
        'levels': [16, 32, 64],
        'gh_order': 8,
        'interpolation': 'cubic',
        'n_paths': 100000,
        'basis_degree': 3,
        'lsmc_steps': 64,
        'antithetic': True,
        'tolerance': 5.0e-2,
        'probe': None,
        'start': None,
    },
    'verify': {
        'n_group': 10000,
        'n_lcp': 50,
        'lcp_dim': 10,
        'active_grid': 48,
        'n_competitors': 100,
        'n_poincare': 100,
        'poincare_n_v': 128,
        'n_stability': 30,
        'stability_grid': 32,
        'n_paths_mc': 20000,
        'suites': None,
    },
}


class ConfigError(ValueError):
    """All problems found in one config file."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__('Invalid config:\n  ' + '\n  '.join(self.errors))


def manual_seed(seed):
    random.seed(seed)
    np.random.seed(seed)
    os.environ["PYTHONHASHSEED"] = str(seed)


def _merge(defaults, values):
    out = copy.deepcopy(defaults)
    for key, value in (values or {}).items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def load_config(config_path):
    """Raw YAML (or JSON) document as a dict; syntax errors carry line and column."""
    try:
        with open(config_path) as f:
            raw = yaml.load(f, Loader=yaml.FullLoader)
    except OSError as e:
        raise ConfigError(['cannot read {}: {}'.format(config_path, e)])
    except yaml.YAMLError as e:
        mark = getattr(e, 'problem_mark', None)
        where = 'line {} column {}: '.format(mark.line + 1, mark.column + 1) if mark is not None else ''
        raise ConfigError(['{}{}'.format(where, getattr(e, 'problem', None) or e)])
    if not isinstance(raw, dict):
        raise ConfigError(['top level of {} must be a mapping'.format(config_path)])
    return raw


def _per_axis(value, d, name, errors):
    values = list(np.atleast_1d(value)) if value is not None else []
    if len(values) == 1:
        values = values * d
    if len(values) != d:
        errors.append('{}: expected {} entries, got {}'.format(name, d, value))
        return None
    return values


def _check_domain(cfg, errors):
    dom = cfg.get('domain')
    if not isinstance(dom, dict):
        errors.append('domain: missing')
        return None
    missing = [k for k in ('v_lo', 'v_hi', 'x_lo', 'x_hi', 't_lo', 't_hi') if k not in dom]
    if missing:
        errors.append('domain: missing field(s) {}'.format(', '.join(missing)))
        return None
    try:
        return domain_from_config(dom)
    except (TypeError, ValueError) as e:
        errors.append('domain: {}'.format(e))
        return None


def _check_grid(cfg, d, errors):
    grid = cfg.get('grid')
    if not isinstance(grid, dict):
        errors.append('grid: missing')
        return
    for key in ('n_v', 'n_x'):
        values = _per_axis(grid.get(key), d, 'grid.' + key, errors)
        if values is not None and min(values) < 3:
            errors.append('grid.{}: grid axis below minimum 3 (got {})'.format(key, grid.get(key)))
    if grid.get('n_t') is None or int(grid['n_t']) < 3:
        errors.append('grid.n_t: grid axis below minimum 3 (got {})'.format(grid.get('n_t')))


def _check_levels(section, levels, errors):
    if not isinstance(levels, (list, tuple)) or len(levels) < 3:
        errors.append('{}.levels: need at least 3 refinement levels, got {}'.format(section, levels))
    elif min(levels) < 2:
        errors.append('{}.levels: grid axis below minimum 3 (a level of N cells has N + 1 nodes)'.format(section))
    elif list(levels) != sorted(set(levels)):
        errors.append('{}.levels: must be strictly increasing, got {}'.format(section, levels))


def _check_coefficients(cfg, errors):
    coef = cfg['coefficients']
    kind = coef.get('kind')
    if kind not in COEFFICIENT_KINDS:
        errors.append('coefficients.kind: {} is not one of {}'.format(kind, ', '.join(COEFFICIENT_KINDS)))
        return
    required = {'identity': (), 'diagonal': ('values',), 'checkerboard': ('a1', 'a2'),
                'random_spd': ('lambda', 'Lambda')}[kind]
    for key in required:
        if key not in coef:
            errors.append('coefficients.{}: required for kind {}'.format(key, kind))


def _expression(cfg, key, d, errors, required=True):
    source = cfg['data'].get(key)
    if source is None:
        if required:
            errors.append('data.{}: required'.format(key))
        return None
    try:
        return ExpressionSpec(str(source), d, 'data.' + key)
    except ExpressionError as e:
        errors.append(str(e))
        return None


def parse_config(config_path, seed=None, mode=None, progress=None):
    """Validated run config with defaults filled; raises ConfigError listing every problem.

    seed, mode and progress override the values of the file when given.
    """
    raw = load_config(config_path)
    cfg = _merge(DEFAULTS, raw)
    if seed is not None:
        cfg['seed'] = int(seed)
    if mode is not None:
        cfg['mode'] = mode
    if progress is not None:
        cfg['progress'] = bool(progress)
    errors = []

    if cfg.get('schema_version') != SCHEMA_VERSION:
        errors.append('schema_version: expected {}, got {}'.format(SCHEMA_VERSION, cfg.get('schema_version')))
    mode = cfg.get('mode')
    if mode not in MODES:
        errors.append('mode: {} is not one of {}'.format(mode, ', '.join(MODES)))

    dom = _check_domain(cfg, errors)
    _check_coefficients(cfg, errors)
    try:
        solver_config(cfg)
    except (TypeError, ValueError) as e:
        errors.append('solver: {}'.format(e))

    if dom is not None and mode == 'solve':
        _check_grid(cfg, dom.d, errors)
        f = _expression(cfg, 'f', dom.d, errors, required=False)
        exact = _expression(cfg, 'exact', dom.d, errors, required=False)
        g = _expression(cfg, 'g', dom.d, errors, required=exact is None) or exact
        if f is None and exact is not None and cfg['coefficients'].get('kind') != 'identity':
            errors.append('data.f: required with data.exact unless coefficients.kind is identity')
        psi = _expression(cfg, 'psi', dom.d, errors, required=False)
        if not errors and psi is not None:
            grid = grid_from_config(cfg, dom)
            _check_ordering(psi, g, grid, errors)
        if f is not None and not errors:
            _check_finite(f, grid_from_config(cfg, dom), errors)
    elif dom is not None and mode == 'convergence':
        _check_levels('convergence', cfg['convergence']['levels'], errors)
        exact = _expression(cfg, 'exact', dom.d, errors)
        f = _expression(cfg, 'f', dom.d, errors, required=False)
        if f is None and cfg['coefficients'].get('kind') != 'identity':
            errors.append('data.f: required unless coefficients.kind is identity')
        psi = _expression(cfg, 'psi', dom.d, errors, required=False)
        if not errors and psi is not None:
            _check_ordering(psi, exact, level_grid(dom, cfg['convergence']['levels'][0]), errors)
    elif dom is not None and mode == 'oracle':
        oracle = cfg['oracle']
        _check_levels('oracle', oracle['levels'], errors)
        if dom.t_lo != 0.0:
            errors.append('domain.t_lo: oracle mode runs in time-to-horizon and needs t_lo = 0')
        if cfg['coefficients'].get('kind') != 'identity':
            errors.append('coefficients.kind: oracle mode needs identity coefficients')
        try:
            ExpressionSpec(str(oracle['payoff']), dom.d, 'oracle.payoff')
        except ExpressionError as e:
            errors.append(str(e))
        if oracle['interpolation'] not in INTERPOLATION:
            errors.append('oracle.interpolation: {} is not one of {}'.format(
                oracle['interpolation'], ', '.join(INTERPOLATION)))
        elif oracle['interpolation'] == 'cubic' and isinstance(oracle['levels'], (list, tuple)) and \
                len(oracle['levels']) > 0 and min(oracle['levels']) < 3:
            errors.append('oracle.levels: cubic interpolation needs levels of at least 3 cells')
        for key in ('gh_order', 'n_paths', 'basis_degree', 'lsmc_steps'):
            if int(oracle[key]) < 1:
                errors.append('oracle.{}: must be >= 1, got {}'.format(key, oracle[key]))
        if oracle['antithetic'] and int(oracle['n_paths']) % 2:
            errors.append('oracle.n_paths: antithetic sampling needs an even count, got {}'.format(oracle['n_paths']))
        if oracle['probe'] is not None:
            try:
                domain_from_config(dict(oracle['probe'], t_lo=dom.t_lo, t_hi=dom.t_hi))
            except (KeyError, TypeError, ValueError) as e:
                errors.append('oracle.probe: {}'.format(e))

    if errors:
        raise ConfigError(errors)
    return ConfigDict(cfg)


def _check_ordering(psi, g, grid, errors):
    try:
        if not check_ordering(psi.sample(grid), g.sample(grid)):
            errors.append('data.psi: obstacle exceeds the boundary datum on the Kolmogorov boundary '
                          '(ordering psi <= g required)')
    except ExpressionError as e:
        errors.append(str(e))


def _check_finite(expr, grid, errors):
    try:
        expr.sample(grid)
    except ExpressionError as e:
        errors.append(str(e))


def domain_from_config(dom):
    return BoxDomain(
        v_lo=tuple(float(a) for a in np.atleast_1d(dom['v_lo'])),
        v_hi=tuple(float(a) for a in np.atleast_1d(dom['v_hi'])),
        x_lo=tuple(float(a) for a in np.atleast_1d(dom['x_lo'])),
        x_hi=tuple(float(a) for a in np.atleast_1d(dom['x_hi'])),
        t_lo=float(dom['t_lo']),
        t_hi=float(dom['t_hi']),
    )


def grid_from_config(config, dom=None):
    dom = dom if dom is not None else domain_from_config(config['domain'])
    grid = config['grid']
    n_v = np.broadcast_to(np.atleast_1d(grid['n_v']), (dom.d,))
    n_x = np.broadcast_to(np.atleast_1d(grid['n_x']), (dom.d,))
    return GridSpec(dom, tuple(int(n) for n in n_v), tuple(int(n) for n in n_x), int(grid['n_t']))


def level_grid(dom, level):
    """Uniform grid with `level` cells along every axis."""
    n = int(level) + 1
    return GridSpec(dom, (n,) * dom.d, (n,) * dom.d, n)


def coefficients_from_config(config, grid):
    coef = dict(config['coefficients'])
    kind = coef.pop('kind')
    params = {
        'values': coef.get('values'),
        'a1': coef.get('a1'),
        'a2': coef.get('a2'),
        'period': int(coef.get('period', 1)),
        'lam': coef.get('lambda'),
        'Lam': coef.get('Lambda'),
        'seed': int(coef.get('seed', config['seed'])),
    }
    return make_coefficients(kind, grid, **params)


def solver_config(config, progress=None):
    solver = config['solver']
    return SolverConfig(
        method=solver['method'],
        omega=float(solver['omega']),
        tol=float(solver['tol']),
        max_iter=None if solver['max_iter'] is None else int(solver['max_iter']),
        epsilon_penalty=float(solver['epsilon_penalty']),
        newton_max=int(solver['newton_max']),
        progress=bool(config['progress'] if progress is None else progress),
    )


def expressions_from_config(config, d):
    """ExpressionSpecs of f, psi, g and exact; f defaults to the forcing of exact (zero without one), g to exact."""
    data = config['data']
    out = {key: None if data.get(key) is None else ExpressionSpec(str(data[key]), d, 'data.' + key)
           for key in ('f', 'psi', 'g', 'exact')}
    if out['f'] is None:
        out['f'] = kfp_forcing(out['exact']) if out['exact'] is not None else ExpressionSpec('0', d, 'data.f')
    if out['g'] is None and out['exact'] is not None:
        out['g'] = out['exact']
    return out


def field_frame(field: ScalarField, time_index=None):
    """Long table with columns v1.., x1.., t, value in C order of the grid."""
    grid = field.grid
    v, x, t = grid.mesh()
    values = field.values
    if time_index is not None:
        t = t[..., [time_index]]
        values = values[..., [time_index]]
    shape = values.shape
    columns = {}
    for i, a in enumerate(v):
        columns['v{}'.format(i + 1)] = np.broadcast_to(a, shape).ravel()
    for i, a in enumerate(x):
        columns['x{}'.format(i + 1)] = np.broadcast_to(a, shape).ravel()
    columns['t'] = np.broadcast_to(t, shape).ravel()
    columns['value'] = values.ravel()
    return pd.DataFrame(columns)


def write_field_csv(path, field: ScalarField, time_index=None):
    field_frame(field, time_index).to_csv(path, index=False, float_format='%.17g')


def _sanitize(obj):
    if isinstance(obj, dict):
        return {str(k): _sanitize(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_sanitize(v) for v in obj]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        value = float(obj)
        if np.isnan(value):
            return 'nan'
        if np.isinf(value):
            return 'inf' if value > 0 else '-inf'
        return value
    if isinstance(obj, np.ndarray):
        return _sanitize(obj.tolist())
    return obj


def write_json(path, payload):
    with open(path, 'w') as f:
        json.dump(_sanitize(payload), f, indent=2, sort_keys=True)
        f.write('\n')


def write_report_json(path, report, config):
    """Report with the resolved config embedded for provenance."""
    payload = dict(report)
    payload['config'] = config.to_dict() if isinstance(config, ConfigDict) else dict(config)
    write_json(path, payload)
