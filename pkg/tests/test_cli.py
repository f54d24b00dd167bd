import json
import os

import numpy as np
import pandas as pd
import pytest
import yaml

import valid
from run import EXIT_CONFIG, EXIT_OK, EXIT_SOLVER, EXIT_VERIFICATION, main
from utils import ConfigError, level_grid, parse_config, domain_from_config

DOMAIN = {'v_lo': [-1.0], 'v_hi': [1.0], 'x_lo': [-1.0], 'x_hi': [1.0], 't_lo': 0.0, 't_hi': 1.0}


def _config(tmp_path, name='config.yaml', **overrides):
    cfg = {
        'schema_version': 1,
        'mode': 'solve',
        'seed': 0,
        'progress': False,
        'domain': dict(DOMAIN),
        'grid': {'n_v': 9, 'n_x': 9, 'n_t': 9},
        'data': {'f': '0', 'psi': '0', 'g': '1'},
    }
    cfg.update(overrides)
    path = tmp_path / name
    with open(path, 'w') as f:
        yaml.dump(cfg, f)
    return str(path)


def _run(mode, config_path, out_dir):
    return main([mode, '--config', config_path, '--out', str(out_dir), '--no-progress'])


def test_parse_config_fills_defaults(tmp_path):
    config = parse_config(_config(tmp_path))
    assert config.solver.method == 'psor'
    assert config.solver.omega == 1.5
    assert config.coefficients.kind == 'identity'
    assert config.oracle.n_paths == 100000


def test_parse_config_overrides(tmp_path):
    config = parse_config(_config(tmp_path), seed=17, mode='solve', progress=True)
    assert config.seed == 17 and config.progress


def test_parse_config_small_grid(tmp_path):
    with pytest.raises(ConfigError, match='grid axis below minimum 3'):
        parse_config(_config(tmp_path, grid={'n_v': 1, 'n_x': 9, 'n_t': 9}))


def test_parse_config_ordering(tmp_path):
    with pytest.raises(ConfigError, match='ordering'):
        parse_config(_config(tmp_path, data={'f': '0', 'psi': '1', 'g': '0'}))


def test_parse_config_collects_all_errors(tmp_path):
    path = _config(tmp_path, schema_version=2, solver={'omega': 3.0}, data={'f': 'foo(v1)'},
                   coefficients={'kind': 'random_spd'})
    with pytest.raises(ConfigError) as info:
        parse_config(path)
    text = '\n'.join(info.value.errors)
    for fragment in ('schema_version', 'omega', 'foo', 'data.g', 'coefficients.lambda'):
        assert fragment in text


def test_parse_config_yaml_error(tmp_path):
    path = tmp_path / 'broken.yaml'
    path.write_text('mode: solve\ndomain: [1, 2\n')
    with pytest.raises(ConfigError, match='line'):
        parse_config(str(path))


def test_oracle_mode_requirements(tmp_path):
    path = _config(tmp_path, mode='oracle', domain=dict(DOMAIN, t_lo=0.5),
                   coefficients={'kind': 'diagonal', 'values': [2.0]},
                   oracle={'levels': [4, 8], 'n_paths': 11})
    with pytest.raises(ConfigError) as info:
        parse_config(path)
    text = '\n'.join(info.value.errors)
    for fragment in ('t_lo', 'identity', 'levels', 'even'):
        assert fragment in text


def test_oracle_interpolation_checked(tmp_path):
    path = _config(tmp_path, mode='oracle', domain=dict(DOMAIN, t_lo=0.0), oracle={'interpolation': 'nearest'})
    with pytest.raises(ConfigError, match='oracle.interpolation'):
        parse_config(path)
    config = parse_config(_config(tmp_path, mode='oracle', domain=dict(DOMAIN, t_lo=0.0)))
    assert config.oracle.interpolation == 'cubic'


def test_level_grid_counts_cells():
    grid = level_grid(domain_from_config(DOMAIN), 16)
    assert grid.shape == (17, 17, 17)


def test_solve_constant(tmp_path):
    out = tmp_path / 'out'
    assert _run('solve', _config(tmp_path), out) == EXIT_OK
    table = pd.read_csv(out / 'solution.csv')
    assert list(table.columns) == ['v1', 'x1', 't', 'value']
    assert len(table) == 9 ** 3
    np.testing.assert_allclose(table['value'], 1.0, atol=1e-7)
    with open(out / 'report.json') as f:
        report = json.load(f)
    assert report['mode'] == 'solve'
    assert report['ellipticity']['ok']
    assert report['config']['grid']['n_v'] == 9
    assert os.path.exists(out / 'timings.json')


def test_solve_without_obstacle(tmp_path):
    out = tmp_path / 'out'
    path = _config(tmp_path, data={'exact': 'sin(v1) + x1 * t'})
    assert _run('solve', path, out) == EXIT_OK
    with open(out / 'report.json') as f:
        assert json.load(f)['solver']['method'] == 'direct'


def test_solve_deterministic(tmp_path):
    path = _config(tmp_path, coefficients={'kind': 'random_spd', 'lambda': 0.5, 'Lambda': 2.0},
                   data={'f': '1', 'psi': '0', 'g': '0'})
    assert _run('solve', path, tmp_path / 'a') == EXIT_OK
    assert _run('solve', path, tmp_path / 'b') == EXIT_OK
    assert (tmp_path / 'a' / 'solution.csv').read_bytes() == (tmp_path / 'b' / 'solution.csv').read_bytes()


def test_config_error_exit_code(tmp_path):
    out = tmp_path / 'out'
    path = _config(tmp_path, grid={'n_v': 1, 'n_x': 9, 'n_t': 9})
    assert _run('solve', path, out) == EXIT_CONFIG
    with open(out / 'error.json') as f:
        error = json.load(f)
    assert error['type'] == 'ConfigError'
    assert error['exit_code'] == EXIT_CONFIG
    assert any('minimum 3' in e for e in error['details'])


def test_solver_error_exit_code(tmp_path):
    out = tmp_path / 'out'
    path = _config(tmp_path, data={'f': '1', 'psi': '-10', 'g': '0'}, solver={'max_iter': 1, 'tol': 1e-14})
    assert _run('solve', path, out) == EXIT_SOLVER
    with open(out / 'error.json') as f:
        assert json.load(f)['type'] == 'SolverError'


def test_verify_subset(tmp_path):
    out = tmp_path / 'out'
    path = _config(tmp_path, mode='verify',
                   verify={'n_group': 200, 'n_paths_mc': 4000,
                           'suites': ['group_algebra', 'm_matrix', 'constant_solution', 'feynman_kac']})
    assert _run('verify', path, out) == EXIT_OK
    with open(out / 'verify.json') as f:
        report = json.load(f)
    assert report['passed']
    assert sorted(report['suites']) == ['constant_solution', 'feynman_kac', 'group_algebra', 'm_matrix']


def test_verify_galilean_and_stability(tmp_path):
    out = tmp_path / 'out'
    path = _config(tmp_path, mode='verify',
                   verify={'n_stability': 3, 'stability_grid': 8, 'suites': ['galilean', 'stability']})
    assert _run('verify', path, out) == EXIT_OK
    with open(out / 'verify.json') as f:
        suites = json.load(f)['suites']
    errors = suites['galilean']['solve_errors']
    assert errors[2] < errors[1] < errors[0]
    assert len(suites['stability']['max_ratio']) == 2
    assert suites['stability']['refinement_growth'] < 2.0


def test_verify_failure_exit_code(tmp_path, monkeypatch):
    monkeypatch.setitem(valid.SUITES, 'always_fails', lambda config, rng: {'passed': False})
    out = tmp_path / 'out'
    path = _config(tmp_path, mode='verify', verify={'suites': ['always_fails']})
    assert _run('verify', path, out) == EXIT_VERIFICATION
    assert os.path.exists(out / 'verify.json')
    with open(out / 'error.json') as f:
        assert json.load(f)['type'] == 'VerificationError'


def test_convergence_small(tmp_path):
    out = tmp_path / 'out'
    domain = {'v_lo': [0.0], 'v_hi': [1.0], 'x_lo': [0.0], 'x_hi': [1.0], 't_lo': 0.0, 't_hi': 1.0}
    path = _config(tmp_path, mode='convergence', domain=domain, data={'exact': 'sin(pi*v1)*cos(x1)*exp(-t)'},
                   convergence={'levels': [8, 16, 32]}, solver={'method': 'penalized'})
    assert _run('convergence', path, out) == EXIT_OK
    table = pd.read_csv(out / 'convergence.csv')
    assert list(table['level']) == [8, 16, 32]
    assert np.all(np.diff(table['max_error']) < 0)
    with open(out / 'report.json') as f:
        report = json.load(f)
    assert report['passed']
    assert all(report['criteria'].values())


def test_convergence_failure_exit_code(tmp_path):
    out = tmp_path / 'out'
    domain = {'v_lo': [0.0], 'v_hi': [1.0], 'x_lo': [0.0], 'x_hi': [1.0], 't_lo': 0.0, 't_hi': 1.0}
    path = _config(tmp_path, mode='convergence', domain=domain, data={'exact': 'sin(pi*v1)*cos(x1)*exp(-t)'},
                   convergence={'levels': [4, 8, 16], 'min_order': 5.0}, solver={'method': 'penalized'})
    assert _run('convergence', path, out) == EXIT_VERIFICATION
    with open(out / 'report.json') as f:
        assert not json.load(f)['criteria']['order']
    with open(out / 'error.json') as f:
        error = json.load(f)
    assert error['type'] == 'VerificationError'
    assert 'order' in error['message']
    assert not error['details']['passed']


@pytest.mark.slow
def test_oracle_small(tmp_path):
    out = tmp_path / 'out'
    domain = {'v_lo': [-3.0], 'v_hi': [3.0], 'x_lo': [-2.0], 'x_hi': [4.0], 't_lo': 0.0, 't_hi': 0.5}
    path = _config(tmp_path, mode='oracle', domain=domain, solver={'method': 'penalized'},
                   oracle={'levels': [8, 16, 32], 'gh_order': 6, 'n_paths': 4000, 'lsmc_steps': 16,
                           'start': {'v': [0.0], 'x': [1.0]}})
    assert _run('oracle', path, out) == EXIT_OK
    gaps = pd.read_csv(out / 'oracle_gaps.csv')
    assert len(gaps) == 3
    with open(out / 'report.json') as f:
        report = json.load(f)
    assert report['lsmc']['n_paths'] == 4000
    assert report['passed']
    assert os.path.exists(out / 'oracle.csv')
