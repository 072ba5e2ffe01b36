import json
import math
import os

import numpy as np
import pandas as pd
import pytest

from config_manager import ConfigError, parse_config_text
from experiment_runner import (EXIT_CHECK_FAILED, EXIT_INTERNAL, EXIT_OK, VERIFY_FILE, CheckResult,
                               ExperimentContext, RunManifest, VerifyReport, _bisect_theta, _density_horizon,
                               _good_density, _sanitize, execute_run, run_id, sweep, verify_suite)
from good_times_scheduler import GoodTimes
from hilbert_cones import ConeFrame, ConeParams, constraint_set

RUN_FILES = ('manifest.json', 'tail.csv', 'tail.svg', 'density_0.csv', 'density_3.csv', 'density_0.svg',
             'cone_report.csv', 'schedule.csv', 'correlations.csv', 'fit.csv', 'correlation.svg')


@pytest.fixture(scope='module')
def tiny_config(tiny_config_text):
    return parse_config_text(tiny_config_text)


@pytest.fixture(scope='module')
def tiny_run(tiny_config, tmp_path_factory):
    return execute_run(tiny_config, str(tmp_path_factory.mktemp('runs')))


@pytest.fixture
def tiny_config_file(tiny_config_text, tmp_path):
    path = tmp_path / 'tiny.cfg'
    path.write_text(tiny_config_text)
    return str(path)


def make_times(times, horizon=120, M=3, q3=0):
    return GoodTimes(M=M, epsilon=0.1, r=0, times=tuple(times), horizon=horizon, visit_fraction=1.0, q3=q3)


def test_run_id_ignores_worker_count(tiny_config):
    rid = run_id(tiny_config)
    assert len(rid) == 12
    assert run_id(dict(tiny_config, **{'run.workers': 4})) == rid
    assert run_id(dict(tiny_config, **{'run.seed': 1})) != rid


def test_sanitize_makes_json_safe_values():
    raw = {'theta': math.inf, 'values': [np.float64(1.5), (np.int64(2), math.nan)], 3: 'x'}
    assert _sanitize(raw) == {'theta': None, 'values': [1.5, [2, None]], '3': 'x'}


def test_exit_codes():
    manifest = RunManifest(run_id='r', run_dir='d', config={}, seed=0, checks={'tail': True})
    assert manifest.exit_code == EXIT_OK
    manifest.checks['mixing'] = False
    assert manifest.exit_code == EXIT_CHECK_FAILED
    manifest.errors.append({'stage': 'cones', 'error': 'X', 'message': 'm'})
    assert manifest.exit_code == EXIT_INTERNAL
    report = VerifyReport('r', [CheckResult('tail', 'pass', '', 0.0), CheckResult('partition', 'skipped', '', 0.0)])
    assert report.exit_code == EXIT_OK
    report.results.append(CheckResult('markov', 'fail', '', 0.0))
    assert report.exit_code == EXIT_CHECK_FAILED
    assert report.as_dict()['checks']['markov']['status'] == 'fail'


def test_good_time_density_horizon():
    every_third = make_times(range(3, 121, 3))
    # 3/5 falls below 0.75; from 6 on every ratio clears it
    assert _density_horizon(every_third) == 6
    assert _good_density(every_third)
    sparse = make_times((3, 6))
    assert _density_horizon(sparse) is None
    assert not _good_density(sparse)
    assert _density_horizon(make_times(range(3, 121, 3), q3=None)) is None


def test_bisection_matches_sup_ratio():
    frame = ConeFrame(step=0, m=np.array([0.5, 0.5]), mu=np.array([0.5, 0.5]), bad=np.array([False, False]),
                      pair_a=np.zeros(0, dtype=np.int64), pair_b=np.zeros(0, dtype=np.int64),
                      pair_s=np.zeros(0, dtype=np.int64), gamma=0.5, d1=0.0, d2=0.0)
    params = ConeParams(a=2.0, b=1.0, c=1.0, kappa=0.5, epsilon=0.05, alpha=0.5, alpha_prime=1.5, C=1.0, D_F=1.0,
                        mass_ratio=1.0, d1=0.0, d2=0.0, measured_d1=0.0, measured_d2=0.0)
    theta = _bisect_theta(np.array([1.0, 1.0]), np.array([1.0, 2.0]), constraint_set(frame, params), 2.0, 1.0)
    assert theta == pytest.approx(math.log(2.0), abs=1e-10)


def test_oversized_weight_exponent_is_a_config_error():
    config = parse_config_text('tower.n_max = 10\ntower.L_max = 6\ntower.theta_prime = 50\n')
    with pytest.raises(ConfigError):
        ExperimentContext(config)


def test_run_writes_every_artifact(tiny_run):
    assert tiny_run.status in ('ok', 'checks_failed')
    assert tiny_run.exit_code in (EXIT_OK, EXIT_CHECK_FAILED)
    for name in RUN_FILES:
        assert os.path.exists(os.path.join(tiny_run.run_dir, name)), name
        assert name in tiny_run.artifacts
    with open(os.path.join(tiny_run.run_dir, 'manifest.json')) as f:
        manifest = json.load(f)
    assert manifest['run_id'] == tiny_run.run_id
    assert manifest['constants']['theta_hat'] is None
    assert set(manifest['timings']) == {'tower', 'densities', 'cones', 'schedule', 'correlations'}


def test_run_checks_on_doubling(tiny_run):
    checks = tiny_run.checks
    for name in ('tail', 'density', 'cone_constants', 'density_in_cone', 'mixing', 'good_times'):
        assert checks[name], name
    assert {'decay_fit', 'monte_carlo'} <= set(checks)
    constants = tiny_run.constants
    assert constants['q0'] == 3
    assert constants['C'] == pytest.approx(1.0)
    assert constants['r'] == 0


def test_run_tables(tiny_run):
    corr = pd.read_csv(os.path.join(tiny_run.run_dir, 'correlations.csv'))
    assert corr['n'].tolist() == list(range(13))
    assert list(corr.columns) == ['n', 'op_value', 'op_bound', 'mc_value', 'mc_stderr']
    assert (corr['op_value'] <= corr['op_bound'] + 1e-12).all()
    schedule = pd.read_csv(os.path.join(tiny_run.run_dir, 'schedule.csv'))
    M = tiny_run.constants['M']
    assert len(schedule) == tiny_run.constants['good_count']
    assert (schedule['t_i'] % M == tiny_run.constants['r']).all()
    assert schedule['t_i'].max() <= 120


def test_worker_count_does_not_change_results(tiny_config, tiny_run, tmp_path):
    other = execute_run(dict(tiny_config, **{'run.workers': 2}), str(tmp_path))
    assert other.run_id == tiny_run.run_id
    for name in ('correlations.csv', 'schedule.csv', 'density_3.csv', 'cone_report.csv', 'fit.csv'):
        with open(os.path.join(tiny_run.run_dir, name), 'rb') as a, open(os.path.join(other.run_dir, name), 'rb') as b:
            assert a.read() == b.read(), name


def test_verify_selected_checks(tiny_config_file, tmp_path):
    report = verify_suite(tiny_config_file, ['partition', 'operator', 'good_times'], str(tmp_path))
    statuses = {r.name: r.status for r in report.results}
    assert statuses == {'partition': 'skipped', 'operator': 'pass', 'good_times': 'pass'}
    assert report.exit_code == EXIT_OK
    with open(os.path.join(str(tmp_path), report.run_id, VERIFY_FILE)) as f:
        assert json.load(f)['passed'] is True
    with pytest.raises(ConfigError):
        verify_suite(tiny_config_file, ['nonsense'], str(tmp_path))


def test_sweep_rejects_bad_input(tiny_config_file, tmp_path):
    root = str(tmp_path / 'runs')
    with pytest.raises(ConfigError):
        sweep(tiny_config_file, 'tower.height', ['1'], root)
    with pytest.raises(ConfigError):
        sweep(tiny_config_file, 'tower.gamma', ['0.5', '1.5'], root)
    assert not os.path.exists(root)
