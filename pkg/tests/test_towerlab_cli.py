import json
import os

import pandas as pd
import pytest

from experiment_runner import OUTPUT_ENV
from towerlab_cli import main, parse_args


@pytest.fixture
def output_root(tmp_path, monkeypatch):
    root = tmp_path / 'out'
    monkeypatch.setenv(OUTPUT_ENV, str(root))
    return root


@pytest.fixture
def config_file(tiny_config_text, tmp_path):
    path = tmp_path / 'tiny.cfg'
    path.write_text(tiny_config_text)
    return str(path)


def test_parse_args():
    args = parse_args(['verify', 'a.cfg', '--only', 'tail', '--only', 'markov'])
    assert args.command == 'verify'
    assert args.only == ['tail', 'markov']
    args = parse_args(['sweep', 'a.cfg', '--param', 'tower.gamma', '--values', '0.3,0.5'])
    assert (args.param, args.values) == ('tower.gamma', '0.3,0.5')
    with pytest.raises(SystemExit):
        parse_args(['verify', 'a.cfg', '--only', 'everything'])
    with pytest.raises(SystemExit):
        parse_args([])


def test_run_prints_run_directory(config_file, output_root, capsys):
    code = main(['run', config_file])
    assert code in (0, 1)
    run_dir = capsys.readouterr().out.strip()
    assert os.path.dirname(run_dir) == str(output_root)
    assert os.path.exists(os.path.join(run_dir, 'manifest.json'))


def test_verify_reports_json(config_file, output_root, capsys):
    assert main(['verify', config_file, '--only', 'partition', '--only', 'operator']) == 0
    report = json.loads(capsys.readouterr().out)
    assert report['checks']['partition']['status'] == 'skipped'
    assert report['checks']['operator']['status'] == 'pass'
    assert os.path.exists(os.path.join(str(output_root), report['run_id'], 'verify.json'))


def test_configuration_errors_exit_with_two(tmp_path, output_root):
    unknown = tmp_path / 'unknown.cfg'
    unknown.write_text('tower.height = 3\n')
    assert main(['run', str(unknown)]) == 2
    assert main(['verify', str(tmp_path / 'absent.cfg')]) == 2
    assert main(['sweep', str(unknown), '--param', 'tower.gamma', '--values', '0.5']) == 2


def test_sweep_rejects_invalid_value(config_file, output_root):
    assert main(['sweep', config_file, '--param', 'tower.gamma', '--values', '1.5']) == 2
    assert main(['sweep', config_file, '--param', 'tower.gamma', '--values', ' , ']) == 2


def test_sweep_writes_summary(config_file, output_root, capsys):
    code = main(['sweep', config_file, '--param', 'run.seed', '--values', '1'])
    assert code in (0, 1)
    path = capsys.readouterr().out.strip()
    assert os.path.basename(path) == 'sweep.csv'
    rows = pd.read_csv(path)
    assert list(rows.columns) == ['value', 'run_dir', 'theta', 'beta', 'r2', 'status']
    assert len(rows) == 1
    assert rows['status'].iloc[0] in ('ok', 'checks_failed')
