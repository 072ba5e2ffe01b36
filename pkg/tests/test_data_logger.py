import json
import math

import numpy as np
import pandas as pd
import pytest
from scipy import sparse

from data_logger import MANIFEST_FILE, ArtifactError, ArtifactLogger, InvalidArtifactError


def test_tables_use_full_precision(tmp_path):
    artifacts = ArtifactLogger(str(tmp_path / 'run'))
    path = artifacts.write_tail([0, 1, 2], [1.0, 0.1, 1.0 / 3.0])
    with open(path) as f:
        lines = f.read().splitlines()
    assert lines[0] == 'n,mass'
    assert lines[2] == '1,0.10000000000000001'
    assert pd.read_csv(path, float_precision='round_trip')['mass'].iloc[2] == 1.0 / 3.0
    assert artifacts.written == ['tail.csv']


def test_row_width_is_checked(tmp_path):
    artifacts = ArtifactLogger(str(tmp_path))
    with pytest.raises(InvalidArtifactError):
        artifacts.write_table('bad.csv', ['a', 'b'], [(1, 2), (3,)])
    assert not (tmp_path / 'bad.csv').exists()


def test_fit_without_values_writes_blanks(tmp_path):
    artifacts = ArtifactLogger(str(tmp_path))
    frame = pd.read_csv(artifacts.write_fit((5, 40), math.nan, math.nan, math.nan))
    assert list(frame.columns) == ['window_lo', 'window_hi', 'beta', 'C', 'r2']
    assert frame['window_hi'].iloc[0] == 40
    assert np.isnan(frame['beta'].iloc[0])


def test_operator_export_is_sorted(tmp_path):
    entries = sparse.csr_matrix(np.array([[0.0, 0.5], [0.25, 0.75]]))
    frame = pd.read_csv(ArtifactLogger(str(tmp_path)).write_operator(0, entries))
    assert frame[['row', 'col']].values.tolist() == [[0, 1], [1, 0], [1, 1]]
    assert frame['value'].tolist() == [0.5, 0.25, 0.75]


def test_schedule_is_one_based(tmp_path):
    frame = pd.read_csv(ArtifactLogger(str(tmp_path)).write_schedule([4, 7, 10]))
    assert frame['i'].tolist() == [1, 2, 3]
    assert frame['t_i'].tolist() == [4, 7, 10]


def test_manifest_json(tmp_path):
    artifacts = ArtifactLogger(str(tmp_path))
    artifacts.write_manifest({'seed': np.int64(3), 'theta': np.float64(0.25), 'cells': np.arange(3)})
    with open(tmp_path / MANIFEST_FILE) as f:
        data = json.load(f)
    assert data == {'seed': 3, 'theta': 0.25, 'cells': [0, 1, 2]}
    assert MANIFEST_FILE in artifacts.written
    with pytest.raises(ArtifactError):
        artifacts.write_json('nan.json', {'theta': math.nan})
    with pytest.raises(ArtifactError):
        artifacts.write_json('object.json', {'value': object()})


def test_run_dir_must_be_creatable(tmp_path):
    blocker = tmp_path / 'file'
    blocker.write_text('x')
    with pytest.raises(ArtifactError):
        ArtifactLogger(str(blocker))
