import pytest

from good_times_scheduler import (InsufficientSamplesError, Q1Study, ResidueNotFoundError, ScheduleError, choose_M,
                                  contraction_exponent, good_times)
from hilbert_cones import default_params


def test_choose_M_quantiles():
    assert choose_M([7] * 100, 0.1) == 7
    assert choose_M(list(range(1, 101)), 0.5) == 50
    assert choose_M([1] * 95 + [None] * 5, 0.1) == 1
    with pytest.raises(InsufficientSamplesError):
        choose_M([1] * 99, 0.1)
    with pytest.raises(ScheduleError):
        choose_M([1] * 80 + [None] * 20, 0.1)
    with pytest.raises(ScheduleError):
        choose_M([1] * 100, 1.0)


def test_contraction_exponent():
    assert contraction_exponent(10, 2, 0.1, 0.5) == pytest.approx(0.0625)
    assert contraction_exponent(0, 3, 0.2, 0.5) == 1.0
    with pytest.raises(ScheduleError):
        contraction_exponent(10, 0, 0.1, 0.5)
    with pytest.raises(ScheduleError):
        contraction_exponent(10, 2, 0.6, 0.5)
    with pytest.raises(ScheduleError):
        contraction_exponent(10, 2, 0.1, 1.0)


def test_good_times_when_every_instant_is_good(driving):
    times = good_times(driving, driving.point(0.0), 3, 0.1, 30, lambda k: True)
    assert times.r == 0
    assert times.times == (3, 6, 9, 12, 15, 18, 21, 24, 27, 30)
    assert times.visit_fraction == 1.0
    assert times.q3 == 0
    assert times.count(15) == 5
    assert times.density(30) == pytest.approx(1.0)


def test_good_times_picks_the_good_residue(driving):
    times = good_times(driving, driving.point(0.0), 3, 0.1, 30, lambda k: k % 3 != 0, q1_start=5)
    assert times.r == 1
    assert times.times[0] == 7
    assert all(t % 3 == 1 for t in times.times)
    with pytest.raises(ResidueNotFoundError):
        good_times(driving, driving.point(0.0), 3, 0.1, 30, lambda k: False)
    with pytest.raises(ScheduleError):
        good_times(driving, driving.point(0.0), 40, 0.1, 30, lambda k: True)


def test_q1_study_on_doubling(doubling_cocycle, doubling_family):
    params = default_params(0.5, 1.5, 0.5, C=1.0, D_F=1.0, mass_ratio=1.0, d1=1e-3, d2=0.0, epsilon=0.05)
    study = Q1Study(doubling_cocycle, doubling_family, params, horizon=10, k_max=3, cap=10, probes=2, persist=2)
    vectors = study.probe_vectors(0)
    assert len(vectors) == 2
    q1 = study.estimate_q1(0)
    assert q1 is not None
    assert 4 <= q1 <= 10
    assert study.q1_table(0, 3) == [q1, study.estimate_q1(1), study.estimate_q1(2)]
    with pytest.raises(ScheduleError):
        Q1Study(doubling_cocycle, doubling_family, params, horizon=10, k_max=3, cap=0)
