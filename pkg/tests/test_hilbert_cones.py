import math
from dataclasses import replace

import numpy as np
import pytest

from hilbert_cones import (ConeError, ConeFrame, ConeParams, InfeasibleParamsError, NotInConeError,
                           ParameterRangeError, build_frame, constraint_set, contraction_check, default_params,
                           diameter_bound, hilbert_cone, hilbert_plus, lasota_yorke_check, lasota_yorke_N,
                           lipschitz_seminorm, membership, mixing_constants, scalar_range)


def make_params(a=2.0, b=1.0, c=1.0):
    return ConeParams(a=a, b=b, c=c, kappa=0.5, epsilon=0.05, alpha=0.5, alpha_prime=1.5, C=1.0, D_F=1.0,
                      mass_ratio=1.0, d1=0.0, d2=0.0, measured_d1=0.0, measured_d2=0.0)


def two_cell_frame(pairs=False):
    empty = np.zeros(0, dtype=np.int64)
    return ConeFrame(step=0, m=np.array([0.5, 0.5]), mu=np.array([0.5, 0.5]), bad=np.array([False, False]),
                     pair_a=np.array([0]) if pairs else empty, pair_b=np.array([1]) if pairs else empty,
                     pair_s=np.array([1]) if pairs else empty, gamma=0.5, d1=0.0, d2=0.0)


def cosine_observable(tower, k):
    grid = tower.grid(k)
    return 1.0 + 0.1 * np.cos(2.0 * np.pi * tower.projection(k, grid.center, grid.level))


@pytest.fixture(scope='module')
def doubling_params():
    return default_params(0.5, 1.5, 0.5, C=1.0, D_F=1.0, mass_ratio=1.0, d1=1e-3, d2=0.0, epsilon=0.05)


def test_hilbert_plus_examples():
    phi = np.array([0.3, 1.7, 2.2])
    assert hilbert_plus(4.0 * phi, phi) == 0.0
    assert hilbert_plus(np.array([1.0, 2.0]), np.array([1.0, 1.0])) == pytest.approx(math.log(2.0))
    with pytest.raises(ConeError):
        hilbert_plus(np.array([1.0, -1.0]), np.array([1.0, 1.0]))


def test_diameter_bound_and_mixing_constants():
    assert diameter_bound(0.5, 1.5, 0.5) == pytest.approx(math.log(28.0))
    assert mixing_constants('empirical', 3.0) == (0.5, 1.5)
    assert mixing_constants('proof', 2.0) == (pytest.approx(0.125), pytest.approx(6.0))
    with pytest.raises(ParameterRangeError):
        mixing_constants('guess', 1.0)
    with pytest.raises(ParameterRangeError):
        diameter_bound(1.5, 2.0, 0.5)


def test_default_params_meet_every_inequality():
    params = default_params(0.5, 1.5, 0.5, C=1.0, D_F=1.0, mass_ratio=1.0, d1=0.01, d2=0.001, epsilon=0.05)
    assert params.a == pytest.approx(3.85)
    assert params.violations() == []
    # 𝒟₁ = 0.01 is too large, so the target is halved below it
    assert params.d1 < 0.01
    assert params.measured_d1 == 0.01
    assert not params.targets_met
    scaled = params.scaled(0.5)
    assert scaled.a == pytest.approx(0.5 * params.a)
    assert scaled.c == pytest.approx(0.5 * params.c)


def test_default_params_rejects_infeasible_inputs():
    base = dict(C=1.0, D_F=1.0, mass_ratio=1.0, d1=0.01, d2=0.001, epsilon=0.05)
    with pytest.raises(InfeasibleParamsError):
        default_params(0.5, 1.5, 0.5, **dict(base, D_F=1000.0))
    with pytest.raises(InfeasibleParamsError):
        default_params(0.5, 1.5, 0.5, **dict(base, epsilon=0.6))
    with pytest.raises(InfeasibleParamsError):
        default_params(0.5, 1.5, 0.5, theta_prime=1.0, **base)
    with pytest.raises(ParameterRangeError):
        default_params(1.5, 0.5, 0.5, **base)


def test_lasota_yorke_N_is_smallest():
    N = lasota_yorke_N(0.5, 1.0, 1.0, 0.1)
    assert N == 12
    assert math.exp(-0.25 * N) * 2.0 < 0.1
    assert math.exp(-0.25 * (N - 1)) * 2.0 >= 0.1


def test_membership_reports_worst_condition():
    frame = two_cell_frame()
    params = make_params()
    assert membership(np.array([1.0, 2.0]), frame, params).member
    report = membership(np.array([-1.0, 5.0]), frame, params)
    assert not report.member
    assert report.slacks['nonnegativity'] == pytest.approx(-1.0)
    assert report.worst_cells['nonnegativity'] == 0
    assert [row[0] for row in report.rows()] == ['integral', 'nonnegativity', 'average']
    with pytest.raises(NotInConeError):
        membership(np.array([-1.0, -1.0]), frame, params)


def test_bad_cells_must_stay_nonnegative():
    frame = replace(two_cell_frame(), bad=np.array([False, True]))
    report = membership(np.array([3.0, -0.5]), frame, make_params(a=10.0, c=4.0))
    assert not report.member
    assert report.slacks['nonnegativity'] == pytest.approx(-0.5)
    assert report.worst_cells['nonnegativity'] == 1
    assert report.slacks['average'] > 0.0
    assert report.slacks['bad_set'] > 0.0


def test_hilbert_cone_on_two_cells():
    frame = two_cell_frame()
    params = make_params()
    phi, psi = np.array([1.0, 1.0]), np.array([1.0, 2.0])
    constraints = constraint_set(frame, params)
    assert scalar_range(phi, psi, constraints) == (pytest.approx(2.0), pytest.approx(1.0))
    assert hilbert_cone(phi, psi, frame, params) == pytest.approx(math.log(2.0))
    assert hilbert_cone(phi, 3.0 * phi, frame, params) == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(NotInConeError):
        hilbert_cone(phi, np.array([-1.0, 3.0]), frame, params)


def test_lipschitz_seminorm_scales_by_separation():
    frame = two_cell_frame(pairs=True)
    assert lipschitz_seminorm(np.array([1.0, 2.0]), frame) == pytest.approx(2.0)
    assert lipschitz_seminorm(np.array([1.0, 2.0]), two_cell_frame()) == 0.0
    assert frame.mass_ratio == pytest.approx(1.0)


def test_build_frame_on_doubling_tower(doubling_tower, doubling_family):
    frame = build_frame(doubling_tower, doubling_family.density(0), horizon=10, k_max=3)
    assert frame.n_cells == 16
    assert not np.any(frame.bad)
    assert frame.d2 == 0.0
    assert len(frame.pair_a) == 2 * 28
    assert np.all((frame.pair_s >= 1) & (frame.pair_s <= 3))
    assert frame.integral(np.ones(16)) == pytest.approx(1.0)


def test_cone_contracts_along_doubling(doubling_cocycle, doubling_family, doubling_params):
    tower = doubling_cocycle.tower
    source = build_frame(tower, doubling_family.density(0), 10, 3)
    target = build_frame(tower, doubling_family.density(3), 10, 3)
    pairs = [(np.ones(16), cosine_observable(tower, 0))]
    report = contraction_check(doubling_cocycle, source, target, doubling_params, pairs)
    assert report.passed
    assert report.worst_ratio < report.tanh_factor


def test_lasota_yorke_holds_along_doubling(doubling_cocycle, doubling_family, doubling_params):
    tower = doubling_cocycle.tower
    source = build_frame(tower, doubling_family.density(0), 10, 3)
    target = build_frame(tower, doubling_family.density(3), 10, 3)
    report = lasota_yorke_check(doubling_cocycle, source, target, cosine_observable(tower, 0), doubling_params)
    assert report.passed
    assert report.checked['low'] == len(target.pair_a)
