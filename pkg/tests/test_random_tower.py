import math
from dataclasses import replace

import numpy as np
import pytest

from driving_system import DrivingSystem
from fiber_maps import FiberFamily
from random_tower import (BOUNDED_TAIL_THETA_PRIME, InvalidTowerPointError, MarkovViolationError, RandomTower,
                          TailFitError, TowerError, WeightExponentError, fit_tail, quadratic_orbit_points)


def test_quadratic_orbit_points_are_outer_preimages():
    x, y = quadratic_orbit_points(12)
    assert x[0] == pytest.approx(0.25)
    assert np.allclose(4.0 * x[1:] * (1.0 - x[1:]), x[:-1], rtol=1e-12)
    assert np.allclose(x + y, 1.0)
    assert np.all(np.diff(x) < 0.0)


def test_quadratic_partition_layout(quad_tower):
    part = quad_tower.partition(0)
    n_max = quad_tower.n_max
    assert part.n_intervals == 2 * n_max + 1
    assert part.base == pytest.approx((-0.25, 0.25))
    assert part.return_times[n_max] == 0
    assert np.all(np.diff(part.cuts) > 0.0)
    assert part.tail_mass == pytest.approx(part.lengths[n_max])
    # symmetric around the critical point
    assert np.allclose(part.cuts, -part.cuts[::-1])


def test_quadratic_return_times_follow_labels(quad_tower):
    part = quad_tower.partition(0)
    offsets = quad_tower.label_offsets(0)
    assert len(np.unique(offsets)) == 1
    assert offsets[0] == 2
    mid = 0.5 * (part.cuts[3] + part.cuts[4])
    assert quad_tower.return_time(0, 0.5 + mid) == part.return_times[3] == part.labels[3] + 2
    with pytest.raises(InvalidTowerPointError):
        quad_tower.return_time(0, 0.9)


def test_tail_is_decreasing_and_calibrated(quad_tower):
    ns, masses = quad_tower.tail_series(0)
    assert np.all(np.diff(masses) <= 0.0)
    assert masses[0] == pytest.approx(0.5)
    assert quad_tower.tail_fit.theta > 0.0
    assert 0.0 < quad_tower.theta_prime < quad_tower.tail_fit.theta
    assert quad_tower.theta_prime == pytest.approx(0.5 * quad_tower.tail_fit.theta)


def test_fit_tail_recovers_exponential():
    ns = np.arange(0, 31)
    fit = fit_tail(ns, 2.0 * np.exp(-0.3 * ns), window=(5, 30))
    assert fit.theta == pytest.approx(0.3)
    assert fit.C == pytest.approx(2.0)
    assert fit.r2 == pytest.approx(1.0)
    with pytest.raises(TailFitError):
        fit_tail([5, 6, 7], [0.1, 0.05, 0.02], window=(5, 30))


def test_configured_weight_exponent_must_be_below_tail_rate(driving):
    tower = RandomTower(driving, driving.point(0.0), n_max=10, L_max=4, theta_prime=100.0)
    with pytest.raises(WeightExponentError):
        tower.calibrate_weights()


def test_invalid_tower_parameters(driving):
    with pytest.raises(TowerError):
        RandomTower(driving, driving.point(0.0), gamma=1.0)
    with pytest.raises(TowerError):
        RandomTower(driving, driving.point(0.0), n_max=1)


def test_quadratic_markov_and_aperiodicity(quad_tower):
    assert quad_tower.verify_markov(0) <= 1e-8
    assert quad_tower.verify_markov(3) <= 1e-8
    assert quad_tower.aperiodicity(0) == (2, 3)
    assert quad_tower.min_branch_expansion(0) > 1.0


def test_markov_check_targets_the_landing_fiber(quad_tower, monkeypatch):
    original = quad_tower.partition

    def moved_base(step):
        def partition(k, depth=None):
            part = original(k, depth)
            return replace(part, cuts=part.cuts + 0.01) if k == step else part
        return partition

    # quadratic branches return after at least two steps, so fiber 1 is never a landing fiber
    monkeypatch.setattr(quad_tower, 'partition', moved_base(1))
    assert quad_tower.verify_markov(0) <= 1e-8
    monkeypatch.setattr(quad_tower, 'partition', moved_base(2))
    with pytest.raises(MarkovViolationError):
        quad_tower.verify_markov(0)



def test_quadratic_grid_levels(quad_tower):
    grid = quad_tower.grid(0)
    assert grid.n_levels == quad_tower.L_max + 1
    assert grid.level_mass(0) == pytest.approx(0.5)
    # level ℓ only carries intervals with R > ℓ
    upper = grid.level > 0
    assert np.all(grid.return_time[upper] > grid.level[upper])
    cells = quad_tower.locate(0, grid.center, grid.level)
    assert np.array_equal(cells, np.arange(grid.n_cells))


def test_tower_map_climbs_then_returns(quad_tower):
    part = quad_tower.partition(0)
    t = 0.5 * (part.cuts[3] + part.cuts[4])
    r = int(part.return_times[3])
    level = 0
    for k in range(r - 1):
        t_next, level = quad_tower.tower_map(k, t, level)
        assert t_next == t
        assert level == k + 1
    landing, level = quad_tower.tower_map(r - 1, t, level)
    assert level == 0
    assert -0.25 <= landing <= 0.25
    with pytest.raises(InvalidTowerPointError):
        quad_tower.tower_map(0, 0.0, 0)


def test_doubling_tower_is_exact(doubling_tower):
    assert math.isinf(doubling_tower.tail_fit.theta)
    assert doubling_tower.theta_prime == BOUNDED_TAIL_THETA_PRIME
    grid = doubling_tower.grid(0)
    assert grid.n_cells == 16
    assert np.all(grid.level == 0)
    assert doubling_tower.locate(0, np.array([0.1]), np.array([0]))[0] == 1
    assert doubling_tower.tower_map(0, 0.3, 0) == (pytest.approx(0.6), 0)
    assert doubling_tower.aperiodicity(0) == (1, 1)
    assert doubling_tower.distortion_constant(0) == pytest.approx(1.0)
    assert doubling_tower.verify_distortion(0, depth=5, samples=4) == pytest.approx(0.0)
    assert doubling_tower.density_bound(0.0) == 1.0
    assert doubling_tower.min_branch_expansion(0) == 2.0


def test_separation_time_and_metric(doubling_tower):
    assert doubling_tower.separation_time(0, (0.1, 0), (0.4, 0), depth=5) == 1
    assert doubling_tower.metric(0, (0.1, 0), (0.4, 0), depth=5) == 0.5
    assert doubling_tower.separation_time(0, (0.1, 0), (0.6, 0), depth=5) == 0
    assert doubling_tower.metric(0, (0.1, 0), (0.6, 0), depth=5) == 1.0
    assert doubling_tower.separation_time(0, (0.1, 0), (0.1 + 1e-9, 0), depth=5) is None
    assert doubling_tower.metric(0, (0.1, 0), (0.1 + 1e-9, 0), depth=5) == 0.0


def test_separation_counts_returns_not_steps(quad_tower):
    part = quad_tower.grid_partition(0)
    j = int(np.argmax(np.where(part.resolved, part.lengths, 0.0)))
    assert part.return_times[j] >= 2
    inset = 0.01 * part.lengths[j]
    a, b = part.cuts[j] + inset, part.cuts[j + 1] - inset
    # one return block spreads the interval over the whole base
    assert quad_tower.separation_time(0, (a, 0), (b, 0), depth=5) == 1



def test_bad_set_and_good_diameter(doubling_tower):
    assert doubling_tower.bad_set(0, 0).d2 == pytest.approx(1.0)
    bad = doubling_tower.bad_set(0, 10)
    assert bad.d2 == 0.0
    assert doubling_tower.good_diam(0, 5, bad) == pytest.approx(0.5 ** 5)
    weights = doubling_tower.contraction_weight(0, np.array([0.2]), np.array([0]), 3)
    assert weights[0] == pytest.approx(0.5 ** 4)
    with pytest.raises(TowerError):
        doubling_tower.bad_set(0, -1)


def test_lorenz_tower_builds_markov_partition():
    driving = DrivingSystem()
    tower = RandomTower(driving, driving.point(0.0), FiberFamily.LORENZ, n_max=8, L_max=4)
    part = tower.partition(0)
    assert part.base == pytest.approx((0.0, 0.5))
    assert part.return_times[0] == 0
    assert np.all(part.return_times[1:] > 0)
    assert tower.verify_markov(0) <= 1e-8


def test_weights_and_measure(quad_tower, driving):
    theta = quad_tower.theta_prime
    assert np.allclose(quad_tower.weight([0, 3]), [1.0, math.exp(3.0 * theta)])
    grid = quad_tower.grid(2)
    m = grid.weights(theta) * grid.width
    base = grid.level == 0
    assert np.allclose(m[base], grid.width[base])
    assert np.all(m[~base] > grid.width[~base])
    fresh = RandomTower(driving, driving.point(0.0), FiberFamily.QUADRATIC, n_max=4, L_max=2)
    with pytest.raises(WeightExponentError):
        fresh.weight(1)
