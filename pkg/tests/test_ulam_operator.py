import numpy as np
import pytest

from ulam_operator import (ConvergenceError, DefectBudgetError, EquivariantFamily, GridMismatchError, HorizonError,
                           UlamCocycle, UlamError)


def test_doubling_operator_is_exact(doubling_cocycle):
    op = doubling_cocycle.operator(0)
    assert op.shape == (16, 16)
    assert np.allclose(op.row_sums, 1.0)
    assert np.all(op.defect == 0.0)
    dense = op.entries.toarray()
    for i in range(8):
        assert dense[i, 2 * i] == pytest.approx(0.5)
        assert dense[i, 2 * i + 1] == pytest.approx(0.5)
        assert dense[8 + i, 2 * i] == pytest.approx(0.5)


def test_doubling_lebesgue_is_invariant(doubling_cocycle):
    width = doubling_cocycle.tower.grid(0).width
    mass, lost = doubling_cocycle.push(0, 5, width.copy())
    assert np.allclose(mass, width)
    assert lost == pytest.approx(0.0)
    assert doubling_cocycle.uniform_bound(0, 5) == pytest.approx(1.0)
    assert np.allclose(doubling_cocycle.normalized_apply(0, 3, np.ones(16)), 1.0)
    assert np.allclose(doubling_cocycle.pull(0, 3, np.ones(16)), 1.0)


def test_doubling_equivariant_family(doubling_family):
    for k in (0, 7, 30):
        h = doubling_family.density(k)
        assert np.allclose(h.values, 1.0)
        assert h.integral == pytest.approx(1.0)
        assert np.allclose(h.m_view, 1.0)
    assert doubling_family.equivariance_residual(3) == pytest.approx(0.0, abs=1e-12)
    assert doubling_family.bounds() == (pytest.approx(1.0), pytest.approx(1.0))
    with pytest.raises(HorizonError):
        doubling_family.density(31)


def test_family_extends_forward(doubling_cocycle):
    family = EquivariantFamily(doubling_cocycle, 0, 5, n_back=20, tol=1e-10)
    family.extend(12)
    assert family.stop == 12
    assert np.allclose(family.density(12).values, 1.0)
    family.extend(3)
    assert family.stop == 12


def test_compose_matches_sequential_push(quad_cocycle):
    grid = quad_cocycle.tower.grid(0)
    mass = np.random.default_rng(1).random(grid.n_cells)
    product = quad_cocycle.compose(0, 3)
    pushed, _ = quad_cocycle.push(0, 3, mass)
    assert np.allclose(product.push(mass), pushed)
    assert np.all(product.defect >= 0.0)


def test_quadratic_rows_never_exceed_one(quad_cocycle):
    op = quad_cocycle.operator(2)
    assert np.all(op.row_sums <= 1.0 + 1e-9)
    # the unresolved zone has no outgoing transitions
    unresolved = quad_cocycle.tower.grid(2).return_time == 0
    assert np.allclose(op.defect[unresolved], 1.0)


def test_duality_between_pull_and_normalized_apply(quad_cocycle):
    rng = np.random.default_rng(7)
    n = 4
    phi = rng.normal(size=quad_cocycle.tower.grid(n).n_cells)
    psi = rng.normal(size=quad_cocycle.tower.grid(0).n_cells)
    assert quad_cocycle.duality_gap(0, n, phi, psi) < 1e-10


def test_cesaro_density_is_normalised(quad_cocycle):
    density = quad_cocycle.cesaro_density(0, 10)
    assert density.integral == pytest.approx(1.0)
    assert np.all(density.values >= 0.0)
    with pytest.raises(UlamError):
        quad_cocycle.cesaro_density(0, 0)


def test_defect_budget_is_enforced(quad_tower):
    strict = UlamCocycle(quad_tower, defect_budget=0.0)
    with pytest.raises(DefectBudgetError):
        strict.compose(0, 3)


def test_grid_mismatch_and_short_pullback(doubling_cocycle):
    with pytest.raises(GridMismatchError):
        doubling_cocycle.operator(0).push(np.ones(5))
    with pytest.raises(GridMismatchError):
        doubling_cocycle.operator(0).koopman(np.ones(5))
    with pytest.raises(ConvergenceError):
        doubling_cocycle.equivariant_density(0, n_back=5)


def test_partial_return_cover_goes_to_defect(doubling_tower, monkeypatch):
    # preimages shrunk to 0.35 of each half: cells 5 and 13 are 60% covered, 6, 7, 14, 15 not at all
    monkeypatch.setattr(doubling_tower.geometry, 'pullback',
                        lambda part, interval, targets: 0.5 * (0.7 * np.asarray(targets, dtype=float) + interval))
    op = UlamCocycle(doubling_tower, defect_budget=1.0).build_operator(0)
    expected = np.ones(16)
    expected[[5, 13]] = 0.6
    expected[[6, 7, 14, 15]] = 0.0
    assert np.allclose(op.row_sums, expected)
    assert np.allclose(op.defect, 1.0 - expected)
