import pytest

from driving_system import DrivingSystem
from fiber_maps import FiberFamily
from random_tower import RandomTower
from ulam_operator import EquivariantFamily, UlamCocycle

# Small grids keep every test in the suite to a few seconds


@pytest.fixture(scope='session')
def driving():
    return DrivingSystem()


@pytest.fixture(scope='session')
def quad_tower(driving):
    tower = RandomTower(driving, driving.point(0.0), FiberFamily.QUADRATIC, n_max=10, L_max=6,
                        cells_per_interval=2)
    tower.calibrate_weights()
    return tower


@pytest.fixture(scope='session')
def doubling_tower(driving):
    tower = RandomTower(driving, driving.point(0.0), FiberFamily.DOUBLING, n_max=8, L_max=2,
                        cells_per_interval=8)
    tower.calibrate_weights()
    return tower


@pytest.fixture(scope='session')
def quad_cocycle(quad_tower):
    return UlamCocycle(quad_tower, defect_budget=1.0)


@pytest.fixture(scope='session')
def doubling_cocycle(doubling_tower):
    return UlamCocycle(doubling_tower, defect_budget=1e-9)


@pytest.fixture(scope='session')
def doubling_family(doubling_cocycle):
    return EquivariantFamily(doubling_cocycle, 0, 30, n_back=20, tol=1e-10)


@pytest.fixture(scope='session')
def tiny_config_text():
    return '\n'.join([
        'fiber.family = doubling',
        'tower.n_max = 8',
        'tower.L_max = 2',
        'tower.cells_per_interval = 4',
        'run.fibers = 3',
        'run.density_snapshots = 2',
        'ulam.n_back = 20',
        'ulam.tol = 1e-10',
        'ulam.cesaro_n = 5',
        'cone.horizon = 10',
        'cone.k_max = 3',
        'cone.probes = 2',
        'cone.ly_k = 3',
        'schedule.samples = 100',
        'schedule.cap = 20',
        'schedule.persist = 2',
        'schedule.horizon = 120',
        'schedule.probes = 2',
        'correlate.n_max = 12',
        'correlate.fit_lo = 1',
        'correlate.fit_hi = 10',
        'correlate.mc_samples = 4000',
        'correlate.mc_batches = 4',
    ]) + '\n'
