import logging
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass
from threading import Lock
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import linregress

from driving_system import DrivingSystem, FiberPoint
from fiber_maps import (CRITICAL_POINT, HALF_WIDTH, X0, X1, FiberFamily, FiberMap, LorenzMap,
                        QuadraticMap, create_fiber_map)

# Set up logging
logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(levelname)s - %(message)s')
logger = logging.getLogger(__name__)

# Constants
MARKOV_TOLERANCE = 1e-8
ENDPOINT_SHIFT = 1e-10
DEFAULT_RETURN_CAP = 200
TAIL_WINDOW = (5, 30)
BOUNDED_TAIL_THETA_PRIME = 0.5


class TowerError(Exception):
    """Base exception for tower construction"""
    pass


class MarkovViolationError(TowerError):
    """Raised when a return branch is not full"""
    pass


class InvalidTowerPointError(TowerError):
    """Raised for points outside the tower"""
    pass


class TailFitError(TowerError):
    """Raised when the tail fit window is too small"""
    pass


class WeightExponentError(TowerError):
    """Raised when θ′ is not below the fitted tail rate"""
    pass


@dataclass(frozen=True)
class TowerPartition:
    """
    Return-interval partition of the base Λ of one fiber.

    Coordinates are offsets t = x - anchor so that the accumulation point of
    the cuts sits at t = 0 and keeps full relative precision. Intervals with
    return time 0 are unresolved (beyond the built depth).
    """
    step: int
    anchor: float
    cuts: np.ndarray
    return_times: np.ndarray
    labels: np.ndarray
    tail_mass: float

    @property
    def base(self) -> Tuple[float, float]:
        return float(self.cuts[0]), float(self.cuts[-1])

    @property
    def n_intervals(self) -> int:
        return len(self.return_times)

    @property
    def lengths(self) -> np.ndarray:
        return np.diff(self.cuts)

    @property
    def resolved(self) -> np.ndarray:
        return self.return_times > 0

    def locate(self, t: np.ndarray) -> np.ndarray:
        """Interval index of each offset, -1 outside Λ"""
        t = np.asarray(t, dtype=float)
        idx = np.searchsorted(self.cuts, t, side='right') - 1
        idx = np.where(t == self.cuts[-1], self.n_intervals - 1, idx)
        return np.where((t < self.cuts[0]) | (t > self.cuts[-1]), -1, idx)

    def tail(self, n: int) -> float:
        """λ{R > n} including the unresolved mass"""
        lengths = self.lengths
        deep = (self.return_times > n) | (self.return_times == 0)
        return float(np.sum(lengths[deep]))

    def mass_by_return_time(self) -> Dict[int, float]:
        masses: Dict[int, float] = {}
        for r, length in zip(self.return_times, self.lengths):
            if r > 0:
                masses[int(r)] = masses.get(int(r), 0.0) + float(length)
        return masses


@dataclass(frozen=True)
class TowerGrid:
    """
    Cells of the truncated tower over one fiber.

    Level ℓ holds the cells of the return intervals of fiber k-ℓ with R > ℓ;
    level 0 also holds the unresolved zone, whose cells carry R = 0.
    """
    step: int
    cells_per_interval: int
    level: np.ndarray
    interval: np.ndarray
    sub: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    return_time: np.ndarray
    level_offsets: np.ndarray
    slots: Tuple[np.ndarray, ...]

    @property
    def n_cells(self) -> int:
        return len(self.level)

    @property
    def n_levels(self) -> int:
        return len(self.slots)

    @property
    def width(self) -> np.ndarray:
        return self.hi - self.lo

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    def weights(self, theta_prime: float) -> np.ndarray:
        """v = e^{ℓθ′} per cell"""
        return np.exp(self.level * theta_prime)

    def index(self, level: np.ndarray, interval: np.ndarray, sub: np.ndarray) -> np.ndarray:
        """Flat index of (ℓ, interval, sub-cell); -1 where the cell does not exist"""
        level = np.asarray(level, dtype=np.int64)
        interval = np.asarray(interval, dtype=np.int64)
        sub = np.asarray(sub, dtype=np.int64)
        out = np.full(level.shape, -1, dtype=np.int64)
        for lev in np.unique(level):
            if lev < 0 or lev >= self.n_levels:
                continue
            mask = level == lev
            table = self.slots[lev]
            ivals = interval[mask]
            valid = (ivals >= 0) & (ivals < len(table))
            slot = np.full(ivals.shape, -1, dtype=np.int64)
            slot[valid] = table[ivals[valid]]
            flat = self.level_offsets[lev] + slot * self.cells_per_interval + sub[mask]
            out[mask] = np.where(slot >= 0, flat, -1)
        return out

    def level_mass(self, level: int) -> float:
        return float(np.sum(self.width[self.level == level]))


@dataclass(frozen=True)
class TailFit:
    theta: float
    C: float
    r2: float
    window: Tuple[int, int]


@dataclass(frozen=True)
class BadSet:
    """Cells of G^c for one grid and horizon, with 𝒟₂ = m(G^c)"""
    step: int
    horizon: int
    returns: int
    mask: np.ndarray
    d2: float


def quadratic_orbit_points(n_max: int) -> Tuple[np.ndarray, np.ndarray]:
    """x_n and y_n = 1 - x_n: outer-branch preimages of X0 = 1/4"""
    x = np.empty(n_max + 1)
    x[0] = 0.75 / (2.0 * (1.0 + math.sqrt(0.25)))
    for n in range(1, n_max + 1):
        x[n] = x[n - 1] / (2.0 * (1.0 + math.sqrt(1.0 - x[n - 1])))
    return x, 1.0 - x


def fit_tail(ns: Sequence[int], masses: Sequence[float], window: Tuple[int, int] = TAIL_WINDOW) -> TailFit:
    """
    Least-squares fit of log λ{R > n} = log C - θ n over the window.

    Raises:
    - TailFitError: If fewer than 4 positive points fall in the window
    """
    ns = np.asarray(ns, dtype=float)
    masses = np.asarray(masses, dtype=float)
    keep = (ns >= window[0]) & (ns <= window[1]) & (masses > 0.0)
    if np.count_nonzero(keep) < 4:
        raise TailFitError(f"Need at least 4 tail points in window {window}, got {np.count_nonzero(keep)}")
    fit = linregress(ns[keep], np.log(masses[keep]))
    return TailFit(theta=float(-fit.slope), C=float(math.exp(fit.intercept)),
                   r2=float(fit.rvalue ** 2), window=(int(window[0]), int(window[1])))


def build_quadratic_partition(fiber: QuadraticMap, n_max: int, step: int = 0,
                              return_cap: int = DEFAULT_RETURN_CAP) -> TowerPartition:
    """
    Cuts ±o_n of Λ = [X0, 3/4] around the critical point, o_n = w(4 x_n)^{1/α}.

    The cut at offset -o_n is z_n^-(ω). Return times come from iterating the
    interval midpoints; the reference labelling R = n on [z_n^-, z_{n+1}^-)
    is kept in `labels` for comparison.
    """
    if n_max < 2:
        raise TowerError(f"Quadratic partition needs n_max >= 2, got {n_max}")
    x, _ = quadratic_orbit_points(n_max)
    offsets = HALF_WIDTH * (4.0 * x) ** (1.0 / fiber.alpha)
    if np.any(np.diff(offsets) >= 0.0):
        raise TowerError("Critical offsets are not strictly decreasing; depth exceeds float resolution")
    cuts = np.concatenate([-offsets, offsets[::-1]])
    labels = np.concatenate([np.arange(n_max), [-1], np.arange(n_max)[::-1]])
    mids = 0.5 * (cuts[:-1] + cuts[1:])
    _, steps, alive = QuadraticTowerGeometry.advance_map(fiber, mids, return_cap)
    returns = np.where(alive, steps, 0)
    returns[n_max] = 0
    tail = float(cuts[n_max + 1] - cuts[n_max])
    return TowerPartition(step=step, anchor=CRITICAL_POINT, cuts=cuts, return_times=returns.astype(np.int64),
                          labels=labels.astype(np.int64), tail_mass=tail)


class TowerGeometry(ABC):
    """Family-specific inducing scheme: partitions, return maps, Jacobians, inverse branches"""
    anchor: float

    def __init__(self, tower: 'RandomTower'):
        self.tower = tower

    @abstractmethod
    def partition(self, k: int, depth: int) -> TowerPartition:
        pass

    @abstractmethod
    def advance(self, k: int, t: np.ndarray, cap: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """First return of base offsets of fiber k: (landing offsets, return times, alive)"""
        pass

    @abstractmethod
    def jacobian(self, k: int, t: np.ndarray) -> np.ndarray:
        """|Df^R| along the return block of each base offset"""
        pass

    @abstractmethod
    def pullback(self, part: TowerPartition, interval: int, targets: np.ndarray) -> np.ndarray:
        """Preimages in one return interval of target offsets in the landing fiber's base"""
        pass

    @abstractmethod
    def depth_for_max_return(self, max_return: int) -> int:
        pass


class QuadraticTowerGeometry(TowerGeometry):
    anchor = CRITICAL_POINT

    def partition(self, k: int, depth: int) -> TowerPartition:
        return build_quadratic_partition(self.tower.fiber(k), depth, step=k, return_cap=self.tower.return_cap)

    @staticmethod
    def advance_map(fiber: QuadraticMap, t: np.ndarray, cap: int):
        t = np.asarray(t, dtype=float)
        gap = 0.25 * (np.abs(t) / HALF_WIDTH) ** fiber.alpha
        y = 4.0 * gap * (1.0 - gap)
        steps = np.full(t.shape, 2, dtype=np.int64)
        active = y < X0
        while np.any(active):
            y = np.where(active, 4.0 * y * (1.0 - y), y)
            steps = np.where(active, steps + 1, steps)
            active = (y < X0) & (steps < cap)
        alive = (y >= X0) & (y <= X1)
        return y - CRITICAL_POINT, steps, alive

    def advance(self, k, t, cap):
        return self.advance_map(self.tower.fiber(k), t, cap)

    def jacobian(self, k, t):
        fiber = self.tower.fiber(k)
        t = np.asarray(t, dtype=float)
        alpha = fiber.alpha
        jac = (alpha / (4.0 * HALF_WIDTH ** alpha)) * np.abs(t) ** (alpha - 1.0)
        gap = 0.25 * (np.abs(t) / HALF_WIDTH) ** alpha
        jac = jac * (4.0 - 8.0 * gap)
        y = 4.0 * gap * (1.0 - gap)
        active = y < X0
        while np.any(active):
            jac = np.where(active, jac * (4.0 - 8.0 * y), jac)
            y = np.where(active, 4.0 * y * (1.0 - y), y)
            active = y < X0
        return jac

    def pullback(self, part, interval, targets):
        fiber = self.tower.fiber(part.step)
        y = CRITICAL_POINT + np.asarray(targets, dtype=float)
        for _ in range(int(part.return_times[interval]) - 2):
            y = y / (2.0 * (1.0 + np.sqrt(1.0 - y)))
        gap = y / (2.0 * (1.0 + np.sqrt(1.0 - y)))
        offset = HALF_WIDTH * (4.0 * gap) ** (1.0 / fiber.alpha)
        left = part.cuts[interval + 1] <= 0.0
        return -offset if left else offset

    def depth_for_max_return(self, max_return):
        return max(2, max_return - 1)


class LorenzTowerGeometry(TowerGeometry):
    """First return to Λ = (0, 1/2]; excursions live in the left half near -1/2"""
    anchor = 0.0

    def partition(self, k, depth):
        fiber = self.tower.fiber(k)
        chain = np.full(max(depth - 1, 0), 0.5)
        for i in range(depth - 1, 0, -1):
            chain[i - 1:] = self.tower.fiber(k + i).left_inverse_offset(chain[i - 1:])
        cut_points = fiber.right_inverse_shifted(np.concatenate([[0.5], chain]))
        cuts = np.concatenate([[0.0], cut_points[::-1], [0.5]])
        if np.any(np.diff(cuts) <= 0.0):
            raise TowerError("Lorenz cuts are not strictly increasing; depth exceeds float resolution")
        mids = 0.5 * (cuts[:-1] + cuts[1:])
        mids[0] = 0.5 * cuts[1]
        _, steps, alive = self.advance(k, mids, self.tower.return_cap)
        returns = np.where(alive, steps, 0).astype(np.int64)
        returns[0] = 0
        return TowerPartition(step=k, anchor=0.0, cuts=cuts, return_times=returns,
                              labels=np.full(len(returns), -1, dtype=np.int64), tail_mass=float(cuts[1]))

    def advance(self, k, t, cap):
        fiber: LorenzMap = self.tower.fiber(k)
        t = np.asarray(t, dtype=float)
        d = fiber._lift(2.0 * t)
        steps = np.ones(t.shape, dtype=np.int64)
        active = d <= 0.5
        m = k
        while np.any(active) and m - k < cap:
            m += 1
            moved = self.tower.fiber(m).left_offset(np.where(active, d, 0.0))
            d = np.where(active, moved, d)
            steps = np.where(active, steps + 1, steps)
            active = active & (d <= 0.5)
        return d - 0.5, steps, ~active

    def jacobian(self, k, t):
        fiber: LorenzMap = self.tower.fiber(k)
        t = np.asarray(t, dtype=float)
        jac = 2.0 * fiber._lift_slope(2.0 * t)
        d = fiber._lift(2.0 * t)
        active = d <= 0.5
        m = k
        while np.any(active) and m - k < self.tower.return_cap:
            m += 1
            nxt = self.tower.fiber(m)
            jac = np.where(active, jac * nxt.left_offset_slope(np.where(active, d, 0.0)), jac)
            d = np.where(active, nxt.left_offset(np.where(active, d, 0.0)), d)
            active = active & (d <= 0.5)
        return jac

    def pullback(self, part, interval, targets):
        t = np.asarray(targets, dtype=float) + 0.5
        r = int(part.return_times[interval])
        for m in range(part.step + r - 1, part.step, -1):
            t = self.tower.fiber(m).left_inverse_offset(t)
        return self.tower.fiber(part.step).right_inverse_shifted(t)

    def depth_for_max_return(self, max_return):
        return max(2, max_return)


class DoublingTowerGeometry(TowerGeometry):
    """Autonomous toy tower: Λ = [0, 1), two full branches with R = 1"""
    anchor = 0.0

    def partition(self, k, depth):
        return TowerPartition(step=k, anchor=0.0, cuts=np.array([0.0, 0.5, 1.0]),
                              return_times=np.array([1, 1], dtype=np.int64),
                              labels=np.array([-1, -1], dtype=np.int64), tail_mass=0.0)

    def advance(self, k, t, cap):
        t = np.asarray(t, dtype=float)
        return np.mod(2.0 * t, 1.0), np.ones(t.shape, dtype=np.int64), np.ones(t.shape, dtype=bool)

    def jacobian(self, k, t):
        return np.full(np.shape(t), 2.0)

    def pullback(self, part, interval, targets):
        return 0.5 * (np.asarray(targets, dtype=float) + interval)

    def depth_for_max_return(self, max_return):
        return 1


GEOMETRIES = {
    FiberFamily.QUADRATIC: QuadraticTowerGeometry,
    FiberFamily.LORENZ: LorenzTowerGeometry,
    FiberFamily.DOUBLING: DoublingTowerGeometry,
}


class RandomTower:
    """
    Random Young tower over one driving orbit.

    Fibers are indexed by the integer step k along the orbit of `origin`.
    Partitions, grids and derived tables are built lazily and cached; every
    cached object is immutable, so concurrent readers see identical values.
    """

    def __init__(self, driving: DrivingSystem, origin: FiberPoint, family: FiberFamily = FiberFamily.QUADRATIC,
                 lorenz_alpha: float = 0.3, n_max: int = 30, L_max: int = 40, cells_per_interval: int = 2,
                 gamma: float = 0.5, theta_prime: Optional[float] = None, zeta: float = 0.1,
                 return_cap: int = DEFAULT_RETURN_CAP):
        if not 0.0 < gamma < 1.0:
            raise TowerError(f"gamma must lie in (0, 1), got {gamma}")
        if not 0.0 < zeta < 1.0:
            raise TowerError(f"zeta must lie in (0, 1), got {zeta}")
        if L_max < 1 or cells_per_interval < 1 or n_max < 2 or return_cap < 1:
            raise TowerError("L_max, cells_per_interval and return_cap must be positive and n_max >= 2")
        self.driving = driving
        self.origin = origin
        self.family = family
        self.lorenz_alpha = lorenz_alpha
        self.n_max = n_max
        self.L_max = L_max
        self.cells_per_interval = cells_per_interval
        self.gamma = gamma
        self.zeta = zeta
        self.return_cap = return_cap
        self.geometry = GEOMETRIES[family](self)
        self.grid_depth = self.geometry.depth_for_max_return(L_max + 1)
        self.lock = Lock()
        self._fibers: Dict[int, FiberMap] = {}
        self._partitions: Dict[Tuple[int, int], TowerPartition] = {}
        self._grids: Dict[int, TowerGrid] = {}
        self._bad_sets: Dict[Tuple[int, int], BadSet] = {}
        self._pairs: Dict[Tuple[int, int], Tuple[np.ndarray, np.ndarray, np.ndarray]] = {}
        self.tail_fit: Optional[TailFit] = None
        self.theta_prime = theta_prime

    @classmethod
    def from_config(cls, config: Dict, driving: Optional[DrivingSystem] = None) -> 'RandomTower':
        driving = driving or DrivingSystem.from_config(config)
        theta = config['tower.theta_prime']
        return cls(
            driving=driving,
            origin=driving.point(float(config['run.origin'])),
            family=FiberFamily(config['fiber.family']),
            lorenz_alpha=float(config['fiber.lorenz_alpha']),
            n_max=int(config['tower.n_max']),
            L_max=int(config['tower.L_max']),
            cells_per_interval=int(config['tower.cells_per_interval']),
            gamma=float(config['tower.gamma']),
            theta_prime=None if theta == 'auto' else float(theta),
            zeta=float(config['tower.zeta']),
            return_cap=int(config['tower.return_cap']),
        )

    # fibers and partitions

    def fiber_point(self, k: int) -> FiberPoint:
        return self.driving.orbit(self.origin, k)

    def alpha(self, k: int) -> float:
        return self.driving.alpha(self.fiber_point(k))

    def fiber(self, k: int) -> FiberMap:
        with self.lock:
            fiber = self._fibers.get(k)
        if fiber is None:
            fiber = create_fiber_map(self.family, self.alpha(k), self.lorenz_alpha)
            with self.lock:
                self._fibers[k] = fiber
        return fiber

    def partition(self, k: int, depth: Optional[int] = None) -> TowerPartition:
        depth = self.n_max if depth is None else depth
        key = (k, depth)
        with self.lock:
            part = self._partitions.get(key)
        if part is None:
            part = self.geometry.partition(k, depth)
            with self.lock:
                self._partitions[key] = part
        return part

    def grid_partition(self, k: int) -> TowerPartition:
        return self.partition(k, self.grid_depth)

    def return_time(self, k: int, x: float, cap: Optional[int] = None) -> Optional[int]:
        """First return of the absolute point x ∈ Λ of fiber k; None when the cap is exceeded"""
        t = np.array([x - self.geometry.anchor])
        lo, hi = self.partition(k).base
        if not lo <= t[0] <= hi:
            raise InvalidTowerPointError(f"Point {x} is outside the base of fiber {k}")
        _, steps, alive = self.geometry.advance(k, t, cap or self.return_cap)
        return int(steps[0]) if alive[0] else None

    # tails and the weight exponent

    def tail_series(self, k: int = 0, n_values: Optional[Sequence[int]] = None) -> Tuple[np.ndarray, np.ndarray]:
        part = self.partition(k)
        ns = np.arange(0, self.n_max + 1) if n_values is None else np.asarray(n_values)
        return ns, np.array([part.tail(int(n)) for n in ns])

    def tail_mass(self, k: int, n: int) -> float:
        return self.partition(k).tail(n)

    def calibrate_weights(self, window: Optional[Tuple[int, int]] = None) -> float:
        """
        Fit the tail rate θ̂ on fiber 0 and fix θ′ (θ̂/2 when not configured).

        Raises:
        - WeightExponentError: If a configured θ′ is not below θ̂
        """
        window = window or (TAIL_WINDOW[0], min(TAIL_WINDOW[1], self.n_max))
        ns, masses = self.tail_series(0)
        if not np.any(masses[ns >= window[0]] > 0.0):
            # bounded return times: the tail vanishes and any weight exponent works
            self.tail_fit = TailFit(theta=math.inf, C=0.0, r2=1.0, window=window)
        else:
            self.tail_fit = fit_tail(ns, masses, window)
        theta = self.tail_fit.theta
        if self.theta_prime is None:
            self.theta_prime = 0.5 * theta if math.isfinite(theta) else BOUNDED_TAIL_THETA_PRIME
        elif not 0.0 < self.theta_prime < theta:
            raise WeightExponentError(f"theta_prime {self.theta_prime} must lie in (0, {theta:.6f})")
        logger.info(f"Tail fit: theta={theta:.6f}, C={self.tail_fit.C:.4g}, R2={self.tail_fit.r2:.5f}; "
                    f"theta_prime={self.theta_prime:.6f}")
        return self.theta_prime

    def weight(self, level) -> np.ndarray:
        if self.theta_prime is None:
            raise WeightExponentError("theta_prime is not calibrated")
        return np.exp(np.asarray(level) * self.theta_prime)

    # grids

    def grid(self, k: int) -> TowerGrid:
        with self.lock:
            grid = self._grids.get(k)
        if grid is None:
            grid = self._build_grid(k)
            with self.lock:
                self._grids[k] = grid
        return grid

    def _build_grid(self, k: int) -> TowerGrid:
        cpi = self.cells_per_interval
        fractions = np.arange(cpi + 1) / cpi
        levels, intervals, subs, los, his, returns = [], [], [], [], [], []
        slots: List[np.ndarray] = []
        offsets = [0]
        for lev in range(self.L_max + 1):
            part = self.grid_partition(k - lev)
            r = part.return_times
            include = np.ones(len(r), dtype=bool) if lev == 0 else (r > lev)
            chosen = np.flatnonzero(include)
            table = np.full(len(r), -1, dtype=np.int64)
            table[chosen] = np.arange(len(chosen))
            slots.append(table)
            a = part.cuts[chosen][:, None]
            b = part.cuts[chosen + 1][:, None]
            edges = a + (b - a) * fractions[None, :]
            los.append(edges[:, :-1].ravel())
            his.append(edges[:, 1:].ravel())
            levels.append(np.full(len(chosen) * cpi, lev, dtype=np.int64))
            intervals.append(np.repeat(chosen, cpi))
            subs.append(np.tile(np.arange(cpi), len(chosen)))
            returns.append(np.repeat(r[chosen], cpi))
            offsets.append(offsets[-1] + len(chosen) * cpi)
        grid = TowerGrid(step=k, cells_per_interval=cpi, level=np.concatenate(levels),
                         interval=np.concatenate(intervals), sub=np.concatenate(subs),
                         lo=np.concatenate(los), hi=np.concatenate(his), return_time=np.concatenate(returns),
                         level_offsets=np.array(offsets, dtype=np.int64), slots=tuple(slots))
        if np.any(grid.width <= 0.0):
            raise TowerError(f"Grid for fiber {k} has empty cells")
        return grid

    def locate(self, k: int, t: np.ndarray, level: np.ndarray) -> np.ndarray:
        """Grid cell of tower points (t, ℓ) over fiber k; -1 when outside the truncated tower"""
        grid = self.grid(k)
        t = np.asarray(t, dtype=float)
        level = np.asarray(level, dtype=np.int64)
        out = np.full(t.shape, -1, dtype=np.int64)
        cpi = self.cells_per_interval
        for lev in np.unique(level):
            if lev < 0 or lev > self.L_max:
                continue
            mask = level == lev
            part = self.grid_partition(k - lev)
            idx = part.locate(t[mask])
            inside = idx >= 0
            a = part.cuts[np.clip(idx, 0, part.n_intervals - 1)]
            b = part.cuts[np.clip(idx, 0, part.n_intervals - 1) + 1]
            sub = np.clip(np.floor((t[mask] - a) / (b - a) * cpi), 0, cpi - 1).astype(np.int64)
            flat = grid.index(np.full(idx.shape, lev), np.where(inside, idx, 0), sub)
            out[mask] = np.where(inside, flat, -1)
        return out

    # the tower map

    def tower_map(self, k: int, t: float, level: int) -> Tuple[float, int]:
        """
        One step of F from the tower over fiber k to the tower over fiber k+1.

        Raises:
        - InvalidTowerPointError: If (t, ℓ) is not a tower point
        """
        part = self.partition(k - level)
        idx = int(part.locate(np.array([t]))[0])
        if idx < 0 or part.return_times[idx] == 0 or part.return_times[idx] <= level:
            raise InvalidTowerPointError(f"({t}, {level}) is not a resolved tower point over fiber {k}")
        if level + 1 < part.return_times[idx]:
            return t, level + 1
        landing, _, alive = self.geometry.advance(k - level, np.array([t]), self.return_cap)
        if not alive[0]:
            raise InvalidTowerPointError(f"Return of ({t}, {level}) exceeded the cap")
        return float(landing[0]), 0

    def map_points(self, k: int, t: np.ndarray, level: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Vectorised F on the truncated tower: points leaving it come back with alive = False"""
        t = np.asarray(t, dtype=float).copy()
        level = np.asarray(level, dtype=np.int64).copy()
        alive = np.ones(t.shape, dtype=bool)
        new_t = t.copy()
        new_level = level.copy()
        for lev in np.unique(level):
            mask = level == lev
            part = self.grid_partition(k - lev)
            idx = part.locate(t[mask])
            r = np.where(idx >= 0, part.return_times[np.clip(idx, 0, None)], 0)
            ok = (r > lev)
            climb = ok & (lev + 1 < r)
            ret = ok & (lev + 1 == r)
            sel = np.flatnonzero(mask)
            new_level[sel[climb]] = lev + 1
            if np.any(ret):
                landing, _, landed = self.geometry.advance(k - lev, t[sel[ret]], self.return_cap)
                new_t[sel[ret]] = landing
                new_level[sel[ret]] = 0
                alive[sel[ret]] = landed
            alive[sel[~ok]] = False
            alive[sel[climb]] = lev + 1 <= self.L_max
        return new_t, new_level, alive

    def itinerary(self, k: int, t: float, level: int, steps: int) -> List[Tuple[int, int]]:
        """(level, interval) codes of F^i(t, ℓ) for i < steps"""
        codes = []
        for i in range(steps):
            part = self.partition(k + i - level)
            codes.append((level, int(part.locate(np.array([t]))[0])))
            t, level = self.tower_map(k + i, t, level)
        return codes

    def projection(self, k: int, t: np.ndarray, level: np.ndarray) -> np.ndarray:
        """π(x, ℓ) = f^ℓ_{σ^{-ℓ}ω}(x) in absolute interval coordinates"""
        t = np.asarray(t, dtype=float)
        level = np.asarray(level, dtype=np.int64)
        x = self.geometry.anchor + t
        out = x.copy()
        for lev in np.unique(level):
            mask = level == lev
            y = x[mask]
            for i in range(int(lev)):
                y = self.fiber(k - lev + i).evaluate(y)
            out[mask] = y
        return out

    # returns, separation and the symbolic metric

    def return_counts(self, k: int, t: np.ndarray, level: np.ndarray, count: int) -> np.ndarray:
        """Times R_1 < R_2 < ... < R_count of the first returns of (t, ℓ); inf once an orbit escapes"""
        t = np.asarray(t, dtype=float).copy()
        level = np.asarray(level, dtype=np.int64)
        times = np.full((len(t), count), np.inf)
        fiber = k - level
        elapsed = -level.astype(float)
        alive = np.ones(len(t), dtype=bool)
        for j in range(count):
            for m in np.unique(fiber[alive]):
                sel = np.flatnonzero(alive & (fiber == m))
                landing, steps, ok = self.geometry.advance(int(m), t[sel], self.return_cap)
                t[sel] = landing
                fiber[sel] = m + steps
                elapsed[sel] += steps
                alive[sel] = ok
            times[alive, j] = elapsed[alive]
        return times

    def separation_times(self, k: int, t_a: np.ndarray, t_b: np.ndarray, level: np.ndarray,
                         depth: int) -> np.ndarray:
        """
        Return-counting separation time of pairs at a common level.

        s counts returns to the base, not tower steps: a joint return block
        of R applications of F adds one to s. s = 0 when the points start in
        different elements; otherwise s is the number of joint returns
        completed before the landings fall in different elements. Pairs still
        together after `depth` returns get -1.
        """
        t_a = np.asarray(t_a, dtype=float).copy()
        t_b = np.asarray(t_b, dtype=float).copy()
        level = np.broadcast_to(np.asarray(level, dtype=np.int64), t_a.shape)
        fiber = (k - level).astype(np.int64)
        s = np.zeros(len(t_a), dtype=np.int64)
        active = np.ones(len(t_a), dtype=bool)
        for m in np.unique(fiber):
            sel = np.flatnonzero(fiber == m)
            part = self.grid_partition(int(m))
            ia, ib = part.locate(t_a[sel]), part.locate(t_b[sel])
            same = (ia == ib) & (ia >= 0)
            same &= part.return_times[np.clip(ia, 0, None)] > 0
            active[sel] = same
        for r in range(1, depth + 1):
            if not np.any(active):
                break
            for m in np.unique(fiber[active]):
                sel = np.flatnonzero(active & (fiber == m))
                la, steps, oka = self.geometry.advance(int(m), t_a[sel], self.return_cap)
                lb, _, okb = self.geometry.advance(int(m), t_b[sel], self.return_cap)
                t_a[sel], t_b[sel] = la, lb
                fiber[sel] = m + steps
                s[sel] = r
                still = oka & okb
                for landed in np.unique(fiber[sel][still]):
                    sub = sel[still & (fiber[sel] == landed)]
                    part = self.grid_partition(int(landed))
                    ia, ib = part.locate(t_a[sub]), part.locate(t_b[sub])
                    together = (ia == ib) & (ia >= 0) & (part.return_times[np.clip(ia, 0, None)] > 0)
                    active[sub] = together
                active[sel[~still]] = False
        return np.where(active, -1, s)

    def separation_time(self, k: int, z: Tuple[float, int], z_prime: Tuple[float, int], depth: int) -> Optional[int]:
        """Scalar separation time; None means the pair is still together at the depth cap"""
        if z[1] != z_prime[1]:
            return 0
        s = int(self.separation_times(k, np.array([z[0]]), np.array([z_prime[0]]), np.array([z[1]]), depth)[0])
        return None if s < 0 else s

    def metric(self, k: int, z: Tuple[float, int], z_prime: Tuple[float, int], depth: int) -> float:
        """d = γ^s, reported as 0 when the pair shares a cylinder at the depth cap"""
        s = self.separation_time(k, z, z_prime, depth)
        return 0.0 if s is None else self.gamma ** s

    def lipschitz_pairs(self, k: int, depth: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Same-element cell pairs of grid k with the separation time of their centers (< depth)"""
        key = (k, depth)
        with self.lock:
            cached = self._pairs.get(key)
        if cached is not None:
            return cached
        grid = self.grid(k)
        cpi = self.cells_per_interval
        a_idx, b_idx = [], []
        if cpi > 1:
            starts = np.flatnonzero((grid.sub == 0) & (grid.return_time > 0))
            for i in range(cpi):
                for j in range(i + 1, cpi):
                    a_idx.append(starts + i)
                    b_idx.append(starts + j)
        a = np.concatenate(a_idx) if a_idx else np.zeros(0, dtype=np.int64)
        b = np.concatenate(b_idx) if b_idx else np.zeros(0, dtype=np.int64)
        center = grid.center
        s = self.separation_times(k, center[a], center[b], grid.level[a], depth) if len(a) else a
        keep = s >= 0
        result = (a[keep], b[keep], s[keep])
        with self.lock:
            self._pairs[key] = result
        return result

    def contraction_weight(self, k: int, t: np.ndarray, level: np.ndarray, n: int) -> np.ndarray:
        """ρ^{(n)} = γ^{number of visits to the base at times 0..n}"""
        level = np.asarray(level, dtype=np.int64)
        max_returns = n + 1
        times = self.return_counts(k, t, level, max_returns)
        visits = np.sum(times <= n, axis=1) + (level == 0)
        return self.gamma ** visits

    # bad set and diameters

    def bad_set(self, k: int, n: int) -> BadSet:
        """
        G^c at horizon n: unresolved cells and cells whose ⌊ζn⌋-th return
        (at least the first) comes after time n; 𝒟₂ is its m-mass.
        """
        if n < 0:
            raise TowerError(f"Horizon must be non-negative, got {n}")
        key = (k, n)
        with self.lock:
            cached = self._bad_sets.get(key)
        if cached is not None:
            return cached
        grid = self.grid(k)
        j = max(int(math.floor(self.zeta * n)), 1)
        times = self.return_counts(k, grid.center, grid.level, j)
        mask = (grid.return_time == 0) | (times[:, -1] > n)
        d2 = float(np.sum((grid.weights(self.theta_prime) * grid.width)[mask]))
        bad = BadSet(step=k, horizon=n, returns=j, mask=mask, d2=d2)
        with self.lock:
            self._bad_sets[key] = bad
        return bad

    def good_diam(self, k: int, depth: int, bad: BadSet) -> float:
        """𝒟₁: largest symbolic diameter γ^{returns within depth} over good cells"""
        grid = self.grid(k)
        good = ~bad.mask
        if not np.any(good):
            return 1.0
        times = self.return_counts(k, grid.center[good], grid.level[good], max(bad.returns, 1) + depth)
        returns = np.sum(times <= depth, axis=1)
        return float(self.gamma ** np.min(returns))

    # verification of (P1)-(P5)

    def verify_markov(self, k: int) -> float:
        """
        Largest endpoint error of f^R(J) against Λ over resolved intervals.

        Raises:
        - MarkovViolationError: If a branch misses Λ by more than the tolerance
        """
        part = self.partition(k)
        idx = np.flatnonzero(part.resolved)
        a, b = part.cuts[idx], part.cuts[idx + 1]
        shift = ENDPOINT_SHIFT * (b - a)
        left, steps_l, ok_l = self.geometry.advance(k, a + shift, self.return_cap)
        right, steps_r, ok_r = self.geometry.advance(k, b - shift, self.return_cap)
        if not (np.all(ok_l) and np.all(ok_r)):
            raise MarkovViolationError(f"Return branch endpoints escaped on fiber {k}")
        if np.any(steps_l != part.return_times[idx]) or np.any(steps_r != part.return_times[idx]):
            raise MarkovViolationError(f"Return time is not constant on an interval of fiber {k}")
        # each branch lands in the base of fiber k + R
        landing = {int(r): self.partition(k + int(r)).base for r in np.unique(part.return_times[idx])}
        lo = np.array([landing[int(r)][0] for r in part.return_times[idx]])
        hi = np.array([landing[int(r)][1] for r in part.return_times[idx]])
        low_end = np.minimum(left, right)
        high_end = np.maximum(left, right)
        error = float(max(np.max(np.abs(low_end - lo)), np.max(np.abs(high_end - hi))))
        if error > MARKOV_TOLERANCE:
            raise MarkovViolationError(f"Full-branch error {error:.3e} on fiber {k}")
        return error

    def label_offsets(self, k: int) -> np.ndarray:
        """Iterated return time minus reference label, per labelled interval"""
        part = self.partition(k)
        labelled = (part.labels >= 0) & part.resolved
        offsets = part.return_times[labelled] - part.labels[labelled]
        if len(np.unique(offsets)) == 1:
            logger.info(f"Fiber {k}: iterated return times exceed the reference labels by {offsets[0]}")
        return offsets

    def aperiodicity(self, k: int, min_mass: float = 1e-4) -> Optional[Tuple[int, int]]:
        """Two return times with gcd 1 (possibly equal to 1), each carried by at least min_mass of Λ"""
        masses = self.partition(k).mass_by_return_time()
        heavy = sorted(r for r, mass in masses.items() if mass >= min_mass)
        for i, r in enumerate(heavy):
            for q in heavy[i:]:
                if math.gcd(r, q) == 1:
                    return r, q
        return None

    def _interval_samples(self, part: TowerPartition, samples: int, seed: int) -> Tuple[np.ndarray, np.ndarray]:
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(part.step & 0xFFFFFFFF,)))
        idx = np.flatnonzero(part.resolved)
        a, b = part.cuts[idx], part.cuts[idx + 1]
        strata = (np.arange(samples)[None, :] + rng.random((len(idx), samples))) / samples
        return np.repeat(idx, samples), (a[:, None] + (b - a)[:, None] * strata).ravel()

    def distortion_constant(self, k: int, samples: int = 16, seed: int = 0) -> float:
        """D_F = max over return intervals of 1 / (JF^R λ(J))"""
        part = self.partition(k)
        idx, pts = self._interval_samples(part, samples, seed)
        jac = self.geometry.jacobian(k, pts)
        return float(np.max(1.0 / (jac * part.lengths[idx])))

    def verify_distortion(self, k: int, depth: int, samples: int, seed: int = 0) -> float:
        """
        D̂ = max |JF^R(x)/JF^R(y) - 1| / γ^{s(Fx, Fy)} over sampled same-interval pairs.

        Returns inf when γ^s underflows.
        """
        part = self.partition(k)
        idx, pts = self._interval_samples(part, samples, seed)
        x = pts.reshape(-1, samples)[:, :-1].ravel()
        y = pts.reshape(-1, samples)[:, 1:].ravel()
        jx = self.geometry.jacobian(k, x)
        jy = self.geometry.jacobian(k, y)
        fx, steps, okx = self.geometry.advance(k, x, self.return_cap)
        fy, _, oky = self.geometry.advance(k, y, self.return_cap)
        ratio = np.abs(jx / jy - 1.0)
        best = 0.0
        ok = okx & oky
        for r in np.unique(steps[ok]):
            sel = np.flatnonzero(ok & (steps == r))
            s = self.separation_times(k + int(r), fx[sel], fy[sel], np.zeros(len(sel), dtype=np.int64), depth)
            s = np.where(s < 0, depth, s)
            scale = self.gamma ** s.astype(float)
            if np.any(scale == 0.0):
                return math.inf
            best = max(best, float(np.max(ratio[sel] / scale)))
        return best

    def density_bound(self, distortion: float) -> float:
        """D′ = exp(D̂ / (1 - γ))"""
        return math.exp(distortion / (1.0 - self.gamma))

    def min_branch_expansion(self, k: int, samples: int = 8, seed: int = 0) -> float:
        """Smallest sampled |Df^R| over resolved return branches (> 1 means the partition generates)"""
        part = self.partition(k)
        _, pts = self._interval_samples(part, samples, seed)
        return float(np.min(self.geometry.jacobian(k, pts)))


def main():
    driving = DrivingSystem()
    tower = RandomTower(driving, driving.point(0.0), n_max=30, L_max=20)
    tower.calibrate_weights()
    part = tower.partition(0)
    logger.info(f"Fiber 0: {part.n_intervals} intervals, tail mass {part.tail_mass:.3e}")
    logger.info(f"Markov error {tower.verify_markov(0):.3e}, coprime pair {tower.aperiodicity(0)}")


if __name__ == "__main__":
    main()
