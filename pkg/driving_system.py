import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from threading import Lock
from typing import Callable, Dict, Union

import numpy as np
from scipy.stats import kstest

# Set up logging
logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(levelname)s - %(message)s')
logger = logging.getLogger(__name__)

# Constants
GOLDEN_ANGLE = (math.sqrt(5.0) - 1.0) / 2.0
DEFAULT_BACK_WINDOW = 2 ** 16
SYMBOL_BLOCK = 1024


class DrivingError(Exception):
    """Base exception for driving systems"""
    pass


class InvalidFiberPointError(DrivingError):
    """Raised when a fiber point is outside the state space"""
    pass


class OrbitExhaustedError(DrivingError):
    """Raised when a shift orbit walks past the stored backward window"""
    pass


class DriverKind(Enum):
    """Kinds of invertible ergodic base"""
    ROTATION = 'rotation'
    BERNOULLI_SHIFT = 'bernoulli_shift'


@dataclass(frozen=True)
class FiberPoint:
    """
    A state σ^step(origin) of the driving system.

    The orbit is stored by integer step so that forward and backward moves
    compose exactly; `coord` is the uniformised coordinate in [0, 1).
    """
    step: int
    origin: float
    coord: float = field(compare=False)


@lru_cache(maxsize=512)
def _symbol_block(seed: int, origin_key: int, direction: int, block: int) -> np.ndarray:
    stream = np.random.default_rng(np.random.SeedSequence([seed, origin_key], spawn_key=(direction, block)))
    symbols = stream.random(SYMBOL_BLOCK)
    symbols.setflags(write=False)
    return symbols


def _origin_key(origin: float) -> int:
    """Origins of the shift index independent symbol sequences"""
    return int(origin * 2.0 ** 53)


@dataclass(frozen=True)
class DrivingSystem:
    """Invertible ergodic base (σ, P) with the parameter map ω ↦ α(ω)"""
    kind: DriverKind = DriverKind.ROTATION
    angle: float = GOLDEN_ANGLE
    seed: int = 0
    alpha_min: float = 1.2
    alpha_max: float = 2.0
    back_window: int = DEFAULT_BACK_WINDOW

    def __post_init__(self):
        if not 1.0 < self.alpha_min <= self.alpha_max:
            raise DrivingError(f"Need 1 < alpha_min <= alpha_max, got {self.alpha_min}, {self.alpha_max}")
        if self.kind is DriverKind.ROTATION and not 0.0 < self.angle < 1.0:
            raise DrivingError(f"Rotation angle must lie in (0, 1), got {self.angle}")
        if self.back_window < 0:
            raise DrivingError("back_window must be non-negative")

    @classmethod
    def from_config(cls, config: Dict) -> 'DrivingSystem':
        return cls(
            kind=DriverKind(config['driver.kind']),
            angle=float(config['driver.angle']),
            seed=int(config['driver.seed']),
            alpha_min=float(config['driver.alpha_min']),
            alpha_max=float(config['driver.alpha_max']),
            back_window=int(config['driver.back_window']),
        )

    def point(self, origin: float = 0.0) -> FiberPoint:
        """Wrap a raw state as the orbit's time-zero point"""
        if not 0.0 <= origin < 1.0:
            raise InvalidFiberPointError(f"Fiber point {origin} outside [0, 1)")
        return FiberPoint(0, float(origin), self._coord(0, float(origin)))

    def _coord(self, step: int, origin: float) -> float:
        if self.kind is DriverKind.ROTATION:
            return (origin + math.fmod(step * self.angle, 1.0)) % 1.0
        if step < -self.back_window:
            raise OrbitExhaustedError(
                f"Shift orbit step {step} exceeds the backward window of {self.back_window} symbols")
        if step >= 0:
            block, offset = divmod(step, SYMBOL_BLOCK)
            return float(_symbol_block(self.seed, _origin_key(origin), 0, block)[offset])
        block, offset = divmod(-step - 1, SYMBOL_BLOCK)
        return float(_symbol_block(self.seed, _origin_key(origin), 1, block)[offset])

    def orbit(self, omega: Union[FiberPoint, float], k: int) -> FiberPoint:
        """Return σ^k ω; k may be negative"""
        if not isinstance(omega, FiberPoint):
            omega = self.point(omega)
        step = omega.step + int(k)
        return FiberPoint(step, omega.origin, self._coord(step, omega.origin))

    def alpha(self, omega: Union[FiberPoint, float]) -> float:
        if not isinstance(omega, FiberPoint):
            omega = self.point(omega)
        return self.alpha_min + (self.alpha_max - self.alpha_min) * omega.coord

    def coords(self, omega: FiberPoint, n: int, start: int = 0) -> np.ndarray:
        """Coordinates of σ^{start}ω, ..., σ^{start+n-1}ω"""
        steps = omega.step + start + np.arange(n, dtype=np.int64)
        if self.kind is DriverKind.ROTATION:
            return (omega.origin + np.fmod(steps * self.angle, 1.0)) % 1.0
        return np.array([self._coord(int(s), omega.origin) for s in steps])

    def visit_fraction(self, omega: FiberPoint, flag: Callable[[FiberPoint], bool],
                       n: int, stride: int, offset: int) -> float:
        """
        Fraction of the stride-M subsampled orbit σ^{Mk+r}ω, k < n, where flag holds.

        Args:
        - omega (FiberPoint): Starting state
        - flag (Callable): Predicate on fiber points
        - n (int): Number of subsampled points
        - stride (int): M
        - offset (int): r with 0 <= r <= M

        Returns:
        - float: Visit fraction in [0, 1]
        """
        if n < 1:
            raise DrivingError("visit_fraction needs n >= 1")
        if stride < 1 or not 0 <= offset <= stride:
            raise DrivingError(f"Invalid stride/offset {stride}/{offset}")
        hits = sum(1 for k in range(n) if flag(self.orbit(omega, stride * k + offset)))
        return hits / n

    def equidistribution_distance(self, omega: FiberPoint, n: int) -> float:
        """Kolmogorov-Smirnov distance of the first n orbit coordinates to uniform"""
        return float(kstest(self.coords(omega, n), 'uniform').statistic)


class DrivingOrbit:
    """Cached window [ω_{-m}, ..., ω_n] of one orbit"""

    def __init__(self, system: DrivingSystem, origin: FiberPoint):
        self.system = system
        self.origin = origin
        self.window: Dict[int, FiberPoint] = {0: origin}
        self.lock = Lock()

    def at(self, k: int) -> FiberPoint:
        with self.lock:
            point = self.window.get(k)
            if point is None:
                point = self.system.orbit(self.origin, k)
                self.window[k] = point
            return point

    def alpha(self, k: int) -> float:
        return self.system.alpha(self.at(k))

    @property
    def extent(self):
        with self.lock:
            return min(self.window), max(self.window)


def main():
    system = DrivingSystem()
    omega = system.point(0.0)
    for k in range(5):
        point = system.orbit(omega, k)
        logger.info(f"sigma^{k} omega = {point.coord:.16f}, alpha = {system.alpha(point):.6f}")
    logger.info(f"KS distance over 1e5 steps: {system.equidistribution_distance(omega, 100000):.5f}")


if __name__ == "__main__":
    main()
