import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass
from enum import Enum
from typing import Tuple, Union

import numpy as np

# Set up logging
logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(levelname)s - %(message)s')
logger = logging.getLogger(__name__)

# Quadratic family geometry: 4x(1-x) outside [X0, 3/4], modified cap inside
X0 = 0.25
X1 = 0.75
CRITICAL_POINT = 0.5 * (X0 + X1)
HALF_WIDTH = 0.5 * (X1 - X0)

BISECTION_STEPS = 80
NEWTON_STEPS = 3
ROOT_TOLERANCE = 1e-13

ArrayLike = Union[float, np.ndarray]


class FiberMapError(Exception):
    """Base exception for fiber maps"""
    pass


class DomainError(FiberMapError):
    """Raised when a point lies outside the map's domain"""
    pass


class SingularPointError(FiberMapError):
    """Raised at critical or singular points"""
    pass


class BranchImageError(FiberMapError):
    """Raised when a value is outside a branch's image"""
    pass


class RootFindingError(FiberMapError):
    """Raised when a branch inverse does not reach tolerance"""
    pass


class FiberFamily(Enum):
    """Supported interval-map families"""
    QUADRATIC = 'quadratic'
    LORENZ = 'lorenz'
    DOUBLING = 'doubling'


class Branch(Enum):
    """Monotone branches, named by position in the domain"""
    OUTER_LEFT = 'outer_left'
    INNER_LEFT = 'inner_left'
    INNER_RIGHT = 'inner_right'
    OUTER_RIGHT = 'outer_right'
    LEFT = 'left'
    RIGHT = 'right'


def _finish(values: np.ndarray, scalar: bool) -> ArrayLike:
    return float(values) if scalar else values


def solve_monotone(fn, dfn, target: np.ndarray, lo: np.ndarray, hi: np.ndarray,
                   geometric: bool = False) -> np.ndarray:
    """
    Vectorised safeguarded root finder for an increasing function.

    Bisects the bracket [lo, hi] (geometrically when asked, so that tiny
    roots keep relative precision) and then polishes with Newton steps that
    are rejected whenever they leave the bracket.
    """
    lo = np.array(lo, dtype=float, copy=True)
    hi = np.array(hi, dtype=float, copy=True)
    for _ in range(BISECTION_STEPS):
        if geometric:
            mid = np.where(lo > 0.0, np.sqrt(lo * hi), 0.5 * (lo + hi))
        else:
            mid = 0.5 * (lo + hi)
        below = fn(mid) < target
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    root = 0.5 * (lo + hi)
    for _ in range(NEWTON_STEPS):
        slope = dfn(root)
        with np.errstate(divide='ignore', invalid='ignore'):
            step = (fn(root) - target) / slope
        candidate = root - step
        ok = np.isfinite(candidate) & (candidate >= lo) & (candidate <= hi)
        root = np.where(ok, candidate, root)
    return root


class FiberMap(ABC):
    """One fiber map f_ω of a random interval-map family"""
    family: FiberFamily
    domain: Tuple[float, float]
    branches: Tuple[Branch, ...]

    @abstractmethod
    def evaluate(self, x: ArrayLike) -> ArrayLike:
        pass

    @abstractmethod
    def derivative(self, x: ArrayLike) -> ArrayLike:
        pass

    @abstractmethod
    def branch_inverse(self, branch: Branch, y: ArrayLike) -> ArrayLike:
        pass

    @abstractmethod
    def branch_of(self, x: float) -> Branch:
        pass

    def _check_domain(self, x: np.ndarray) -> None:
        lo, hi = self.domain
        if np.any(x < lo) or np.any(x > hi) or np.any(np.isnan(x)):
            raise DomainError(f"Points outside {self.domain} for the {self.family.value} family")


@dataclass(frozen=True)
class QuadraticMap(FiberMap):
    """
    Random quadratic fiber: 4x(1-x) on [0, X0) ∪ (3/4, 1] and the symmetric
    cap g(x) = 3/4 + (1/4)(1 - |x - c|^α / w^α) on [X0, 3/4].
    """
    alpha: float
    family = FiberFamily.QUADRATIC
    domain = (0.0, 1.0)
    branches = (Branch.OUTER_LEFT, Branch.INNER_LEFT, Branch.INNER_RIGHT, Branch.OUTER_RIGHT)

    def __post_init__(self):
        if not self.alpha > 1.0:
            raise FiberMapError(f"Critical order must exceed 1, got {self.alpha}")

    def critical_gap(self, x: ArrayLike) -> ArrayLike:
        """1 - f(x) on the cap, computed without cancellation"""
        scalar = np.ndim(x) == 0
        x = np.asarray(x, dtype=float)
        return _finish(0.25 * (np.abs(x - CRITICAL_POINT) / HALF_WIDTH) ** self.alpha, scalar)

    def evaluate(self, x: ArrayLike) -> ArrayLike:
        scalar = np.ndim(x) == 0
        x = np.asarray(x, dtype=float)
        self._check_domain(x)
        inner = (x >= X0) & (x <= X1)
        cap = 1.0 - 0.25 * (np.abs(x - CRITICAL_POINT) / HALF_WIDTH) ** self.alpha
        return _finish(np.where(inner, cap, 4.0 * x * (1.0 - x)), scalar)

    def derivative(self, x: ArrayLike) -> ArrayLike:
        scalar = np.ndim(x) == 0
        x = np.asarray(x, dtype=float)
        self._check_domain(x)
        if np.any(x == CRITICAL_POINT):
            raise SingularPointError(f"Derivative requested at the critical point {CRITICAL_POINT}")
        inner = (x >= X0) & (x <= X1)
        t = x - CRITICAL_POINT
        k = self.alpha / (4.0 * HALF_WIDTH ** self.alpha)
        cap = -k * np.sign(t) * np.abs(t) ** (self.alpha - 1.0)
        return _finish(np.where(inner, cap, 4.0 - 8.0 * x), scalar)

    def schwarzian(self, x: ArrayLike) -> ArrayLike:
        """Analytic Schwarzian derivative of the implemented formula"""
        scalar = np.ndim(x) == 0
        x = np.asarray(x, dtype=float)
        inner = (x >= X0) & (x <= X1)
        t = x - CRITICAL_POINT
        with np.errstate(divide='ignore'):
            cap = -(self.alpha - 1.0) * (self.alpha + 1.0) / (2.0 * t * t)
            outer = -1.5 * (-8.0 / (4.0 - 8.0 * x)) ** 2
        return _finish(np.where(inner, cap, outer), scalar)

    def branch_of(self, x: float) -> Branch:
        if x < X0:
            return Branch.OUTER_LEFT
        if x <= CRITICAL_POINT:
            return Branch.INNER_LEFT
        if x <= X1:
            return Branch.INNER_RIGHT
        return Branch.OUTER_RIGHT

    def branch_inverse(self, branch: Branch, y: ArrayLike) -> ArrayLike:
        scalar = np.ndim(y) == 0
        y = np.asarray(y, dtype=float)
        if branch in (Branch.OUTER_LEFT, Branch.OUTER_RIGHT):
            if np.any(y < 0.0) or np.any(y > 0.75):
                raise BranchImageError(f"{branch.value} branch image is [0, 3/4]")
            left = y / (2.0 * (1.0 + np.sqrt(1.0 - y)))
            return _finish(left if branch is Branch.OUTER_LEFT else 1.0 - left, scalar)
        if branch in (Branch.INNER_LEFT, Branch.INNER_RIGHT):
            if np.any(y < 0.75) or np.any(y > 1.0):
                raise BranchImageError(f"{branch.value} branch image is [3/4, 1]")
            return _finish(self.inner_inverse_from_gap(branch, 1.0 - y), scalar)
        raise BranchImageError(f"Quadratic maps have no {branch.value} branch")

    def inner_inverse_from_gap(self, branch: Branch, gap: ArrayLike) -> ArrayLike:
        """Cap preimage of 1 - gap, for gap in [0, 1/4]"""
        offset = HALF_WIDTH * (4.0 * np.asarray(gap, dtype=float)) ** (1.0 / self.alpha)
        return CRITICAL_POINT - offset if branch is Branch.INNER_LEFT else CRITICAL_POINT + offset


@dataclass(frozen=True)
class LorenzMap(FiberMap):
    """
    Odd Lorenz-like fiber on [-1/2, 1/2]:
    f(x) = sign(x)(-1/2 + w u^a + (1 - w) u^2), u = 2|x|.

    The u^a term carries the |x|^{a-1} singularity at 0; the weight w < 1
    keeps |Df| > 1 up to the endpoints. w = 1 is the pure power law.
    """
    alpha: float
    weight: float = 1.0
    family = FiberFamily.LORENZ
    domain = (-0.5, 0.5)
    branches = (Branch.LEFT, Branch.RIGHT)

    def __post_init__(self):
        if not 0.0 < self.alpha < 0.5:
            raise FiberMapError(f"Lorenz exponent must lie in (0, 1/2), got {self.alpha}")
        if not 0.0 < self.weight <= 1.0:
            raise FiberMapError(f"Lorenz weight must lie in (0, 1], got {self.weight}")

    def _lift(self, u: np.ndarray) -> np.ndarray:
        return self.weight * u ** self.alpha + (1.0 - self.weight) * u * u

    def _lift_slope(self, u: np.ndarray) -> np.ndarray:
        with np.errstate(divide='ignore'):
            return self.weight * self.alpha * u ** (self.alpha - 1.0) + 2.0 * (1.0 - self.weight) * u

    def evaluate(self, x: ArrayLike) -> ArrayLike:
        scalar = np.ndim(x) == 0
        x = np.asarray(x, dtype=float)
        self._check_domain(x)
        if np.any(x == 0.0):
            raise SingularPointError("Lorenz map is discontinuous at 0")
        return _finish(np.sign(x) * (self._lift(2.0 * np.abs(x)) - 0.5), scalar)

    def derivative(self, x: ArrayLike) -> ArrayLike:
        scalar = np.ndim(x) == 0
        x = np.asarray(x, dtype=float)
        self._check_domain(x)
        if np.any(x == 0.0):
            raise SingularPointError("Lorenz derivative is singular at 0")
        return _finish(2.0 * self._lift_slope(2.0 * np.abs(x)), scalar)

    def branch_of(self, x: float) -> Branch:
        if x == 0.0:
            raise SingularPointError("0 belongs to no Lorenz branch")
        return Branch.LEFT if x < 0.0 else Branch.RIGHT

    def right_inverse_shifted(self, t: ArrayLike) -> ArrayLike:
        """Right-branch preimage of y = t - 1/2, keeping relative precision for tiny t"""
        scalar = np.ndim(t) == 0
        t = np.asarray(t, dtype=float)
        if np.any(t < 0.0) or np.any(t > 1.0):
            raise BranchImageError("Right branch image is (-1/2, 1/2]")
        lo = t ** (1.0 / self.alpha)
        hi = np.minimum(1.0, (t / self.weight) ** (1.0 / self.alpha))
        u = solve_monotone(self._lift, self._lift_slope, t, lo, hi, geometric=True)
        return _finish(np.where(t == 0.0, 0.0, 0.5 * u), scalar)

    def left_offset(self, d: ArrayLike) -> ArrayLike:
        """f(x) + 1/2 for x = d - 1/2 on the left branch, without cancellation"""
        d = np.asarray(d, dtype=float)
        return (-self.weight * np.expm1(self.alpha * np.log1p(-2.0 * d))
                + (1.0 - self.weight) * (4.0 * d - 4.0 * d * d))

    def left_offset_slope(self, d: ArrayLike) -> ArrayLike:
        d = np.asarray(d, dtype=float)
        with np.errstate(divide='ignore'):
            return (2.0 * self.weight * self.alpha * (1.0 - 2.0 * d) ** (self.alpha - 1.0)
                    + (1.0 - self.weight) * (4.0 - 8.0 * d))

    def left_inverse_offset(self, t: ArrayLike) -> ArrayLike:
        """Left-branch preimage in offset form: d = x + 1/2 with f(x) + 1/2 = t"""
        scalar = np.ndim(t) == 0
        t = np.asarray(t, dtype=float)
        if np.any(t < 0.0) or np.any(t > 1.0):
            raise BranchImageError("Left branch image is [-1/2, 1/2)")
        w = self.weight
        lo = t / (2.0 * (w + 2.0 * (1.0 - w)))
        hi = np.minimum(0.5, t / (2.0 * (w * self.alpha + 1.0 - w)))
        d = solve_monotone(self.left_offset, self.left_offset_slope, t, lo, hi, geometric=True)
        return _finish(np.where(t == 0.0, 0.0, d), scalar)

    def branch_inverse(self, branch: Branch, y: ArrayLike) -> ArrayLike:
        scalar = np.ndim(y) == 0
        y = np.asarray(y, dtype=float)
        if branch is Branch.RIGHT:
            return _finish(self.right_inverse_shifted(y + 0.5), scalar)
        if branch is Branch.LEFT:
            return _finish(-self.right_inverse_shifted(0.5 - y), scalar)
        raise BranchImageError(f"Lorenz maps have no {branch.value} branch")

    def min_expansion(self, delta: float = 1e-3, points: int = 2001) -> float:
        """min |Df| over [-1/2, 1/2] minus (-delta, delta)"""
        grid = np.linspace(delta, 0.5, points)
        return float(np.min(self.derivative(grid)))


@dataclass(frozen=True)
class DoublingMap(FiberMap):
    """x ↦ 2x mod 1, the autonomous full-branch toy"""
    family = FiberFamily.DOUBLING
    domain = (0.0, 1.0)
    branches = (Branch.LEFT, Branch.RIGHT)

    def evaluate(self, x: ArrayLike) -> ArrayLike:
        scalar = np.ndim(x) == 0
        x = np.asarray(x, dtype=float)
        self._check_domain(x)
        return _finish(np.mod(2.0 * x, 1.0), scalar)

    def derivative(self, x: ArrayLike) -> ArrayLike:
        scalar = np.ndim(x) == 0
        x = np.asarray(x, dtype=float)
        self._check_domain(x)
        return _finish(np.full_like(x, 2.0), scalar)

    def branch_of(self, x: float) -> Branch:
        return Branch.LEFT if x < 0.5 else Branch.RIGHT

    def branch_inverse(self, branch: Branch, y: ArrayLike) -> ArrayLike:
        scalar = np.ndim(y) == 0
        y = np.asarray(y, dtype=float)
        if np.any(y < 0.0) or np.any(y > 1.0):
            raise BranchImageError("Doubling branches map onto [0, 1]")
        shift = 0.0 if branch is Branch.LEFT else 1.0
        return _finish(0.5 * (y + shift), scalar)


def create_fiber_map(family: FiberFamily, driving_alpha: float, lorenz_alpha: float = 0.3) -> FiberMap:
    """
    Factory: build f_ω from the fiber parameter α(ω).

    Args:
    - family (FiberFamily): Family to build
    - driving_alpha (float): α(ω) from the driving system
    - lorenz_alpha (float): Singularity exponent of the Lorenz family

    Returns:
    - FiberMap: The fiber map
    """
    if family is FiberFamily.QUADRATIC:
        return QuadraticMap(driving_alpha)
    if family is FiberFamily.LORENZ:
        return LorenzMap(lorenz_alpha, 1.0 / driving_alpha)
    if family is FiberFamily.DOUBLING:
        return DoublingMap()
    raise FiberMapError(f"Unsupported fiber family: {family}")


def main():
    quadratic = QuadraticMap(1.6)
    for x in (0.0, 0.125, 0.25, 0.5, 0.75):
        logger.info(f"quadratic f({x}) = {quadratic.evaluate(x):.12f}")
    lorenz = LorenzMap(0.3, 1.0 / 1.6)
    logger.info(f"lorenz min |Df| = {lorenz.min_expansion():.4f}")


if __name__ == "__main__":
    main()
