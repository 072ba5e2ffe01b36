import logging
import math
from dataclasses import dataclass
from threading import Lock
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from correlation_analyzer import Observable, cone_shift, mixing_scan
from hilbert_cones import ConeFrame, ConeParams, build_frame, constraint_set, membership
from ulam_operator import EquivariantFamily, UlamCocycle
from worker_pool import ordered_map

# Set up logging
logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(levelname)s - %(message)s')
logger = logging.getLogger(__name__)

# Constants
MIN_Q1_SAMPLES = 100
MIXING_BAND = 0.5


class ScheduleError(Exception):
    """Base exception for the good-times schedule"""
    pass


class InsufficientSamplesError(ScheduleError):
    """Raised when too few q̂₁ samples are available"""
    pass


class ResidueNotFoundError(ScheduleError):
    """Raised when no residue class is good often enough"""
    pass


@dataclass(frozen=True)
class GoodTimes:
    """Good instants t_1 < t_2 < ... <= horizon, all ≡ r (mod M)"""
    M: int
    epsilon: float
    r: int
    times: tuple
    horizon: int
    visit_fraction: float
    q3: Optional[int]

    def count(self, n: int) -> int:
        return int(np.searchsorted(np.asarray(self.times), n, side='right'))

    def density(self, n: int) -> float:
        """s·M/n with s the number of good instants up to n"""
        return self.count(n) * self.M / n if n > 0 else 0.0


class Q1Study:
    """
    Empirical q̂₁ along one orbit: the first lag after which the mixing ratios stay
    in [α, α′] and sampled cone probes stay in the κ-shrunk cone.
    """

    def __init__(self, cocycle: UlamCocycle, family: EquivariantFamily, params: ConeParams, horizon: int,
                 k_max: int, cap: int, probes: int = 4, persist: int = 5, seed: int = 0):
        if cap < 1:
            raise ScheduleError(f"q1 cap must be at least 1, got {cap}")
        self.cocycle = cocycle
        self.family = family
        self.params = params
        self.inner = params.scaled(params.kappa)
        self.horizon = horizon
        self.k_max = k_max
        self.cap = cap
        self.probes = probes
        self.persist = persist
        self.seed = seed
        self.lock = Lock()
        self._frames: Dict[int, ConeFrame] = {}

    def frame(self, k: int) -> ConeFrame:
        with self.lock:
            frame = self._frames.get(k)
        if frame is None:
            frame = build_frame(self.cocycle.tower, self.family.density(k), self.horizon, self.k_max)
            with self.lock:
                self._frames[k] = frame
        return frame

    def probe_vectors(self, k: int) -> List[np.ndarray]:
        """Cone members built by shifting random trigonometric observables"""
        rng = np.random.default_rng(np.random.SeedSequence(self.seed, spawn_key=(k & 0xFFFFFFFF,)))
        frame = self.frame(k)
        h = self.family.density(k)
        vectors = []
        for _ in range(self.probes):
            amp = rng.normal(size=3)
            phase = rng.uniform(0.0, 2.0 * np.pi, size=3)
            fn = lambda x, level, amp=amp, phase=phase: sum(
                amp[j] * np.cos(2.0 * np.pi * (j + 1) * x + phase[j]) for j in range(3))
            phi = Observable.from_function(self.cocycle.tower, k, fn)
            shifted, _ = cone_shift(phi, h, frame, self.params)
            vectors.append(shifted)
        return vectors

    def estimate_q1(self, k: int) -> Optional[int]:
        """q̂₁(σ^kω), or None when the orbit point is not locally good within the cap"""
        scan = mixing_scan(self.cocycle, self.family, k, self.horizon, self.cap, MIXING_BAND, self.persist)
        if scan.q0 is None:
            return None
        vectors = self.probe_vectors(k)
        streak = 0
        for lag in range(1, self.cap + 1):
            vectors = [self.cocycle.normalized_apply(k + lag - 1, 1, v) for v in vectors]
            frame = self.frame(k + lag)
            constraints = constraint_set(frame, self.inner)
            inside = all(membership(v, frame, self.inner, constraints).member for v in vectors)
            streak = streak + 1 if inside else 0
            if streak >= self.persist:
                return max(scan.q0, lag - self.persist + 1)
        return None

    def q1_table(self, start: int, stop: int, workers: int = 1) -> List[Optional[int]]:
        return ordered_map(self.estimate_q1, range(start, stop), workers)


def choose_M(samples: Sequence[Optional[int]], epsilon: float) -> int:
    """
    Empirical (1 - ε)-quantile of q̂₁ along the orbit, rounded up; None counts as +inf.

    Raises:
    - InsufficientSamplesError: If fewer than 100 samples are given
    - ScheduleError: If the quantile is not finite
    """
    if len(samples) < MIN_Q1_SAMPLES:
        raise InsufficientSamplesError(f"choose_M needs {MIN_Q1_SAMPLES} samples, got {len(samples)}")
    if not 0.0 < epsilon < 1.0:
        raise ScheduleError(f"epsilon must lie in (0, 1), got {epsilon}")
    values = np.array([np.inf if q is None else float(q) for q in samples])
    quantile = float(np.quantile(values, 1.0 - epsilon, method='inverted_cdf'))
    if not math.isfinite(quantile):
        raise ScheduleError(f"More than a fraction {epsilon} of the orbit is not locally good within the cap")
    return max(1, int(math.ceil(quantile)))


def good_times(driving, origin, M: int, epsilon: float, n: int, flag: Callable[[int], bool],
               q1_start: int = 0) -> GoodTimes:
    """
    Pick the residue r ∈ [0, M] whose stride-M subsequence is flagged most often,
    then collect t_i = jM + r >= max(q̂₁(ω), 1) with flag(t_i), up to n.

    Raises:
    - ResidueNotFoundError: If the best residue is flagged less than a fraction 1 - ε
    """
    if M < 1 or n < M:
        raise ScheduleError(f"Need M >= 1 and n >= M, got M={M}, n={n}")
    table = [bool(flag(k)) for k in range(n + 1)]
    lookup = lambda point: table[point.step - origin.step]
    best_r, best_fraction = 0, -1.0
    for r in range(M + 1):
        count = (n - r) // M + 1
        fraction = driving.visit_fraction(origin, lookup, count, M, r)
        if fraction > best_fraction:
            best_r, best_fraction = r, fraction
    if best_fraction < 1.0 - epsilon:
        raise ResidueNotFoundError(f"Best residue {best_r} is good on a fraction {best_fraction:.3f} < {1 - epsilon}")
    first = max(q1_start, 1)
    times = tuple(t for t in range(best_r, n + 1, M) if t >= first and table[t])
    q3 = _density_threshold(times, M, epsilon, n)
    logger.info(f"Good times: M={M}, r={best_r}, fraction {best_fraction:.3f}, {len(times)} instants, q3={q3}")
    return GoodTimes(M=M, epsilon=epsilon, r=best_r, times=times, horizon=n, visit_fraction=best_fraction, q3=q3)


def _density_threshold(times: Sequence[int], M: int, epsilon: float, n: int) -> Optional[int]:
    """First horizon from which s >= ⌊n/M⌋(1 - 2ε) holds up to n"""
    counts = np.searchsorted(np.asarray(times, dtype=np.int64), np.arange(n + 1), side='right')
    horizons = np.arange(n + 1)
    ok = counts >= np.floor(horizons / M) * (1.0 - 2.0 * epsilon)
    if not ok[-1]:
        return None
    failing = np.flatnonzero(~ok)
    return int(failing[-1] + 1) if len(failing) else 0


def contraction_exponent(n: int, M: int, epsilon: float, kappa: float) -> float:
    """κ^{(1 - 2ε) n / M}"""
    if n < 0 or M < 1:
        raise ScheduleError(f"Need n >= 0 and M >= 1, got n={n}, M={M}")
    if not 0.0 <= epsilon <= 0.5:
        raise ScheduleError(f"epsilon must lie in [0, 1/2], got {epsilon}")
    if not 0.0 < kappa < 1.0:
        raise ScheduleError(f"kappa must lie in (0, 1), got {kappa}")
    return kappa ** ((1.0 - 2.0 * epsilon) * n / M)
