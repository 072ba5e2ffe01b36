import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import linregress

from hilbert_cones import ConeFrame, ConeParams, lipschitz_seminorm
from random_tower import RandomTower
from ulam_operator import DensityVector, EquivariantFamily, UlamCocycle
from worker_pool import ordered_map

# Set up logging
logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(levelname)s - %(message)s')
logger = logging.getLogger(__name__)

# Constants
MIN_MC_SAMPLES = 1000
MIN_FIT_POINTS = 5
NOISE_FLOOR_FACTOR = 10.0
SHIFT_RELATIVE_MARGIN = 1e-9
SHIFT_ABSOLUTE_MARGIN = 1e-12

# Interval observables: functions of the projected point x ∈ X and the level
OBSERVABLES: Dict[str, Callable[[np.ndarray, np.ndarray], np.ndarray]] = {
    'constant': lambda x, level: np.ones_like(x),
    'identity': lambda x, level: x,
    'cos': lambda x, level: np.cos(2.0 * np.pi * x),
    'square': lambda x, level: x * x,
    'level_decay': lambda x, level: np.exp(-0.25 * level) * np.cos(2.0 * np.pi * x),
    'indicator': lambda x, level: (x < 0.5).astype(float),
}


class CorrelationError(Exception):
    """Base exception for correlation estimation"""
    pass


class InsufficientSamplesError(CorrelationError):
    """Raised when a Monte Carlo run is too small"""
    pass


class FitError(CorrelationError):
    """Raised when a decay fit has too few usable points"""
    pass


class ConeHypothesisError(CorrelationError):
    """Raised when (a, b, c) are too small to embed observables in the cone"""
    pass


class ZeroMassError(CorrelationError):
    """Raised for partition elements without μ-mass"""
    pass


@dataclass(frozen=True)
class Observable:
    """Per-cell values of a tower observable over one fiber's grid"""
    step: int
    values: np.ndarray
    lipschitz: bool = True

    @classmethod
    def from_function(cls, tower: RandomTower, k: int, fn: Callable[[np.ndarray, np.ndarray], np.ndarray],
                      lipschitz: bool = True) -> 'Observable':
        """Lift an interval observable through π, sampled at cell centers"""
        grid = tower.grid(k)
        x = tower.projection(k, grid.center, grid.level)
        return cls(step=k, values=np.asarray(fn(x, grid.level), dtype=float), lipschitz=lipschitz)

    @classmethod
    def named(cls, tower: RandomTower, k: int, name: str) -> 'Observable':
        if name not in OBSERVABLES:
            raise CorrelationError(f"Unknown observable {name}; known: {sorted(OBSERVABLES)}")
        return cls.from_function(tower, k, OBSERVABLES[name], lipschitz=name != 'indicator')

    @property
    def sup(self) -> float:
        return float(np.max(np.abs(self.values)))

    def holder(self, frame: ConeFrame) -> float:
        return lipschitz_seminorm(self.values, frame)

    def norm(self, frame: ConeFrame) -> float:
        """‖φ‖ = |φ|_h + |φ|_∞"""
        return self.holder(frame) + self.sup


@dataclass
class CorrelationSeries:
    n: np.ndarray
    op_value: np.ndarray
    op_bound: np.ndarray
    op_signed: np.ndarray
    defect: np.ndarray
    mc_value: Optional[np.ndarray] = None
    mc_stderr: Optional[np.ndarray] = None
    fit: Optional['DecayFit'] = None

    def rows(self) -> List[Tuple[int, float, float, float, float]]:
        mc = self.mc_value if self.mc_value is not None else np.full(len(self.n), np.nan)
        err = self.mc_stderr if self.mc_stderr is not None else np.full(len(self.n), np.nan)
        return [(int(n), float(v), float(b), float(m), float(e))
                for n, v, b, m, e in zip(self.n, self.op_value, self.op_bound, mc, err)]


@dataclass(frozen=True)
class DecayFit:
    beta: float
    C: float
    r2: float
    window: Tuple[int, int]
    points: int


@dataclass
class MixingScan:
    """Largest |ρ - 1| over element pairs for each lag, and the lag after the last band exit"""
    deviations: List[float] = field(default_factory=list)
    q0: Optional[int] = None


def _check_shift_hypotheses(frame: ConeFrame, h_tilde: np.ndarray, params: ConeParams) -> None:
    if not params.a > 1.0:
        raise ConeHypothesisError(f"a = {params.a} must exceed 1")
    if not params.b > lipschitz_seminorm(h_tilde, frame):
        raise ConeHypothesisError(f"b = {params.b} must exceed |h/v|_h = {lipschitz_seminorm(h_tilde, frame):.4g}")
    if not params.c > float(np.max(np.abs(h_tilde))):
        raise ConeHypothesisError(f"c = {params.c} must exceed sup h/v = {np.max(np.abs(h_tilde)):.4g}")


def cone_shift(phi: Observable, h: DensityVector, frame: ConeFrame, params: ConeParams) -> Tuple[np.ndarray, float]:
    """
    φ̃ = (φ + C_φ h) / (v (K + C_φ)) with K = ∫φ dλ, so that ∫φ̃ dm = 1 and φ̃ is in the cone.

    Raises:
    - ConeHypothesisError: If a <= 1, b <= |h̃|_h or c <= sup h̃
    """
    h_tilde = h.m_view
    _check_shift_hypotheses(frame, h_tilde, params)
    K = float(np.sum(phi.values * h.width))
    ratio = phi.values / h.values
    candidates = [0.0, float(np.max(-ratio))]
    good = ~frame.bad
    if np.any(good):
        candidates.append(float(np.max(ratio[good]) - params.a * K) / (params.a - 1.0))
    bad = frame.bad
    if np.any(bad):
        lump = float(np.sum(phi.values[bad] * h.width[bad]) / np.sum(h.mass[bad]))
        candidates.append((lump - params.a * K) / (params.a - 1.0))
        phi_v = np.abs(phi.values[bad] / h.weights[bad])
        candidates.append(float(np.max((phi_v - params.c * K) / (params.c - h_tilde[bad]))))
    phi_over_v = phi.values / h.weights
    candidates.append((lipschitz_seminorm(phi_over_v, frame) - params.b * K)
                      / (params.b - lipschitz_seminorm(h_tilde, frame)))
    shift = max(candidates)
    if shift > 0.0:
        shift = shift * (1.0 + SHIFT_RELATIVE_MARGIN) + SHIFT_ABSOLUTE_MARGIN
    if K + shift <= 0.0:
        raise CorrelationError("Observable has zero integral and needs no shift; nothing to normalise")
    return (phi.values + shift * h.values) / (h.weights * (K + shift)), shift


def _mu_mean(psi: Observable, h: DensityVector) -> float:
    return float(np.sum(psi.values * h.mass))


def correlation_series(cocycle: UlamCocycle, family: EquivariantFamily, k: int, phi: Observable,
                       psi_factory: Callable[[int], Observable], n_max: int) -> CorrelationSeries:
    """
    Operator-route correlations |∫(ψ∘F^n)φ dλ - ∫ψ dμ ∫φ dλ| for n = 0..n_max, with
    bound ‖ψ‖_∞ (‖L^nφ - Kh‖₁ + lost mass).

    Raises:
    - HorizonError: If the family does not reach fiber k + n_max
    """
    family.density(k + n_max)
    K = float(np.sum(phi.values * cocycle.tower.grid(k).width))
    mass = phi.values * cocycle.tower.grid(k).width
    lost = 0.0
    ns, values, bounds, signed, defects = [], [], [], [], []
    for n in range(n_max + 1):
        if n > 0:
            op = cocycle.operator(k + n - 1)
            lost += op.lost(mass)
            mass = op.push(mass)
        psi = psi_factory(k + n)
        h = family.density(k + n)
        corr = float(np.sum(mass * psi.values)) - _mu_mean(psi, h) * K
        ns.append(n)
        signed.append(corr)
        values.append(abs(corr))
        bounds.append(psi.sup * (float(np.sum(np.abs(mass - K * h.mass))) + lost))
        defects.append(lost)
    return CorrelationSeries(n=np.array(ns), op_value=np.array(values), op_bound=np.array(bounds),
                             op_signed=np.array(signed), defect=np.array(defects))


def operator_correlation(cocycle: UlamCocycle, family: EquivariantFamily, k: int, phi: Observable,
                         psi: Observable, n: int) -> Tuple[float, float]:
    """Single-horizon (value, bound); ψ must live on fiber k + n"""
    if psi.step != k + n:
        raise CorrelationError(f"psi lives on fiber {psi.step}, expected {k + n}")
    series = correlation_series(cocycle, family, k, phi, lambda step: psi if step == k + n else
                                Observable(step, np.zeros(cocycle.tower.grid(step).n_cells)), n)
    return float(series.op_value[-1]), float(series.op_bound[-1])


def _sample_rows(op_entries, rows: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Next cell of a Markov step along sparse rows; -1 where u falls in the row defect"""
    indptr = op_entries.indptr
    data = op_entries.data
    if len(data) == 0:
        return np.full(len(rows), -1, dtype=np.int64)
    cumulative = np.cumsum(data)
    start = indptr[rows]
    stop = indptr[rows + 1]
    nonempty = stop > start
    base = np.where(nonempty, cumulative[np.clip(start, 0, len(data) - 1)] - data[np.clip(start, 0, len(data) - 1)], 0.0)
    pos = np.searchsorted(cumulative, base + u, side='right')
    valid = nonempty & (pos < stop)
    return np.where(valid, op_entries.indices[np.clip(pos, 0, len(data) - 1)], -1)


def _mc_batch(cocycle: UlamCocycle, k: int, phi: Observable, psi_values: Dict[int, np.ndarray],
              n_values: Sequence[int], size: int, seed_seq: np.random.SeedSequence, mode: str) -> np.ndarray:
    tower = cocycle.tower
    rng = np.random.default_rng(seed_seq)
    grid = tower.grid(k)
    prob = grid.width / grid.width.sum()
    cells = rng.choice(grid.n_cells, size=size, p=prob)
    weight = phi.values[cells]
    alive = np.ones(size, dtype=bool)
    t = grid.lo[cells] + rng.random(size) * grid.width[cells]
    level = grid.level[cells].copy()
    n_max = max(n_values)
    out = np.zeros(len(n_values))
    wanted = {n: i for i, n in enumerate(n_values)}
    for n in range(n_max + 1):
        if n in wanted:
            values = np.where(alive, psi_values[n][np.clip(cells, 0, None)], 0.0)
            out[wanted[n]] = float(np.mean(weight * values))
        if n == n_max:
            break
        if mode == 'ulam':
            nxt = _sample_rows(cocycle.operator(k + n).entries, np.clip(cells, 0, None), rng.random(size))
            alive &= nxt >= 0
            cells = nxt
        else:
            t, level, ok = tower.map_points(k + n, t, level)
            alive &= ok
            cells = np.where(alive, tower.locate(k + n + 1, t, np.where(alive, level, 0)), -1)
            alive &= cells >= 0
    return out


def mc_correlation(cocycle: UlamCocycle, family: EquivariantFamily, k: int, phi: Observable,
                   psi_factory: Callable[[int], Observable], n_values: Sequence[int], samples: int,
                   seed: int, batches: int = 32, mode: str = 'ulam', workers: int = 1) -> Tuple[np.ndarray, np.ndarray]:
    """
    Monte Carlo estimate of ∫(ψ∘F^n)φ dλ - ∫ψ dμ ∫φ dλ with batch-means standard errors.

    Points start from λ on the truncated tower; in `ulam` mode each step redraws the
    point uniformly in its landing cell, in `exact` mode the tower map is followed.

    Raises:
    - InsufficientSamplesError: If samples < 1000
    """
    if samples < MIN_MC_SAMPLES:
        raise InsufficientSamplesError(f"Monte Carlo needs at least {MIN_MC_SAMPLES} samples, got {samples}")
    if mode not in ('ulam', 'exact'):
        raise CorrelationError(f"Unknown Monte Carlo mode {mode}")
    n_values = [int(n) for n in n_values]
    cocycle.prefetch(k, k + max(n_values))
    grid = cocycle.tower.grid(k)
    total_mass = float(grid.width.sum())
    K = float(np.sum(phi.values * grid.width))
    psis = {n: psi_factory(k + n) for n in n_values}
    psi_values = {n: psi.values for n, psi in psis.items()}
    means = np.array([_mu_mean(psis[n], family.density(k + n)) * K for n in n_values])
    size = samples // batches
    streams = np.random.SeedSequence(seed).spawn(batches)
    raw = ordered_map(lambda s: _mc_batch(cocycle, k, phi, psi_values, n_values, size, s, mode), streams, workers)
    estimates = total_mass * np.array(raw) - means[None, :]
    return estimates.mean(axis=0), estimates.std(axis=0, ddof=1) / math.sqrt(batches)


def fit_decay(ns: Sequence[int], values: Sequence[float], window: Tuple[int, int], defect: float = 0.0) -> DecayFit:
    """
    Log-linear fit log value = log C + n log β over the window, above the 10·defect noise floor.

    Raises:
    - FitError: If fewer than 5 usable points remain
    """
    ns = np.asarray(ns, dtype=float)
    values = np.asarray(values, dtype=float)
    floor = NOISE_FLOOR_FACTOR * defect
    keep = (ns >= window[0]) & (ns <= window[1]) & (values > 0.0) & (values > floor)
    if np.count_nonzero(keep) < MIN_FIT_POINTS:
        raise FitError(f"Only {np.count_nonzero(keep)} points above the noise floor {floor:.2e} in window {window}")
    fit = linregress(ns[keep], np.log(values[keep]))
    return DecayFit(beta=float(math.exp(fit.slope)), C=float(math.exp(fit.intercept)), r2=float(fit.rvalue ** 2),
                    window=(int(window[0]), int(window[1])), points=int(np.count_nonzero(keep)))


def mixing_ratio(cocycle: UlamCocycle, family: EquivariantFamily, k: int, A: np.ndarray, A_prime: np.ndarray,
                 lag: int) -> float:
    """
    ρ(A, A′) = μ(A ∩ F^{-lag}A′) / (μ(A) μ(A′)) for cell masks A over fiber k and A′ over fiber k + lag.

    Raises:
    - ZeroMassError: If either element has no μ-mass
    """
    h = family.density(k)
    h_lag = family.density(k + lag)
    mass_a = float(np.sum(h.mass[A]))
    mass_b = float(np.sum(h_lag.mass[A_prime]))
    if mass_a <= 0.0 or mass_b <= 0.0:
        raise ZeroMassError(f"Element masses {mass_a:.3e}, {mass_b:.3e}")
    pushed, _ = cocycle.push(k, lag, np.where(A, h.mass, 0.0))
    return float(np.sum(pushed[A_prime])) / (mass_a * mass_b)


def _element_masses(mass: np.ndarray, bad: np.ndarray) -> np.ndarray:
    """Masses of P̂ elements (good cells, then the lumped bad set) for each column"""
    good = mass[~bad]
    if np.any(bad):
        return np.vstack([good, mass[bad].sum(axis=0, keepdims=True)])
    return good


def settling_lag(deviations: Sequence[float], band: float, persist: int = 1) -> Optional[int]:
    """
    One past the last lag (1-based) whose deviation exceeds the band, or 1 when none does.
    None when fewer than `persist` in-band lags follow it before the scan ends.
    """
    outside = [lag for lag, deviation in enumerate(deviations, start=1) if deviation > band]
    last = outside[-1] if outside else 0
    if len(deviations) - last < max(persist, 1):
        return None
    return last + 1


def mixing_scan(cocycle: UlamCocycle, family: EquivariantFamily, k: int, horizon: int, cap: int,
                band: float = 0.5, persist: int = 5) -> MixingScan:
    """
    Push the μ-restriction of every P̂ element of fiber k and record max |ρ - 1| for every lag up to
    the cap; q0 follows the last lag outside the band (see settling_lag).
    """
    tower = cocycle.tower
    h = family.density(k)
    bad = tower.bad_set(k, horizon).mask
    good_idx = np.flatnonzero(~bad)
    n_elements = len(good_idx) + (1 if np.any(bad) else 0)
    columns = np.zeros((len(h.mass), n_elements))
    columns[good_idx, np.arange(len(good_idx))] = h.mass[good_idx]
    if np.any(bad):
        columns[bad, -1] = h.mass[bad]
    source_mass = columns.sum(axis=0)
    scan = MixingScan()
    for lag in range(1, cap + 1):
        columns = cocycle.operator(k + lag - 1).push(columns)
        h_lag = family.density(k + lag)
        target_bad = tower.bad_set(k + lag, horizon).mask
        joint = _element_masses(columns, target_bad)
        target_mass = _element_masses(h_lag.mass, target_bad)
        ratio = joint / (target_mass[:, None] * source_mass[None, :])
        deviation = float(np.max(np.abs(ratio - 1.0)))
        scan.deviations.append(deviation)
    scan.q0 = settling_lag(scan.deviations, band, persist)
    return scan


def project_correlation(cocycle: UlamCocycle, family: EquivariantFamily, k: int,
                        phi_hat: Callable[[np.ndarray], np.ndarray], psi_hat: Callable[[np.ndarray], np.ndarray],
                        n: int) -> float:
    """
    Correlation of the interval maps f^n_ω: the tower correlation of the lifts
    ψ̄ = ψ̂∘π and φ̄·h, returned as ∫ψ̂∘f^n φ̂ dν - ∫ψ̂ dν_{σ^nω} ∫φ̂ dν.
    """
    tower = cocycle.tower
    h = family.density(k)
    phi_bar = Observable.from_function(tower, k, lambda x, level: phi_hat(x))
    weighted = Observable(step=k, values=phi_bar.values * h.values)
    psi_of = lambda step: Observable.from_function(tower, step, lambda x, level: psi_hat(x))
    series = correlation_series(cocycle, family, k, weighted, psi_of, n)
    return float(series.op_signed[-1])
