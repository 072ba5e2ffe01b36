import logging
import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.sparse import coo_matrix, csr_matrix

from random_tower import RandomTower
from ulam_operator import DensityVector, UlamCocycle

# Set up logging
logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(levelname)s - %(message)s')
logger = logging.getLogger(__name__)

# Constants
PARAM_MARGIN = 1.1
MAX_TARGET_HALVINGS = 200
CONTRACTION_SLACK = 1e-10
CONDITIONS = ('integral', 'nonnegativity', 'average', 'lipschitz', 'bad_set')


class ConeError(Exception):
    """Base exception for cones and projective metrics"""
    pass


class InfeasibleParamsError(ConeError):
    """Raised when no (a, b, c) satisfies the cone constant inequalities"""
    pass


class NotInConeError(ConeError):
    """Raised when a vector is required to be a cone member and is not"""
    pass


class ParameterRangeError(ConeError):
    """Raised for constants outside their admissible range"""
    pass


@dataclass(frozen=True)
class ConeParams:
    """Cone constants with the inputs they were derived from"""
    a: float
    b: float
    c: float
    kappa: float
    epsilon: float
    alpha: float
    alpha_prime: float
    C: float
    D_F: float
    mass_ratio: float
    d1: float
    d2: float
    measured_d1: float
    measured_d2: float

    @property
    def targets_met(self) -> bool:
        return self.measured_d1 <= self.d1 and self.measured_d2 <= self.d2

    def scaled(self, factor: float) -> 'ConeParams':
        return replace(self, a=self.a * factor, b=self.b * factor, c=self.c * factor)

    def violations(self) -> List[str]:
        """Names of the cone constant inequalities that fail on re-evaluation"""
        failed = []
        if not self.a > (self.alpha_prime + self.alpha / 2.0) / self.kappa:
            failed.append('a')
        if not self.c > self.C * (self.mass_ratio * self.a + self.d1 * self.b) / (self.kappa - self.D_F * self.d2):
            failed.append('c')
        if not self.b > self.D_F * self.C * self.c / (self.kappa - self.epsilon):
            failed.append('b')
        if not self.alpha_prime * self.d1 * self.b < self.alpha / 4.0:
            failed.append('d1')
        if not self.alpha_prime * self.c * self.d2 < self.alpha / 4.0:
            failed.append('d2')
        if not self.D_F * self.d2 < self.kappa:
            failed.append('kappa')
        return failed

    def as_dict(self) -> Dict[str, float]:
        return {'a': self.a, 'b': self.b, 'c': self.c, 'kappa': self.kappa, 'epsilon': self.epsilon,
                'alpha': self.alpha, 'alpha_prime': self.alpha_prime, 'C': self.C, 'D_F': self.D_F,
                'mass_ratio': self.mass_ratio, 'd1': self.d1, 'd2': self.d2,
                'measured_d1': self.measured_d1, 'measured_d2': self.measured_d2}


@dataclass(frozen=True)
class ConeFrame:
    """
    Per-fiber data the cone conditions read: m and μ masses per cell, the bad
    set, and the same-element pairs with their separation times.
    """
    step: int
    m: np.ndarray
    mu: np.ndarray
    bad: np.ndarray
    pair_a: np.ndarray
    pair_b: np.ndarray
    pair_s: np.ndarray
    gamma: float
    d1: float
    d2: float

    @property
    def n_cells(self) -> int:
        return len(self.m)

    @property
    def mass_ratio(self) -> float:
        """𝒟 = sup over P̂ elements of μ(A)/m(A)"""
        good = ~self.bad
        ratio = float(np.max(self.mu[good] / self.m[good])) if np.any(good) else 0.0
        if np.any(self.bad) and self.m[self.bad].sum() > 0.0:
            ratio = max(ratio, float(self.mu[self.bad].sum() / self.m[self.bad].sum()))
        return ratio

    def integral(self, psi: np.ndarray) -> float:
        return float(psi @ self.m)


@dataclass
class ConeReport:
    member: bool
    slacks: Dict[str, float] = field(default_factory=dict)
    worst_cells: Dict[str, int] = field(default_factory=dict)

    def rows(self) -> List[Tuple[str, float, int]]:
        return [(name, self.slacks[name], self.worst_cells[name]) for name in CONDITIONS if name in self.slacks]


@dataclass(frozen=True)
class ConstraintSet:
    """
    The cone as finitely many linear functionals g_r(χ) = coef_r·∫χ dm + (Dχ)_r ≥ 0.
    """
    coef: np.ndarray
    matrix: csr_matrix
    group: np.ndarray
    cell: np.ndarray
    m: np.ndarray

    def evaluate(self, chi: np.ndarray) -> np.ndarray:
        return self.coef * float(chi @ self.m) + self.matrix @ chi


@dataclass
class ContractionReport:
    pairs: int = 0
    members: int = 0
    contractions: int = 0
    worst_ratio: float = 0.0
    tanh_factor: float = 1.0
    failures: List[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.members == self.pairs and self.contractions == self.pairs


@dataclass
class LasotaYorkeReport:
    N: int
    checked: Dict[str, int] = field(default_factory=dict)
    violations: Dict[str, int] = field(default_factory=dict)
    worst_ratio: Dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(count == 0 for count in self.violations.values())


def build_frame(tower: RandomTower, h: DensityVector, horizon: int, k_max: int) -> ConeFrame:
    """Assemble the cone data of the fiber carrying h, with P̂ built at the given horizon"""
    k = h.step
    grid = tower.grid(k)
    bad = tower.bad_set(k, horizon)
    a, b, s = tower.lipschitz_pairs(k, k_max)
    m = grid.weights(tower.theta_prime) * grid.width
    return ConeFrame(step=k, m=m, mu=h.mass, bad=bad.mask, pair_a=a, pair_b=b, pair_s=s, gamma=tower.gamma,
                     d1=tower.good_diam(k, horizon, bad), d2=bad.d2)


def lipschitz_seminorm(psi: np.ndarray, frame: ConeFrame) -> float:
    """|ψ|_h at cell granularity: max |ψ(x) - ψ(y)| / γ^{s(x,y)} over same-element pairs"""
    if len(frame.pair_a) == 0:
        return 0.0
    scale = frame.gamma ** (-frame.pair_s.astype(float))
    return float(np.max(np.abs(psi[frame.pair_a] - psi[frame.pair_b]) * scale))


def constraint_set(frame: ConeFrame, params: ConeParams) -> ConstraintSet:
    """Linear functionals of the cone C(a, b, c) over one frame (nonnegativity on every cell)"""
    n = frame.n_cells
    good = np.flatnonzero(~frame.bad)
    bad = np.flatnonzero(frame.bad)
    coefs, groups, cells = [], [], []
    rows, cols, vals = [], [], []
    count = 0

    def add(coef, group, cell, entries):
        nonlocal count
        coefs.append(coef)
        groups.append(group)
        cells.append(cell)
        for col, val in entries:
            rows.append(count)
            cols.append(col)
            vals.append(val)
        count += 1

    add(1.0, 0, -1, [])
    for i in range(n):
        add(0.0, 1, i, [(i, 1.0)])
    for i in good:
        add(params.a, 2, i, [(i, -frame.m[i] / frame.mu[i])])
    if len(bad) and frame.mu[bad].sum() > 0.0:
        lump = frame.mu[bad].sum()
        add(params.a, 2, int(bad[0]), [(i, -frame.m[i] / lump) for i in bad])
    scale = frame.gamma ** (-frame.pair_s.astype(float))
    for x, y, w in zip(frame.pair_a, frame.pair_b, scale):
        add(params.b, 3, x, [(x, -w), (y, w)])
        add(params.b, 3, x, [(x, w), (y, -w)])
    for i in bad:
        add(params.c, 4, i, [(i, -1.0)])
        add(params.c, 4, i, [(i, 1.0)])
    matrix = coo_matrix((vals, (rows, cols)), shape=(count, n)).tocsr()
    return ConstraintSet(coef=np.array(coefs), matrix=matrix, group=np.array(groups),
                         cell=np.array(cells, dtype=np.int64), m=frame.m)


def membership(psi: np.ndarray, frame: ConeFrame, params: ConeParams,
               constraints: Optional[ConstraintSet] = None) -> ConeReport:
    """
    Evaluate every cone condition; slacks are the smallest functional value per condition.

    Raises:
    - NotInConeError: If ∫ψ dm <= 0
    """
    if frame.integral(psi) <= 0.0:
        raise NotInConeError(f"∫ψ dm = {frame.integral(psi):.3e} is not positive")
    constraints = constraints or constraint_set(frame, params)
    values = constraints.evaluate(psi)
    report = ConeReport(member=True)
    for gid, name in enumerate(CONDITIONS):
        rows = np.flatnonzero(constraints.group == gid)
        if len(rows) == 0:
            continue
        worst = rows[np.argmin(values[rows])]
        report.slacks[name] = float(values[worst])
        report.worst_cells[name] = int(constraints.cell[worst])
        if values[worst] < 0.0:
            report.member = False
    return report


def hilbert_plus(phi: np.ndarray, psi: np.ndarray) -> float:
    """Θ⁺(φ, ψ) = log(max(φ/ψ) / min(φ/ψ)) on strictly positive vectors"""
    phi = np.asarray(phi, dtype=float)
    psi = np.asarray(psi, dtype=float)
    if np.any(phi <= 0.0) or np.any(psi <= 0.0):
        raise ConeError("Θ⁺ needs strictly positive entries")
    ratio = phi / psi
    return float(math.log(np.max(ratio) / np.min(ratio)))


def scalar_range(phi: np.ndarray, psi: np.ndarray, constraints: ConstraintSet) -> Tuple[float, float]:
    """
    𝔞 = inf{ρ : ρφ - ψ ∈ C} and 𝔟 = sup{ζ : ψ - ζφ ∈ C} from the constraint ratios.
    """
    g_phi = constraints.evaluate(phi)
    g_psi = constraints.evaluate(psi)
    positive = g_phi > 0.0
    if np.any(~positive & (g_psi > 0.0)):
        upper = math.inf
    else:
        upper = float(np.max(g_psi[positive] / g_phi[positive])) if np.any(positive) else math.inf
    if np.any(~positive & (g_psi < 0.0)):
        lower = -math.inf
    else:
        lower = float(np.min(g_psi[positive] / g_phi[positive])) if np.any(positive) else -math.inf
    return upper, lower


def hilbert_cone(phi: np.ndarray, psi: np.ndarray, frame: ConeFrame, params: ConeParams,
                 constraints: Optional[ConstraintSet] = None) -> float:
    """Θ(φ, ψ) = log(𝔞/𝔟) in C(a, b, c); inf when 𝔟 <= 0 or 𝔞 is unbounded"""
    constraints = constraints or constraint_set(frame, params)
    for name, vec in (('phi', phi), ('psi', psi)):
        if not membership(vec, frame, params, constraints).member:
            raise NotInConeError(f"{name} is not in the cone over fiber {frame.step}")
    upper, lower = scalar_range(phi, psi, constraints)
    if lower <= 0.0 or math.isinf(upper):
        return math.inf
    return float(math.log(upper / lower))


def mixing_constants(mode: str, C: float, band: float = 0.5) -> Tuple[float, float]:
    """(α, α′): the mixing band [1 - band, 1 + band] or the proof values 1/(2C²), 3C²/2"""
    if mode == 'empirical':
        return 1.0 - band, 1.0 + band
    if mode == 'proof':
        return 1.0 / (2.0 * C * C), 1.5 * C * C
    raise ParameterRangeError(f"Unknown constants mode {mode}")


def default_params(alpha: float, alpha_prime: float, kappa: float, C: float, D_F: float, mass_ratio: float,
                   d1: float, d2: float, epsilon: float, theta_prime: Optional[float] = None) -> ConeParams:
    """
    Choose (a, b, c) with a 10% margin over each lower bound.

    a comes first; c and b solve the coupled bounds c > P(𝒟a + 𝒟₁b),
    b > Qc. When the smallness conditions on 𝒟₁ and 𝒟₂ fail, the targets
    are halved until they hold; the returned params carry both the targets
    and the measured values.

    Raises:
    - InfeasibleParamsError: If κ <= D_F𝒟₂, κ <= ε, κ >= e^{-θ′} or no targets work
    """
    if not 0.0 < alpha < alpha_prime:
        raise ParameterRangeError(f"Need 0 < alpha < alpha_prime, got {alpha}, {alpha_prime}")
    if not 0.0 < kappa < 1.0:
        raise ParameterRangeError(f"kappa must lie in (0, 1), got {kappa}")
    if theta_prime is not None and not kappa < math.exp(-theta_prime):
        raise InfeasibleParamsError(f"kappa {kappa} must be below e^(-theta') = {math.exp(-theta_prime):.6f}")
    if D_F * d2 >= kappa:
        raise InfeasibleParamsError(f"D_F*D2 = {D_F * d2:.4g} is not below kappa = {kappa}")
    if epsilon >= kappa:
        raise InfeasibleParamsError(f"epsilon {epsilon} is not below kappa {kappa}")

    a = PARAM_MARGIN * (alpha_prime + alpha / 2.0) / kappa
    target_d1, target_d2 = d1, d2
    for _ in range(MAX_TARGET_HALVINGS):
        p = C / (kappa - D_F * target_d2)
        q = D_F * C / (kappa - epsilon)
        coupling = PARAM_MARGIN * PARAM_MARGIN * p * q * target_d1
        if coupling >= 1.0:
            target_d1 /= 2.0
            continue
        c = PARAM_MARGIN * p * mass_ratio * a / (1.0 - coupling)
        b = PARAM_MARGIN * q * c
        small_d1 = alpha_prime * target_d1 * b < alpha / 4.0
        small_d2 = alpha_prime * c * target_d2 < alpha / 4.0
        if small_d1 and small_d2:
            header_c = C * (4.0 * alpha_prime * mass_ratio * a + alpha) / (4.0 * alpha_prime * (kappa - D_F * target_d2))
            logger.info(f"Cone constants a={a:.4g}, b={b:.4g}, c={c:.4g} (header form of c: {header_c:.4g})")
            params = ConeParams(a=a, b=b, c=c, kappa=kappa, epsilon=epsilon, alpha=alpha,
                                alpha_prime=alpha_prime, C=C, D_F=D_F, mass_ratio=mass_ratio,
                                d1=target_d1, d2=target_d2, measured_d1=d1, measured_d2=d2)
            if not params.targets_met:
                logger.warning(f"Cone needs D1 <= {target_d1:.3e} and D2 <= {target_d2:.3e}; "
                               f"measured {d1:.3e} and {d2:.3e}")
            return params
        if not small_d1:
            target_d1 /= 2.0
        if not small_d2:
            target_d2 /= 2.0
    raise InfeasibleParamsError("No D1/D2 targets satisfy the cone smallness conditions")


def diameter_bound(alpha: float, alpha_prime: float, kappa: float) -> float:
    """log(d / min(d, 1 - κ)) with d = max((4α′ + 2α)/α, (1 + κ)/(1 - κ))"""
    if not 0.0 < alpha < 1.0 < alpha_prime:
        raise ParameterRangeError(f"Need 0 < alpha < 1 < alpha_prime, got {alpha}, {alpha_prime}")
    if not 0.0 <= kappa < 1.0:
        raise ParameterRangeError(f"kappa must lie in [0, 1), got {kappa}")
    d = max((4.0 * alpha_prime + 2.0 * alpha) / alpha, (1.0 + kappa) / (1.0 - kappa))
    return math.log(d / min(d, 1.0 - kappa))


def contraction_check(cocycle: UlamCocycle, source: ConeFrame, target: ConeFrame, params: ConeParams,
                      pairs: Sequence[Tuple[np.ndarray, np.ndarray]]) -> ContractionReport:
    """
    Push cone pairs from `source` to `target`: the images must lie in C(κa, κb, κc)
    and Θ must shrink by tanh(D/4).
    """
    steps = target.step - source.step
    diameter = diameter_bound(params.alpha, params.alpha_prime, params.kappa)
    report = ContractionReport(tanh_factor=math.tanh(diameter / 4.0))
    before_set = constraint_set(source, params)
    after_set = constraint_set(target, params)
    inner_set = constraint_set(target, params.scaled(params.kappa))
    for index, (phi, psi) in enumerate(pairs):
        report.pairs += 1
        theta_before = hilbert_cone(phi, psi, source, params, before_set)
        phi_k = cocycle.normalized_apply(source.step, steps, phi)
        psi_k = cocycle.normalized_apply(source.step, steps, psi)
        inner_phi = membership(phi_k, target, params, inner_set)
        inner_psi = membership(psi_k, target, params, inner_set)
        if inner_phi.member and inner_psi.member:
            report.members += 1
        else:
            report.failures.append(f"pair {index}: image outside the kappa-cone "
                                   f"({inner_phi.slacks} / {inner_psi.slacks})")
            continue
        theta_after = hilbert_cone(phi_k, psi_k, target, params, after_set)
        if theta_after <= report.tanh_factor * theta_before + CONTRACTION_SLACK:
            report.contractions += 1
        else:
            report.failures.append(f"pair {index}: theta {theta_before:.4g} -> {theta_after:.4g}")
        if theta_before > 0.0 and math.isfinite(theta_before):
            report.worst_ratio = max(report.worst_ratio, theta_after / theta_before)
    logger.info(f"Contraction over {steps} steps: {report.members}/{report.pairs} in the kappa-cone, "
                f"{report.contractions}/{report.pairs} contract (tanh factor {report.tanh_factor:.4f})")
    return report


def lasota_yorke_N(theta_prime: float, C: float, D_F: float, epsilon: float) -> int:
    """Smallest N with e^{-θ′N/2}·max(1, C + D_F) < ε"""
    if theta_prime <= 0.0 or not 0.0 < epsilon < 1.0:
        raise ParameterRangeError("Need theta' > 0 and epsilon in (0, 1)")
    return int(math.floor(2.0 * math.log(max(1.0, C + D_F) / epsilon) / theta_prime)) + 1


def lasota_yorke_check(cocycle: UlamCocycle, source: ConeFrame, target: ConeFrame, psi: np.ndarray,
                       params: ConeParams) -> LasotaYorkeReport:
    """Three-case Lasota-Yorke inequality for same-element pairs of the target grid (report only)"""
    tower = cocycle.tower
    steps = target.step - source.step
    theta_prime = tower.theta_prime
    N = lasota_yorke_N(theta_prime, params.C, params.D_F, params.epsilon)
    image = cocycle.normalized_apply(source.step, steps, psi)
    seminorm = lipschitz_seminorm(psi, source)
    sup = float(np.max(np.abs(psi)))
    levels = tower.grid(target.step).level[target.pair_a]
    diff = np.abs(image[target.pair_a] - image[target.pair_b])
    dist = target.gamma ** target.pair_s.astype(float)
    climbed = levels >= steps
    bounds = np.where(climbed, math.exp(-theta_prime * steps) * seminorm * dist,
                      np.where(2 * levels >= N, params.epsilon * (seminorm + sup) * dist,
                               (params.epsilon * seminorm + params.D_F * params.C * sup) * dist))
    report = LasotaYorkeReport(N=N)
    cases = {'climb': climbed, 'middle': ~climbed & (2 * levels >= N), 'low': ~climbed & (2 * levels < N)}
    for name, mask in cases.items():
        report.checked[name] = int(np.count_nonzero(mask))
        slack = 1e-9 * (np.abs(bounds[mask]) + 1e-300)
        report.violations[name] = int(np.count_nonzero(diff[mask] > bounds[mask] + slack))
        with np.errstate(divide='ignore', invalid='ignore'):
            ratios = np.where(bounds[mask] > 0.0, diff[mask] / bounds[mask], np.where(diff[mask] > 0.0, np.inf, 0.0))
        report.worst_ratio[name] = float(np.max(ratios)) if len(ratios) else 0.0
        if report.violations[name]:
            logger.warning(f"Lasota-Yorke case {name}: {report.violations[name]} of {report.checked[name]} pairs "
                           f"exceed the bound (worst ratio {report.worst_ratio[name]:.3g})")
    return report
