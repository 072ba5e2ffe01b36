import hashlib
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import brentq

from config_manager import ConfigError, ConfigManager, _coerce, format_config, validate_parameters
from correlation_analyzer import (CorrelationSeries, DecayFit, FitError, MixingScan, Observable, cone_shift,
                                  correlation_series, fit_decay, mc_correlation, mixing_scan)
from data_logger import MANIFEST_FILE, ArtifactLogger
from driving_system import DrivingSystem
from fiber_maps import FiberFamily
from good_times_scheduler import GoodTimes, Q1Study, ScheduleError, choose_M, contraction_exponent, good_times
from hilbert_cones import (ConeFrame, ConeParams, InfeasibleParamsError, build_frame, constraint_set,
                           contraction_check, default_params, diameter_bound, hilbert_plus, lasota_yorke_check,
                           membership, mixing_constants, scalar_range)
from random_tower import (RandomTower, TailFitError, WeightExponentError, fit_tail, quadratic_orbit_points)
from ulam_operator import EquivariantFamily, UlamCocycle
from visualization_tools import VisualizationTools

# Set up logging
logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(levelname)s - %(message)s')
logger = logging.getLogger(__name__)

VERSION = '0.1.0'
OUTPUT_ENV = 'TOWERLAB_OUTPUT'
DEFAULT_OUTPUT_ROOT = 'towerlab-runs'
VERIFY_FILE = 'verify.json'

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_CONFIG = 2
EXIT_INTERNAL = 3

MAX_HORIZON_DOUBLINGS = 4
DENSITY_BOUND_LIMIT = 50.0
MIXING_BAND = 0.5
MIXING_Q0_LIMIT = 200
GOOD_TIMES_SLACK = 0.05
GOOD_TIMES_Q3_FACTOR = 100
MC_SIGMAS = 3.0
EQUIVARIANCE_TOL = 2e-4
CESARO_TOL = 1e-3
MARKOV_FIBERS = 20
HASH_EXCLUDED = ('run.workers',)


class ExperimentError(Exception):
    """Base exception for experiment orchestration"""
    pass


class StageError(ExperimentError):
    """Raised when a run stage aborts; the manifest already records it"""

    def __init__(self, stage: str, message: str):
        super().__init__(f"Stage {stage} aborted: {message}")
        self.stage = stage


class CheckSkipped(ExperimentError):
    """Raised by a check whose prerequisites are unavailable"""
    pass


class Stage(Enum):
    TOWER = 'tower'
    DENSITIES = 'densities'
    CONES = 'cones'
    SCHEDULE = 'schedule'
    CORRELATIONS = 'correlations'


@dataclass
class RunManifest:
    """Everything needed to reproduce a run and read its outcome"""
    run_id: str
    run_dir: str
    config: Dict[str, Any]
    seed: int
    version: str = VERSION
    status: str = 'running'
    timings: Dict[str, float] = field(default_factory=dict)
    constants: Dict[str, Any] = field(default_factory=dict)
    defects: Dict[str, float] = field(default_factory=dict)
    checks: Dict[str, bool] = field(default_factory=dict)
    errors: List[Dict[str, str]] = field(default_factory=list)
    artifacts: List[str] = field(default_factory=list)

    @property
    def exit_code(self) -> int:
        if self.errors:
            return EXIT_INTERNAL
        return EXIT_OK if all(self.checks.values()) else EXIT_CHECK_FAILED

    def as_dict(self) -> Dict[str, Any]:
        return _sanitize(asdict(self))


@dataclass
class CheckResult:
    name: str
    status: str
    detail: str
    elapsed: float

    @property
    def passed(self) -> bool:
        return self.status != 'fail'


@dataclass
class VerifyReport:
    run_id: str
    results: List[CheckResult] = field(default_factory=list)

    @property
    def exit_code(self) -> int:
        return EXIT_OK if all(r.passed for r in self.results) else EXIT_CHECK_FAILED

    def as_dict(self) -> Dict[str, Any]:
        return {'run_id': self.run_id, 'version': VERSION, 'passed': self.exit_code == EXIT_OK,
                'checks': {r.name: {'status': r.status, 'detail': r.detail, 'elapsed': round(r.elapsed, 3)}
                           for r in self.results}}


def _sanitize(value: Any) -> Any:
    """JSON-safe copy: non-finite floats become None, numpy scalars become Python numbers"""
    if isinstance(value, dict):
        return {str(k): _sanitize(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_sanitize(v) for v in value]
    if isinstance(value, np.generic):
        value = value.item()
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


def output_root() -> str:
    return os.environ.get(OUTPUT_ENV, DEFAULT_OUTPUT_ROOT)


def run_id(config: Dict[str, Any]) -> str:
    """Content address of a configuration; the worker count does not change results and is left out"""
    hashed = {k: v for k, v in config.items() if k not in HASH_EXCLUDED}
    text = format_config(hashed) + f"seed={config['run.seed']}\n"
    return hashlib.sha256(text.encode('utf-8')).hexdigest()[:12]


class ExperimentContext:
    """
    Lazily computed state shared by the run stages and the verification checks.

    Every derived object is memoised, so a check that needs the cone constants
    or the schedule computes them once per context.
    """

    def __init__(self, config: Dict[str, Any]):
        """
        Args:
        - config (Dict[str, Any]): Validated configuration

        Raises:
        - ConfigError: If the tower cannot be calibrated with this configuration
        """
        self.config = config
        self.workers = int(config['run.workers'])
        self.driving = DrivingSystem.from_config(config)
        self.tower = RandomTower.from_config(config, self.driving)
        try:
            self.tower.calibrate_weights()
        except (WeightExponentError, TailFitError) as e:
            logger.error(f"Invalid tower configuration: {e}")
            raise ConfigError(str(e))
        self.cocycle = UlamCocycle(self.tower, float(config['ulam.defect_budget']), self.workers)
        self.horizon = int(config['cone.horizon'])
        self._family: Optional[EquivariantFamily] = None
        self._frames: Dict[int, ConeFrame] = {}
        self._params: Optional[ConeParams] = None
        self._params_error: Optional[Exception] = None
        self._studies: Dict[int, Q1Study] = {}
        self._q1: Dict[int, Optional[int]] = {}
        self._schedule: Optional[Tuple[Optional[int], Optional[GoodTimes], str]] = None
        self._mixing: Optional[MixingScan] = None
        self._correlations: Optional[Tuple[CorrelationSeries, Optional[DecayFit]]] = None
        self.constants: Dict[str, Any] = {
            'theta_hat': self.tower.tail_fit.theta,
            'tail_C': self.tower.tail_fit.C,
            'tail_r2': self.tower.tail_fit.r2,
            'theta_prime': self.tower.theta_prime,
        }

    def family(self, stop: int) -> EquivariantFamily:
        """Equivariant densities over fibers 0..stop (extended on demand)"""
        if self._family is None:
            self._family = EquivariantFamily(self.cocycle, 0, max(stop, 1), int(self.config['ulam.n_back']),
                                             float(self.config['ulam.tol']))
        else:
            self._family.extend(stop)
        return self._family

    def frame(self, k: int) -> ConeFrame:
        frame = self._frames.get(k)
        if frame is None:
            h = self.family(k).density(k)
            frame = build_frame(self.tower, h, self.horizon, int(self.config['cone.k_max']))
            self._frames[k] = frame
        return frame

    def density_constant(self) -> float:
        """C = max(sup_n |P^n 1|_∞, sup h, sup 1/h) over the sampled fibers"""
        fibers = int(self.config['run.fibers'])
        family = self.family(fibers)
        lows = [float(np.min(family.density(k).values)) for k in range(fibers + 1)]
        highs = [float(np.max(family.density(k).values)) for k in range(fibers + 1)]
        uniform = self.cocycle.uniform_bound(0, fibers)
        self.constants.update(density_min=min(lows), density_max=max(highs), C_emp=uniform)
        return max(uniform, max(highs), 1.0 / min(lows))

    def cone_params(self) -> ConeParams:
        """
        Calibrate (α, α′, C, D_F, 𝒟, 𝒟₁, 𝒟₂) and derive (a, b, c).

        The bad-set horizon is doubled while the measured 𝒟₁, 𝒟₂ miss the targets.

        Raises:
        - InfeasibleParamsError: If no constants exist at the configured κ and ε
        """
        if self._params is not None:
            return self._params
        if self._params_error is not None:
            raise self._params_error
        cfg = self.config
        try:
            C = self.density_constant()
            D_F = max(self.tower.distortion_constant(k) for k in range(int(cfg['run.fibers'])))
            alpha, alpha_prime = mixing_constants(cfg['cone.constants'], C, MIXING_BAND)
            for doubling in range(MAX_HORIZON_DOUBLINGS + 1):
                frame = self.frame(0)
                params = default_params(alpha, alpha_prime, float(cfg['cone.kappa']), C, D_F, frame.mass_ratio,
                                        frame.d1, frame.d2, float(cfg['cone.epsilon']), self.tower.theta_prime)
                if params.targets_met or doubling == MAX_HORIZON_DOUBLINGS:
                    break
                self.horizon *= 2
                self._frames.clear()
                logger.info(f"Bad-set targets missed; deepening the horizon to {self.horizon}")
        except InfeasibleParamsError as e:
            logger.error(f"Cone constants are infeasible: {e}")
            self._params_error = e
            raise
        self._params = params
        self.constants.update(params.as_dict())
        self.constants.update(cone_horizon=self.horizon,
                              diameter=diameter_bound(params.alpha, params.alpha_prime, params.kappa))
        return params

    def study(self, probes: Optional[int] = None) -> Q1Study:
        probes = probes or int(self.config['schedule.probes'])
        study = self._studies.get(probes)
        if study is None:
            cfg = self.config
            study = Q1Study(self.cocycle, self.family(0), self.cone_params(), self.horizon, int(cfg['cone.k_max']),
                            int(cfg['schedule.cap']), probes, int(cfg['schedule.persist']), int(cfg['run.seed']))
            self._studies[probes] = study
        return study

    def q1_values(self, stop: int) -> List[Optional[int]]:
        """q̂₁ at fibers 0..stop-1, computed concurrently and memoised"""
        missing = [k for k in range(stop) if k not in self._q1]
        if missing:
            self.family(stop + int(self.config['schedule.cap']) + 1)
            values = self.study().q1_table(missing[0], stop, self.workers)
            for k, q in zip(range(missing[0], stop), values):
                self._q1[k] = q
        return [self._q1[k] for k in range(stop)]

    def mixing(self) -> MixingScan:
        if self._mixing is None:
            cap = int(self.config['schedule.cap'])
            self.cone_params()
            self._mixing = mixing_scan(self.cocycle, self.family(cap + 1), 0, self.horizon, cap, MIXING_BAND,
                                       int(self.config['schedule.persist']))
            self.constants['q0'] = self._mixing.q0
        return self._mixing

    def schedule(self) -> Tuple[Optional[int], Optional[GoodTimes], str]:
        """(M, good times, note); the note names why the orbit point is unresolved"""
        if self._schedule is not None:
            return self._schedule
        cfg = self.config
        epsilon = float(cfg['schedule.epsilon'])
        samples = self.q1_values(int(cfg['schedule.samples']))
        self.constants['q1'] = samples[0]
        try:
            M = choose_M(samples, epsilon)
        except ScheduleError as e:
            logger.warning(f"Orbit point unresolved: {e}")
            self._schedule = (None, None, str(e))
            return self._schedule
        n = int(cfg['schedule.horizon']) or 50 * M
        flags = self.q1_values(n + 1)
        q1_start = samples[0] if samples[0] is not None else int(cfg['schedule.cap'])
        try:
            times = good_times(self.driving, self.tower.origin, M, epsilon, n,
                               lambda k: flags[k] is not None and flags[k] <= M, q1_start)
        except ScheduleError as e:
            logger.warning(f"Orbit point unresolved: {e}")
            self._schedule = (M, None, str(e))
            return self._schedule
        self.constants.update(M=M, epsilon=epsilon, r=times.r, q3=times.q3, good_count=len(times.times),
                              visit_fraction=times.visit_fraction, schedule_horizon=n,
                              density_horizon=_density_horizon(times),
                              contraction_exponent=contraction_exponent(n, M, epsilon, float(cfg['cone.kappa'])))
        self._schedule = (M, times, 'resolved')
        return self._schedule

    def correlations(self) -> Tuple[CorrelationSeries, Optional[DecayFit]]:
        """Operator series with Monte Carlo columns and the decay fit (None when unfittable)"""
        if self._correlations is not None:
            return self._correlations
        cfg = self.config
        n_max = int(cfg['correlate.n_max'])
        family = self.family(n_max)
        phi = Observable.named(self.tower, 0, cfg['correlate.observable_phi'])
        psi_of = lambda step: Observable.named(self.tower, step, cfg['correlate.observable_psi'])
        series = correlation_series(self.cocycle, family, 0, phi, psi_of, n_max)
        mc, stderr = mc_correlation(self.cocycle, family, 0, phi, psi_of, series.n,
                                    int(cfg['correlate.mc_samples']), int(cfg['run.seed']),
                                    int(cfg['correlate.mc_batches']), cfg['correlate.mc_mode'], self.workers)
        series.mc_value = mc
        series.mc_stderr = stderr
        fit = None
        try:
            fit = fit_decay(series.n, series.op_value, (int(cfg['correlate.fit_lo']), int(cfg['correlate.fit_hi'])),
                            float(series.defect[-1]))
            self.constants.update(beta=fit.beta, fit_C=fit.C, fit_r2=fit.r2, fit_points=fit.points)
        except FitError as e:
            logger.warning(f"Decay fit failed: {e}")
        self._correlations = (series, fit)
        return self._correlations


def _mc_agreement(series: CorrelationSeries) -> Tuple[bool, float]:
    """Largest |mc - op| in units of the standard error"""
    gap = np.abs(series.mc_value - series.op_signed)
    scale = np.maximum(series.mc_stderr, 1e-300)
    ok = bool(np.all(gap <= MC_SIGMAS * series.mc_stderr + 1e-12))
    return ok, float(np.max(gap / scale))


class ExperimentRunner:
    """Runs the stages of one experiment and persists their artifacts"""

    def __init__(self, context: ExperimentContext, manifest: RunManifest):
        self.context = context
        self.config = context.config
        self.manifest = manifest
        self.artifacts = ArtifactLogger(manifest.run_dir)
        self.plots = VisualizationTools(manifest.run_dir)

    def run(self) -> RunManifest:
        stages: List[Tuple[Stage, Callable[[], None]]] = [
            (Stage.TOWER, self.stage_tower),
            (Stage.DENSITIES, self.stage_densities),
            (Stage.CONES, self.stage_cones),
            (Stage.SCHEDULE, self.stage_schedule),
            (Stage.CORRELATIONS, self.stage_correlations),
        ]
        for stage, fn in stages:
            start = time.perf_counter()
            logger.info(f"Stage {stage.value} started")
            try:
                fn()
            except Exception as e:
                logger.error(f"Stage {stage.value} failed: {e}")
                self.manifest.timings[stage.value] = time.perf_counter() - start
                self.manifest.errors.append({'stage': stage.value, 'error': type(e).__name__, 'message': str(e)})
                self.manifest.status = 'aborted'
                self._finish()
                raise StageError(stage.value, str(e)) from e
            self.manifest.timings[stage.value] = time.perf_counter() - start
        self.manifest.status = 'ok' if all(self.manifest.checks.values()) else 'checks_failed'
        self._finish()
        logger.info(f"Run {self.manifest.run_id} finished with status {self.manifest.status}")
        return self.manifest

    def _finish(self) -> None:
        self.manifest.constants.update(self.context.constants)
        self.manifest.artifacts = sorted(set(self.manifest.artifacts + self.artifacts.written + [MANIFEST_FILE]))
        self.artifacts.write_manifest(self.manifest.as_dict())

    def _plotted(self, path: str) -> None:
        self.manifest.artifacts.append(os.path.basename(path))

    def stage_tower(self) -> None:
        tower = self.context.tower
        fit = tower.tail_fit
        ns, masses = tower.tail_series(0)
        self.artifacts.write_tail(ns, masses)
        bounded = not math.isfinite(fit.theta)
        self._plotted(self.plots.plot_tail(ns, masses, None if bounded else fit.theta, None if bounded else fit.C))
        depth = min(int(self.config['cone.k_max']), 6)
        distortion = tower.verify_distortion(0, depth, 16, int(self.config['run.seed']))
        constants = self.context.constants
        constants.update(D_hat=distortion, D_prime=tower.density_bound(distortion) if math.isfinite(distortion)
                         else math.inf, D_F0=tower.distortion_constant(0), markov_error0=tower.verify_markov(0),
                         coprime_returns=tower.aperiodicity(0))
        if tower.family is FiberFamily.QUADRATIC:
            offsets = np.unique(tower.label_offsets(0))
            constants['label_offsets'] = offsets.tolist()
        self.manifest.checks['tail'] = fit.theta > 0.0 and fit.r2 >= 0.98

    def stage_densities(self) -> None:
        cfg = self.config
        fibers = int(cfg['run.fibers'])
        family = self.context.family(fibers)
        tower = self.context.tower
        snapshots = int(cfg['run.density_snapshots'])
        steps = np.unique(np.round(np.linspace(0, fibers, snapshots)).astype(int)) if snapshots else []
        for k in steps:
            grid = tower.grid(int(k))
            h = family.density(int(k))
            self.artifacts.write_density(int(k), grid.level, grid.lo, grid.hi, h.values)
            self._plotted(self.plots.plot_density(int(k), grid.level, grid.lo, grid.hi, h.values))
        if cfg['ulam.export_operator']:
            self.artifacts.write_operator(0, self.context.cocycle.operator(0).entries)
        C = self.context.density_constant()
        self.context.constants.update(C=C, pullback_iterations=family.density(0).iterations)
        self.manifest.defects.update(budget=float(cfg['ulam.defect_budget']),
                                     pullback=family.density(0).defect,
                                     family_max=max(family.density(k).defect for k in range(fibers + 1)))
        self.manifest.checks['density'] = C <= DENSITY_BOUND_LIMIT

    def stage_cones(self) -> None:
        params = self.context.cone_params()
        frame = self.context.frame(0)
        h = self.context.family(0).density(0)
        report = membership(h.m_view, frame, params)
        self.artifacts.write_cone_report(report.rows())
        self.manifest.checks['cone_constants'] = params.targets_met and not params.violations()
        self.manifest.checks['density_in_cone'] = report.member

    def stage_schedule(self) -> None:
        scan = self.context.mixing()
        M, times, note = self.context.schedule()
        self.artifacts.write_schedule(times.times if times is not None else [])
        self.context.constants['schedule'] = note
        self.manifest.checks['mixing'] = scan.q0 is not None and scan.q0 <= MIXING_Q0_LIMIT
        self.manifest.checks['good_times'] = times is not None and _good_density(times)

    def stage_correlations(self) -> None:
        series, fit = self.context.correlations()
        sign = np.where(series.op_signed < 0.0, -1.0, 1.0)
        aligned = CorrelationSeries(n=series.n, op_value=series.op_value, op_bound=series.op_bound,
                                    op_signed=series.op_signed, defect=series.defect,
                                    mc_value=series.mc_value * sign, mc_stderr=series.mc_stderr)
        self.artifacts.write_correlations(aligned.rows())
        if fit is not None:
            self.artifacts.write_fit(fit.window, fit.beta, fit.C, fit.r2)
        else:
            window = (int(self.config['correlate.fit_lo']), int(self.config['correlate.fit_hi']))
            self.artifacts.write_fit(window, math.nan, math.nan, math.nan)
        self._plotted(self.plots.plot_correlations(series.n, series.op_value, series.op_bound,
                                                   fit.beta if fit else None, fit.C if fit else None))
        self.manifest.defects['correlation'] = float(series.defect[-1])
        agree, worst = _mc_agreement(series)
        self.context.constants['mc_worst_sigma'] = worst
        self.manifest.checks['decay_fit'] = fit is not None and 0.0 < fit.beta < 1.0 and fit.r2 >= 0.95
        self.manifest.checks['monte_carlo'] = agree


def _density_horizon(times: GoodTimes) -> Optional[int]:
    """First n >= max(q̂₃, M) from which s·M/n >= 1 - 2ε - slack holds up to the horizon"""
    if times.q3 is None:
        return None
    floor = 1.0 - 2.0 * times.epsilon - GOOD_TIMES_SLACK
    start = max(times.q3, times.M)
    for n in range(times.horizon, start - 1, -1):
        if times.density(n) < floor:
            return n + 1 if n < times.horizon else None
    return start


def _good_density(times: GoodTimes) -> bool:
    start = _density_horizon(times)
    return start is not None and start <= GOOD_TIMES_Q3_FACTOR * times.M


def load_config(config_path: Optional[str]) -> Dict[str, Any]:
    return ConfigManager(config_path).get_config()


def execute_run(config: Dict[str, Any], root: Optional[str] = None) -> RunManifest:
    """
    Run every stage for an already validated configuration.

    Raises:
    - ConfigError: If the tower rejects the configuration before any artifact is written
    - StageError: If a stage aborts (the manifest is written first)
    """
    context = ExperimentContext(config)
    rid = run_id(config)
    run_dir = os.path.join(root or output_root(), rid)
    manifest = RunManifest(run_id=rid, run_dir=run_dir, config=dict(config), seed=int(config['run.seed']))
    logger.info(f"Run {rid} writing to {run_dir}")
    return ExperimentRunner(context, manifest).run()


def run_experiment(config_path: Optional[str], root: Optional[str] = None) -> RunManifest:
    """
    Load a configuration file and run the full pipeline.

    Args:
    - config_path (str): Flat key = value file; None runs the built-in defaults
    - root (str): Output root; defaults to $TOWERLAB_OUTPUT or ./towerlab-runs

    Returns:
    - RunManifest: Manifest of the completed run
    """
    return execute_run(load_config(config_path), root)


class VerifySuite:
    """Named acceptance checks over one experiment context; each check is isolated"""

    CHECKS = ('partition', 'markov', 'tail', 'distortion', 'expansion', 'aperiodicity', 'operator', 'density',
              'mixing', 'projective', 'cone_constants', 'contraction', 'lasota_yorke', 'good_times',
              'correlations', 'cone_shift')

    def __init__(self, context: ExperimentContext):
        self.context = context
        self.config = context.config
        self.tower = context.tower
        self.cocycle = context.cocycle
        self.seed = int(self.config['run.seed'])

    def run(self, only: Optional[Sequence[str]] = None) -> List[CheckResult]:
        names = list(only) if only else list(self.CHECKS)
        unknown = [n for n in names if n not in self.CHECKS]
        if unknown:
            raise ConfigError(f"Unknown checks {unknown}; known: {list(self.CHECKS)}")
        return [self.run_check(name) for name in names]

    def run_check(self, name: str) -> CheckResult:
        start = time.perf_counter()
        try:
            passed, detail = getattr(self, f'check_{name}')()
            status = 'pass' if passed else 'fail'
        except CheckSkipped as e:
            status, detail = 'skipped', str(e)
        except InfeasibleParamsError as e:
            status = 'fail' if name == 'cone_constants' else 'skipped'
            detail = f"cone constants infeasible: {e}"
        except Exception as e:
            logger.error(f"Check {name} raised: {e}")
            status, detail = 'fail', f"{type(e).__name__}: {e}"
        elapsed = time.perf_counter() - start
        log = logger.info if status != 'fail' else logger.warning
        log(f"Check {name}: {status} ({detail}) in {elapsed:.2f}s")
        return CheckResult(name=name, status=status, detail=detail, elapsed=elapsed)

    def _rng(self, salt: int) -> np.random.Generator:
        return np.random.default_rng(np.random.SeedSequence(self.seed, spawn_key=(salt,)))

    # tower properties

    def check_partition(self) -> Tuple[bool, str]:
        if self.tower.family is not FiberFamily.QUADRATIC:
            raise CheckSkipped("closed forms exist for the quadratic family only")
        x, y = quadratic_orbit_points(1)
        oracle = brentq(lambda t: 4.0 * t * (1.0 - t) - 0.25, 0.0, 0.5, xtol=1e-16, rtol=4.5e-16)
        errors = [abs(x[0] - 0.25), abs(x[1] - (2.0 - math.sqrt(3.0)) / 4.0),
                  abs(y[1] - (2.0 + math.sqrt(3.0)) / 4.0), abs(x[1] - oracle)]
        return max(errors) <= 1e-12, f"max error {max(errors):.2e}"

    def check_markov(self) -> Tuple[bool, str]:
        worst = max(self.tower.verify_markov(k) for k in range(MARKOV_FIBERS))
        return worst <= 1e-8, f"max endpoint error {worst:.2e} over {MARKOV_FIBERS} fibers"

    def check_tail(self) -> Tuple[bool, str]:
        fit = self.tower.tail_fit
        if math.isinf(fit.theta):
            return True, "bounded return times, empty tail"
        masses = self.tower.partition(0).mass_by_return_time()
        rs = sorted(masses)
        eta = fit_tail(rs, [masses[r] for r in rs], (rs[0], rs[-1])).theta / math.log(2.0)
        passed = fit.theta > 0.0 and fit.r2 >= 0.98 and eta > 0.0
        return passed, f"theta={fit.theta:.5f}, R2={fit.r2:.5f}, eta={eta:.4f}"

    def check_distortion(self) -> Tuple[bool, str]:
        depth = min(int(self.config['cone.k_max']), 6)
        coarse = self.tower.verify_distortion(0, depth, 16, self.seed)
        fine = self.tower.verify_distortion(0, depth, 32, self.seed)
        if not (math.isfinite(coarse) and math.isfinite(fine)):
            return False, "distortion estimate is not finite"
        stable = abs(fine - coarse) <= 0.1 * max(coarse, fine, 1e-12)
        return stable, f"D_hat {coarse:.4g} (16 samples) vs {fine:.4g} (32 samples)"

    def check_expansion(self) -> Tuple[bool, str]:
        fibers = int(self.config['run.fibers'])
        expansion = min(self.tower.min_branch_expansion(k) for k in range(fibers))
        part = self.tower.partition(0)
        lo, hi = part.base
        shrink = float(np.max(part.lengths[part.resolved])) / (hi - lo)
        return expansion > 1.0 and shrink < 1.0, f"min |Df^R| = {expansion:.4g}, largest branch {shrink:.3g} of the base"

    def check_aperiodicity(self) -> Tuple[bool, str]:
        fibers = int(self.config['run.fibers'])
        missing = [k for k in range(fibers) if self.tower.aperiodicity(k) is None]
        return not missing, f"coprime return times on fiber 0: {self.tower.aperiodicity(0)}, missing on {missing}"

    # operators and densities

    def check_operator(self) -> Tuple[bool, str]:
        op = self.cocycle.operator(0)
        row_error = float(np.max(np.abs(op.row_sums + op.defect - 1.0)))
        rng = self._rng(1)
        n1 = self.tower.grid(1).n_cells
        n0 = self.tower.grid(0).n_cells
        gaps = [self.cocycle.duality_gap(0, 1, rng.normal(size=n1), rng.normal(size=n0)) for _ in range(100)]
        product = (op.entries @ self.cocycle.operator(1).entries).toarray()
        composed = self.cocycle.compose(0, 2).entries.toarray()
        compose_error = float(np.max(np.abs(composed - product)))
        defect = float(np.max(op.defect))
        passed = row_error <= 1e-9 and max(gaps) <= 1e-8 + defect and compose_error <= 1e-12
        return passed, f"row error {row_error:.1e}, duality gap {max(gaps):.1e}, compose error {compose_error:.1e}"

    def check_density(self) -> Tuple[bool, str]:
        cfg = self.config
        fibers = int(cfg['run.fibers'])
        family = self.context.family(fibers)
        C = self.context.density_constant()
        h0 = family.density(0)
        cesaro = self.cocycle.cesaro_density(0, int(cfg['ulam.cesaro_n']))
        cesaro_gap = h0.l1_distance(cesaro)
        residuals = []
        for k in range(min(3, fibers)):
            independent = self.cocycle.equivariant_density(k + 1, int(cfg['ulam.n_back']), float(cfg['ulam.tol']))
            bound = EQUIVARIANCE_TOL + family.density(k).defect + independent.defect
            residuals.append(family.equivariance_residual(k, independent) - bound)
        passed = C <= DENSITY_BOUND_LIMIT and cesaro_gap <= CESARO_TOL and all(r <= 0.0 for r in residuals)
        return passed, (f"C={C:.4g}, pullback n={h0.iterations}, Cesaro gap {cesaro_gap:.2e}, "
                        f"worst equivariance excess {max(residuals, default=0.0):.2e}")

    def check_mixing(self) -> Tuple[bool, str]:
        scan = self.context.mixing()
        passed = scan.q0 is not None and scan.q0 <= MIXING_Q0_LIMIT
        return passed, f"q0={scan.q0}"

    # cones

    def _cone_pairs(self, count: int, k: int = 0) -> List[Tuple[np.ndarray, np.ndarray]]:
        vectors = self.context.study(2 * count).probe_vectors(k)
        return list(zip(vectors[0::2], vectors[1::2]))

    def check_projective(self) -> Tuple[bool, str]:
        rng = self._rng(2)
        phi = rng.uniform(0.5, 2.0, size=64)
        exact = hilbert_plus(4.0 * phi, phi) == 0.0
        bridge = 0
        for _ in range(100):
            a = rng.uniform(0.1, 3.0, size=64)
            b = rng.uniform(0.1, 3.0, size=64)
            b *= a.sum() / b.sum()
            if np.max(np.abs(a / b - 1.0)) <= math.exp(hilbert_plus(a, b)) - 1.0 + 1e-12:
                bridge += 1
        params = self.context.cone_params()
        frame = self.context.frame(0)
        constraints = constraint_set(frame, params)
        worst = 0.0
        compared = 0
        for phi_c, psi_c in self._cone_pairs(int(self.config['cone.probes'])):
            upper, lower = scalar_range(phi_c, psi_c, constraints)
            if lower <= 0.0 or math.isinf(upper):
                continue
            oracle = _bisect_theta(phi_c, psi_c, constraints, upper, lower)
            worst = max(worst, abs(math.log(upper / lower) - oracle))
            compared += 1
        passed = exact and bridge == 100 and worst <= 1e-8
        return passed, f"projective zero {exact}, sup-ratio bridge {bridge}/100, bisection gap {worst:.1e} on {compared} pairs"

    def check_cone_constants(self) -> Tuple[bool, str]:
        params = self.context.cone_params()
        failed = params.violations()
        passed = not failed and params.targets_met
        return passed, (f"a={params.a:.4g}, b={params.b:.4g}, c={params.c:.4g}, horizon {self.context.horizon}, "
                        f"violations {failed}, targets met {params.targets_met}")

    def check_contraction(self) -> Tuple[bool, str]:
        params = self.context.cone_params()
        q1 = self.context.q1_values(1)[0]
        if q1 is None:
            return False, "fiber 0 is not locally good within the cap"
        k = q1 + 5
        self.context.family(k)
        source = self.context.frame(0)
        target = self.context.frame(k)
        report = contraction_check(self.cocycle, source, target, params, self._cone_pairs(int(self.config['cone.probes'])))
        return report.passed, (f"k={k}: {report.members}/{report.pairs} in the kappa-cone, "
                               f"{report.contractions}/{report.pairs} contract; {report.failures[:3]}")

    def check_lasota_yorke(self) -> Tuple[bool, str]:
        params = self.context.cone_params()
        k = int(self.config['cone.ly_k'])
        self.context.family(k)
        psi = self._cone_pairs(1)[0][0]
        report = lasota_yorke_check(self.cocycle, self.context.frame(0), self.context.frame(k), psi, params)
        return report.passed, f"N={report.N}, checked {report.checked}, violations {report.violations}"

    # schedule and correlations

    def check_good_times(self) -> Tuple[bool, str]:
        M, times, note = self.context.schedule()
        if times is None:
            return False, f"unresolved: {note}"
        return _good_density(times), (f"M={M}, r={times.r}, q3={times.q3}, density holds from "
                                      f"{_density_horizon(times)}, {len(times.times)} good instants")

    def check_correlations(self) -> Tuple[bool, str]:
        series, fit = self.context.correlations()
        agree, worst = _mc_agreement(series)
        fitted = fit is not None and 0.0 < fit.beta < 1.0 and fit.r2 >= 0.95
        n_max = int(self.config['correlate.n_max'])
        constant = correlation_series(self.cocycle, self.context.family(n_max), 0,
                                      Observable.named(self.tower, 0, self.config['correlate.observable_phi']),
                                      lambda step: Observable.named(self.tower, step, 'constant'), n_max)
        vanishes = bool(np.all(constant.op_value <= constant.defect + 1e-12))
        detail = (f"beta={fit.beta:.4f}, R2={fit.r2:.4f}" if fit else "no fit") + \
                 f", MC worst {worst:.2f} sigma, constant psi vanishes {vanishes}"
        return fitted and agree and vanishes, detail

    def check_cone_shift(self) -> Tuple[bool, str]:
        params = self.context.cone_params()
        frame = self.context.frame(0)
        n = min(10, int(self.config['correlate.n_max']))
        family = self.context.family(n)
        h = family.density(0)
        rng = self._rng(3)
        psi_of = lambda step: Observable.named(self.tower, step, self.config['correlate.observable_psi'])
        members = 0
        worst = 0.0
        for _ in range(20):
            amp = rng.normal(size=3)
            phase = rng.uniform(0.0, 2.0 * np.pi, size=3)
            phi = Observable.from_function(self.tower, 0, lambda x, level: sum(
                amp[j] * np.cos(2.0 * np.pi * (j + 1) * x + phase[j]) for j in range(3)))
            shifted, shift = cone_shift(phi, h, frame, params)
            if membership(shifted, frame, params).member:
                members += 1
            K = float(np.sum(phi.values * h.width))
            lifted = Observable(step=0, values=shifted * h.weights * (K + shift))
            before = correlation_series(self.cocycle, family, 0, phi, psi_of, n)
            after = correlation_series(self.cocycle, family, 0, lifted, psi_of, n)
            psi_sup = max(psi_of(step).sup for step in range(n + 1))
            tol = 1e-10 + shift * psi_sup * (float(after.defect[-1]) + family.density(n).defect)
            worst = max(worst, float(np.max(np.abs(before.op_signed - after.op_signed))) - tol)
        return members == 20 and worst <= 0.0, f"{members}/20 members, worst excess over tolerance {worst:.2e}"


def _bisect_theta(phi: np.ndarray, psi: np.ndarray, constraints, upper: float, lower: float,
                  steps: int = 200) -> float:
    """Θ from bisection on membership of ρφ - ψ and ψ - ζφ"""
    inside = lambda chi: float(np.min(constraints.evaluate(chi))) >= 0.0

    def boundary(test, lo, hi):
        for _ in range(steps):
            mid = 0.5 * (lo + hi)
            if test(mid):
                hi = mid
            else:
                lo = mid
            if hi - lo <= 1e-15 * max(abs(hi), 1.0):
                break
        return hi

    hi_rho = 2.0 * upper
    while not inside(hi_rho * phi - psi):
        hi_rho *= 2.0
    rho = boundary(lambda r: inside(r * phi - psi), 0.0, hi_rho)
    zeta = -boundary(lambda z: inside(psi + z * phi), -2.0 * lower, 0.0)
    return math.log(rho / zeta)


def verify_suite(config_path: Optional[str], only: Optional[Sequence[str]] = None,
                 root: Optional[str] = None) -> VerifyReport:
    """
    Run the named acceptance checks and write verify.json under the run directory.

    Raises:
    - ConfigError: For an invalid configuration or an unknown check name
    """
    config = load_config(config_path)
    if only:
        unknown = [n for n in only if n not in VerifySuite.CHECKS]
        if unknown:
            raise ConfigError(f"Unknown checks {unknown}; known: {list(VerifySuite.CHECKS)}")
    context = ExperimentContext(config)
    rid = run_id(config)
    report = VerifyReport(run_id=rid, results=VerifySuite(context).run(only))
    artifacts = ArtifactLogger(os.path.join(root or output_root(), rid))
    artifacts.write_json(VERIFY_FILE, _sanitize(report.as_dict()))
    failed = [r.name for r in report.results if not r.passed]
    logger.info(f"Verification {rid}: {len(report.results) - len(failed)}/{len(report.results)} passed; failed {failed}")
    return report


def sweep(config_path: Optional[str], param: str, values: Sequence[str], root: Optional[str] = None) -> Tuple[str, int]:
    """
    One run per value of `param`; writes sweep.csv and returns (path, exit code).

    Raises:
    - ConfigError: If the key is unknown or a value is invalid
    """
    base = load_config(config_path)
    if param not in base:
        raise ConfigError(f"Unknown configuration key: {param}")
    configs = []
    for raw in values:
        config = dict(base)
        config[param] = _coerce(param, str(raw))
        validate_parameters(config)
        configs.append((str(raw).strip(), config))
    root = root or output_root()
    tag = hashlib.sha256((run_id(base) + param + ','.join(v for v, _ in configs)).encode('utf-8')).hexdigest()[:12]
    rows = []
    code = EXIT_OK
    for raw, config in configs:
        logger.info(f"Sweep {param} = {raw}")
        try:
            manifest = execute_run(config, root)
            constants = manifest.constants
            rows.append((raw, manifest.run_dir, constants.get('theta_hat', math.nan), constants.get('beta', math.nan),
                         constants.get('fit_r2', math.nan), manifest.status))
            code = max(code, manifest.exit_code)
        except StageError as e:
            rows.append((raw, os.path.join(root, run_id(config)), math.nan, math.nan, math.nan, f"aborted:{e.stage}"))
            code = max(code, EXIT_INTERNAL)
        except ConfigError as e:
            rows.append((raw, '', math.nan, math.nan, math.nan, 'config_error'))
            logger.error(f"Sweep value {raw} rejected: {e}")
            code = max(code, EXIT_CONFIG)
    path = ArtifactLogger(os.path.join(root, f'sweep-{tag}')).write_sweep(rows)
    return path, code


def main():
    manifest = run_experiment(None)
    print(manifest.run_dir)


if __name__ == "__main__":
    main()
