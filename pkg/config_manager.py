import configparser
import logging
import math
import os
from typing import Any, Dict, Optional

from correlation_analyzer import OBSERVABLES

# Set up logging
logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(levelname)s - %(message)s')
logger = logging.getLogger(__name__)

SECTION = 'towerlab'

DEFAULT_CONFIG: Dict[str, Any] = {
    'driver.kind': 'rotation',
    'driver.angle': (math.sqrt(5.0) - 1.0) / 2.0,
    'driver.seed': 0,
    'driver.alpha_min': 1.2,
    'driver.alpha_max': 2.0,
    'driver.back_window': 65536,
    'fiber.family': 'quadratic',
    'fiber.lorenz_alpha': 0.3,
    'tower.n_max': 30,
    'tower.L_max': 40,
    'tower.cells_per_interval': 2,
    'tower.gamma': 0.5,
    'tower.theta_prime': 'auto',
    'tower.zeta': 0.1,
    'tower.return_cap': 200,
    'run.seed': 0,
    'run.workers': 1,
    'run.origin': 0.0,
    'run.fibers': 20,
    'run.density_snapshots': 3,
    'ulam.n_back': 200,
    'ulam.tol': 1e-4,
    'ulam.defect_budget': 1e-3,
    'ulam.cesaro_n': 2000,
    'ulam.export_operator': False,
    'cone.kappa': 0.5,
    'cone.epsilon': 0.05,
    'cone.horizon': 200,
    'cone.k_max': 6,
    'cone.constants': 'empirical',
    'cone.probes': 50,
    'cone.ly_k': 20,
    'schedule.epsilon': 0.1,
    'schedule.cap': 200,
    'schedule.samples': 100,
    'schedule.persist': 5,
    'schedule.horizon': 0,
    'schedule.probes': 4,
    'correlate.n_max': 40,
    'correlate.fit_lo': 5,
    'correlate.fit_hi': 40,
    'correlate.mc_samples': 1000000,
    'correlate.mc_batches': 32,
    'correlate.mc_mode': 'ulam',
    'correlate.observable_phi': 'cos',
    'correlate.observable_psi': 'cos',
}

CHOICES = {
    'driver.kind': ('rotation', 'bernoulli_shift'),
    'fiber.family': ('quadratic', 'lorenz', 'doubling'),
    'cone.constants': ('empirical', 'proof'),
    'correlate.mc_mode': ('ulam', 'exact'),
    'correlate.observable_phi': tuple(sorted(OBSERVABLES)),
    'correlate.observable_psi': tuple(sorted(OBSERVABLES)),
}

# (low, high, low inclusive, high inclusive)
RANGES = {
    'driver.angle': (0.0, 1.0, False, False),
    'driver.alpha_min': (1.0, math.inf, False, False),
    'driver.back_window': (0, math.inf, True, False),
    'fiber.lorenz_alpha': (0.0, 0.5, False, False),
    'tower.n_max': (2, math.inf, True, False),
    'tower.L_max': (1, math.inf, True, False),
    'tower.cells_per_interval': (1, math.inf, True, False),
    'tower.gamma': (0.0, 1.0, False, False),
    'tower.zeta': (0.0, 1.0, False, False),
    'tower.return_cap': (1, math.inf, True, False),
    'run.workers': (1, math.inf, True, False),
    'run.origin': (0.0, 1.0, True, False),
    'run.fibers': (1, math.inf, True, False),
    'run.density_snapshots': (0, math.inf, True, False),
    'ulam.n_back': (10, math.inf, True, False),
    'ulam.tol': (0.0, math.inf, False, False),
    'ulam.defect_budget': (0.0, math.inf, False, False),
    'ulam.cesaro_n': (1, math.inf, True, False),
    'cone.kappa': (0.0, 1.0, False, False),
    'cone.epsilon': (0.0, 1.0, False, False),
    'cone.horizon': (1, math.inf, True, False),
    'cone.k_max': (1, math.inf, True, False),
    'cone.probes': (1, math.inf, True, False),
    'cone.ly_k': (1, math.inf, True, False),
    'schedule.epsilon': (0.0, 0.5, False, False),
    'schedule.cap': (1, math.inf, True, False),
    'schedule.samples': (1, math.inf, True, False),
    'schedule.persist': (1, math.inf, True, False),
    'schedule.horizon': (0, math.inf, True, False),
    'schedule.probes': (1, math.inf, True, False),
    'correlate.n_max': (1, math.inf, True, False),
    'correlate.fit_lo': (0, math.inf, True, False),
    'correlate.mc_samples': (1000, math.inf, True, False),
    'correlate.mc_batches': (2, math.inf, True, False),
}


class ConfigError(Exception):
    """Raised for unreadable, unknown or out-of-range configuration"""
    pass


class ConfigManager:
    """
    Flat `key = value` configuration for towerlab experiments.
    """

    def __init__(self, config_file: Optional[str] = None, create_missing: bool = False):
        """
        Initialize the ConfigManager with a configuration file.

        Args:
        - config_file (str): Path to the configuration file; None uses the defaults
        - create_missing (bool): Write the defaults when the file does not exist
        """
        self.config_file = config_file
        self.create_missing = create_missing
        self.config = self.load_config()

    def load_config(self) -> Dict[str, Any]:
        """
        Load, coerce and validate the configuration.

        Returns:
        - Dict[str, Any]: Complete configuration (defaults for absent keys)
        """
        if self.config_file is None:
            return dict(DEFAULT_CONFIG)
        try:
            with open(self.config_file, 'r') as f:
                text = f.read()
        except FileNotFoundError:
            if not self.create_missing:
                raise ConfigError(f"Configuration file {self.config_file} not found")
            logger.warning("Configuration file not found. Creating a new one.")
            return self.create_default_config()
        config = parse_config_text(text)
        logger.info(f"Loaded configuration from {self.config_file}")
        return config

    def create_default_config(self) -> Dict[str, Any]:
        default_config = dict(DEFAULT_CONFIG)
        self.save_config(default_config)
        return default_config

    def save_config(self, config: Dict[str, Any]) -> None:
        """Write the configuration as flat key = value lines"""
        try:
            with open(self.config_file, 'w') as f:
                f.write(format_config(config))
            logger.info(f"Saved configuration to {self.config_file}")
        except OSError as e:
            logger.error(f"Failed to save configuration: {e}")
            raise ConfigError(f"Failed to save configuration: {e}")

    def validate_parameters(self, config: Dict[str, Any]) -> None:
        validate_parameters(config)

    def get_config(self) -> Dict[str, Any]:
        return self.config


def _coerce(key: str, raw: str) -> Any:
    default = DEFAULT_CONFIG[key]
    raw = raw.strip()
    if key == 'tower.theta_prime' and raw == 'auto':
        return 'auto'
    try:
        if isinstance(default, bool):
            lowered = raw.lower()
            if lowered not in ('true', 'false', '1', '0', 'yes', 'no'):
                raise ValueError(raw)
            return lowered in ('true', '1', 'yes')
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float) or key == 'tower.theta_prime':
            return float(raw)
    except ValueError:
        raise ConfigError(f"Invalid value for {key}: {raw!r}")
    return raw


def parse_config_text(text: str) -> Dict[str, Any]:
    """
    Parse flat key = value text over the defaults.

    Raises:
    - ConfigError: For syntax errors, unknown keys or invalid values
    """
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=('#',))
    parser.optionxform = str
    try:
        parser.read_string(f"[{SECTION}]\n{text}")
    except configparser.Error as e:
        logger.error(f"Failed to parse configuration: {e}")
        raise ConfigError(f"Failed to parse configuration: {e}")
    config = dict(DEFAULT_CONFIG)
    for key, raw in parser.items(SECTION):
        if key not in DEFAULT_CONFIG:
            raise ConfigError(f"Unknown configuration key: {key}")
        config[key] = _coerce(key, raw)
    validate_parameters(config)
    return config


def validate_parameters(config: Dict[str, Any]) -> None:
    """
    Check choices and ranges of a complete configuration.

    Raises:
    - ConfigError: On the first violated constraint
    """
    for key in config:
        if key not in DEFAULT_CONFIG:
            raise ConfigError(f"Unknown configuration key: {key}")
    for key, allowed in CHOICES.items():
        if config[key] not in allowed:
            raise ConfigError(f"{key} must be one of {allowed}, got {config[key]!r}")
    for key, (low, high, low_in, high_in) in RANGES.items():
        value = config[key]
        above = value >= low if low_in else value > low
        below = value <= high if high_in else value < high
        if not (above and below):
            raise ConfigError(f"{key} = {value} is outside {'[' if low_in else '('}{low}, {high}{']' if high_in else ')'}")
    if config['driver.alpha_max'] < config['driver.alpha_min']:
        raise ConfigError("driver.alpha_max must not be below driver.alpha_min")
    if config['tower.theta_prime'] != 'auto' and not config['tower.theta_prime'] > 0.0:
        raise ConfigError("tower.theta_prime must be 'auto' or positive")
    if config['cone.epsilon'] >= config['cone.kappa']:
        raise ConfigError("cone.epsilon must be below cone.kappa")
    if not config['correlate.fit_lo'] < config['correlate.fit_hi'] <= config['correlate.n_max']:
        raise ConfigError("Need correlate.fit_lo < correlate.fit_hi <= correlate.n_max")
    if config['correlate.mc_samples'] < 2 * config['correlate.mc_batches']:
        raise ConfigError("correlate.mc_samples must cover at least two samples per batch")


def format_config(config: Dict[str, Any]) -> str:
    lines = []
    for key in DEFAULT_CONFIG:
        value = config.get(key, DEFAULT_CONFIG[key])
        if isinstance(value, bool):
            value = 'true' if value else 'false'
        elif isinstance(value, float):
            value = repr(value)
        lines.append(f"{key} = {value}")
    return '\n'.join(lines) + '\n'


def main():
    config_manager = ConfigManager()
    print(format_config(config_manager.get_config()))


if __name__ == "__main__":
    main()
