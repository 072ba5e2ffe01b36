import os

import pytest

from config_manager import DEFAULT_CONFIG, ConfigError, ConfigManager, format_config, parse_config_text

CONFIG_DIR = os.path.join(os.path.dirname(__file__), '..', 'configs')


def test_empty_text_gives_defaults():
    assert parse_config_text('') == DEFAULT_CONFIG


def test_values_are_coerced_to_default_types():
    config = parse_config_text('tower.n_max = 12   # depth\nulam.export_operator = yes\ntower.theta_prime = 0.2\n')
    assert config['tower.n_max'] == 12
    assert config['ulam.export_operator'] is True
    assert config['tower.theta_prime'] == 0.2
    assert parse_config_text('tower.theta_prime = auto\n')['tower.theta_prime'] == 'auto'


@pytest.mark.parametrize('text', [
    'tower.height = 3',
    'tower.n_max = many',
    'ulam.export_operator = maybe',
    'tower.gamma = 1.5',
    'fiber.family = tent',
    'cone.epsilon = 0.6',
    'correlate.fit_hi = 50',
    'correlate.fit_lo = 40',
    'driver.alpha_max = 1.1',
    'tower.theta_prime = -1',
    'this line has no separator',
])
def test_invalid_text_is_rejected(text):
    with pytest.raises(ConfigError):
        parse_config_text(text + '\n')


def test_format_parses_back():
    config = parse_config_text('fiber.family = lorenz\ncone.constants = proof\nrun.workers = 4\n')
    assert parse_config_text(format_config(config)) == config


def test_shipped_default_file_loads():
    config = ConfigManager(os.path.join(CONFIG_DIR, 'default.cfg')).get_config()
    assert config['fiber.family'] in ('quadratic', 'lorenz', 'doubling')
    assert set(config) == set(DEFAULT_CONFIG)
    # the shipped file only raises the worker count
    assert {key for key in config if config[key] != DEFAULT_CONFIG[key]} == {'run.workers'}
    assert config['tower.L_max'] == 40


def test_missing_file(tmp_path):
    path = str(tmp_path / 'towerlab.cfg')
    with pytest.raises(ConfigError):
        ConfigManager(path)
    manager = ConfigManager(path, create_missing=True)
    assert manager.get_config() == DEFAULT_CONFIG
    assert os.path.exists(path)
    assert ConfigManager(path).get_config() == DEFAULT_CONFIG


def test_no_file_means_defaults():
    assert ConfigManager().get_config() == DEFAULT_CONFIG
