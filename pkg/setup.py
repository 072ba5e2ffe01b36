from setuptools import setup

MODULES = [
    'config_manager',
    'correlation_analyzer',
    'data_logger',
    'driving_system',
    'experiment_runner',
    'fiber_maps',
    'good_times_scheduler',
    'hilbert_cones',
    'random_tower',
    'towerlab_cli',
    'ulam_operator',
    'visualization_tools',
    'worker_pool',
]

with open('requirements.txt') as f:
    requirements = [line.strip() for line in f
                    if line.strip() and not line.startswith('#') and not line.startswith('pytest')]

setup(
    name='towerlab',
    version='0.1.0',
    description='Quenched decay of correlations on random Young towers',
    python_requires='>=3.8',
    py_modules=MODULES,
    install_requires=requirements,
    extras_require={'test': ['pytest>=7.0']},
    entry_points={'console_scripts': ['towerlab=towerlab_cli:main']},
)
