import numpy as np
import pytest

from visualization_tools import VisualizationError, VisualizationTools


def read(path):
    with open(path, 'rb') as f:
        return f.read()


def test_plots_are_written_as_svg(tmp_path):
    plots = VisualizationTools(str(tmp_path))
    ns = np.arange(10)
    tail = plots.plot_tail(ns, 0.5 ** ns, theta=np.log(2.0), C=1.0)
    density = plots.plot_density(2, np.array([0, 0, 1]), np.array([0.0, 0.5, 0.0]), np.array([0.5, 1.0, 0.5]),
                                 np.array([1.0, 1.2, 0.8]))
    corr = plots.plot_correlations(ns, 0.3 ** ns, 2.0 * 0.3 ** ns)
    assert tail.endswith('tail.svg')
    assert density.endswith('density_2.svg')
    assert corr.endswith('correlation.svg')
    assert read(tail).lstrip().startswith(b'<?xml')


def test_plots_are_reproducible(tmp_path):
    ns = np.arange(12)
    paths = []
    for name in ('a', 'b'):
        (tmp_path / name).mkdir()
        plots = VisualizationTools(str(tmp_path / name))
        paths.append(plots.plot_correlations(ns, 0.5 ** ns, 0.6 ** ns, beta=0.5, C=1.0))
    assert read(paths[0]) == read(paths[1])


def test_unwritable_directory(tmp_path):
    plots = VisualizationTools(str(tmp_path / 'missing'))
    with pytest.raises(VisualizationError):
        plots.plot_tail([0, 1], [1.0, 0.5])
