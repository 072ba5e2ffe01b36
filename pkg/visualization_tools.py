import logging
import os
from enum import Enum
from typing import Optional, Sequence

import matplotlib

matplotlib.use('Agg')
import matplotlib.pyplot as plt
import numpy as np

# Set up logging
logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(levelname)s - %(message)s')
logger = logging.getLogger(__name__)

# Stable SVG ids and no timestamp, so reruns give identical files
matplotlib.rcParams['svg.hashsalt'] = 'towerlab'
SVG_METADATA = {'Date': None}


class VisualizationError(Exception):
    """Raised when a plot cannot be written"""
    pass


class VisualizationMode(Enum):
    """Kinds of run plot"""
    TAIL = 'tail'
    DENSITY = 'density'
    CORRELATION = 'correlation'


class VisualizationTools:
    """Writes the SVG line charts of a run next to their CSV data"""

    def __init__(self, run_dir: str):
        self.run_dir = run_dir

    def _save(self, fig, name: str) -> str:
        target = os.path.join(self.run_dir, name)
        try:
            fig.savefig(target, format='svg', metadata=SVG_METADATA)
        except (OSError, ValueError) as e:
            logger.error(f"Failed to write plot {target}: {e}")
            raise VisualizationError(f"Failed to write plot {target}: {e}")
        finally:
            plt.close(fig)
        logger.info(f"Wrote {name}")
        return target

    def plot_tail(self, ns: Sequence[int], masses: Sequence[float], theta: Optional[float] = None,
                  C: Optional[float] = None) -> str:
        fig, ax = plt.subplots(figsize=(6, 4))
        ns = np.asarray(ns)
        masses = np.asarray(masses)
        keep = masses > 0.0
        ax.semilogy(ns[keep], masses[keep], 'b.-', label='λ{R > n}')
        if theta is not None and C is not None:
            ax.semilogy(ns, C * np.exp(-theta * ns), 'r--', label=f'fit θ = {theta:.4f}')
        ax.set_xlabel('n')
        ax.set_ylabel('mass')
        ax.set_title('Return-time tail')
        ax.legend()
        return self._save(fig, f'{VisualizationMode.TAIL.value}.svg')

    def plot_density(self, k: int, levels: np.ndarray, lo: np.ndarray, hi: np.ndarray, values: np.ndarray,
                     max_levels: int = 4) -> str:
        fig, ax = plt.subplots(figsize=(6, 4))
        for level in range(min(max_levels, int(levels.max()) + 1)):
            mask = levels == level
            if not np.any(mask):
                continue
            order = np.argsort(lo[mask])
            edges = np.concatenate([lo[mask][order], hi[mask][order][-1:]])
            ax.stairs(values[mask][order], edges, label=f'level {level}')
        ax.set_xlabel('offset in base')
        ax.set_ylabel('h')
        ax.set_title(f'Equivariant density, fiber {k}')
        ax.legend()
        return self._save(fig, f'{VisualizationMode.DENSITY.value}_{k}.svg')

    def plot_correlations(self, ns: Sequence[int], values: Sequence[float], bounds: Sequence[float],
                          beta: Optional[float] = None, C: Optional[float] = None) -> str:
        fig, ax = plt.subplots(figsize=(6, 4))
        ns = np.asarray(ns)
        values = np.asarray(values)
        bounds = np.asarray(bounds)
        ax.semilogy(ns[values > 0], values[values > 0], 'b.-', label='operator')
        ax.semilogy(ns[bounds > 0], bounds[bounds > 0], 'g:', label='bound')
        if beta is not None and C is not None:
            ax.semilogy(ns, C * beta ** ns, 'r--', label=f'fit β = {beta:.4f}')
        ax.set_xlabel('n')
        ax.set_ylabel('|correlation|')
        ax.set_title('Quenched decay of correlations')
        ax.legend()
        return self._save(fig, f'{VisualizationMode.CORRELATION.value}.svg')
