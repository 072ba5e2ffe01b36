import logging
from collections import OrderedDict
from dataclasses import dataclass
from threading import Lock
from typing import Dict, Optional, Tuple

import numpy as np
from scipy.sparse import coo_matrix, csr_matrix, identity

from random_tower import RandomTower, TowerGrid
from worker_pool import ordered_map

# Set up logging
logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(levelname)s - %(message)s')
logger = logging.getLogger(__name__)

# Constants
DEFAULT_DEFECT_BUDGET = 1e-3
CONVERGENCE_STRIDE = 5
OPERATOR_CACHE_SIZE = 512


class UlamError(Exception):
    """Base exception for transfer operator discretisation"""
    pass


class GridMismatchError(UlamError):
    """Raised when vectors and operators live on different grids"""
    pass


class DefectBudgetError(UlamError):
    """Raised when truncation loses more mass than the budget allows"""
    pass


class ConvergenceError(UlamError):
    """Raised when the pullback iteration does not settle"""
    pass


class HorizonError(UlamError):
    """Raised when a density is requested outside the computed family"""
    pass


@dataclass(frozen=True)
class TransferMatrix:
    """
    Ulam matrix of F from the grid over fiber `source_step` to the grid over `target_step`.

    entries[i, j] = λ(C_i ∩ F^{-1} C_j) / λ(C_i); defect[i] is the share of
    cell i that leaves the truncated tower.
    """
    source_step: int
    target_step: int
    entries: csr_matrix
    defect: np.ndarray

    @property
    def shape(self) -> Tuple[int, int]:
        return self.entries.shape

    @property
    def row_sums(self) -> np.ndarray:
        return np.asarray(self.entries.sum(axis=1)).ravel()

    def push(self, mass: np.ndarray) -> np.ndarray:
        """Transport cell masses (λ-density times width); columns are pushed independently"""
        if mass.shape[0] != self.entries.shape[0]:
            raise GridMismatchError(f"Mass of length {mass.shape[0]} on a {self.entries.shape[0]}-cell grid")
        return self.entries.T @ mass

    def koopman(self, values: np.ndarray) -> np.ndarray:
        """Cell averages of values∘F"""
        if values.shape[0] != self.entries.shape[1]:
            raise GridMismatchError(f"Values of length {values.shape[0]} on a {self.entries.shape[1]}-cell grid")
        return self.entries @ values

    def lost(self, mass: np.ndarray) -> float:
        return float(np.abs(self.defect @ mass).sum())


@dataclass(frozen=True)
class DensityVector:
    """Piecewise-constant density w.r.t. λ over one grid, with its v-rescaled m-view"""
    step: int
    values: np.ndarray
    width: np.ndarray
    weights: np.ndarray
    iterations: int = 0
    defect: float = 0.0

    @classmethod
    def from_mass(cls, grid: TowerGrid, mass: np.ndarray, weights: np.ndarray, iterations: int = 0,
                  defect: float = 0.0, normalize: bool = True) -> 'DensityVector':
        total = float(np.sum(mass))
        if normalize:
            if total <= 0.0:
                raise UlamError(f"Cannot normalise a density with mass {total}")
            mass = mass / total
        return cls(step=grid.step, values=mass / grid.width, width=grid.width, weights=weights,
                   iterations=iterations, defect=defect)

    @property
    def mass(self) -> np.ndarray:
        return self.values * self.width

    @property
    def integral(self) -> float:
        return float(np.sum(self.mass))

    @property
    def m_view(self) -> np.ndarray:
        return self.values / self.weights

    def l1_distance(self, other: 'DensityVector') -> float:
        if other.step != self.step or len(other.values) != len(self.values):
            raise GridMismatchError(f"Densities over fibers {self.step} and {other.step}")
        return float(np.sum(np.abs(self.values - other.values) * self.width))


class UlamCocycle:
    """
    Ulam discretisation of the transfer operator cocycle along one driving orbit.

    Operators are immutable once built and kept in a bounded LRU cache; ordered
    products are always applied right-to-left against vectors.
    """

    def __init__(self, tower: RandomTower, defect_budget: float = DEFAULT_DEFECT_BUDGET,
                 workers: int = 1, cache_size: int = OPERATOR_CACHE_SIZE):
        self.tower = tower
        self.defect_budget = defect_budget
        self.workers = workers
        self.cache_size = cache_size
        self.lock = Lock()
        self._operators: 'OrderedDict[int, TransferMatrix]' = OrderedDict()

    # construction

    def operator(self, k: int) -> TransferMatrix:
        with self.lock:
            op = self._operators.get(k)
            if op is not None:
                self._operators.move_to_end(k)
                return op
        op = self.build_operator(k)
        with self.lock:
            self._operators[k] = op
            while len(self._operators) > self.cache_size:
                self._operators.popitem(last=False)
        return op

    def prefetch(self, start: int, stop: int) -> None:
        """Build the operators for fibers start..stop-1 on the worker pool"""
        missing = [k for k in range(start, stop) if k not in self._operators]
        ordered_map(self.operator, missing, self.workers)

    def build_operator(self, k: int) -> TransferMatrix:
        """
        Climb rows are unit shifts to the cell above; return rows come from
        pulling the next base's cell boundaries back through the branch.
        """
        tower = self.tower
        source = tower.grid(k)
        target = tower.grid(k + 1)
        cpi = source.cells_per_interval
        rows, cols, vals = [], [], []

        climbing = (source.return_time > 0) & (source.level + 1 < source.return_time)
        climb_rows = np.flatnonzero(climbing)
        climb_cols = target.index(source.level[climb_rows] + 1, source.interval[climb_rows],
                                  source.sub[climb_rows])
        kept = climb_cols >= 0
        rows.append(climb_rows[kept])
        cols.append(climb_cols[kept])
        vals.append(np.ones(np.count_nonzero(kept)))

        base = np.flatnonzero(target.level == 0)
        edges = np.concatenate([target.lo[base], target.hi[base[-1:]]])
        returning = np.flatnonzero((source.return_time > 0) & (source.sub == 0)
                                   & (source.level + 1 == source.return_time))
        for first in returning:
            level = int(source.level[first])
            interval = int(source.interval[first])
            part = tower.grid_partition(k - level)
            pre = tower.geometry.pullback(part, interval, edges)
            pre_lo = np.minimum(pre[:-1], pre[1:])
            pre_hi = np.maximum(pre[:-1], pre[1:])
            cells = np.arange(first, first + cpi)
            overlap = (np.minimum(source.hi[cells][:, None], pre_hi[None, :])
                       - np.maximum(source.lo[cells][:, None], pre_lo[None, :]))
            overlap = np.clip(overlap, 0.0, None) / source.width[cells][:, None]
            totals = overlap.sum(axis=1)
            if np.any(totals < 1.0 - 1e-6):
                logger.warning(f"Fiber {k}: return branch of interval {interval} at level {level} "
                               f"covers {totals.min():.9f} of its cells, the rest is defect")
            # only round-off above one is trimmed; a shortfall stays in the defect
            overlap = overlap / np.maximum(totals, 1.0)[:, None]
            r_idx, c_idx = np.nonzero(overlap > 0.0)
            rows.append(cells[r_idx])
            cols.append(base[c_idx])
            vals.append(overlap[r_idx, c_idx])

        rows = np.concatenate(rows)
        cols = np.concatenate(cols)
        vals = np.concatenate(vals)
        entries = coo_matrix((vals, (rows, cols)), shape=(source.n_cells, target.n_cells)).tocsr()
        defect = np.clip(1.0 - np.asarray(entries.sum(axis=1)).ravel(), 0.0, 1.0)
        return TransferMatrix(source_step=k, target_step=k + 1, entries=entries, defect=defect)

    def compose(self, k: int, n: int) -> TransferMatrix:
        """
        Matrix of L^n from fiber k: entries E_k E_{k+1} ... E_{k+n-1}.

        Raises:
        - DefectBudgetError: If the λ-weighted defect exceeds the budget
        """
        if n < 0:
            raise UlamError(f"Cannot compose {n} steps")
        grid = self.tower.grid(k)
        product = identity(grid.n_cells, format='csr')
        for j in range(n):
            product = (product @ self.operator(k + j).entries).tocsr()
        defect = np.clip(1.0 - np.asarray(product.sum(axis=1)).ravel(), 0.0, 1.0)
        weighted = float(np.sum(defect * grid.width) / np.sum(grid.width))
        if weighted > self.defect_budget:
            raise DefectBudgetError(f"Composed defect {weighted:.3e} over {n} steps exceeds {self.defect_budget:.3e}")
        return TransferMatrix(source_step=k, target_step=k + n, entries=product, defect=defect)

    # actions

    def push(self, k: int, n: int, mass: np.ndarray) -> Tuple[np.ndarray, float]:
        """Push cell masses n steps from fiber k; returns the mass and the total lost to truncation"""
        lost = 0.0
        for j in range(n):
            op = self.operator(k + j)
            lost += op.lost(mass)
            mass = op.push(mass)
        return mass, lost

    def pull(self, k: int, n: int, values: np.ndarray) -> np.ndarray:
        """values∘F^n as cell averages over fiber k, for values given over fiber k+n"""
        for j in range(n - 1, -1, -1):
            values = self.operator(k + j).koopman(values)
        return values

    def weights(self, k: int) -> np.ndarray:
        return self.tower.grid(k).weights(self.tower.theta_prime)

    def density(self, k: int, mass: np.ndarray, iterations: int = 0, defect: float = 0.0) -> DensityVector:
        return DensityVector.from_mass(self.tower.grid(k), mass, self.weights(k), iterations, defect)

    def equivariant_density(self, k: int, n_back: int = 200, tol: float = 1e-4) -> DensityVector:
        """
        Pullback h = L^n_{σ^{-n}ω} 1, normalised; the first n (multiple of 5)
        with ‖h^{(n)} - h^{(n+5)}‖₁ ≤ tol is returned.

        Raises:
        - ConvergenceError: If no iterate within n_back settles
        """
        stride = CONVERGENCE_STRIDE
        count = n_back // stride
        if count < 2:
            raise ConvergenceError(f"n_back = {n_back} leaves no room for a convergence check")
        start = k - count * stride
        self.prefetch(start, k)
        columns = np.zeros((self.tower.grid(start).n_cells, 0))
        lost = np.zeros(0)
        for m in range(start, k):
            if (k - m) % stride == 0:
                fresh = self.tower.grid(m).width[:, None]
                columns = np.hstack([columns, fresh / fresh.sum()])
                lost = np.append(lost, 0.0)
            op = self.operator(m)
            lost += np.abs(op.defect @ columns)
            columns = op.push(columns)
        # column j was started (count - j) * stride steps back
        totals = columns.sum(axis=0)
        width = self.tower.grid(k).width
        normalised = columns / totals[None, :]
        for j in range(count - 1, 0, -1):
            gap = float(np.sum(np.abs(normalised[:, j] - normalised[:, j - 1])))
            if gap <= tol:
                n = (count - j) * stride
                logger.info(f"Equivariant density at fiber {k}: n = {n}, Cauchy gap {gap:.2e}, "
                            f"defect {lost[j]:.2e}")
                return DensityVector(step=k, values=normalised[:, j] / width, width=width,
                                     weights=self.weights(k), iterations=n, defect=float(lost[j]))
        raise ConvergenceError(f"Pullback at fiber {k} did not reach tol {tol} within {n_back} steps")

    def cesaro_density(self, k: int, n: int) -> DensityVector:
        """(1/n) Σ_{j<n} L^j applied to the level-0 uniform density of fiber k-j"""
        if n < 1:
            raise UlamError(f"Cesàro average needs n >= 1, got {n}")
        total = None
        lost = 0.0
        for m in range(k - n + 1, k + 1):
            grid = self.tower.grid(m)
            seed = np.where(grid.level == 0, grid.width, 0.0)
            seed = seed / seed.sum()
            if total is None:
                total = seed
            else:
                op = self.operator(m - 1)
                lost += op.lost(total)
                total = op.push(total) + seed
        return self.density(k, total / n, iterations=n, defect=lost / n)

    def normalized_apply(self, k: int, n: int, psi: np.ndarray) -> np.ndarray:
        """P^n ψ = v^{-1} L^n(v ψ) on m-view vectors"""
        grid = self.tower.grid(k)
        mass = psi * self.weights(k) * grid.width
        mass, _ = self.push(k, n, mass)
        target = self.tower.grid(k + n)
        return mass / (self.weights(k + n) * target.width)

    def duality_gap(self, k: int, n: int, phi: np.ndarray, psi: np.ndarray) -> float:
        """|∫(φ∘F^n)ψ dm - ∫(P^nψ)φ dm′| for φ over fiber k+n and ψ (m-view) over fiber k"""
        m_source = self.weights(k) * self.tower.grid(k).width
        m_target = self.weights(k + n) * self.tower.grid(k + n).width
        left = float(np.sum(self.pull(k, n, phi) * psi * m_source))
        right = float(np.sum(self.normalized_apply(k, n, psi) * phi * m_target))
        return abs(left - right)

    def uniform_bound(self, k: int, n: int) -> float:
        """C_emp = max_{j ≤ n} |P^j 1|_∞ starting from fiber k"""
        grid = self.tower.grid(k)
        weights = self.weights(k)
        mass = weights * grid.width
        best = 1.0
        for j in range(n):
            mass = self.operator(k + j).push(mass)
            target = self.tower.grid(k + j + 1)
            best = max(best, float(np.max(mass / (self.weights(k + j + 1) * target.width))))
        return best


class EquivariantFamily:
    """
    Equivariant densities h_k for fibers start..stop.

    One pullback at `start`, then forward pushes; each push is renormalised
    and the lost mass is recorded per fiber.
    """

    def __init__(self, cocycle: UlamCocycle, start: int, stop: int, n_back: int = 200, tol: float = 1e-4):
        if stop < start:
            raise HorizonError(f"Empty family {start}..{stop}")
        self.cocycle = cocycle
        self.start = start
        self.stop = stop
        self.densities: Dict[int, DensityVector] = {}
        self.residuals: Dict[int, float] = {}
        cocycle.prefetch(start, stop)
        h = cocycle.equivariant_density(start, n_back, tol)
        self.densities[start] = h
        for k in range(start, stop):
            op = cocycle.operator(k)
            lost = op.lost(h.mass)
            h = cocycle.density(k + 1, op.push(h.mass), iterations=h.iterations + 1, defect=lost)
            self.densities[k + 1] = h
        logger.info(f"Equivariant family over fibers {start}..{stop} built")

    def extend(self, stop: int) -> None:
        """Push the family forward until it covers fiber `stop`"""
        if stop <= self.stop:
            return
        self.cocycle.prefetch(self.stop, stop)
        h = self.densities[self.stop]
        for k in range(self.stop, stop):
            op = self.cocycle.operator(k)
            lost = op.lost(h.mass)
            h = self.cocycle.density(k + 1, op.push(h.mass), iterations=h.iterations + 1, defect=lost)
            self.densities[k + 1] = h
        self.stop = stop

    def density(self, k: int) -> DensityVector:
        density = self.densities.get(k)
        if density is None:
            raise HorizonError(f"Fiber {k} is outside the family {self.start}..{self.stop}")
        return density

    def equivariance_residual(self, k: int, other: Optional[DensityVector] = None) -> float:
        """‖L_k h_k - h_{k+1}‖₁ against an independently computed h_{k+1}"""
        h = self.density(k)
        target = other if other is not None else self.density(k + 1)
        pushed = self.cocycle.operator(k).push(h.mass)
        return float(np.sum(np.abs(pushed - target.mass)))

    def bounds(self) -> Tuple[float, float]:
        """min and max of h over every cell of every fiber in the family"""
        lows = [float(np.min(h.values)) for h in self.densities.values()]
        highs = [float(np.max(h.values)) for h in self.densities.values()]
        return min(lows), max(highs)
