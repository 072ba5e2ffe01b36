import json
import logging
import os
import threading
from typing import Any, Dict, Iterable, List, Sequence, Tuple

import numpy as np
import pandas as pd

# Define constants
FLOAT_FORMAT = '%.17g'
MANIFEST_FILE = 'manifest.json'

# Define logging configuration
logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(levelname)s - %(message)s')
logger = logging.getLogger(__name__)


class ArtifactError(Exception):
    """Base exception for artifact persistence"""
    pass


class InvalidArtifactError(ArtifactError):
    """Raised when rows do not match an artifact's columns"""
    pass


class ArtifactLogger:
    """
    Writes the CSV and JSON artifacts of one run directory.

    Floats are written with 17 significant digits so that identical inputs give
    byte-identical files; a lock serialises writers from worker threads.
    """

    def __init__(self, run_dir: str):
        """
        Args:
        - run_dir (str): Directory receiving the artifacts; created when missing
        """
        self.run_dir = run_dir
        self.lock = threading.Lock()
        self.written: List[str] = []
        try:
            os.makedirs(run_dir, exist_ok=True)
        except OSError as e:
            logger.error(f"Failed to create run directory {run_dir}: {e}")
            raise ArtifactError(f"Failed to create run directory {run_dir}: {e}")

    def path(self, name: str) -> str:
        return os.path.join(self.run_dir, name)

    def write_table(self, name: str, columns: Sequence[str], rows: Iterable[Sequence[Any]]) -> str:
        """
        Write rows under a fixed header.

        Raises:
        - InvalidArtifactError: If a row has the wrong width
        """
        rows = [tuple(row) for row in rows]
        for row in rows:
            if len(row) != len(columns):
                raise InvalidArtifactError(f"{name}: row {row} does not match columns {list(columns)}")
        frame = pd.DataFrame(rows, columns=list(columns))
        target = self.path(name)
        with self.lock:
            try:
                frame.to_csv(target, index=False, float_format=FLOAT_FORMAT, lineterminator='\n')
            except OSError as e:
                logger.error(f"Failed to write {target}: {e}")
                raise ArtifactError(f"Failed to write {target}: {e}")
            self.written.append(name)
        logger.info(f"Wrote {name} ({len(rows)} rows)")
        return target

    def write_tail(self, ns: Sequence[int], masses: Sequence[float]) -> str:
        return self.write_table('tail.csv', ['n', 'mass'], zip((int(n) for n in ns), (float(m) for m in masses)))

    def write_density(self, k: int, levels: np.ndarray, lo: np.ndarray, hi: np.ndarray, values: np.ndarray) -> str:
        return self.write_table(f'density_{k}.csv', ['level', 'cell_lo', 'cell_hi', 'value'],
                                zip(levels.astype(int).tolist(), lo.tolist(), hi.tolist(), values.tolist()))

    def write_cone_report(self, rows: Iterable[Tuple[str, float, int]]) -> str:
        return self.write_table('cone_report.csv', ['condition', 'slack', 'worst_cell'], rows)

    def write_schedule(self, times: Sequence[int]) -> str:
        return self.write_table('schedule.csv', ['i', 't_i'], ((i + 1, int(t)) for i, t in enumerate(times)))

    def write_correlations(self, rows: Iterable[Tuple[int, float, float, float, float]]) -> str:
        return self.write_table('correlations.csv', ['n', 'op_value', 'op_bound', 'mc_value', 'mc_stderr'], rows)

    def write_fit(self, window: Tuple[int, int], beta: float, C: float, r2: float) -> str:
        return self.write_table('fit.csv', ['window_lo', 'window_hi', 'beta', 'C', 'r2'],
                                [(int(window[0]), int(window[1]), float(beta), float(C), float(r2))])

    def write_operator(self, k: int, entries) -> str:
        """Coordinate-list export of one transfer matrix"""
        coo = entries.tocoo()
        order = np.lexsort((coo.col, coo.row))
        return self.write_table(f'operator_{k}.csv', ['row', 'col', 'value'],
                                zip(coo.row[order].tolist(), coo.col[order].tolist(), coo.data[order].tolist()))

    def write_sweep(self, rows: Iterable[Tuple[Any, str, float, float, float, str]]) -> str:
        return self.write_table('sweep.csv', ['value', 'run_dir', 'theta', 'beta', 'r2', 'status'], rows)

    def write_json(self, name: str, data: Dict[str, Any]) -> str:
        target = self.path(name)
        with self.lock:
            try:
                with open(target, 'w') as f:
                    json.dump(data, f, indent=2, sort_keys=True, allow_nan=False, default=_json_default)
                    f.write('\n')
            except (OSError, TypeError, ValueError) as e:
                logger.error(f"Failed to write {target}: {e}")
                raise ArtifactError(f"Failed to write {target}: {e}")
            if name not in self.written:
                self.written.append(name)
        return target

    def write_manifest(self, manifest: Dict[str, Any]) -> str:
        return self.write_json(MANIFEST_FILE, manifest)


def _json_default(value: Any) -> Any:
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f"Object of type {type(value).__name__} is not JSON serializable")
