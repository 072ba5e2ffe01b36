import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, List, TypeVar

# Set up logging
logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(levelname)s - %(message)s')
logger = logging.getLogger(__name__)

T = TypeVar('T')
R = TypeVar('R')


class WorkerPoolError(Exception):
    """Raised for an invalid worker count"""
    pass


def ordered_map(fn: Callable[[T], R], items: Iterable[T], workers: int = 1) -> List[R]:
    """
    Apply fn to every item on a bounded thread pool, keeping input order.

    Results never depend on the worker count: each task is pure with respect
    to its item and results are collected in submission order.

    Args:
    - fn (Callable): Task function
    - items (Iterable): Task inputs
    - workers (int): Pool size; 1 runs inline

    Returns:
    - List: Results in input order
    """
    if workers < 1:
        raise WorkerPoolError(f"workers must be >= 1, got {workers}")
    items = list(items)
    if workers == 1 or len(items) < 2:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as executor:
        return list(executor.map(fn, items))
