"""Order-preserving job mapping over an optional process pool."""

import logging
from concurrent.futures import ProcessPoolExecutor
from typing import Callable, Iterable, List, TypeVar

logger = logging.getLogger(__name__)

T = TypeVar('T')
R = TypeVar('R')


def parallel_map(fn: Callable[[T], R], jobs: Iterable[T], workers: int = 1) -> List[R]:
    """Apply ``fn`` to every job and return results in job order.

    Every job carries its own stream labels, so the result list does not
    depend on ``workers``. ``fn`` must be a module-level function when
    ``workers > 1``.
    """
    jobs = list(jobs)
    if workers <= 1 or len(jobs) <= 1:
        return [fn(job) for job in jobs]
    logger.debug("Mapping %d jobs over %d workers", len(jobs), workers)
    with ProcessPoolExecutor(max_workers=workers) as executor:
        return list(executor.map(fn, jobs))
