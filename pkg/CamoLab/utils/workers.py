"""
Process-pool helpers
Worker count comes from CAMOLAB_THREADS, else KUAFU_THREADS (default 1);
callers may only lower it.
"""

import os
from functools import partial
from multiprocessing import Pool
from typing import Callable, Iterable, List, Optional

from tqdm import tqdm

import config
from errors import ValidationError


def worker_cap() -> int:
    """First of CAMOLAB_THREADS / KUAFU_THREADS that is set, else DEFAULT_WORKERS"""
    for name in (config.THREADS_ENV, config.THREADS_ENV_FALLBACK):
        raw = os.getenv(name, "").strip()
        if not raw:
            continue
        try:
            return max(1, int(raw))
        except ValueError:
            raise ValidationError(f"{name} must be an integer, got '{raw}'") from None
    return config.DEFAULT_WORKERS


def resolve_workers(requested: Optional[int] = None) -> int:
    """Effective worker count: min(requested, worker cap), at least 1"""
    cap = worker_cap()
    if requested is None:
        return cap
    if requested < 1:
        raise ValidationError("worker count must be at least 1")
    return min(requested, cap)


def map_ordered(func: Callable, items: Iterable, workers: int = 1, desc: Optional[str] = None,
                show_progress: bool = False, **kwargs) -> List:
    """
    Apply func(item, **kwargs) to every item, results in input order

    Runs inline for one worker; otherwise a Pool with imap keeps ordering.
    """
    items = list(items)
    bound = partial(func, **kwargs) if kwargs else func
    bar = tqdm(total=len(items), desc=desc, disable=not show_progress, leave=False)
    results = []
    if workers <= 1 or len(items) <= 1:
        for item in items:
            results.append(bound(item))
            bar.update(1)
    else:
        with Pool(processes=min(workers, len(items))) as pool:
            for result in pool.imap(bound, items):
                results.append(result)
                bar.update(1)
    bar.close()
    return results
