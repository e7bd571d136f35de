from functools import wraps
from random import random
from time import perf_counter
from typing import Dict, List

import numpy as np

from logger import set_up_logging

logger = set_up_logging(__name__)


def summarize(exec_times: List[float]) -> Dict[str, float]:
    return {
        "last": exec_times[-1],
        "min": float(np.min(exec_times)),
        "max": float(np.max(exec_times)),
        "avg": float(np.mean(exec_times)),
        "std": float(np.std(exec_times)),
        "calls": len(exec_times),
    }


def measure_time(report_frequency: float = 1.0, trail_length=1000):
    """
    Keep a trail of wall times for the decorated function and, on a random fraction of calls,
    log their statistics as structured fields at DEBUG.
    """

    def decorator(fn):
        exec_times = []

        @wraps(fn)
        def wrap(*args, **kw):
            nonlocal exec_times
            ts = perf_counter()
            result = fn(*args, **kw)
            exec_times.append(perf_counter() - ts)
            exec_times = exec_times[-trail_length:]
            if random() < report_frequency:
                stats = summarize(exec_times)
                logger.debug(
                    f"func {fn.__name__}: last={stats['last']:.3f}s avg={stats['avg']:.3f}s std={stats['std']:.3f}s",
                    extra={"func": fn.__name__, **stats},
                )
            return result

        wrap.timings = lambda: summarize(exec_times) if exec_times else {}
        return wrap

    return decorator
