"""Thread-count knob and deterministic chunked parallel maps.

All multi-threading in this package is a plain fan-out over row chunks
whose results are concatenated in chunk order, so outputs are bitwise
identical for any worker count.  BLAS pools are pinned to one thread inside
the numeric hot paths (see the trainer) because multi-threaded GEMM may
change reduction order with the thread count.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

ENV_THREADS = "CHART_THREADS"


def configured_threads() -> int:
    """Worker count from the CHART_THREADS variable, else machine parallelism."""
    raw = os.environ.get(ENV_THREADS, "").strip()
    if raw:
        try:
            n = int(raw)
        except ValueError as exc:
            raise ValueError(f"{ENV_THREADS} must be an integer, got {raw!r}") from exc
        if n < 1:
            raise ValueError(f"{ENV_THREADS} must be >= 1")
        return n
    return os.cpu_count() or 1


def map_chunks(fn, total: int, chunk: int = 2048,
               workers: int | None = None) -> np.ndarray:
    """Evaluate ``fn(start, stop)`` over row chunks and concatenate in order."""
    if workers is None:
        workers = configured_threads()
    spans = [(s, min(s + chunk, total)) for s in range(0, total, chunk)]
    if workers <= 1 or len(spans) <= 1:
        parts = [fn(a, b) for a, b in spans]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda span: fn(*span), spans))
    return np.concatenate(parts, axis=0)
