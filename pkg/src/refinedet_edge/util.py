"""Shared odds and ends."""

import os

THREADS_ENV = "REFINEDET_EDGE_THREADS"


def worker_count():
    """Worker-thread budget for batch-level maps (never consulted inside
    timed benchmark runs).  Controlled by the REFINEDET_EDGE_THREADS
    environment variable; defaults to 1."""
    raw = os.environ.get(THREADS_ENV)
    if raw is None or raw.strip() == "":
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    if n < 1:
        raise ValueError(f"{THREADS_ENV} must be >= 1, got {n}")
    return n
