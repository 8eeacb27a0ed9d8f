"""Thread-count control for the BLAS backing the operators."""

from __future__ import annotations

import contextlib
import os

from threadpoolctl import threadpool_limits

ENV_VAR = "BDNET_THREADS"


def resolve_threads(requested: int | None) -> int:
    """``BDNET_THREADS`` overrides the requested count; 0 or None means library default."""
    env = os.environ.get(ENV_VAR)
    if env:
        try:
            return max(1, int(env))
        except ValueError as exc:
            raise ValueError(f"{ENV_VAR} must be an integer, got {env!r}") from exc
    return int(requested or 0)


_active: threadpool_limits | None = None


def set_num_threads(n: int) -> None:
    """Pin BLAS to ``n`` threads for the rest of the process (n=1 gives bitwise-reproducible runs)."""
    global _active
    if n >= 1:
        _active = threadpool_limits(limits=n)


@contextlib.contextmanager
def thread_limit(n: int | None):
    if not n:
        yield
        return
    with threadpool_limits(limits=n):
        yield
