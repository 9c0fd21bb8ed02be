"""Compute thread pinning via ``EARLYBIRD_THREADS``."""
import os

from threadpoolctl import threadpool_info, threadpool_limits

from . import kernels

ENV_VAR = "EARLYBIRD_THREADS"
_limiter = None


def configure_threads(count=None):
    """Pin BLAS/OpenMP pools to ``count`` threads (or ``$EARLYBIRD_THREADS``)."""
    global _limiter
    if count is None:
        value = os.environ.get(ENV_VAR)
        if not value:
            return None
        count = int(value)
    if count < 1:
        raise ValueError(f"{ENV_VAR} must be >= 1")
    _limiter = threadpool_limits(limits=count)
    return count


def thread_info():
    pools = threadpool_info()
    counts = sorted({p.get("num_threads") for p in pools if p.get("num_threads")})
    return {
        "threads_requested": os.environ.get(ENV_VAR),
        "blas_threads": counts[0] if len(counts) == 1 else counts,
        "kernel_backend": kernels.BACKEND,
    }
