"""Global thread-mode switch for the BLAS backend behind ``matmul``."""

from contextlib import contextmanager

from threadpoolctl import threadpool_limits

_mode = "auto"
_limiter = None


def get_thread_mode() -> str:
    return _mode


def set_thread_mode(mode: str) -> None:
    """Set ``"single"`` (one BLAS/OpenMP thread) or ``"auto"`` (library default)."""
    global _mode, _limiter
    if mode not in ("single", "auto"):
        raise ValueError(f"thread mode must be 'single' or 'auto', got {mode!r}")
    if _limiter is not None:
        _limiter.restore_original_limits()
        _limiter = None
    if mode == "single":
        _limiter = threadpool_limits(limits=1)
    _mode = mode


@contextmanager
def thread_mode(mode: str):
    previous = _mode
    set_thread_mode(mode)
    try:
        yield
    finally:
        set_thread_mode(previous)
