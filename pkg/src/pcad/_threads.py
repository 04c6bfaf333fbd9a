import os
import warnings

# an old system TBB only disables that threading layer; numba falls back on its own
warnings.filterwarnings("ignore", message="The TBB threading layer requires")


def worker_count() -> int:
    """Worker cap from ``PCAD_THREADS``; -1 means all cores (scipy convention)."""
    raw = os.environ.get("PCAD_THREADS", "").strip()
    if not raw:
        return -1
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"PCAD_THREADS must be an integer, got {raw!r}") from None
    return n if n > 0 else -1


def configure_numba() -> None:
    n = worker_count()
    if n > 0:
        import numba

        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
