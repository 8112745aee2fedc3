"""Small shared helpers."""
import os


def thread_count(default=1):
    """Worker count for batch entry points, from ``PROBPNP_THREADS``.

    Unset or unparsable values fall back to ``default``; values below 1 are
    clamped to 1.
    """
    raw = os.environ.get("PROBPNP_THREADS")
    if raw is None:
        return max(1, int(default))
    try:
        return max(1, int(raw))
    except ValueError:
        return max(1, int(default))
