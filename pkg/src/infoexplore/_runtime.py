"""Process-level tuning for long numpy-heavy runs."""
from __future__ import annotations

import ctypes
import ctypes.util
import sys

_M_TRIM_THRESHOLD = -1
_M_MMAP_THRESHOLD = -3


def tune_allocator(mmap_threshold: int = 256 << 20) -> bool:
    """Keep mid-sized numpy temporaries on the glibc heap.

    By default glibc serves every block above ~128 KiB with a fresh ``mmap``,
    so each temporary in the planner's batched forward passes page-faults.
    Raising the threshold roughly halves planning time. Returns whether the
    setting was applied (glibc only).
    """
    if not sys.platform.startswith("linux"):
        return False
    try:
        libc = ctypes.CDLL(ctypes.util.find_library("c") or "libc.so.6")
        ok = libc.mallopt(_M_MMAP_THRESHOLD, mmap_threshold)
        ok &= libc.mallopt(_M_TRIM_THRESHOLD, 2 * mmap_threshold)
        return bool(ok)
    except (OSError, AttributeError):
        return False
