"""Process-level tuning for the numpy training loops."""

from __future__ import annotations

import ctypes
import ctypes.util
import sys

_M_TRIM_THRESHOLD = -1
_M_MMAP_THRESHOLD = -3
_done = False


def keep_heap_memory(limit_bytes: int = 1 << 31) -> bool:
    """Stop glibc from mmap-ing (and unmapping) every large temporary array.

    Training allocates and frees the same tens of megabytes each step; served
    from fresh mmaps, every step pays page faults on first touch. Raising the
    mmap and trim thresholds keeps those blocks on the heap. No-op off Linux.
    """
    global _done
    if _done:
        return True
    if not sys.platform.startswith("linux"):
        return False
    try:
        libc = ctypes.CDLL(ctypes.util.find_library("c") or "libc.so.6")
        ok = libc.mallopt(_M_MMAP_THRESHOLD, ctypes.c_int(min(limit_bytes, 2**31 - 1)))
        ok &= libc.mallopt(_M_TRIM_THRESHOLD, ctypes.c_int(min(limit_bytes, 2**31 - 1)))
    except (OSError, AttributeError):
        return False
    _done = bool(ok)
    return _done
