"""Hot-loop kernels with a numba path and a pure-numpy fallback.

The backend is picked once at import time from ``MEANSPARSE_KERNELS``:

* ``auto`` (default): numba when it imports cleanly, numpy otherwise
* ``numba``: require numba
* ``numpy``: force the fallback

Both backends agree to floating-point rounding; within one backend every
kernel is deterministic. ``im2col`` always uses the numpy version, which is
faster than its compiled twin.
"""

import os

from . import _numpy

_requested = os.environ.get("MEANSPARSE_KERNELS", "auto").strip().lower()
if _requested not in ("auto", "numba", "numpy"):
    raise ImportError(f"MEANSPARSE_KERNELS must be auto, numba or numpy, got {_requested!r}")

if _requested == "numpy":
    _impl = _numpy
else:
    try:
        from . import _numba as _impl
    except ImportError:
        if _requested == "numba":
            raise
        _impl = _numpy

BACKEND = "numba" if _impl is not _numpy else "numpy"

# numpy's strided-view copy beats the compiled loop for im2col (see
# benchmarks/bench_kernels.py), so both backends share it
im2col = _numpy.im2col
col2im = _impl.col2im
sparsify_forward = _impl.sparsify_forward
channel_moments = _impl.channel_moments
hard_threshold = _impl.hard_threshold

__all__ = [
    "BACKEND",
    "im2col",
    "col2im",
    "sparsify_forward",
    "channel_moments",
    "hard_threshold",
]
