"""Frequency-aware dynamic convolution on a small numpy layer library."""

import os as _os

_threads = _os.environ.get("FADCONV_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _threads)

__version__ = "0.1.0"
