"""Picks the compiled kernels when available, else the numpy fallback.

Set ``CAEMLE_PURE_PYTHON=1`` to force the fallback.
"""

import os

from . import _fallback

BACKEND = "python"
col2im = _fallback.col2im
nn_chain_ward = _fallback.nn_chain_ward

if os.environ.get("CAEMLE_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels
    except ImportError:
        pass
    else:
        BACKEND = "compiled"
        nn_chain_ward = _kernels.nn_chain_ward

        def col2im(cols, out_shape, kernel, stride):
            if cols.dtype.name != "float64" or not cols.flags.c_contiguous:
                return _fallback.col2im(cols, out_shape, kernel, stride)
            return _kernels.col2im(cols, tuple(out_shape), tuple(kernel), int(stride))
