"""Backend selection for the convolution lowering kernels.

The compiled extension is preferred. Setting ``RRKD_PURE_PYTHON=1`` forces the
numpy fallback, which is also used whenever the extension was not built.
"""

import os

from . import _kernels_py

BACKEND = "python"
im2col = _kernels_py.im2col
col2im = _kernels_py.col2im

if os.environ.get("RRKD_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled
    except ImportError:
        pass
    else:
        BACKEND = "cython"
        im2col = _compiled.im2col
        col2im = _compiled.col2im
