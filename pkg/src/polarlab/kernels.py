"""Backend selection for the conv lowering kernels.

The compiled extension is used when it imports; set ``POLARLAB_PURE=1`` to
force the numpy path.
"""

import os

from . import _kernels_py

BACKEND = "numpy"
im2col = _kernels_py.im2col
col2im = _kernels_py.col2im

if os.environ.get("POLARLAB_PURE", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels
    except ImportError:
        pass
    else:
        BACKEND = "cython"
        im2col = _ckernels.im2col
        col2im = _ckernels.col2im


def backends():
    """Return ``{name: (im2col, col2im)}`` for every importable backend."""
    out = {"numpy": (_kernels_py.im2col, _kernels_py.col2im)}
    try:
        from . import _ckernels
    except ImportError:
        return out
    out["cython"] = (_ckernels.im2col, _ckernels.col2im)
    return out
