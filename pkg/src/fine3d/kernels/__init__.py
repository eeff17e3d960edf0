"""Row kernels used by the autodiff core.

The compiled extension is used when it imports; otherwise the numpy
fallback is selected. Set ``FINE3D_PURE_PYTHON=1`` to force the fallback.
"""
import os

import numpy as np

from . import _fallback

BACKEND = "python"
_impl = _fallback

if os.environ.get("FINE3D_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        _impl = _fallback


def _rows(x):
    return np.ascontiguousarray(x.reshape(-1, x.shape[-1]), dtype=np.float64)


def softmax_fwd(x):
    return _impl.softmax_fwd(_rows(x)).reshape(x.shape)


def softmax_bwd(y, g):
    return _impl.softmax_bwd(_rows(y), _rows(g)).reshape(y.shape)


def layernorm_fwd(x, eps):
    xhat, rstd = _impl.layernorm_fwd(_rows(x), float(eps))
    return xhat.reshape(x.shape), rstd


def layernorm_bwd(gxhat, xhat, rstd):
    return _impl.layernorm_bwd(_rows(gxhat), _rows(xhat), rstd).reshape(xhat.shape)


def gelu_fwd(x):
    if x.ndim == 0:
        return _impl.gelu_fwd(x.reshape(1, 1)).reshape(())
    return _impl.gelu_fwd(_rows(x)).reshape(x.shape)


def gelu_bwd(x, g):
    if x.ndim == 0:
        return _impl.gelu_bwd(x.reshape(1, 1), g.reshape(1, 1)).reshape(())
    return _impl.gelu_bwd(_rows(x), _rows(g)).reshape(x.shape)


def use_backend(name):
    """Switch backend at runtime (``"cython"`` or ``"python"``); used by the benchmark."""
    global _impl, BACKEND
    if name == "python":
        _impl, BACKEND = _fallback, "python"
    elif name == "cython":
        from . import _ckernels

        _impl, BACKEND = _ckernels, "cython"
    else:
        raise ValueError(f"unknown kernel backend {name!r}")
