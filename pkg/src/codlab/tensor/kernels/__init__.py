"""Hot convolution kernels with backend selection at import time.

The compiled Cython extension is preferred when it built successfully;
otherwise the pure-numpy fallback is used. ``CODLAB_PURE_PYTHON=1``
forces the fallback, and :func:`use_backend` switches explicitly (the
benchmark relies on that).
"""

import os

import numpy as np

from . import numpy_backend

try:  # compiled extension is optional
    from . import _convkern
except ImportError:  # pragma: no cover - depends on build environment
    _convkern = None

_BACKEND = "numpy"


def available_backends():
    names = ["numpy"]
    if _convkern is not None:
        names.append("cython")
    return names


def use_backend(name: str) -> None:
    global _BACKEND
    if name == "auto":
        name = "cython" if _convkern is not None else "numpy"
    if name not in available_backends():
        raise ValueError(f"backend {name!r} not available (have {available_backends()})")
    _BACKEND = name


def backend_name() -> str:
    return _BACKEND


def im2col(x: np.ndarray, k: int, stride: int, pad: int, ho: int, wo: int) -> np.ndarray:
    if _BACKEND == "cython":
        out = np.empty((x.shape[0], x.shape[1] * k * k, ho * wo), dtype=x.dtype)
        _convkern.im2col(x, k, stride, pad, ho, wo, out)
        return out
    return numpy_backend.im2col(x, k, stride, pad, ho, wo)


def col2im(cols: np.ndarray, xshape, k: int, stride: int, pad: int, ho: int, wo: int) -> np.ndarray:
    if _BACKEND == "cython":
        out = np.zeros(xshape, dtype=cols.dtype)
        _convkern.col2im(np.ascontiguousarray(cols), k, stride, pad, ho, wo, out)
        return out
    return numpy_backend.col2im(cols, xshape, k, stride, pad, ho, wo)


use_backend("numpy" if os.environ.get("CODLAB_PURE_PYTHON") == "1" else "auto")
