"""Pure-numpy im2col/col2im, the fallback for the compiled kernels.

Loops only over the k*k kernel offsets; each iteration is a strided
slice copy (or accumulate), so the heavy lifting stays inside numpy.
"""

import numpy as np

NAME = "numpy"


def im2col(x: np.ndarray, k: int, stride: int, pad: int, ho: int, wo: int) -> np.ndarray:
    """(N,C,H,W) -> (N, C*k*k, ho*wo) patch matrix."""
    n, c, h, w = x.shape
    if pad > 0:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((n, c, k, k, ho, wo), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = x[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols.reshape(n, c * k * k, ho * wo)


def col2im(cols: np.ndarray, xshape, k: int, stride: int, pad: int, ho: int, wo: int) -> np.ndarray:
    """Adjoint of im2col: scatter-add patches back to (N,C,H,W)."""
    n, c, h, w = xshape
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    cols = cols.reshape(n, c, k, k, ho, wo)
    for i in range(k):
        for j in range(k):
            out[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols[:, :, i, j]
    if pad > 0:
        out = out[:, :, pad : pad + h, pad : pad + w]
    return np.ascontiguousarray(out)
