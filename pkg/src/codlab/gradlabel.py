"""Object-gradient and boundary supervision labels.

The gradient label is the product of a Canny edge map of the image with
the ground-truth mask, so its support never leaves the object. The whole
Canny pipeline is implemented here: luma conversion, separable Gaussian
blur, 3x3 Sobel gradients, four-bucket non-maximum suppression, relative
double thresholding and 8-connected hysteresis.

Conventions fixed for reproducibility:
  * blur and Sobel use replicate (edge) padding, so a constant image has
    exactly zero gradient everywhere and the frame produces no fake edges;
  * NMS keeps a pixel when its magnitude is strictly greater than the
    forward neighbor and >= the backward neighbor along the quantized
    gradient axis — ties across a symmetric step keep exactly one pixel;
  * thresholds are fractions of the max suppressed magnitude.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor

LUMA = (0.299, 0.587, 0.114)

# quantized gradient axis -> forward neighbor offset (backward is negated)
_NMS_OFFSETS = {0: (0, 1), 1: (1, 1), 2: (1, 0), 3: (1, -1)}


@dataclass(frozen=True)
class CannyParams:
    gaussian_sigma: float = 1.0
    gaussian_kernel: int = 5
    low_ratio: float = 0.10
    high_ratio: float = 0.20

    def __post_init__(self):
        if self.gaussian_kernel < 3 or self.gaussian_kernel % 2 == 0:
            raise ValueError("gaussian_kernel must be an odd integer >= 3")
        if not (0.0 < self.low_ratio < self.high_ratio <= 1.0):
            raise ValueError("need 0 < low_ratio < high_ratio <= 1")
        if self.gaussian_sigma <= 0:
            raise ValueError("gaussian_sigma must be positive")


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def rgb_to_gray(image: np.ndarray) -> np.ndarray:
    """(3,H,W) in [0,1] -> (H,W) luma."""
    r, g, b = image[0], image[1], image[2]
    return LUMA[0] * r + LUMA[1] * g + LUMA[2] * b


def _gauss_kernel1d(sigma: float, k: int) -> np.ndarray:
    c = (k - 1) / 2.0
    v = np.exp(-((np.arange(k) - c) ** 2) / (2.0 * sigma * sigma))
    return v / v.sum()


def gaussian_blur(gray: np.ndarray, sigma: float, k: int) -> np.ndarray:
    """Separable Gaussian with replicate padding."""
    ker = _gauss_kernel1d(sigma, k)
    r = k // 2
    p = np.pad(gray, ((0, 0), (r, r)), mode="edge")
    h = sum(ker[i] * p[:, i : i + gray.shape[1]] for i in range(k))
    p = np.pad(h, ((r, r), (0, 0)), mode="edge")
    return sum(ker[i] * p[i : i + gray.shape[0], :] for i in range(k))


def sobel_gradients(gray: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """3x3 Sobel gx/gy (y increases downward), replicate padding."""
    p = np.pad(gray, 1, mode="edge")
    h, w = gray.shape

    def s(di, dj):
        return p[1 + di : 1 + di + h, 1 + dj : 1 + dj + w]

    gx = (s(-1, 1) + 2 * s(0, 1) + s(1, 1)) - (s(-1, -1) + 2 * s(0, -1) + s(1, -1))
    gy = (s(1, -1) + 2 * s(1, 0) + s(1, 1)) - (s(-1, -1) + 2 * s(-1, 0) + s(-1, 1))
    return gx, gy


def quantize_orientation(gx: np.ndarray, gy: np.ndarray) -> np.ndarray:
    """Gradient angle mod 180 degrees into 4 buckets of 45 degrees."""
    ang = np.degrees(np.arctan2(gy, gx)) % 180.0
    return (((ang + 22.5) // 45.0).astype(np.int64)) % 4


def non_maximum_suppression(mag: np.ndarray, bucket: np.ndarray) -> np.ndarray:
    """Keep pixels that dominate both axis neighbors (out of frame = 0)."""
    h, w = mag.shape
    mp = np.pad(mag, 1)

    def shifted(di, dj):
        return mp[1 + di : 1 + di + h, 1 + dj : 1 + dj + w]

    fwd = np.zeros_like(mag)
    bwd = np.zeros_like(mag)
    for b, (di, dj) in _NMS_OFFSETS.items():
        sel = bucket == b
        fwd[sel] = shifted(di, dj)[sel]
        bwd[sel] = shifted(-di, -dj)[sel]
    keep = (mag > fwd) & (mag >= bwd) & (mag > 0)
    return np.where(keep, mag, 0.0)


def hysteresis(nms: np.ndarray, low: float, high: float) -> np.ndarray:
    """Flood-fill from strong pixels through weak ones, 8-connected."""
    strong = nms >= high
    weak = nms >= low
    visited = strong.copy()
    h, w = nms.shape
    queue = deque(zip(*np.nonzero(strong)))
    while queue:
        y, x = queue.popleft()
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                ny, nx = y + dy, x + dx
                if 0 <= ny < h and 0 <= nx < w and weak[ny, nx] and not visited[ny, nx]:
                    visited[ny, nx] = True
                    queue.append((ny, nx))
    return visited


def canny(image, params: CannyParams = CannyParams()) -> Tensor:
    """Binary edge map of an RGB image in [0,1]; shape (1,H,W), values {0,1}.

    A constant image yields an all-zero map rather than an error.
    """
    arr = _as_array(image)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ValueError(f"expected (3,H,W) image, got {arr.shape}")
    gray = rgb_to_gray(arr.astype(np.float64))
    blurred = gaussian_blur(gray, params.gaussian_sigma, params.gaussian_kernel)
    gx, gy = sobel_gradients(blurred)
    mag = np.hypot(gx, gy)
    mx = mag.max()
    if mx == 0.0:
        return Tensor(np.zeros((1,) + gray.shape, dtype=np.float32))
    nms = non_maximum_suppression(mag, quantize_orientation(gx, gy))
    peak = nms.max()
    if peak == 0.0:
        return Tensor(np.zeros((1,) + gray.shape, dtype=np.float32))
    edges = hysteresis(nms, params.low_ratio * peak, params.high_ratio * peak)
    return Tensor(edges[None].astype(np.float32))


def object_gradient_label(image, mask, params: CannyParams = CannyParams()) -> Tensor:
    """Canny edges restricted to the object: edges * mask, binary."""
    m = _as_array(mask)
    img = _as_array(image)
    if m.shape[-2:] != img.shape[-2:]:
        raise ValueError(f"mask size {m.shape[-2:]} != image size {img.shape[-2:]}")
    edges = canny(img, params).data
    return Tensor((edges * m.reshape(edges.shape)).astype(np.float32))


def _dilate3(m: np.ndarray) -> np.ndarray:
    p = np.pad(m, 1)
    h, w = m.shape
    out = m.copy()
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            np.maximum(out, p[1 + di : 1 + di + h, 1 + dj : 1 + dj + w], out=out)
    return out


def _erode3(m: np.ndarray) -> np.ndarray:
    # zero padding: the frame counts as background, so a full mask erodes
    p = np.pad(m, 1)
    h, w = m.shape
    out = m.copy()
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            np.minimum(out, p[1 + di : 1 + di + h, 1 + dj : 1 + dj + w], out=out)
    return out


def boundary_label(mask) -> Tensor:
    """Morphological gradient of the mask: dilate3 - erode3, binary (1,H,W)."""
    m = _as_array(mask)
    m2 = (m.reshape(m.shape[-2:]) > 0.5).astype(np.float32)
    band = _dilate3(m2) - _erode3(m2)
    return Tensor((band > 0.5).astype(np.float32)[None])
