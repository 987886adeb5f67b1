"""Training objective: weighted structure loss plus gradient-map MSE.

The structure loss weights every pixel by how much it disagrees with its
31x31 neighborhood mean — border-adjacent pixels get up to 6x weight —
and combines a weighted BCE with a weighted IoU term. The texture head
is trained with plain MSE against the binary gradient label after
upsampling the stride-8 prediction back to label resolution. The three
components are summed with unit weights.

Reductions run over every element of the batch tensor.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

from .tensor import Tensor
from .tensor.ops import (
    abs_,
    add,
    add_const,
    avgpool2d,
    bce_with_logits,
    div,
    mul,
    mul_const,
    resize_bilinear,
    sigmoid,
    sub,
    sum_all,
)

WEIGHT_POOL_K = 31
WEIGHT_GAIN = 5.0
IOU_SMOOTH = 1.0


@dataclass
class LossBreakdown:
    """Scalar components plus the tape node of the total (for backward)."""

    wbce: float
    wiou: float
    mse: float
    total: float
    tensor: Optional[Tensor] = None


def weight_map(g: Tensor) -> Tensor:
    """w = 1 + 5*|avgpool31(g) - g|; values lie in [1, 6].

    Pooling excludes padding from the divisor, so the local mean stays in
    [0,1] near borders and the bound holds everywhere.
    """
    pooled = avgpool2d(g, WEIGHT_POOL_K, stride=1, pad=WEIGHT_POOL_K // 2)
    return add_const(mul_const(abs_(sub(pooled, g)), WEIGHT_GAIN), 1.0)


def structure_loss(pc_logits: Tensor, g: Tensor, w: Optional[Tensor] = None) -> tuple[Tensor, Tensor]:
    """(weighted BCE, weighted IoU) of segmentation logits against a binary mask."""
    if pc_logits.shape != g.shape:
        raise ValueError(f"logits {pc_logits.shape} vs mask {g.shape}")
    if w is None:
        w = weight_map(g)
    wbce = div(sum_all(mul(w, bce_with_logits(pc_logits, g))), sum_all(w))
    p = sigmoid(pc_logits)
    inter = sum_all(mul(w, mul(p, g)))
    union = sum_all(mul(w, sub(add(p, g), mul(p, g))))
    wiou = add_const(
        mul_const(div(add_const(inter, IOU_SMOOTH), add_const(union, IOU_SMOOTH)), -1.0),
        1.0,
    )
    return wbce, wiou


def gradient_loss(pg: Tensor, zg: Tensor) -> Tensor:
    """MSE between the upsampled gradient prediction and the binary label."""
    up = resize_bilinear(pg, zg.shape[-2], zg.shape[-1])
    if up.shape != zg.shape:
        raise ValueError(f"upsampled prediction {up.shape} vs label {zg.shape}")
    d = sub(up, zg)
    return mul_const(sum_all(mul(d, d)), 1.0 / zg.size)


def total_loss(pc_logits: Tensor, g: Tensor, pg: Optional[Tensor] = None,
               zg: Optional[Tensor] = None) -> LossBreakdown:
    """Unit-weight sum; without a texture head the MSE term is reported as 0
    and contributes nothing to gradients."""
    wbce, wiou = structure_loss(pc_logits, g)
    total = add(wbce, wiou)
    mse_val = 0.0
    if pg is not None:
        if zg is None:
            raise ValueError("gradient label required when a texture prediction is given")
        mse = gradient_loss(pg, zg)
        total = add(total, mse)
        mse_val = mse.item()
    return LossBreakdown(
        wbce=wbce.item(),
        wiou=wiou.item(),
        mse=mse_val,
        total=total.item(),
        tensor=total,
    )
