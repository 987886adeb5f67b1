"""Finite-difference verification suite over every layer type.

Each entry builds a float64 subgraph at a small shape and checks its
tape gradients against central differences (h = 1e-4). Model-level
entries pick the first data seed whose forward keeps every relu
pre-activation at a safe distance from the kink, where the check is
mathematically valid; the full-model entry additionally samples a fixed
number of coordinates per parameter tensor to stay inside the time
budget.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .losses import total_loss
from .model import Model, toy_config
from .tensor import Tensor, grad_check
from .tensor.gradcheck import GradCheckReport
from .tensor.ops import (
    abs_,
    add,
    avgpool2d,
    batchnorm2d,
    bce_with_logits,
    concat_channels,
    conv2d,
    div,
    mul,
    relu,
    relu_margin_probe,
    resize_bilinear,
    sigmoid,
    split_channels,
    sum_all,
)

TOLERANCE = 1e-5
LINEAR_TOLERANCE = 1e-7
H_STEP = 1e-4
KINK_MARGIN = 20 * H_STEP


@dataclass
class SuiteEntry:
    name: str
    report: GradCheckReport
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.report.max_rel_err < self.tolerance and self.report.checked > 0


def _t(rng, shape, scale=1.0):
    return Tensor(rng.standard_normal(shape) * scale, dtype=np.float64)


def _proj_loss(*pairs):
    total = None
    for out, r in pairs:
        term = sum_all(mul(out, r))
        total = term if total is None else add(total, term)
    return total


def check_linear_layer() -> GradCheckReport:
    rng = np.random.default_rng(100)
    x = _t(rng, (2, 5, 4, 4))
    w = _t(rng, (3, 5, 1, 1))
    b = _t(rng, (3,))
    r = _t(rng, (2, 3, 4, 4))
    return grad_check(lambda: _proj_loss((conv2d(x, w, b), r)), {"x": x, "w": w, "b": b})


def check_conv_grouped() -> GradCheckReport:
    rng = np.random.default_rng(101)
    x = _t(rng, (2, 4, 7, 7))
    w = _t(rng, (6, 2, 3, 3), 0.5)
    b = _t(rng, (6,))
    r = _t(rng, (2, 6, 4, 4))
    return grad_check(
        lambda: _proj_loss((conv2d(x, w, b, stride=2, pad=1, groups=2), r)),
        {"x": x, "w": w, "b": b},
    )


def check_batchnorm_train() -> GradCheckReport:
    rng = np.random.default_rng(102)
    x = _t(rng, (3, 4, 5, 5))
    gamma = Tensor(rng.uniform(0.5, 1.5, 4), dtype=np.float64)
    beta = _t(rng, (4,))
    rm, rv = np.zeros(4), np.ones(4)
    r = _t(rng, (3, 4, 5, 5))
    return grad_check(
        lambda: _proj_loss((batchnorm2d(x, gamma, beta, rm, rv, training=True), r)),
        {"x": x, "gamma": gamma, "beta": beta},
    )


def check_pointwise() -> GradCheckReport:
    rng = np.random.default_rng(103)
    x = Tensor(rng.standard_normal((2, 3, 6, 6)) + np.sign(rng.standard_normal((2, 3, 6, 6))) * 0.01,
               dtype=np.float64)
    r1 = _t(rng, (2, 3, 6, 6))
    r2 = _t(rng, (2, 3, 6, 6))
    return grad_check(
        lambda: _proj_loss((relu(x), r1), (sigmoid(x), r2)),
        {"x": x},
    )


def check_elementwise() -> GradCheckReport:
    rng = np.random.default_rng(104)
    a = _t(rng, (2, 3, 4, 4))
    b = Tensor(rng.uniform(0.5, 2.0, (2, 3, 4, 4)), dtype=np.float64)
    r = _t(rng, (2, 3, 4, 4))
    return grad_check(
        lambda: _proj_loss((mul(add(a, b), abs_(a)), r), (div(a, b), r)),
        {"a": a, "b": b},
    )


def check_channels() -> GradCheckReport:
    rng = np.random.default_rng(105)
    x = _t(rng, (2, 6, 4, 4))
    y = _t(rng, (2, 2, 4, 4))
    r = _t(rng, (2, 8, 4, 4))

    def loss():
        parts = split_channels(x, 3)
        return _proj_loss((concat_channels([parts[2], y, parts[0], parts[1]]), r))

    return grad_check(loss, {"x": x, "y": y})


def check_resize() -> GradCheckReport:
    rng = np.random.default_rng(106)
    x = _t(rng, (2, 3, 6, 5))
    r_up = _t(rng, (2, 3, 11, 9))
    r_dn = _t(rng, (2, 3, 3, 2))
    return grad_check(
        lambda: _proj_loss(
            (resize_bilinear(x, 11, 9), r_up),
            (resize_bilinear(x, 3, 2), r_dn),
        ),
        {"x": x},
    )


def check_avgpool() -> GradCheckReport:
    rng = np.random.default_rng(107)
    x = _t(rng, (2, 3, 7, 7))
    r1 = _t(rng, (2, 3, 7, 7))
    r2 = _t(rng, (2, 3, 4, 4))
    return grad_check(
        lambda: _proj_loss(
            (avgpool2d(x, 3, stride=1, pad=1), r1),
            (avgpool2d(x, 3, stride=2, pad=1), r2),
        ),
        {"x": x},
    )


def check_bce() -> GradCheckReport:
    rng = np.random.default_rng(108)
    x = _t(rng, (2, 1, 6, 6), 2.0)
    t = Tensor((rng.random((2, 1, 6, 6)) > 0.5).astype(float), dtype=np.float64)
    r = _t(rng, (2, 1, 6, 6))
    return grad_check(lambda: _proj_loss((bce_with_logits(x, t), r)), {"x": x})


def check_total_loss() -> GradCheckReport:
    rng = np.random.default_rng(109)
    pc = _t(rng, (1, 1, 16, 16), 2.0)
    pg = Tensor(rng.uniform(0.0, 1.0, (1, 1, 2, 2)), dtype=np.float64)
    g = Tensor((rng.random((1, 1, 16, 16)) > 0.6).astype(float), dtype=np.float64)
    zg = Tensor((rng.random((1, 1, 16, 16)) > 0.9).astype(float), dtype=np.float64)
    return grad_check(lambda: total_loss(pc, g, pg, zg).tensor, {"pc": pc, "pg": pg})


def _model_check(build_loss, seeds=range(32),
                 samples_per_tensor: Optional[int] = None) -> GradCheckReport:
    """Run a model-level check at the first kink-safe data seed."""
    for seed in seeds:
        loss_fn, tensors = build_loss(seed)
        with relu_margin_probe() as probe:
            loss_fn()
        if probe.margin < KINK_MARGIN:
            continue
        return grad_check(loss_fn, tensors, samples_per_tensor=samples_per_tensor, seed=seed)
    # no margin-safe seed: fall back to the kink guard alone
    loss_fn, tensors = build_loss(seeds[-1])
    return grad_check(loss_fn, tensors, samples_per_tensor=samples_per_tensor)


def check_git_block() -> GradCheckReport:
    """Grouped fusion at ci=8, cg=8, m=2, N in {2,4} on an 8x8 grid."""
    cfg = toy_config()

    def build(seed):
        model = Model(cfg, seed=seed, dtype=np.float64)
        rng = np.random.default_rng(200 + seed)
        xr = _t(rng, (1, cfg.ci, 8, 8))
        xg = _t(rng, (1, cfg.cg, 8, 8))
        r = _t(rng, (1, cfg.ci, 8, 8))
        tensors = {"xr": xr, "xg": xg}
        tensors.update({f"p.{k}": v for k, v in model.params.items() if k.startswith("git3")})

        def loss():
            return _proj_loss((model.git_transition(3, xr, xg, training=True), r))

        return loss, tensors

    return _model_check(build)


def check_texture_encoder() -> GradCheckReport:
    """Four-layer texture stack at width 8 on a 16x16 input."""
    cfg = toy_config()

    def build(seed):
        model = Model(cfg, seed=seed, dtype=np.float64)
        rng = np.random.default_rng(300 + seed)
        x = Tensor(rng.uniform(0.0, 1.0, (1, 3, 16, 16)), dtype=np.float64)
        r1 = _t(rng, (1, cfg.cg, 2, 2))
        r2 = _t(rng, (1, 1, 2, 2))
        tensors = {"x": x}
        tensors.update({f"p.{k}": v for k, v in model.params.items() if k.startswith("texture")})

        def loss():
            xg, pg = model.texture_forward(x, training=True)
            return _proj_loss((xg, r1), (pg, r2))

        return loss, tensors

    return _model_check(build)


def check_full_model(samples_per_tensor: int = 4) -> GradCheckReport:
    """End-to-end width-8 model incl. losses, sampled coordinates."""
    cfg = toy_config(input_size=64)

    def build(seed):
        model = Model(cfg, seed=seed, dtype=np.float64)
        rng = np.random.default_rng(400 + seed)
        x = Tensor(rng.uniform(0.0, 1.0, (1, 3, 64, 64)), dtype=np.float64)
        g = Tensor((rng.random((1, 1, 64, 64)) > 0.7).astype(float), dtype=np.float64)
        zg = Tensor((rng.random((1, 1, 64, 64)) > 0.95).astype(float), dtype=np.float64)
        tensors = {"x": x}
        tensors.update({f"p.{k}": v for k, v in model.params.items()})

        def loss():
            pc, pg = model.forward(x, training=True)
            return total_loss(pc, g, pg, zg).tensor

        return loss, tensors

    return _model_check(build, samples_per_tensor=samples_per_tensor)


SUITE: list[tuple[str, Callable[[], GradCheckReport], float]] = [
    ("linear-1x1-conv", check_linear_layer, LINEAR_TOLERANCE),
    ("conv-grouped-strided", check_conv_grouped, TOLERANCE),
    ("batchnorm-train", check_batchnorm_train, TOLERANCE),
    ("relu-sigmoid", check_pointwise, TOLERANCE),
    ("elementwise", check_elementwise, TOLERANCE),
    ("concat-split", check_channels, TOLERANCE),
    ("resize-bilinear", check_resize, TOLERANCE),
    ("avgpool", check_avgpool, TOLERANCE),
    ("bce-with-logits", check_bce, TOLERANCE),
    ("total-loss-heads", check_total_loss, TOLERANCE),
    ("git-block", check_git_block, TOLERANCE),
    ("texture-encoder", check_texture_encoder, TOLERANCE),
    ("full-toy-model", check_full_model, TOLERANCE),
]


def run_suite(verbose: bool = True) -> list[SuiteEntry]:
    entries = []
    for name, fn, tol in SUITE:
        report = fn()
        entry = SuiteEntry(name=name, report=report, tolerance=tol)
        entries.append(entry)
        if verbose:
            status = "PASS" if entry.passed else "FAIL"
            print(f"{status}  {name:<24} max rel err {report.max_rel_err:.3e} "
                  f"({report.checked} coords, {report.skipped_kinks} kink-skipped, tol {tol:g})")
    return entries
