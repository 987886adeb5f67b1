"""Central finite-difference verification of reverse-mode gradients.

Runs in float64 only: at float32 the h^2 truncation error and roundoff
drown the signal. The error measure per coordinate is
|analytic - numeric| / max(1, |analytic|, |numeric|), so small gradients
are compared absolutely and large ones relatively.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .core import NonFiniteError, Tape, Tensor
from .ops import relu_sign_recorder


@dataclass
class GradCheckReport:
    max_rel_err: float = 0.0
    worst_tensor: str = ""
    worst_index: int = -1
    worst_analytic: float = 0.0
    worst_numeric: float = 0.0
    checked: int = 0
    skipped_kinks: int = 0
    per_tensor: dict[str, float] = field(default_factory=dict)

    def __str__(self):
        return (f"grad check: {self.checked} coordinates, max rel err {self.max_rel_err:.3e} "
                f"at {self.worst_tensor}[{self.worst_index}] "
                f"(analytic {self.worst_analytic:.6e}, numeric {self.worst_numeric:.6e}, "
                f"{self.skipped_kinks} kink-crossing points skipped)")


def _eval_with_signature(loss_fn) -> tuple[float, int]:
    with relu_sign_recorder() as rec:
        f = loss_fn().item()
    return f, rec.crc


def grad_check(loss_fn: Callable[[], Tensor], tensors: dict[str, Tensor],
               h: float = 1e-4, samples_per_tensor: int | None = None,
               seed: int = 0, smooth_guard: bool = True) -> GradCheckReport:
    """Compare tape gradients of every tensor in `tensors` to central differences.

    loss_fn must rebuild the scalar loss from the tensors' current data on
    each call (pure given the data). With samples_per_tensor=None every
    coordinate is checked; otherwise that many coordinates per tensor are
    drawn without replacement from a seeded generator — the way to keep a
    full-model check inside a time budget.

    Central differences are meaningless across a relu kink, so with
    smooth_guard on, a coordinate whose +h/-h evaluations activate
    different relu branches is skipped and counted instead of compared.
    """
    for name, t in tensors.items():
        if t.dtype != np.float64:
            raise ValueError(f"grad_check requires float64 tensors, {name} is {t.dtype}")
        t.requires_grad = True
        t.zero_grad()

    with Tape() as tape:
        loss = loss_fn()
        if not np.isfinite(loss.item()):
            raise NonFiniteError("loss is not finite")
        tape.backward(loss, params=tensors.values())
    analytic = {name: t.grad.copy() for name, t in tensors.items()}

    rng = np.random.default_rng(seed)
    report = GradCheckReport()
    for name, t in tensors.items():
        flat = t.data.reshape(-1)
        if samples_per_tensor is None or samples_per_tensor >= flat.size:
            idxs = range(flat.size)
        else:
            idxs = rng.choice(flat.size, size=samples_per_tensor, replace=False)
        worst = 0.0
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + h
            f1, s1 = _eval_with_signature(loss_fn)
            flat[i] = orig - h
            f2, s2 = _eval_with_signature(loss_fn)
            flat[i] = orig
            if not (np.isfinite(f1) and np.isfinite(f2)):
                raise NonFiniteError(f"non-finite loss while perturbing {name}[{i}]")
            if smooth_guard and s1 != s2:
                report.skipped_kinks += 1
                continue
            num = (f1 - f2) / (2.0 * h)
            ana = analytic[name].reshape(-1)[i]
            err = abs(ana - num) / max(1.0, abs(ana), abs(num))
            report.checked += 1
            worst = max(worst, err)
            if err > report.max_rel_err:
                report.max_rel_err = err
                report.worst_tensor = name
                report.worst_index = int(i)
                report.worst_analytic = float(ana)
                report.worst_numeric = float(num)
        report.per_tensor[name] = worst
    return report
