"""Desk-scale training and inference loops.

Randomness is derived functionally from (seed, epoch, index) rather than
from a stateful stream, so resuming from a checkpoint replays exactly
the batches and augmentations an uninterrupted run would have seen.
Supervision labels are generated inline when missing and cached next to
the ground truth (``<stem>_grad.png`` / ``<stem>_bound.png``); a cached
file whose size disagrees with the training resolution is recomputed in
memory without touching the file.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .data import DatasetManifest, Sample, load_map, load_sample, save_map
from .gradlabel import CannyParams, boundary_label, object_gradient_label
from .losses import total_loss
from .model import (
    Model,
    ModelConfig,
    load_checkpoint,
    model_from_checkpoint,
    save_checkpoint,
)
from .tensor import AdamState, Tape, Tensor, adam_step, cosine_lr
from .tensor.ops import bilinear_resize_array, resize_nearest, sigmoid

RNG_SHUFFLE = 21
RNG_AUG = 22


@dataclass
class TrainConfig:
    model: ModelConfig
    epochs: int = 20
    batch: int = 4
    lr_min: float = 1e-5
    lr_max: float = 1e-4
    period: int = 20
    seed: int = 0
    hflip: bool = True
    crop: bool = True
    out_dir: Path = Path("runs/train")
    canny: CannyParams = field(default_factory=CannyParams)
    resume: Optional[Path] = None

    def validate(self) -> None:
        self.model.validate()
        if not (0 < self.lr_min < self.lr_max):
            raise ValueError("need 0 < lr_min < lr_max")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")

    def to_kv(self) -> dict[str, str]:
        kv = {f"model.{k}": v for k, v in self.model.to_kv().items()}
        kv.update({
            "train.epochs": str(self.epochs),
            "train.batch": str(self.batch),
            "train.lr_min": repr(self.lr_min),
            "train.lr_max": repr(self.lr_max),
            "train.period": str(self.period),
            "train.seed": str(self.seed),
            "train.hflip": "1" if self.hflip else "0",
            "train.crop": "1" if self.crop else "0",
        })
        return kv


def toy_train_config(out_dir, seed: int = 0, **overrides) -> TrainConfig:
    """Desk recipe: width-8 model at 96x96, raised learning rate.

    The production schedule's 1e-5/1e-4 rates assume a pretrained
    backbone being fine-tuned; training from random initialization at
    toy scale needs roughly 80x larger steps to make visible progress
    within a couple hundred iterations.
    """
    from .model import toy_config

    base = dict(
        model=toy_config(),
        epochs=13,
        batch=4,
        lr_min=8e-4,
        lr_max=8e-3,
        seed=seed,
        out_dir=Path(out_dir),
    )
    base.update(overrides)
    return TrainConfig(**base)


@dataclass
class TrainResult:
    checkpoint_path: Path
    best_path: Path
    log_path: Path
    rows: list[tuple]  # (iteration, lr, wbce, wiou, mse, total)
    initial_total: float
    final_total: float


def _label_cache_path(sample: Sample, kind: str) -> Optional[Path]:
    if sample.mask_path is None:
        return None
    return sample.mask_path.with_name(f"{sample.mask_path.stem}_{kind}.png")


def attach_labels(sample: Sample, size: int, params: CannyParams,
                  need_boundary: bool, write_cache: bool = True) -> None:
    """Fill gradient (and optionally boundary) labels, using the disk cache."""
    kinds = ["grad"] + (["bound"] if need_boundary else [])
    for kind in kinds:
        cache = _label_cache_path(sample, kind)
        label = None
        if cache is not None and cache.exists():
            arr = load_map(cache)
            if arr.shape == (size, size):
                label = Tensor((arr >= 0.5).astype(np.float32)[None])
        if label is None:
            if kind == "grad":
                label = object_gradient_label(sample.image, sample.mask, params)
            else:
                label = boundary_label(sample.mask)
            if write_cache and cache is not None and not cache.exists():
                save_map(label, cache)
        if kind == "grad":
            sample.gradient_label = label
        else:
            sample.boundary_label = label


def load_training_set(manifest: DatasetManifest, cfg: TrainConfig) -> list[Sample]:
    if len(manifest) == 0:
        raise ValueError("empty manifest")
    size = cfg.model.input_size
    need_boundary = cfg.model.supervision == "boundary"
    samples = []
    for img_path, gt_path in manifest.pairs:
        s = load_sample(img_path, gt_path, target_size=size)
        if cfg.model.texture_branch:
            attach_labels(s, size, cfg.canny, need_boundary)
        samples.append(s)
    return samples


def _augment(image: np.ndarray, mask: np.ndarray, label: Optional[np.ndarray],
             rng: np.random.Generator, hflip: bool, crop: bool):
    if hflip and rng.random() < 0.5:
        image = image[:, :, ::-1]
        mask = mask[:, :, ::-1]
        label = label[:, :, ::-1] if label is not None else None
    if crop:
        h, w = image.shape[1:]
        scale = rng.uniform(0.75, 1.0)
        ch, cw = max(1, int(round(h * scale))), max(1, int(round(w * scale)))
        top = int(rng.integers(0, h - ch + 1))
        left = int(rng.integers(0, w - cw + 1))
        img_c = image[:, top : top + ch, left : left + cw]
        msk_c = mask[:, top : top + ch, left : left + cw]
        image = bilinear_resize_array(np.ascontiguousarray(img_c), h, w)
        mask = (resize_nearest(np.ascontiguousarray(msk_c), h, w) >= 0.5).astype(np.float32)
        if label is not None:
            lab_c = label[:, top : top + ch, left : left + cw]
            label = (resize_nearest(np.ascontiguousarray(lab_c), h, w) >= 0.5).astype(np.float32)
        # keep the masking invariant: labels never leave the object
        if label is not None:
            label = label * mask
    return (np.ascontiguousarray(image, dtype=np.float32),
            np.ascontiguousarray(mask, dtype=np.float32),
            np.ascontiguousarray(label, dtype=np.float32) if label is not None else None)


def train(cfg: TrainConfig, manifest: DatasetManifest) -> TrainResult:
    cfg.validate()
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = out_dir / "checkpoint.ckpt"
    best_path = out_dir / "checkpoint_best.ckpt"
    log_path = out_dir / "loss_log.csv"

    samples = load_training_set(manifest, cfg)
    model = Model(cfg.model, seed=cfg.seed)
    state = AdamState(lr_min=cfg.lr_min, lr_max=cfg.lr_max, period=cfg.period)
    start_epoch = 0
    iteration = 0

    if cfg.resume is not None:
        kv, tensors = load_checkpoint(cfg.resume)
        model.load_state(tensors)
        state.step = int(kv.get("opt.step", "0"))
        start_epoch = int(kv.get("train.next_epoch", "0"))
        iteration = int(kv.get("train.iteration", "0"))
        for name in model.params:
            m = tensors.get(f"opt.m.{name}")
            v = tensors.get(f"opt.v.{name}")
            if m is not None and v is not None:
                state.m[name] = m.astype(model.dtype).copy()
                state.v[name] = v.astype(model.dtype).copy()

    def snapshot_kv(next_epoch: int) -> dict[str, str]:
        kv = cfg.to_kv()
        kv["format"] = "1"
        kv["opt.step"] = str(state.step)
        kv["train.next_epoch"] = str(next_epoch)
        kv["train.iteration"] = str(iteration)
        return kv

    def snapshot_tensors() -> dict[str, np.ndarray]:
        tensors = model.state_tensors()
        for name in model.params:
            if name in state.m:
                tensors[f"opt.m.{name}"] = state.m[name]
                tensors[f"opt.v.{name}"] = state.v[name]
        return tensors

    uses_texture = cfg.model.texture_branch
    label_attr = "boundary_label" if cfg.model.supervision == "boundary" else "gradient_label"
    rows: list[tuple] = []
    best_epoch_loss = np.inf
    n = len(samples)

    mode = "a" if cfg.resume is not None and log_path.exists() else "w"
    with open(log_path, mode, newline="\n") as logf:
        log = csv.writer(logf, lineterminator="\n")
        if mode == "w":
            log.writerow(["iteration", "lr", "wbce", "wiou", "mse", "total"])
        for epoch in range(start_epoch, cfg.epochs):
            lr = cosine_lr(epoch, cfg.lr_min, cfg.lr_max, cfg.period)
            order = np.random.default_rng((RNG_SHUFFLE, cfg.seed, epoch)).permutation(n)
            epoch_losses = []
            for b0 in range(0, n, cfg.batch):
                idxs = order[b0 : b0 + cfg.batch]
                imgs, masks, labels = [], [], []
                for j in idxs:
                    s = samples[j]
                    lab = getattr(s, label_attr).data if uses_texture else None
                    rng = np.random.default_rng((RNG_AUG, cfg.seed, epoch, int(j)))
                    img, msk, lab = _augment(s.image.data, s.mask.data, lab, rng,
                                             cfg.hflip, cfg.crop)
                    imgs.append(img)
                    masks.append(msk)
                    labels.append(lab)
                xb = Tensor(np.stack(imgs))
                gb = Tensor(np.stack(masks))
                zb = Tensor(np.stack(labels)) if uses_texture else None

                with Tape() as tape:
                    pc, pg = model.forward(xb, training=True)
                    lb = total_loss(pc, gb, pg, zb)
                    if not np.isfinite(lb.total):
                        raise RuntimeError(f"non-finite loss at iteration {iteration}")
                    tape.backward(lb.tensor, params=model.params.values())
                adam_step(model.params, state, lr)
                for p in model.params.values():
                    p.zero_grad()

                row = (iteration, lr, lb.wbce, lb.wiou, lb.mse, lb.total)
                rows.append(row)
                log.writerow([row[0]] + [f"{v:.6f}" for v in row[1:]])
                epoch_losses.append(lb.total)
                iteration += 1

            if epoch_losses and float(np.mean(epoch_losses)) < best_epoch_loss:
                best_epoch_loss = float(np.mean(epoch_losses))
                save_checkpoint(best_path, snapshot_kv(epoch + 1), snapshot_tensors())

    save_checkpoint(ckpt_path, snapshot_kv(cfg.epochs), snapshot_tensors())
    if not best_path.exists():
        save_checkpoint(best_path, snapshot_kv(cfg.epochs), snapshot_tensors())
    return TrainResult(
        checkpoint_path=ckpt_path,
        best_path=best_path,
        log_path=log_path,
        rows=rows,
        initial_total=rows[0][5] if rows else float("nan"),
        final_total=rows[-1][5] if rows else float("nan"),
    )


def infer(checkpoint_path, image_dir, out_dir) -> list[Path]:
    """Run the segmentation head over a directory; one PNG per image."""
    model, kv, _ = model_from_checkpoint(checkpoint_path)
    size = model.config.input_size
    image_dir, out_dir = Path(image_dir), Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    paths = sorted(
        p for p in image_dir.iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg")
    )
    if not paths:
        raise FileNotFoundError(f"no images under {image_dir}")
    from .data import load_image  # cycle-free local import

    for p in paths:
        img = load_image(p)
        img = bilinear_resize_array(img, size, size)
        pc, _ = model.forward(Tensor(img[None].astype(np.float32)), training=False)
        prob = sigmoid(pc).data[0, 0]
        dest = out_dir / f"{p.stem}.png"
        save_map(prob, dest)
        written.append(dest)
    return written
