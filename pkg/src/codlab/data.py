"""Dataset I/O and the synthetic camouflage generator.

Directory layout follows the public COD convention — ``Imgs/*.png|jpg``
with ground truth in ``GT/*.png`` under the same stem — so a real
dataset drop works unchanged. Label files emitted next to the ground
truth use the ``_grad.png`` / ``_bound.png`` suffixes and are excluded
from mask discovery.

The generator needs no downloads: backgrounds are multi-octave value
noise, objects are unions of 1-3 random ellipses filled with the same
noise family, phase-shifted and contrast-perturbed so they blend in.
Generation is deterministic per (seed, index), which keeps parallel
generation byte-identical.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from .tensor import Tensor
from .tensor.ops import bilinear_resize_array, resize_nearest

LABEL_SUFFIXES = ("_grad", "_bound")

# substream tags for per-purpose RNG derivation
RNG_SYNTH = 11


@dataclass
class Sample:
    """An image / mask / derived-label triple."""

    id: str
    image: Tensor  # (3,H,W) float32 in [0,1]
    mask: Tensor  # (1,H,W) float32 in {0,1}
    gradient_label: Optional[Tensor] = None
    boundary_label: Optional[Tensor] = None
    image_path: Optional[Path] = None
    mask_path: Optional[Path] = None


def load_image(path) -> np.ndarray:
    """Decode to RGB, scale to [0,1]; (3,H,W) float32."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    if arr.size == 0:
        raise ValueError(f"size-zero image: {path}")
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def load_mask(path) -> np.ndarray:
    """Decode a mask to (1,H,W) float32 {0,1}, thresholded at 128/255."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    if arr.size == 0:
        raise ValueError(f"size-zero mask: {path}")
    return (arr >= 128).astype(np.float32)[None]


def load_sample(image_path, mask_path, target_size: Optional[int] = None) -> Sample:
    """Load an (image, mask) pair; bilinear image resize, nearest for the mask."""
    img = load_image(image_path)
    mask = load_mask(mask_path)
    if img.shape[1:] != mask.shape[1:]:
        raise ValueError(
            f"image {img.shape[1:]} and mask {mask.shape[1:]} sizes differ "
            f"for stem {Path(image_path).stem!r}"
        )
    if target_size is not None:
        img = bilinear_resize_array(img, target_size, target_size)
        mask = resize_nearest(mask, target_size, target_size)
        mask = (mask >= 0.5).astype(np.float32)
    return Sample(
        id=Path(image_path).stem,
        image=Tensor(np.clip(img, 0.0, 1.0).astype(np.float32)),
        mask=Tensor(mask),
        image_path=Path(image_path),
        mask_path=Path(mask_path),
    )


def save_map(arr, path) -> None:
    """Write a [0,1] map as 8-bit grayscale PNG, value = round(255*v)."""
    a = arr.data if isinstance(arr, Tensor) else np.asarray(arr)
    a = a.reshape(a.shape[-2:])
    q = np.rint(np.clip(a, 0.0, 1.0) * 255.0).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(q, mode="L").save(path, format="PNG")


def load_map(path) -> np.ndarray:
    """Read an 8-bit grayscale PNG back to (H,W) float in [0,1]."""
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.float64) / 255.0


def _is_label_file(stem: str) -> bool:
    return any(stem.endswith(s) for s in LABEL_SUFFIXES)


@dataclass
class DatasetManifest:
    """Stem-matched (image, mask) path pairs with a resize target."""

    root: Path
    pairs: list[tuple[Path, Path]] = field(default_factory=list)
    target_size: int = 352

    def __len__(self):
        return len(self.pairs)

    @staticmethod
    def discover(root, target_size: int = 352) -> "DatasetManifest":
        root = Path(root)
        img_dir, gt_dir = root / "Imgs", root / "GT"
        if not img_dir.is_dir() or not gt_dir.is_dir():
            raise FileNotFoundError(f"expected {img_dir} and {gt_dir}")
        images = {}
        for p in sorted(img_dir.iterdir()):
            if p.suffix.lower() in (".png", ".jpg", ".jpeg") and not _is_label_file(p.stem):
                images[p.stem] = p
        pairs = []
        for stem in sorted(images):
            gt = gt_dir / f"{stem}.png"
            if not gt.exists():
                raise FileNotFoundError(f"no ground truth for stem {stem!r} ({gt})")
            pairs.append((images[stem], gt))
        if not pairs:
            raise FileNotFoundError(f"no image/mask pairs under {root}")
        return DatasetManifest(root=root, pairs=pairs, target_size=target_size)

    def to_file(self, path) -> None:
        lines = [
            f"{img.relative_to(self.root)}\t{gt.relative_to(self.root)}"
            for img, gt in self.pairs
        ]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")

    @staticmethod
    def from_file(path, root=None, target_size: int = 352) -> "DatasetManifest":
        path = Path(path)
        root = Path(root) if root is not None else path.parent
        pairs = []
        for line in path.read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            img_rel, gt_rel = line.split("\t")
            img, gt = root / img_rel, root / gt_rel
            if not img.exists() or not gt.exists():
                raise FileNotFoundError(f"manifest entry missing on disk: {line}")
            pairs.append((img, gt))
        pairs.sort(key=lambda p: p[0].stem)
        return DatasetManifest(root=root, pairs=pairs, target_size=target_size)


# ---------------------------------------------------------------------------
# synthetic camouflage
# ---------------------------------------------------------------------------


def _value_noise(rng: np.random.Generator, size: int, base: int = 4, octaves: int = 4) -> np.ndarray:
    """Multi-octave value noise in [0,1], smooth at every scale."""
    acc = np.zeros((size, size))
    amp, total = 1.0, 0.0
    for o in range(octaves):
        res = base << o
        grid = rng.random((res + 1, res + 1))
        acc += amp * bilinear_resize_array(grid, size, size)
        total += amp
        amp *= 0.5
    acc /= total
    lo, hi = acc.min(), acc.max()
    return (acc - lo) / (hi - lo) if hi > lo else np.full_like(acc, 0.5)


def _ellipse_mask(size: int, cy, cx, ay, ax, theta) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    return (u * u) / (ax * ax) + (v * v) / (ay * ay) <= 1.0


def synth_sample(seed: int, index: int, size: int) -> tuple[np.ndarray, np.ndarray]:
    """One deterministic camouflage sample: ((3,H,W) image, (1,H,W) mask).

    Object area always lands in [5%, 50%] of the frame.
    """
    if size < 32:
        raise ValueError("size must be >= 32")
    rng = np.random.default_rng((RNG_SYNTH, seed, index))
    bg = _value_noise(rng, size)

    # object texture: same family, shifted phase, perturbed contrast;
    # the perturbation is kept away from identity so every object leaves
    # at least a faint statistical trace to learn from
    obj = _value_noise(rng, size)
    obj = np.roll(obj, (int(rng.integers(size)), int(rng.integers(size))), axis=(0, 1))
    contrast = rng.uniform(0.65, 0.9) if rng.random() < 0.5 else rng.uniform(1.1, 1.35)
    shift = rng.choice((-1.0, 1.0)) * rng.uniform(0.06, 0.18)
    obj = np.clip(0.5 + (obj - 0.5) * contrast + shift, 0.0, 1.0)

    area = 0.0
    mask = None
    while not (0.05 <= area <= 0.50):
        mask = np.zeros((size, size), dtype=bool)
        for _ in range(int(rng.integers(1, 4))):
            cy, cx = rng.uniform(0.25 * size, 0.75 * size, size=2)
            ay, ax = rng.uniform(0.10 * size, 0.35 * size, size=2)
            mask |= _ellipse_mask(size, cy, cx, ay, ax, rng.uniform(0.0, np.pi))
        area = mask.mean()

    gray = np.where(mask, obj, bg)
    tints = rng.uniform(-0.05, 0.05, size=3)
    image = np.clip(gray[None] + tints[:, None, None], 0.0, 1.0).astype(np.float32)
    return image, mask.astype(np.float32)[None]


def synth_generate(n: int, size: int, seed: int, out_dir) -> DatasetManifest:
    """Write n synthetic (image, mask) PNG pairs under out_dir/Imgs, out_dir/GT."""
    out_dir = Path(out_dir)
    (out_dir / "Imgs").mkdir(parents=True, exist_ok=True)
    (out_dir / "GT").mkdir(parents=True, exist_ok=True)
    pairs = []
    for i in range(n):
        image, mask = synth_sample(seed, i, size)
        stem = f"synth_{i:04d}"
        img_path = out_dir / "Imgs" / f"{stem}.png"
        gt_path = out_dir / "GT" / f"{stem}.png"
        rgb = np.rint(image.transpose(1, 2, 0) * 255.0).astype(np.uint8)
        Image.fromarray(rgb, mode="RGB").save(img_path, format="PNG")
        save_map(mask, gt_path)
        pairs.append((img_path, gt_path))
    return DatasetManifest(root=out_dir, pairs=pairs, target_size=size)
