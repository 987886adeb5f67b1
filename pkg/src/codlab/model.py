"""The two-branch segmentation network at configurable scale.

Structure: a small strided context backbone whose top three pyramid
levels (strides 8/16/32) are each reduced to ``ci`` channels by two
stacked ConvBR blocks; a shallow four-layer texture encoder running at
stride 8; a grouped fusion stage that interleaves texture and context
channel groups and projects the result through parallel grouped 1x1
ConvBR branches with a residual back onto the context feature; and a
neighbor-connection decoder producing full-resolution logits.

ConvBR means convolution (no bias) + batch norm + ReLU. The fusion
projections are the one exception: their 1x1 convs carry biases because
no normalization precedes the regrouped input.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .tensor import Tensor
from .tensor.ops import (
    add,
    batchnorm2d,
    concat_channels,
    conv2d,
    macs_counter,
    mul,
    relu,
    resize_bilinear,
    split_channels,
    _active_macs,
)

RNG_INIT = 7

FUSION_MODES = ("git", "concat")
SUPERVISION_MODES = ("gradient", "boundary")


@dataclass(frozen=True)
class ModelConfig:
    """All architecture knobs; defaults are the small production variant."""

    ci: int = 32
    cg: int = 32
    m: int = 8
    n_set: tuple[int, ...] = (8, 16, 32)
    backbone_widths: tuple[int, ...] = (16, 24, 40, 112, 320)
    tex_widths: tuple[int, int] = (64, 64)
    input_size: int = 352
    texture_branch: bool = True
    fusion: str = "git"
    supervision: str = "gradient"

    def validate(self) -> None:
        if self.ci < 1 or self.cg < 1 or self.m < 1:
            raise ValueError("ci, cg and m must be positive")
        if self.ci % self.m or self.cg % self.m:
            raise ValueError(f"group count m={self.m} must divide ci={self.ci} and cg={self.cg}")
        for n in self.n_set:
            if (self.ci + self.cg) % n or self.ci % n:
                raise ValueError(f"scaling factor N={n} must divide ci+cg={self.ci + self.cg} and ci={self.ci}")
        if len(self.backbone_widths) != 5:
            raise ValueError("backbone needs exactly five stage widths")
        if self.input_size % 32:
            raise ValueError(f"input_size={self.input_size} must be divisible by 32")
        if self.fusion not in FUSION_MODES:
            raise ValueError(f"fusion must be one of {FUSION_MODES}")
        if self.supervision not in SUPERVISION_MODES:
            raise ValueError(f"supervision must be one of {SUPERVISION_MODES}")

    def to_kv(self) -> dict[str, str]:
        return {
            "ci": str(self.ci),
            "cg": str(self.cg),
            "m": str(self.m),
            "n_set": ",".join(map(str, self.n_set)),
            "backbone_widths": ",".join(map(str, self.backbone_widths)),
            "tex_widths": ",".join(map(str, self.tex_widths)),
            "input_size": str(self.input_size),
            "texture_branch": "1" if self.texture_branch else "0",
            "fusion": self.fusion,
            "supervision": self.supervision,
        }

    @staticmethod
    def from_kv(kv: dict[str, str]) -> "ModelConfig":
        def ints(s):
            return tuple(int(v) for v in s.split(",") if v)

        cfg = ModelConfig(
            ci=int(kv["ci"]),
            cg=int(kv["cg"]),
            m=int(kv["m"]),
            n_set=ints(kv["n_set"]),
            backbone_widths=ints(kv["backbone_widths"]),
            tex_widths=ints(kv["tex_widths"]),  # type: ignore[arg-type]
            input_size=int(kv["input_size"]),
            texture_branch=kv["texture_branch"] == "1",
            fusion=kv["fusion"],
            supervision=kv["supervision"],
        )
        cfg.validate()
        return cfg


def dgnet_s_config(**overrides) -> ModelConfig:
    return ModelConfig(**overrides)


def dgnet_config(**overrides) -> ModelConfig:
    base = dict(ci=64, cg=32, n_set=(4, 8, 16))
    base.update(overrides)
    return ModelConfig(**base)


def toy_config(**overrides) -> ModelConfig:
    """Width-8 desk configuration: trains on CPU in seconds."""
    base = dict(
        ci=8,
        cg=8,
        m=2,
        n_set=(2, 4),
        backbone_widths=(8, 8, 8, 8, 8),
        tex_widths=(8, 8),
        input_size=96,
    )
    base.update(overrides)
    return ModelConfig(**base)


class ConvBR:
    """conv (+ optional bias) -> batch norm -> ReLU."""

    def __init__(self, model: "Model", name: str, cin: int, cout: int, k: int,
                 stride: int = 1, pad: Optional[int] = None, groups: int = 1,
                 bias: bool = False):
        self.name = name
        self.stride = stride
        self.pad = (k - 1) // 2 if pad is None else pad
        self.groups = groups
        self.w = model.new_param(f"{name}.conv.w", model.he_normal((cout, cin // groups, k, k)))
        self.b = model.new_param(f"{name}.conv.b", np.zeros(cout)) if bias else None
        self.gamma = model.new_param(f"{name}.bn.gamma", np.ones(cout))
        self.beta = model.new_param(f"{name}.bn.beta", np.zeros(cout))
        self.rm = model.new_buffer(f"{name}.bn.running_mean", np.zeros(cout))
        self.rv = model.new_buffer(f"{name}.bn.running_var", np.ones(cout))

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        counter = _active_macs()
        if counter is not None:
            counter.set_scope(self.name)
        y = conv2d(x, self.w, self.b, stride=self.stride, pad=self.pad, groups=self.groups)
        y = batchnorm2d(y, self.gamma, self.beta, self.rm, self.rv, training=training)
        return relu(y)


class Conv1x1:
    """Plain biased 1x1 convolution (the prediction heads)."""

    def __init__(self, model: "Model", name: str, cin: int, cout: int):
        self.name = name
        self.w = model.new_param(f"{name}.conv.w", model.he_normal((cout, cin, 1, 1)))
        self.b = model.new_param(f"{name}.conv.b", np.zeros(cout))

    def __call__(self, x: Tensor) -> Tensor:
        counter = _active_macs()
        if counter is not None:
            counter.set_scope(self.name)
        return conv2d(x, self.w, self.b)


class Model:
    """Parameter registry plus the forward graph."""

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32):
        config.validate()
        self.config = config
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self._rng = np.random.default_rng((RNG_INIT, seed))
        self._build()
        del self._rng

    # -- registration -------------------------------------------------

    def he_normal(self, shape) -> np.ndarray:
        fan_in = int(np.prod(shape[1:]))
        return self._rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)

    def new_param(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.params:
            raise ValueError(f"duplicate parameter {name}")
        t = Tensor(value.astype(self.dtype), requires_grad=True)
        self.params[name] = t
        return t

    def new_buffer(self, name: str, value: np.ndarray) -> np.ndarray:
        if name in self.buffers:
            raise ValueError(f"duplicate buffer {name}")
        arr = value.astype(self.dtype)
        self.buffers[name] = arr
        return arr

    # -- construction --------------------------------------------------

    def _build(self) -> None:
        cfg = self.config
        ci, cg = cfg.ci, cfg.cg

        widths = cfg.backbone_widths
        self.stages = []
        cin = 3
        for i, wdt in enumerate(widths, start=1):
            self.stages.append(ConvBR(self, f"backbone.stage{i}", cin, wdt, k=3, stride=2))
            cin = wdt

        # two stacked 3x3 ConvBR per tapped level, both emitting ci channels
        self.reduce = {}
        for lvl, wdt in zip((3, 4, 5), widths[2:]):
            self.reduce[lvl] = (
                ConvBR(self, f"reduce{lvl}.a", wdt, ci, k=3),
                ConvBR(self, f"reduce{lvl}.b", ci, ci, k=3),
            )

        if cfg.texture_branch:
            t1, t2 = cfg.tex_widths
            self.texture = [
                ConvBR(self, "texture.l1", 3, t1, k=7, stride=2, pad=3),
                ConvBR(self, "texture.l2", t1, t2, k=3, stride=2),
                ConvBR(self, "texture.l3", t2, cg, k=3, stride=2),
                ConvBR(self, "texture.l4", cg, 1, k=1, stride=1, pad=0),
            ]
            if cfg.fusion == "git":
                self.git = {
                    lvl: {
                        n: ConvBR(self, f"git{lvl}.n{n}", ci + cg, ci, k=1, pad=0,
                                  groups=n, bias=True)
                        for n in cfg.n_set
                    }
                    for lvl in (3, 4, 5)
                }
            else:
                self.fuse = {
                    lvl: ConvBR(self, f"fuse{lvl}", ci + cg, ci, k=1, pad=0)
                    for lvl in (3, 4, 5)
                }

        self.ncd_gate54 = ConvBR(self, "ncd.gate54", ci, ci, k=3)
        self.ncd_gate43 = ConvBR(self, "ncd.gate43", ci, ci, k=3)
        self.ncd_gate53 = ConvBR(self, "ncd.gate53", ci, ci, k=3)
        self.ncd_fuse4 = ConvBR(self, "ncd.fuse4", 2 * ci, ci, k=3)
        self.ncd_fuse3 = ConvBR(self, "ncd.fuse3", 2 * ci, ci, k=3)
        self.head = Conv1x1(self, "ncd.head", ci, 1)

    # -- forward paths --------------------------------------------------

    def context_forward(self, x: Tensor, training: bool = False) -> dict[int, Tensor]:
        """Reduced pyramid features at strides 8/16/32, ci channels each."""
        h, w = x.shape[2], x.shape[3]
        if h % 32 or w % 32:
            raise ValueError(f"input {h}x{w} must be divisible by 32")
        feats = {}
        y = x
        for i, stage in enumerate(self.stages, start=1):
            y = stage(y, training)
            if i >= 3:
                feats[i] = y
        out = {}
        for lvl in (3, 4, 5):
            a, b = self.reduce[lvl]
            out[lvl] = b(a(feats[lvl], training), training)
        return out

    def texture_forward(self, x: Tensor, training: bool = False) -> tuple[Tensor, Tensor]:
        """(texture feature at stride 8, gradient prediction at stride 8)."""
        if not self.config.texture_branch:
            raise ValueError("model was built without a texture branch")
        h, w = x.shape[2], x.shape[3]
        if h % 8 or w % 8:
            raise ValueError(f"input {h}x{w} must be divisible by 8")
        y = x
        for layer in self.texture[:3]:
            y = layer(y, training)
        xg = y
        pg = self.texture[3](xg, training)
        return xg, pg

    def git_transition(self, lvl: int, xr: Tensor, xg: Tensor, training: bool = False) -> Tensor:
        """Residual grouped fusion; output shape equals the context feature."""
        q = git_regroup(xr, xg, self.config.m)
        out = xr
        for n in self.config.n_set:
            out = add(out, self.git[lvl][n](q, training))
        return out

    def ncd_decode(self, zt3: Tensor, zt4: Tensor, zt5: Tensor,
                   training: bool = False, out_hw: Optional[tuple[int, int]] = None) -> Tensor:
        """High-to-low gated aggregation; returns full-resolution logits."""
        for t in (zt4, zt5):
            if t.shape[1] != zt3.shape[1]:
                raise ValueError("decoder inputs must share the channel count")
        h3, w3 = zt3.shape[2], zt3.shape[3]
        h4, w4 = zt4.shape[2], zt4.shape[3]
        g4 = mul(zt4, resize_bilinear(self.ncd_gate54(zt5, training), h4, w4))
        g3 = mul(
            mul(zt3, resize_bilinear(self.ncd_gate43(g4, training), h3, w3)),
            resize_bilinear(self.ncd_gate53(zt5, training), h3, w3),
        )
        d5 = zt5
        d4 = self.ncd_fuse4(concat_channels([g4, resize_bilinear(d5, h4, w4)]), training)
        d3 = self.ncd_fuse3(concat_channels([g3, resize_bilinear(d4, h3, w3)]), training)
        logits = self.head(d3)
        if out_hw is None:
            out_hw = (8 * h3, 8 * w3)
        return resize_bilinear(logits, out_hw[0], out_hw[1])

    def forward(self, x: Tensor, training: bool = False) -> tuple[Tensor, Optional[Tensor]]:
        """Full pipeline: (segmentation logits at input size, gradient map or None)."""
        cfg = self.config
        feats = self.context_forward(x, training)
        pg = None
        if cfg.texture_branch:
            xg, pg = self.texture_forward(x, training)
        zts = {}
        for lvl in (3, 4, 5):
            xr = feats[lvl]
            if not cfg.texture_branch:
                zts[lvl] = xr
            elif cfg.fusion == "git":
                zts[lvl] = self.git_transition(lvl, xr, xg, training)
            else:
                xg_ds = resize_bilinear(xg, xr.shape[2], xr.shape[3])
                zts[lvl] = self.fuse[lvl](concat_channels([xg_ds, xr]), training)
        pc = self.ncd_decode(zts[3], zts[4], zts[5], training, out_hw=(x.shape[2], x.shape[3]))
        return pc, pg

    # -- state ----------------------------------------------------------

    def state_tensors(self) -> dict[str, np.ndarray]:
        state = {f"param.{k}": v.data for k, v in self.params.items()}
        state.update({f"buf.{k}": v for k, v in self.buffers.items()})
        return state

    def load_state(self, tensors: dict[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            arr = tensors.get(f"param.{k}")
            if arr is None:
                raise KeyError(f"checkpoint misses parameter {k}")
            if arr.shape != p.data.shape:
                raise ValueError(f"shape mismatch for {k}: {arr.shape} vs {p.data.shape}")
            p.data = arr.astype(self.dtype)
        for k, b in self.buffers.items():
            arr = tensors.get(f"buf.{k}")
            if arr is None:
                raise KeyError(f"checkpoint misses buffer {k}")
            b[...] = arr.astype(self.dtype)


def git_regroup(xr: Tensor, xg: Tensor, m: int) -> Tensor:
    """Interleave m texture and context channel groups: [g1|r1|g2|r2|...].

    The texture feature is resized to the context feature's grid first;
    each texture group carries cg/m channels, each context group ci/m.
    With m=1 this is a plain concatenation of the resized texture feature
    with the context feature.
    """
    if xr.shape[1] % m or xg.shape[1] % m:
        raise ValueError(f"m={m} must divide context ({xr.shape[1]}) and texture ({xg.shape[1]}) channels")
    xg_ds = resize_bilinear(xg, xr.shape[2], xr.shape[3])
    if m == 1:
        return concat_channels([xg_ds, xr])
    gs = split_channels(xg_ds, m)
    rs = split_channels(xr, m)
    pieces = []
    for g, r in zip(gs, rs):
        pieces.append(g)
        pieces.append(r)
    return concat_channels(pieces)


def regroup_permutation(ci: int, cg: int, m: int) -> np.ndarray:
    """Channel index map: output channel -> source channel of concat([xg, xr]).

    Source channels 0..cg-1 are texture, cg..cg+ci-1 are context. The map
    is a bijection; its inverse recovers the original block layout.
    """
    kg, ki = cg // m, ci // m
    order = []
    for g in range(m):
        order.extend(range(g * kg, (g + 1) * kg))
        order.extend(range(cg + g * ki, cg + (g + 1) * ki))
    return np.asarray(order)


def build_model(config: ModelConfig, seed: int = 0, dtype=np.float32) -> Model:
    """Deterministic construction: same seed, same parameter bytes."""
    return Model(config, seed=seed, dtype=dtype)


# ---------------------------------------------------------------------------
# accounting
# ---------------------------------------------------------------------------


def count_params(model: Model, prefix: str = "") -> int:
    """Total learnable scalars (conv weights/biases and BN affine)."""
    return sum(t.size for name, t in model.params.items() if name.startswith(prefix))


def param_breakdown(model: Model) -> dict[str, int]:
    out: dict[str, int] = {}
    for name, t in model.params.items():
        scope = name.split(".")[0]
        out[scope] = out.get(scope, 0) + t.size
    return out


def count_macs(model: Model, h: Optional[int] = None, w: Optional[int] = None,
               breakdown: bool = False):
    """Multiply-accumulates of one forward pass at (h, w), batch 1.

    Conv layers only (the flops-counter convention); runs the real graph
    in shape-only mode so no matmul is actually executed.
    """
    h = model.config.input_size if h is None else h
    w = h if w is None else w
    x = Tensor(np.zeros((1, 3, h, w), dtype=model.dtype))
    with macs_counter(shape_only=True) as counter:
        model.forward(x, training=False)
    if breakdown:
        scoped: dict[str, int] = {}
        for name, macs in counter.by_scope.items():
            scope = name.split(".")[0]
            scoped[scope] = scoped.get(scope, 0) + macs
        return counter.total, scoped
    return counter.total


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"DGLB"
CHECKPOINT_VERSION = 1
_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_DTYPE_IDS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def save_checkpoint(path, config_kv: dict[str, str], tensors: dict[str, np.ndarray]) -> None:
    """Versioned named-tensor container; writing is byte-deterministic.

    Layout: magic "DGLB", u16 version, u32 length + UTF-8 "key=value"
    lines (sorted), then per-tensor records (u16 name length, name,
    u8 dtype code, u8 ndim, u32 dims, raw little-endian values) sorted
    by name until end of file.
    """
    cfg_text = "".join(f"{k}={config_kv[k]}\n" for k in sorted(config_kv))
    cfg_bytes = cfg_text.encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<H", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(cfg_bytes)))
        f.write(cfg_bytes)
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name])
            if arr.dtype not in _DTYPE_IDS:
                raise ValueError(f"tensor {name} has unsupported dtype {arr.dtype}")
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<BB", _DTYPE_IDS[arr.dtype], arr.ndim))
            for d in arr.shape:
                f.write(struct.pack("<I", d))
            f.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def load_checkpoint(path) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<H", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (cfg_len,) = struct.unpack_from("<I", blob, 6)
    pos = 10
    kv = {}
    for line in blob[pos : pos + cfg_len].decode("utf-8").splitlines():
        if line:
            k, _, v = line.partition("=")
            kv[k] = v
    pos += cfg_len
    tensors: dict[str, np.ndarray] = {}
    while pos < len(blob):
        (nlen,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        name = blob[pos : pos + nlen].decode("utf-8")
        pos += nlen
        code, ndim = struct.unpack_from("<BB", blob, pos)
        pos += 2
        dims = struct.unpack_from(f"<{ndim}I", blob, pos) if ndim else ()
        pos += 4 * ndim
        dtype = _DTYPE_CODES[code]
        count = int(np.prod(dims)) if ndim else 1
        arr = np.frombuffer(blob, dtype=dtype, count=count, offset=pos).reshape(dims)
        pos += count * dtype.itemsize
        tensors[name] = arr.astype(dtype.newbyteorder("="))
    return kv, tensors


def model_from_checkpoint(path, dtype=np.float32) -> tuple[Model, dict[str, str], dict[str, np.ndarray]]:
    kv, tensors = load_checkpoint(path)
    model_kv = {k[len("model."):]: v for k, v in kv.items() if k.startswith("model.")}
    cfg = ModelConfig.from_kv(model_kv)
    model = Model(cfg, seed=0, dtype=dtype)
    model.load_state(tensors)
    return model, kv, tensors
