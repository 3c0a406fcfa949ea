"""The three-way split model: task-non-specific patch embedder head, shared
pre-norm transformer encoder body, and per-task tails (linear classifier,
severity mapper, segmentation decoder), plus the small CNN head used only by
the FeSTA-style baseline.

Token order contract: embed_patches emits patches in raster order (row-major
over the patch grid); the segmentation decoder reshapes tokens back to the
grid under the same order. The body holds no position-dependent parameter
and no class token, so reordering input rows reorders output rows with
unchanged values.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import engine
from .engine import (Tensor, add, gelu, im2col, matmul, mul, parameter, relu,
                     reshape, softmax, tmean, transpose, upsample_nearest)

__all__ = [
    "ConfigError", "ModelConfig", "ParamBundle", "HeadParams", "BodyParams",
    "LinearClassifierTail", "SeverityTail", "SegDecoderTail", "CnnHeadParams",
    "init_head", "init_body", "init_cnn_head", "init_tail", "embed_patches",
    "body_forward", "tail_forward", "cnn_head_forward", "conv2d",
    "save_tensors", "load_tensors",
]


class ConfigError(ValueError):
    """Model geometry or task/tail wiring is inconsistent."""


@dataclass(frozen=True)
class ModelConfig:
    """Desk-scale geometry; the full-size layout is configuration, not code."""

    image_h: int = 32
    image_w: int = 32
    channels: int = 1
    patch: int = 8
    d: int = 32
    layers: int = 4
    heads: int = 4
    ffn_mult: int = 4
    dtype: type = np.float32

    def __post_init__(self):
        if self.image_h % self.patch or self.image_w % self.patch:
            raise ConfigError(
                f"image {self.image_h}x{self.image_w} not divisible by "
                f"patch {self.patch}")
        if self.d % self.heads:
            raise ConfigError(f"d={self.d} not divisible by heads={self.heads}")

    @property
    def grid(self) -> tuple[int, int]:
        return self.image_h // self.patch, self.image_w // self.patch

    @property
    def n_tokens(self) -> int:
        gh, gw = self.grid
        return gh * gw

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch * self.patch

    @property
    def d_ff(self) -> int:
        return self.d * self.ffn_mult


def _uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class ParamBundle:
    """Ordered named parameters with copy-on-write style updates.

    Optimizers replace `.data` arrays rather than mutating them in place, so
    snapshots and cached copies stay intact.
    """

    prefix = "params"

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def _add(self, name: str, arr: np.ndarray, trainable: bool = True) -> Tensor:
        p = parameter(arr, f"{self.prefix}.{name}", trainable=trainable)
        self._params[name] = p
        return p

    def named_tensors(self) -> dict[str, Tensor]:
        return dict(self._params)

    def tensors(self) -> list[Tensor]:
        return list(self._params.values())

    def arrays(self) -> list[np.ndarray]:
        return [p.data for p in self._params.values()]

    def set_arrays(self, arrays) -> None:
        params = list(self._params.values())
        if len(arrays) != len(params):
            raise ConfigError(
                f"{self.prefix}: expected {len(params)} arrays, got {len(arrays)}")
        for p, a in zip(params, arrays):
            a = np.asarray(a, dtype=p.data.dtype)
            if a.shape != p.data.shape:
                raise ConfigError(
                    f"{self.prefix}: shape {a.shape} != {p.data.shape} "
                    f"for {p.name}")
            p.data = np.ascontiguousarray(a.copy())

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self._params.items()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        self.set_arrays([snap[name] for name in self._params])

    def to_bytes(self) -> bytes:
        return b"".join(p.data.tobytes() for p in self._params.values())

    @property
    def element_count(self) -> int:
        return sum(p.data.size for p in self._params.values())

    def set_trainable(self, flag: bool) -> None:
        for p in self._params.values():
            p.trainable = p.requires_grad = bool(flag)

    def clone(self) -> "ParamBundle":
        out = self.__class__(*self._ctor_args)
        out.set_arrays(self.arrays())
        return out


# ---------------------------------------------------------------------------
# head


class HeadParams(ParamBundle):
    """Patch projection + position embedding; frozen by default."""

    prefix = "head"

    def __init__(self, cfg: ModelConfig, frozen: bool = True):
        super().__init__()
        self._ctor_args = (cfg, frozen)
        self.cfg = cfg
        self.frozen = frozen
        dt = cfg.dtype
        self.weight = self._add("proj_weight",
                                np.zeros((cfg.patch_dim, cfg.d), dt),
                                trainable=not frozen)
        self.bias = self._add("proj_bias", np.zeros((cfg.d,), dt),
                              trainable=not frozen)
        self.pos = self._add("pos_embedding",
                             np.zeros((cfg.n_tokens, cfg.d), dt),
                             trainable=not frozen)


def init_head(cfg: ModelConfig, seed: int, frozen: bool = True) -> HeadParams:
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 1])))
    head = HeadParams(cfg, frozen)
    head.weight.data = _uniform(rng, (cfg.patch_dim, cfg.d), cfg.patch_dim, cfg.dtype)
    head.bias.data = np.zeros((cfg.d,), cfg.dtype)
    head.pos.data = _uniform(rng, (cfg.n_tokens, cfg.d), cfg.d, cfg.dtype)
    return head


def embed_patches(images: Tensor, head: HeadParams,
                  include_pos: bool = True) -> Tensor:
    """Non-overlapping patches, flattened raster-wise, projected, plus the
    position embedding added row-wise."""
    cfg = head.cfg
    x = images if isinstance(images, Tensor) else Tensor(images, dtype=cfg.dtype)
    squeeze = x.data.ndim == 3
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    if x.data.ndim != 4:
        raise ConfigError(f"expected [C,H,W] or [B,C,H,W] image, got {x.shape}")
    B, C, H, W = x.shape
    if C != cfg.channels or H != cfg.image_h or W != cfg.image_w:
        raise ConfigError(
            f"image {C}x{H}x{W} does not match head geometry "
            f"{cfg.channels}x{cfg.image_h}x{cfg.image_w}")
    cols = im2col(x, cfg.patch, cfg.patch, stride=cfg.patch, pad=0)
    tokens = add(matmul(cols, head.weight), head.bias)
    if include_pos:
        tokens = add(tokens, head.pos)
    return reshape(tokens, tokens.shape[1:]) if squeeze else tokens


# ---------------------------------------------------------------------------
# body


class BodyParams(ParamBundle):
    """L pre-norm encoder layers; no position parameters, no class token."""

    prefix = "body"

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self._ctor_args = (cfg,)
        self.cfg = cfg
        dt = cfg.dtype
        d, dff = cfg.d, cfg.d_ff
        self.layer_params: list[dict[str, Tensor]] = []
        for i in range(cfg.layers):
            lp = {}
            lp["ln1_g"] = self._add(f"layer{i}.ln1.gamma", np.ones((d,), dt))
            lp["ln1_b"] = self._add(f"layer{i}.ln1.beta", np.zeros((d,), dt))
            for nm in ("wq", "wk", "wv", "wo"):
                lp[nm] = self._add(f"layer{i}.attn.{nm}", np.zeros((d, d), dt))
                lp[nm + "_b"] = self._add(f"layer{i}.attn.{nm}_bias",
                                          np.zeros((d,), dt))
            lp["ln2_g"] = self._add(f"layer{i}.ln2.gamma", np.ones((d,), dt))
            lp["ln2_b"] = self._add(f"layer{i}.ln2.beta", np.zeros((d,), dt))
            lp["w1"] = self._add(f"layer{i}.ffn.w1", np.zeros((d, dff), dt))
            lp["b1"] = self._add(f"layer{i}.ffn.b1", np.zeros((dff,), dt))
            lp["w2"] = self._add(f"layer{i}.ffn.w2", np.zeros((dff, d), dt))
            lp["b2"] = self._add(f"layer{i}.ffn.b2", np.zeros((d,), dt))
            self.layer_params.append(lp)


def init_body(cfg: ModelConfig, seed: int) -> BodyParams:
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 2])))
    body = BodyParams(cfg)
    d, dff = cfg.d, cfg.d_ff
    for lp in body.layer_params:
        for nm in ("wq", "wk", "wv", "wo"):
            lp[nm].data = _uniform(rng, (d, d), d, cfg.dtype)
        lp["w1"].data = _uniform(rng, (d, dff), d, cfg.dtype)
        lp["w2"].data = _uniform(rng, (dff, d), dff, cfg.dtype)
    return body


def _mhsa(x: Tensor, lp: dict[str, Tensor], cfg: ModelConfig) -> Tensor:
    B, n, d = x.shape
    h, dh = cfg.heads, cfg.d // cfg.heads

    def split(t):
        return transpose(reshape(t, (B, n, h, dh)), (0, 2, 1, 3))

    q = split(add(matmul(x, lp["wq"]), lp["wq_b"]))
    k = split(add(matmul(x, lp["wk"]), lp["wk_b"]))
    v = split(add(matmul(x, lp["wv"]), lp["wv_b"]))
    scores = mul(matmul(q, transpose(k, (0, 1, 3, 2))),
                 Tensor(np.asarray(1.0 / np.sqrt(dh), dtype=x.dtype)))
    ctx = matmul(softmax(scores, axis=-1), v)
    ctx = reshape(transpose(ctx, (0, 2, 1, 3)), (B, n, d))
    return add(matmul(ctx, lp["wo"]), lp["wo_b"])


def _ffn(x: Tensor, lp: dict[str, Tensor]) -> Tensor:
    hidden = gelu(add(matmul(x, lp["w1"]), lp["b1"]))
    return add(matmul(hidden, lp["w2"]), lp["b2"])


def body_forward(tokens: Tensor, body: BodyParams) -> Tensor:
    """Pre-norm encoder stack: x += MHSA(LN(x)); x += FFN(LN(x)) per layer."""
    cfg = body.cfg
    x = tokens
    squeeze = x.data.ndim == 2
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    if x.shape[-1] != cfg.d:
        raise ConfigError(f"token width {x.shape[-1]} != body d={cfg.d}")
    for lp in body.layer_params:
        normed = engine.layer_norm(x, lp["ln1_g"], lp["ln1_b"])
        x = add(x, _mhsa(normed, lp, cfg))
        normed = engine.layer_norm(x, lp["ln2_g"], lp["ln2_b"])
        x = add(x, _ffn(normed, lp))
    return reshape(x, x.shape[1:]) if squeeze else x


# ---------------------------------------------------------------------------
# tails


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1,
           pad: int = 0) -> Tensor:
    """[B,C,H,W] x [Cout,Cin,kh,kw] -> [B,Cout,OH,OW] via im2col + matmul."""
    B, C, H, W = x.shape
    cout, cin, kh, kw = w.shape
    if cin != C:
        raise ConfigError(f"conv input channels {C} != kernel {cin}")
    oh = (H + 2 * pad - kh) // stride + 1
    ow = (W + 2 * pad - kw) // stride + 1
    cols = im2col(x, kh, kw, stride=stride, pad=pad)
    wmat = transpose(reshape(w, (cout, cin * kh * kw)), (1, 0))
    out = add(matmul(cols, wmat), b)             # [B, OH*OW, Cout]
    return reshape(transpose(out, (0, 2, 1)), (B, cout, oh, ow))


class LinearClassifierTail(ParamBundle):
    """Mean-pool tokens, then one affine map to class logits."""

    prefix = "tail"
    variant = "classifier"

    def __init__(self, d: int, n_classes: int = 3, dtype=np.float32):
        super().__init__()
        self._ctor_args = (d, n_classes, dtype)
        self.d, self.n_outputs = d, n_classes
        self.weight = self._add("weight", np.zeros((d, n_classes), dtype))
        self.bias = self._add("bias", np.zeros((n_classes,), dtype))

    def forward(self, features: Tensor) -> Tensor:
        pooled = tmean(features, axis=-2)
        return add(matmul(pooled, self.weight), self.bias)


class SeverityTail(ParamBundle):
    """Mean-pool, then a staged expansion down to six region scores."""

    prefix = "tail"
    variant = "severity"

    def __init__(self, d: int, n_outputs: int = 6, hidden: int | None = None,
                 dtype=np.float32):
        super().__init__()
        hidden = hidden or 2 * d
        self._ctor_args = (d, n_outputs, hidden, dtype)
        self.d, self.n_outputs, self.hidden = d, n_outputs, hidden
        self.w1 = self._add("w1", np.zeros((d, hidden), dtype))
        self.b1 = self._add("b1", np.zeros((hidden,), dtype))
        self.w2 = self._add("w2", np.zeros((hidden, n_outputs), dtype))
        self.b2 = self._add("b2", np.zeros((n_outputs,), dtype))

    def forward(self, features: Tensor) -> Tensor:
        pooled = tmean(features, axis=-2)
        h = relu(add(matmul(pooled, self.w1), self.b1))
        return add(matmul(h, self.w2), self.b2)


class SegDecoderTail(ParamBundle):
    """Tokens back to the raster patch grid, then upsampling conv stages to
    full-resolution mask logits."""

    prefix = "tail"
    variant = "segmentation"

    def __init__(self, d: int, grid: tuple[int, int], upscale: int,
                 dtype=np.float32):
        super().__init__()
        self._ctor_args = (d, grid, upscale, dtype)
        if upscale < 1 or (upscale & (upscale - 1)):
            raise ConfigError(f"upscale factor {upscale} must be a power of 2")
        self.d, self.grid, self.upscale = d, tuple(grid), upscale
        self.stage_channels = []
        c = d
        self.stages: list[tuple[Tensor, Tensor]] = []
        n_stages = int(np.log2(upscale))
        for i in range(n_stages):
            c_out = max(4, c // 2)
            w = self._add(f"stage{i}.weight", np.zeros((c_out, c, 3, 3), dtype))
            b = self._add(f"stage{i}.bias", np.zeros((c_out,), dtype))
            self.stages.append((w, b))
            self.stage_channels.append((c, c_out))
            c = c_out
        self.final_w = self._add("final.weight", np.zeros((1, c, 1, 1), dtype))
        self.final_b = self._add("final.bias", np.zeros((1,), dtype))

    def forward(self, features: Tensor) -> Tensor:
        B, n, d = features.shape
        gh, gw = self.grid
        if n != gh * gw:
            raise ConfigError(f"{n} tokens do not fill a {gh}x{gw} grid")
        x = transpose(reshape(features, (B, gh, gw, d)), (0, 3, 1, 2))
        for w, b in self.stages:
            x = relu(conv2d(upsample_nearest(x, 2), w, b, stride=1, pad=1))
        x = conv2d(x, self.final_w, self.final_b)
        return reshape(x, (B, x.shape[2], x.shape[3]))


def init_tail(kind: str, cfg: ModelConfig, seed: int, stream: int = 0) -> ParamBundle:
    """Seeded tail for a task kind: classification / severity / segmentation."""
    rng = np.random.Generator(np.random.PCG64(
        np.random.SeedSequence([seed, 3, stream])))
    dt = cfg.dtype
    if kind == "classification":
        tail = LinearClassifierTail(cfg.d, 3, dt)
        tail.weight.data = _uniform(rng, tail.weight.shape, cfg.d, dt)
    elif kind == "severity":
        tail = SeverityTail(cfg.d, 6, dtype=dt)
        tail.w1.data = _uniform(rng, tail.w1.shape, cfg.d, dt)
        tail.w2.data = _uniform(rng, tail.w2.shape, tail.hidden, dt)
    elif kind == "segmentation":
        tail = SegDecoderTail(cfg.d, cfg.grid, cfg.patch, dt)
        for (w, b), (cin, _) in zip(tail.stages, tail.stage_channels):
            w.data = _uniform(rng, w.shape, cin * 9, dt)
        tail.final_w.data = _uniform(rng, tail.final_w.shape,
                                     tail.final_w.shape[1], dt)
    else:
        raise ConfigError(f"unknown task kind {kind!r}")
    return tail


def tail_forward(features: Tensor, tail: ParamBundle) -> Tensor:
    """Apply a task tail to features in ORIGINAL (un-permuted) token order."""
    x = features
    squeeze = x.data.ndim == 2
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    if x.shape[-1] != tail.d:
        raise ConfigError(
            f"feature width {x.shape[-1]} does not match tail d={tail.d}")
    out = tail.forward(x)
    return reshape(out, out.shape[1:]) if squeeze else out


# ---------------------------------------------------------------------------
# CNN head (baseline only)


class CnnHeadParams(ParamBundle):
    """Three strided 3x3 convolutions reducing the image to a token grid."""

    prefix = "cnn_head"
    STRIDES = (2, 2, 2)

    def __init__(self, cfg: ModelConfig, width: int = 8):
        super().__init__()
        self._ctor_args = (cfg, width)
        if cfg.image_h % 8 or cfg.image_w % 8:
            raise ConfigError("CNN head needs image dims divisible by 8")
        self.cfg = cfg
        dt = cfg.dtype
        chans = [cfg.channels, width, 2 * width, cfg.d]
        self.convs: list[tuple[Tensor, Tensor]] = []
        for i, (cin, cout) in enumerate(zip(chans[:-1], chans[1:])):
            w = self._add(f"conv{i}.weight", np.zeros((cout, cin, 3, 3), dt))
            b = self._add(f"conv{i}.bias", np.zeros((cout,), dt))
            self.convs.append((w, b))

    @property
    def n_tokens(self) -> int:
        return (self.cfg.image_h // 8) * (self.cfg.image_w // 8)


def init_cnn_head(cfg: ModelConfig, seed: int, width: int = 8,
                  stream: int = 0) -> CnnHeadParams:
    rng = np.random.Generator(np.random.PCG64(
        np.random.SeedSequence([seed, 4, stream])))
    head = CnnHeadParams(cfg, width)
    for w, _ in head.convs:
        w.data = _uniform(rng, w.shape, w.shape[1] * 9, cfg.dtype)
    return head


def cnn_head_forward(images: Tensor, head: CnnHeadParams) -> Tensor:
    cfg = head.cfg
    x = images if isinstance(images, Tensor) else Tensor(images, dtype=cfg.dtype)
    squeeze = x.data.ndim == 3
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    for i, (w, b) in enumerate(head.convs):
        x = conv2d(x, w, b, stride=2, pad=1)
        if i < len(head.convs) - 1:
            x = relu(x)
    B, d, gh, gw = x.shape
    tokens = transpose(reshape(x, (B, d, gh * gw)), (0, 2, 1))
    return reshape(tokens, tokens.shape[1:]) if squeeze else tokens


# ---------------------------------------------------------------------------
# named-tensor checkpoint container
#
# Per entry: name length (u32 LE), name bytes (utf-8), rank (u32 LE),
# dims (u32 LE x rank), payload (f32 LE, row-major). Entries repeat to EOF.


def save_tensors(path, named: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        for name, arr in named.items():
            arr = np.ascontiguousarray(arr, dtype="<f4")
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_tensors(path) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        blob = fh.read()
    off = 0
    while off < len(blob):
        (nlen,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off:off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<I", blob, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}I", blob, off)
        off += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=off)
        off += 4 * count
        out[name] = arr.reshape(dims).astype(np.float32)
    return out
