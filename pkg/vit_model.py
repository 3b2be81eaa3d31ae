"""Vision Transformer classifier: patch embedding, class token, pre-LN blocks, linear head."""
from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict

import numpy as np

import tensor_core as tc
from errors import FormatError, ParameterError, ShapeError
from tensor_core import Tensor

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"ICEVIT01"
INIT_STD = 0.02
INIT_CLIP = 2.0  # in units of INIT_STD

ViTParams = Dict[str, Tensor]


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 8
    patch_size: int = 4
    in_channels: int = 2
    embed_dim: int = 8
    depth: int = 1
    num_heads: int = 2
    mlp_ratio: float = 4.0
    num_classes: int = 3
    ln_eps: float = 1e-6
    dropout: float = 0.0

    def __post_init__(self):
        for name in ("image_size", "patch_size", "in_channels", "embed_dim", "depth", "num_heads", "num_classes"):
            if getattr(self, name) < 1:
                raise ParameterError(f"ViTConfig.{name} must be >= 1, got {getattr(self, name)}")
        if self.image_size % self.patch_size:
            raise ParameterError(f"image_size {self.image_size} is not divisible by patch_size {self.patch_size}")
        if self.embed_dim % self.num_heads:
            raise ParameterError(f"embed_dim {self.embed_dim} is not divisible by num_heads {self.num_heads}")
        if self.mlp_ratio * self.embed_dim < 1 or float(self.mlp_ratio * self.embed_dim) != self.mlp_dim:
            raise ParameterError(f"mlp_ratio {self.mlp_ratio} x embed_dim {self.embed_dim} must be a positive integer")
        if not 0 <= self.dropout < 1:
            raise ParameterError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.ln_eps < 0:
            raise ParameterError(f"ln_eps must be non-negative, got {self.ln_eps}")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.in_channels * self.patch_size**2

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @property
    def mlp_dim(self) -> int:
        return int(round(self.mlp_ratio * self.embed_dim))

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: dict[str, Any]) -> "ViTConfig":
        unknown = set(values) - set(cls.__dataclass_fields__)
        if unknown:
            raise ParameterError(f"unknown ViTConfig fields: {sorted(unknown)}")
        return cls(**values)


# Base/Large follow the published ViT dimensions at 224 px; they are constructible, never trained here.
PRESETS: dict[str, ViTConfig] = {
    "vit_base": ViTConfig(image_size=224, patch_size=16, embed_dim=768, depth=12, num_heads=12, num_classes=6),
    "vit_large": ViTConfig(image_size=224, patch_size=16, embed_dim=1024, depth=24, num_heads=16, num_classes=6),
    "vit_test": ViTConfig(image_size=8, patch_size=4, in_channels=2, embed_dim=8, depth=1, num_heads=2, num_classes=3),
}


def preset(name: str, **overrides) -> ViTConfig:
    if name not in PRESETS:
        raise ParameterError(f"unknown model preset {name!r}; choose from {sorted(PRESETS)}")
    return ViTConfig.from_dict({**PRESETS[name].to_dict(), **overrides})


def param_layout(config: ViTConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Parameter names and shapes in canonical order."""
    d, r, k = config.embed_dim, config.mlp_dim, config.num_classes
    layout = [
        ("patch_embed.weight", (d, config.patch_dim)),
        ("patch_embed.bias", (d,)),
        ("pos_embed", (config.num_patches + 1, d)),
        ("cls_token", (d,)),
    ]
    for i in range(config.depth):
        p = f"blocks.{i}."
        layout += [
            (p + "ln1.gamma", (d,)),
            (p + "ln1.beta", (d,)),
            (p + "attn.qkv.weight", (3 * d, d)),
            (p + "attn.qkv.bias", (3 * d,)),
            (p + "attn.proj.weight", (d, d)),
            (p + "attn.proj.bias", (d,)),
            (p + "ln2.gamma", (d,)),
            (p + "ln2.beta", (d,)),
            (p + "mlp.fc1.weight", (r, d)),
            (p + "mlp.fc1.bias", (r,)),
            (p + "mlp.fc2.weight", (d, r)),
            (p + "mlp.fc2.bias", (d,)),
        ]
    layout += [
        ("ln_final.gamma", (d,)),
        ("ln_final.beta", (d,)),
        ("head.weight", (k, d)),
        ("head.bias", (k,)),
    ]
    return layout


def count_params(config: ViTConfig) -> int:
    """Closed-form parameter count of the layout."""
    d, r, k, l = config.embed_dim, config.mlp_dim, config.num_classes, config.depth
    embed = d * config.patch_dim + d + (config.num_patches + 1) * d + d
    block = 4 * d + (3 * d * d + 3 * d) + (d * d + d) + (r * d + r) + (d * r + d)
    return embed + l * block + 2 * d + k * d + k


def _truncated_normal(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    values = rng.standard_normal(shape)
    outside = np.abs(values) > INIT_CLIP
    while outside.any():
        values[outside] = rng.standard_normal(int(outside.sum()))
        outside = np.abs(values) > INIT_CLIP
    return values * INIT_STD


def init_params(config: ViTConfig, seed: int) -> ViTParams:
    rng = np.random.default_rng(seed)
    params: ViTParams = {}
    for name, shape in param_layout(config):
        if name.endswith(".weight"):
            values = _truncated_normal(rng, shape)
        elif name.endswith(".gamma"):
            values = np.ones(shape)
        else:
            values = np.zeros(shape)
        params[name] = Tensor(values, grad_enabled=True)
    logger.debug("initialised %d tensors (%d parameters) with seed %d", len(params), count_params(config), seed)
    return params


def patchify(image: np.ndarray, patch_size: int) -> np.ndarray:
    """Split C x H x W (or B x C x H x W) into row-major P x P blocks, channel-major inside each block."""
    image = np.asarray(image, dtype=np.float32)
    if image.ndim not in (3, 4):
        raise ShapeError(f"patchify expects C x H x W or B x C x H x W, got shape {image.shape}")
    *lead, c, h, w = image.shape
    if h % patch_size or w % patch_size:
        raise ShapeError(f"image height {h} / width {w} not divisible by patch size {patch_size}")
    nh, nw = h // patch_size, w // patch_size
    blocks = image.reshape(*lead, c, nh, patch_size, nw, patch_size)
    n = len(lead)
    blocks = blocks.transpose(*range(n), n + 1, n + 3, n, n + 2, n + 4)
    return np.ascontiguousarray(blocks.reshape(*lead, nh * nw, c * patch_size * patch_size))


def unpatchify(tokens: np.ndarray, patch_size: int, channels: int, height: int, width: int) -> np.ndarray:
    nh, nw = height // patch_size, width // patch_size
    if tokens.shape != (nh * nw, channels * patch_size * patch_size):
        raise ShapeError(f"token array {tokens.shape} does not match a {channels}x{height}x{width} image")
    blocks = tokens.reshape(nh, nw, channels, patch_size, patch_size).transpose(2, 0, 3, 1, 4)
    return np.ascontiguousarray(blocks.reshape(channels, height, width))


def _linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    return tc.matmul(x, tc.transpose(weight)) + bias


def _dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    if rate <= 0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate) / (1 - rate)
    return x * Tensor(keep)


def _attention(x: Tensor, params: ViTParams, prefix: str, config: ViTConfig) -> Tensor:
    b, n, d = x.shape
    h, dh = config.num_heads, config.head_dim
    qkv = _linear(x, params[prefix + "qkv.weight"], params[prefix + "qkv.bias"])
    qkv = tc.transpose(tc.reshape(qkv, (b, n, 3, h, dh)), (2, 0, 3, 1, 4))
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = tc.matmul(q, tc.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh))
    context = tc.matmul(tc.softmax(scores, axis=-1), v)
    context = tc.reshape(tc.transpose(context, (0, 2, 1, 3)), (b, n, d))
    return _linear(context, params[prefix + "proj.weight"], params[prefix + "proj.bias"])


def _mlp(x: Tensor, params: ViTParams, prefix: str) -> Tensor:
    hidden = tc.gelu(_linear(x, params[prefix + "fc1.weight"], params[prefix + "fc1.bias"]))
    return _linear(hidden, params[prefix + "fc2.weight"], params[prefix + "fc2.bias"])


def forward_tokens(
    params: ViTParams,
    config: ViTConfig,
    tokens: np.ndarray,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Logits B x K from patch tokens B x Np x C*P^2."""
    tokens = np.asarray(tokens, dtype=np.float32)
    if tokens.ndim != 3 or tokens.shape[1:] != (config.num_patches, config.patch_dim):
        raise ShapeError(
            f"token batch {tokens.shape} does not match (B, {config.num_patches}, {config.patch_dim})"
        )
    b, d = tokens.shape[0], config.embed_dim
    rate = config.dropout if train_mode else 0.0

    x = _linear(Tensor(tokens), params["patch_embed.weight"], params["patch_embed.bias"])
    cls = tc.broadcast_to(tc.reshape(params["cls_token"], (1, 1, d)), (b, 1, d))
    x = tc.concat([cls, x], axis=1) + params["pos_embed"]
    x = _dropout(x, rate, rng)
    for i in range(config.depth):
        p = f"blocks.{i}."
        y = tc.layernorm(x, params[p + "ln1.gamma"], params[p + "ln1.beta"], config.ln_eps)
        x = x + _dropout(_attention(y, params, p + "attn.", config), rate, rng)
        y = tc.layernorm(x, params[p + "ln2.gamma"], params[p + "ln2.beta"], config.ln_eps)
        x = x + _dropout(_mlp(y, params, p + "mlp."), rate, rng)
    x = tc.layernorm(x, params["ln_final.gamma"], params["ln_final.beta"], config.ln_eps)
    return _linear(x[:, 0, :], params["head.weight"], params["head.bias"])


def forward(
    params: ViTParams,
    config: ViTConfig,
    batch: np.ndarray,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Logits B x K for a batch B x C x S x S."""
    batch = np.asarray(batch, dtype=np.float32)
    if batch.ndim != 4:
        raise ShapeError(f"batch must be B x C x S x S, got shape {batch.shape}")
    if batch.shape[1] != config.in_channels:
        raise ShapeError(f"channel dimension is {batch.shape[1]}, model expects {config.in_channels}")
    if batch.shape[2:] != (config.image_size, config.image_size):
        raise ShapeError(f"spatial size is {batch.shape[2:]}, model expects {config.image_size}x{config.image_size}")
    return forward_tokens(params, config, patchify(batch, config.patch_size), train_mode, rng)


def predict_classes(params: ViTParams, config: ViTConfig, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Argmax class per image, evaluated in chunks without recording gradients."""
    preds = []
    for start in range(0, len(images), batch_size):
        logits = forward(params, config, images[start : start + batch_size])
        preds.append(np.argmax(logits.data, axis=1))
    return np.concatenate(preds).astype(np.int64) if preds else np.zeros(0, dtype=np.int64)


@dataclass
class Checkpoint:
    config: ViTConfig
    params: ViTParams
    meta: dict[str, Any] = field(default_factory=dict)


def save_checkpoint(params: ViTParams, config: ViTConfig, meta: dict[str, Any], path: str | Path) -> Path:
    path = Path(path)
    expected = param_layout(config)
    differing = {name for name, _ in expected} ^ set(params)
    if differing:
        raise ShapeError(f"parameter names differ from the model layout: {sorted(differing)}")
    header = json.dumps({"config": config.to_dict(), "meta": meta}, sort_keys=True).encode("utf-8")
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", len(header)), header]
    for name, shape in expected:
        tensor = params[name]
        if tensor.shape != shape:
            raise ShapeError(f"{name} has shape {tensor.shape}, layout requires {shape}")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack(f"<I{len(shape)}I", len(shape), *shape))
        chunks.append(tensor.data.astype("<f4").tobytes())
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(b"".join(chunks))
    logger.info("wrote checkpoint %s (%d tensors)", path, len(expected))
    return path


class _Reader:
    def __init__(self, payload: bytes, path: Path):
        self.payload = payload
        self.offset = 0
        self.path = path

    def take(self, count: int) -> bytes:
        if self.offset + count > len(self.payload):
            raise FormatError(f"{self.path}: truncated at byte {self.offset} (wanted {count} more)")
        chunk = self.payload[self.offset : self.offset + count]
        self.offset += count
        return chunk

    def u32(self, count: int = 1) -> tuple[int, ...]:
        return struct.unpack(f"<{count}I", self.take(4 * count))


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    reader = _Reader(path.read_bytes(), path)
    if reader.take(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    (header_len,) = reader.u32()
    try:
        header = json.loads(reader.take(header_len).decode("utf-8"))
        config = ViTConfig.from_dict(header["config"])
        meta = header.get("meta", {})
    except (ValueError, KeyError, TypeError, ParameterError) as exc:
        raise FormatError(f"{path}: unreadable header ({exc})") from None

    params: ViTParams = {}
    for name, shape in param_layout(config):
        (name_len,) = reader.u32()
        found = reader.take(name_len).decode("utf-8", errors="replace")
        if found != name:
            raise FormatError(f"{path}: expected tensor {name!r}, found {found!r}")
        (ndim,) = reader.u32()
        dims = reader.u32(ndim) if ndim else ()
        if tuple(dims) != shape:
            raise FormatError(f"{path}: {name} has dims {tuple(dims)}, header config requires {shape}")
        raw = reader.take(4 * int(np.prod(shape)))
        params[name] = Tensor(np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(shape), grad_enabled=True)
    if reader.offset != len(reader.payload):
        raise FormatError(f"{path}: {len(reader.payload) - reader.offset} trailing bytes after last tensor")
    logger.debug("loaded checkpoint %s", path)
    return Checkpoint(config, params, meta)
