"""Plain U-Net with a multi-scale prediction head.

Decoder scale ``i`` (1 = coarsest, 4 = full resolution) has spatial size
``H / 2**(4 - i)``.  Each scale feeds a dedicated conv + sigmoid head; the four
maps are upsampled to full size, concatenated and fused by one more
conv + sigmoid.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .tensor import (
    Tensor,
    concat_channels,
    conv2d,
    instance_norm,
    max_pool2d,
    relu,
    sigmoid,
    upsample_bilinear,
)

MAGIC = b"MSHN1"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    pass


class ChecksumError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class ConfigMismatchError(CheckpointError):
    pass


@dataclass(frozen=True)
class UNetConfig:
    input_size: tuple[int, int] = (64, 64)
    base_channels: int = 8
    # indexed by decoder scale, coarsest first: C_i = base_channels * channel_multipliers[i-1]
    channel_multipliers: tuple[int, int, int, int] = (8, 4, 2, 1)
    seed: int = 0
    instance_norm: bool = False
    head_kernel: int = 1
    head_bias: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "input_size", tuple(int(v) for v in self.input_size))
        object.__setattr__(self, "channel_multipliers", tuple(int(v) for v in self.channel_multipliers))
        h, w = self.input_size
        if h <= 0 or w <= 0 or h % 8 or w % 8:
            raise ValueError(f"input size {self.input_size} must be positive and divisible by 8")
        if len(self.channel_multipliers) != 4:
            raise ValueError("exactly 4 channel multipliers are required")
        if self.base_channels < 1 or min(self.channel_multipliers) < 1:
            raise ValueError("channel counts must be positive")
        if self.head_kernel < 1 or self.head_kernel % 2 == 0:
            raise ValueError("head_kernel must be a positive odd integer")

    def channels(self, scale: int) -> int:
        """Feature channels C_i at decoder scale ``scale`` (1..4)."""
        return self.base_channels * self.channel_multipliers[scale - 1]

    def scale_size(self, scale: int) -> tuple[int, int]:
        f = 2 ** (4 - scale)
        return self.input_size[0] // f, self.input_size[1] // f

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_size"] = list(self.input_size)
        d["channel_multipliers"] = list(self.channel_multipliers)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> UNetConfig:
        return cls(**d)


def layer_shapes(config: UNetConfig) -> dict[str, tuple[int, ...]]:
    """Weight shapes of every conv layer, in parameter order."""
    c = {i: config.channels(i) for i in range(1, 5)}
    k = config.head_kernel
    shapes: dict[str, tuple[int, ...]] = {}
    # encoder runs full resolution (scale 4) down to the bottleneck (scale 1)
    prev = 1
    for i in (4, 3, 2, 1):
        shapes[f"enc{i}.conv1"] = (c[i], prev, 3, 3)
        shapes[f"enc{i}.conv2"] = (c[i], c[i], 3, 3)
        prev = c[i]
    for i in (2, 3, 4):
        shapes[f"dec{i}.conv1"] = (c[i], c[i - 1] + c[i], 3, 3)
        shapes[f"dec{i}.conv2"] = (c[i], c[i], 3, 3)
    for i in (1, 2, 3, 4):
        shapes[f"head{i}"] = (1, c[i], k, k)
    shapes["fuse"] = (1, 4, k, k)
    return shapes


def parameter_count(config: UNetConfig) -> int:
    return sum(int(np.prod(s)) + s[0] for s in layer_shapes(config).values())


@dataclass
class ModelParams:
    config: UNetConfig
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def parameters(self) -> list[Tensor]:
        return list(self.tensors.values())

    def num_parameters(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None


@dataclass
class MultiScaleOutputs:
    """Side predictions p1..p4 (coarse to fine) and the fused prediction p, each N x 1 x H_i x W_i."""

    p1: Tensor
    p2: Tensor
    p3: Tensor
    p4: Tensor
    p: Tensor

    def as_tuple(self) -> tuple[Tensor, Tensor, Tensor, Tensor, Tensor]:
        return (self.p1, self.p2, self.p3, self.p4, self.p)


def build(config: UNetConfig) -> ModelParams:
    """Initialize weights with fan-in scaled normal draws; biases start at zero."""
    rng = np.random.default_rng(config.seed)
    tensors: dict[str, Tensor] = {}
    for name, shape in layer_shapes(config).items():
        fan_in = shape[1] * shape[2] * shape[3]
        w = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
        bias_value = config.head_bias if name.startswith(("head", "fuse")) else 0.0
        tensors[f"{name}.weight"] = Tensor(w, requires_grad=True)
        tensors[f"{name}.bias"] = Tensor(np.full(shape[0], bias_value), requires_grad=True)
    return ModelParams(config, tensors)


def _conv(params: ModelParams, name: str, x: Tensor, padding: int) -> Tensor:
    t = params.tensors
    return conv2d(x, t[f"{name}.weight"], t[f"{name}.bias"], padding=padding)


def _block(params: ModelParams, prefix: str, x: Tensor) -> Tensor:
    for conv in ("conv1", "conv2"):
        x = _conv(params, f"{prefix}.{conv}", x, padding=1)
        if params.config.instance_norm:
            x = instance_norm(x)
        x = relu(x)
    return x


def forward(params: ModelParams, image) -> MultiScaleOutputs:
    """Run the network on an N x 1 x H x W image batch."""
    cfg = params.config
    x = image if isinstance(image, Tensor) else Tensor(image)
    if x.ndim == 2:
        x = Tensor(x.data[None, None])
    if x.ndim != 4 or x.shape[1] != 1 or tuple(x.shape[2:]) != cfg.input_size:
        raise ValueError(f"expected N x 1 x {cfg.input_size[0]} x {cfg.input_size[1]} input, got {x.shape}")

    skips: dict[int, Tensor] = {}
    h = x
    for i in (4, 3, 2):
        h = _block(params, f"enc{i}", h)
        skips[i] = h
        h = max_pool2d(h, 2)
    feats = {1: _block(params, "enc1", h)}
    for i in (2, 3, 4):
        up = upsample_bilinear(feats[i - 1], 2)
        feats[i] = _block(params, f"dec{i}", concat_channels([up, skips[i]]))

    pad = cfg.head_kernel // 2
    side = [sigmoid(_conv(params, f"head{i}", feats[i], pad)) for i in (1, 2, 3, 4)]
    stacked = concat_channels([upsample_bilinear(p_i, 2 ** (4 - i)) for i, p_i in zip((1, 2, 3, 4), side)])
    fused = sigmoid(_conv(params, "fuse", stacked, pad))
    return MultiScaleOutputs(*side, fused)


# -- checkpoint container ---------------------------------------------------
#
# MAGIC | u32 version | u32 len + config JSON | u32 count |
#   per tensor: u16 len + name | u8 ndim | u32 dims... | f64 LE values |
# 32-byte sha256 of everything before it


def _encode(params: ModelParams, extra: dict | None = None) -> bytes:
    meta = {"config": params.config.to_dict(), "seed": params.config.seed}
    if extra:
        meta["extra"] = extra
    cfg = json.dumps(meta, sort_keys=True).encode()
    out = bytearray(MAGIC)
    out += struct.pack("<II", FORMAT_VERSION, len(cfg)) + cfg
    out += struct.pack("<I", len(params.tensors))
    for name, t in params.tensors.items():
        nb = name.encode()
        out += struct.pack("<H", len(nb)) + nb
        out += struct.pack("<B", t.ndim) + struct.pack(f"<{t.ndim}I", *t.shape)
        out += np.ascontiguousarray(t.data, dtype="<f8").tobytes()
    out += hashlib.sha256(out).digest()
    return bytes(out)


def save_checkpoint(params: ModelParams, path, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(_encode(params, extra))
    tmp.replace(path)
    return path


def load_checkpoint(path, expected: UNetConfig | None = None) -> ModelParams:
    blob = Path(path).read_bytes()
    if len(blob) < len(MAGIC) + 32 or blob[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise ChecksumError(f"{path}: checksum mismatch (truncated or corrupt)")
    pos = len(MAGIC)
    version, cfg_len = struct.unpack_from("<II", body, pos)
    pos += 8
    if version != FORMAT_VERSION:
        raise VersionError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    meta = json.loads(body[pos : pos + cfg_len])
    pos += cfg_len
    config = UNetConfig.from_dict(meta["config"])
    if expected is not None and expected != config:
        raise ConfigMismatchError(f"{path}: checkpoint config {config} does not match {expected}")
    (count,) = struct.unpack_from("<I", body, pos)
    pos += 4
    tensors: dict[str, Tensor] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", body, pos)
        pos += 2
        name = body[pos : pos + nlen].decode()
        pos += nlen
        (ndim,) = struct.unpack_from("<B", body, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", body, pos)
        pos += 4 * ndim
        n = int(np.prod(shape))
        data = np.frombuffer(body, dtype="<f8", count=n, offset=pos).reshape(shape)
        pos += 8 * n
        tensors[name] = Tensor(data.astype(np.float64), requires_grad=True)
    expected_names = {f"{k}.{s}" for k in layer_shapes(config) for s in ("weight", "bias")}
    if set(tensors) != expected_names:
        raise CheckpointError(f"{path}: parameter names do not match the stored config")
    return ModelParams(config, tensors)
