"""Shared encoder, image head, pixel head, CAM extraction and checkpoints.

Parameters live in a flat ``name -> ndarray`` dict grouped by prefix:

* ``enc.*``  encoder convolutions (theta1)
* ``img.*``  image classification head (theta2)
* ``pix.*``  foreground/background pixel head (theta3)
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, DimensionError, FormatError

PIXEL_HEADS = ("linear", "multi-layer")
MAGIC = b"PXCM"
FORMAT_VERSION = 1


@dataclass
class ModelConfig:
    widths: tuple = (16, 32, 32)
    kernel: int = 3
    in_channels: int = 3
    num_classes: int = 2
    pixel_head: str = "linear"
    # encoder layer indices followed by 2x2 average pooling; empty keeps full resolution
    pool_after: tuple = ()
    # fixed per-channel input standardization; None leaves inputs untouched
    input_mean: tuple | None = None
    input_std: tuple | None = None

    @property
    def depth(self) -> int:
        return self.widths[-1]

    def hidden_widths(self) -> list:
        """Widths of the three 1x1 stages of the multi-layer pixel head."""
        return [max(1, self.depth >> i) for i in (1, 2, 3)]

    def validate(self):
        if not self.widths or any(w < 1 for w in self.widths):
            raise ConfigurationError(f"invalid encoder widths {self.widths}")
        if self.depth < 2:
            raise ConfigurationError(f"feature depth must be >= 2, got {self.depth}")
        if self.num_classes < 2:
            raise ConfigurationError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.kernel % 2 == 0:
            raise ConfigurationError(f"kernel size must be odd, got {self.kernel}")
        if self.pixel_head not in PIXEL_HEADS:
            raise ConfigurationError(f"pixel_head must be one of {PIXEL_HEADS}, got {self.pixel_head!r}")
        if any(not 0 <= i < len(self.widths) for i in self.pool_after):
            raise ConfigurationError(f"pool_after indices out of range: {self.pool_after}")
        if (self.input_mean is None) != (self.input_std is None):
            raise ConfigurationError("input_mean and input_std must be set together")
        if self.input_mean is not None:
            if len(self.input_mean) != self.in_channels or len(self.input_std) != self.in_channels:
                raise ConfigurationError(f"input statistics need {self.in_channels} entries per field")
            if any(not s > 0 for s in self.input_std):
                raise ConfigurationError(f"input_std must be positive, got {self.input_std}")
        return self

    def to_dict(self):
        d = asdict(self)
        d["widths"] = list(self.widths)
        d["pool_after"] = list(self.pool_after)
        for key in ("input_mean", "input_std"):
            if d[key] is not None:
                d[key] = [float(v) for v in d[key]]
        return d

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown ModelConfig fields: {sorted(unknown)}")
        d = dict(d)
        for key in ("widths", "pool_after", "input_mean", "input_std"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        return cls(**d).validate()


def input_statistics(images) -> tuple:
    """Per-channel mean and standard deviation over a stack of images."""
    x = np.asarray(images, dtype=np.float64)
    x = x.reshape(-1, x.shape[-1])
    std = np.maximum(x.std(axis=0), 1e-6)
    return tuple(float(v) for v in x.mean(axis=0)), tuple(float(v) for v in std)


def param_shapes(config: ModelConfig) -> dict:
    shapes = {}
    cin = config.in_channels
    for i, w in enumerate(config.widths):
        shapes[f"enc.{i}.w"] = (config.kernel, config.kernel, cin, w)
        shapes[f"enc.{i}.b"] = (w,)
        cin = w
    d = config.depth
    shapes["img.w"] = (config.num_classes, d)
    shapes["img.b"] = (config.num_classes,)
    if config.pixel_head == "linear":
        shapes["pix.w"] = (2, d)
        shapes["pix.b"] = (2,)
    else:
        prev = d
        for i, h in enumerate(config.hidden_widths()):
            shapes[f"pix.{i}.w"] = (h, prev)
            shapes[f"pix.{i}.b"] = (h,)
            prev = h
        shapes["pix.out.w"] = (2, prev)
        shapes["pix.out.b"] = (2,)
    return shapes


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict = field(default_factory=dict)

    def __post_init__(self):
        expected = param_shapes(self.config)
        if set(expected) != set(self.tensors):
            raise DimensionError(
                f"parameter names {sorted(self.tensors)} do not match config {sorted(expected)}"
            )
        for name, shape in expected.items():
            if tuple(self.tensors[name].shape) != shape:
                raise DimensionError(f"{name}: shape {self.tensors[name].shape}, expected {shape}")

    def group(self, prefix: str) -> dict:
        return {k: v for k, v in self.tensors.items() if k.startswith(prefix)}

    @property
    def theta1(self):
        return self.group("enc.")

    @property
    def theta2(self):
        return self.group("img.")

    @property
    def theta3(self):
        return self.group("pix.")

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def __getitem__(self, name):
        return self.tensors[name]


def glorot_uniform(shape, fan_in, fan_out, rng):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_pixel_head(config: ModelConfig, rng: np.random.Generator) -> dict:
    out = {}
    for name, shape in param_shapes(config).items():
        if not name.startswith("pix."):
            continue
        if name.endswith(".b"):
            out[name] = np.zeros(shape)
        else:
            out[name] = glorot_uniform(shape, shape[1], shape[0], rng)
    return out


def init_params(config: ModelConfig, seed=0) -> ModelParams:
    """He-normal encoder, Glorot-uniform heads, zero biases."""
    config.validate()
    rng = np.random.default_rng([seed, 0x1417])
    tensors = {}
    for name, shape in param_shapes(config).items():
        if name.startswith("pix."):
            continue
        if name.endswith(".b"):
            tensors[name] = np.zeros(shape)
        elif name.startswith("enc."):
            fan_in = shape[0] * shape[1] * shape[2]
            tensors[name] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        else:
            tensors[name] = glorot_uniform(shape, shape[1], shape[0], rng)
    tensors.update(init_pixel_head(config, np.random.default_rng([seed, 0x9137])))
    return ModelParams(config, tensors)


# ----------------------------------------------------------------- forward


def encode_forward(x, params: ModelParams):
    """Encoder pass returning ``(F, caches)``; ``F`` always matches the input's spatial size."""
    cfg = params.config
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != cfg.in_channels:
        raise DimensionError(f"input has {x.shape[-1]} channels, model expects {cfg.in_channels}")
    H, W = x.shape[-3], x.shape[-2]
    caches = []
    h = x
    scale = None
    if cfg.input_mean is not None:
        scale = np.asarray(cfg.input_std)
        h = (x - np.asarray(cfg.input_mean)) / scale
    for i in range(len(cfg.widths)):
        z, conv_cache = T.conv2d_forward(h, params[f"enc.{i}.w"], params[f"enc.{i}.b"])
        h = T.relu(z)
        pooled_shape = None
        if i in cfg.pool_after:
            pooled_shape = h.shape
            h = T.avg_pool2(h)
        caches.append((conv_cache, z, pooled_shape))
    low_shape = h.shape
    if (h.shape[-3], h.shape[-2]) != (H, W):
        h = T.bilinear_upsample(h, H, W)
    return h, (caches, low_shape, scale)


def encode_backward(grad_f, enc_cache) -> tuple:
    """Returns ``(grad_x, grads)`` for the encoder parameters."""
    caches, low_shape, scale = enc_cache
    g = T.bilinear_upsample_backward(grad_f, low_shape)
    grads = {}
    for i in reversed(range(len(caches))):
        conv_cache, z, pooled_shape = caches[i]
        if pooled_shape is not None:
            g = T.avg_pool2_backward(g, pooled_shape)
        g = T.relu_backward(g, z)
        g, gk, gb = T.conv2d_backward(g, conv_cache)
        grads[f"enc.{i}.w"] = gk
        grads[f"enc.{i}.b"] = gb
    if scale is not None:
        g = g / scale
    return g, grads


def encode(x, params: ModelParams) -> np.ndarray:
    return encode_forward(x, params)[0]


def image_logits(f, params: ModelParams) -> np.ndarray:
    return T.global_avg_pool(f) @ params["img.w"].T + params["img.b"]


def classify_image(f, params: ModelParams) -> np.ndarray:
    """``softmax(W @ GAP(F) + b)`` over the image classes."""
    return T.softmax(image_logits(f, params))


def pixel_logits_forward(f, params: ModelParams):
    """Per-location 2-way logits ``[N x] H x W x 2`` plus the cache for backward."""
    cfg = params.config
    f = np.asarray(f, dtype=np.float64)
    lead = f.shape[:-1]
    h = f.reshape(-1, f.shape[-1])
    stages = []
    if cfg.pixel_head == "multi-layer":
        for i in range(3):
            z = h @ params[f"pix.{i}.w"].T + params[f"pix.{i}.b"]
            stages.append((h, z))
            h = T.relu(z)
        w, b = params["pix.out.w"], params["pix.out.b"]
    else:
        w, b = params["pix.w"], params["pix.b"]
    logits = h @ w.T + b
    return logits.reshape(*lead, 2), (stages, h, lead)


def pixel_logits_backward(grad_logits, cache, params: ModelParams):
    """Returns ``(grad_f, grads)`` for the pixel head."""
    stages, h, lead = cache
    g = np.asarray(grad_logits, dtype=np.float64).reshape(-1, 2)
    grads = {}
    if params.config.pixel_head == "multi-layer":
        grads["pix.out.w"] = g.T @ h
        grads["pix.out.b"] = g.sum(axis=0)
        g = g @ params["pix.out.w"]
        for i in reversed(range(3)):
            h_in, z = stages[i]
            g = T.relu_backward(g, z)
            grads[f"pix.{i}.w"] = g.T @ h_in
            grads[f"pix.{i}.b"] = g.sum(axis=0)
            g = g @ params[f"pix.{i}.w"]
    else:
        grads["pix.w"] = g.T @ h
        grads["pix.b"] = g.sum(axis=0)
        g = g @ params["pix.w"]
    return g.reshape(*lead, -1), grads


def classify_pixels(f, params: ModelParams) -> np.ndarray:
    """Localization maps ``S``: per-location (background, foreground) probabilities."""
    return T.softmax(pixel_logits_forward(f, params)[0])


@dataclass
class Cam:
    map: np.ndarray
    source_class: int
    checkpoint_id: str = ""
    degenerate: bool = False


def normalize_cam(raw) -> tuple:
    """Min-max scale to [0, 1]. Returns ``(map, degenerate)``; a flat map becomes all zeros."""
    raw = np.asarray(raw, dtype=np.float64)
    lo, hi = raw.min(), raw.max()
    if hi - lo < 1e-12:
        return np.zeros_like(raw), True
    return (raw - lo) / (hi - lo), False


def raw_cam(f, params: ModelParams, k: int) -> np.ndarray:
    return np.asarray(f, dtype=np.float64) @ params["img.w"][k]


def baseline_cam(f, params: ModelParams, k: int, checkpoint_id: str = "") -> Cam:
    """Classic CAM: class-``k`` image-head weights projected onto every pixel feature."""
    if not 0 <= k < params.config.num_classes:
        raise IndexError(f"class {k} out of range for {params.config.num_classes} classes")
    m, degenerate = normalize_cam(raw_cam(f, params, k))
    return Cam(m, int(k), checkpoint_id, degenerate)


def infer(x, params: ModelParams) -> tuple:
    """One encoder pass feeding both heads: ``(image probs, S)``."""
    f = encode(x, params)
    return classify_image(f, params), classify_pixels(f, params)


# -------------------------------------------------------------- checkpoints


def serialize_params(params: ModelParams) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    cfg = json.dumps(params.config.to_dict(), sort_keys=True).encode()
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    for name in sorted(params.tensors):
        arr = np.ascontiguousarray(params.tensors[name], dtype="<f8")
        raw_name = name.encode()
        buf.write(struct.pack("<I", len(raw_name)))
        buf.write(raw_name)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


def deserialize_params(data: bytes, source: str = "<bytes>") -> ModelParams:
    def take(offset, size, what):
        if offset + size > len(data):
            raise FormatError(f"{source}: truncated {what} at byte offset {offset}")
        return data[offset:offset + size], offset + size

    head, off = take(0, 4, "magic")
    if head != MAGIC:
        raise FormatError(f"{source}: bad magic {head!r} at byte offset 0")
    raw, off = take(off, 4, "version")
    (version,) = struct.unpack("<I", raw)
    if version != FORMAT_VERSION:
        raise FormatError(f"{source}: unsupported format version {version} at byte offset 4")
    raw, off = take(off, 4, "config length")
    (cfg_len,) = struct.unpack("<I", raw)
    raw, off = take(off, cfg_len, "config block")
    try:
        config = ModelConfig.from_dict(json.loads(raw))
    except (json.JSONDecodeError, ConfigurationError, TypeError) as exc:
        raise FormatError(f"{source}: invalid config block at byte offset 12: {exc}") from exc
    tensors = {}
    while off < len(data):
        start = off
        raw, off = take(off, 4, "name length")
        (nlen,) = struct.unpack("<I", raw)
        raw, off = take(off, nlen, "tensor name")
        name = raw.decode()
        raw, off = take(off, 4, "rank")
        (rank,) = struct.unpack("<I", raw)
        raw, off = take(off, 4 * rank, "extents")
        shape = struct.unpack(f"<{rank}I", raw)
        count = int(np.prod(shape)) if rank else 1
        raw, off = take(off, 8 * count, f"payload of {name!r}")
        if name in tensors:
            raise FormatError(f"{source}: duplicate tensor {name!r} at byte offset {start}")
        tensors[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)
    try:
        return ModelParams(config, tensors)
    except DimensionError as exc:
        raise FormatError(f"{source}: {exc}") from exc


def save_checkpoint(params: ModelParams, path) -> str:
    """Write a PXCM checkpoint; returns its content hash (first 16 hex digits)."""
    data = serialize_params(params)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()[:16]


def load_checkpoint(path) -> ModelParams:
    path = Path(path)
    return deserialize_params(path.read_bytes(), str(path))


def checkpoint_id(params: ModelParams) -> str:
    return hashlib.sha256(serialize_params(params)).hexdigest()[:16]
