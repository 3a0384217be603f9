"""Synthetic histology-like images with pixel ground truth, stain shifts, and PPM/PGM I/O.

Two generator modes mirror the mask semantics of the two benchmark
families:

``glas-like``
    Every image holds 1-3 smooth gland-like blobs; the texture frequency
    inside the blobs encodes the label, so both classes have non-empty masks.
``cam16-like``
    Label 1 images hold tumour blobs; label 0 images are pure stroma with an
    empty mask.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, FormatError

MODES = ("glas-like", "cam16-like")
SPLITS = ("train", "val", "test")
_SPLIT_CODE = {"train": 0, "val": 1, "test": 2}

_STROMA = np.array([0.94, 0.72, 0.84])
_GLAND = np.array([0.52, 0.30, 0.62])


@dataclass
class Sample:
    image: np.ndarray  # H x W x 3 in [0, 1]
    label: int
    mask: np.ndarray  # H x W in {0, 1}; evaluation only
    id: str
    domain: str = "source"
    seed: int = 0
    supervised: bool = False  # one of the k fully annotated validation images


@dataclass
class GenConfig:
    height: int = 64
    width: int = 64
    mode: str = "glas-like"
    n_train: int = 200
    n_val: int = 40
    n_test: int = 80
    blobs: tuple = (1, 3)
    radius: tuple = (7.0, 13.0)
    # value-noise lattice spacing (pixels) inside blobs, indexed by label
    texture_cell: tuple = (6.0, 1.5)
    texture_contrast: float = 0.35
    # multiplicative darkening of gland color, indexed by label
    gland_shade: tuple = (0.0, 0.0)
    background_cell: float = 5.0
    background_contrast: float = 0.25
    seed: int = 0
    k_supervised: int = 3
    domain: str = "source"

    def validate(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.height < 8 or self.width < 8:
            raise ConfigurationError("images must be at least 8x8")
        for split in SPLITS:
            n = self.split_size(split)
            if n <= 0:
                raise ConfigurationError(f"split {split!r} has size {n}; must be positive")
            if n % 2:
                raise ConfigurationError(f"split {split!r} size {n} must be even for class balance")
        if not 1 <= self.blobs[0] <= self.blobs[1]:
            raise ConfigurationError(f"invalid blob count range {self.blobs}")
        if not 0 < self.radius[0] <= self.radius[1]:
            raise ConfigurationError(f"invalid radius range {self.radius}")
        if not 0 <= self.k_supervised <= self.n_val // 2:
            raise ConfigurationError(
                f"k_supervised={self.k_supervised} exceeds the per-class validation size {self.n_val // 2}"
            )
        return self

    def split_size(self, split: str) -> int:
        return {"train": self.n_train, "val": self.n_val, "test": self.n_test}[split]

    def to_dict(self):
        d = asdict(self)
        d["blobs"] = list(self.blobs)
        d["radius"] = list(self.radius)
        d["texture_cell"] = list(self.texture_cell)
        d["gland_shade"] = list(self.gland_shade)
        return d

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown GenConfig fields: {sorted(unknown)}")
        d = dict(d)
        for key in ("blobs", "radius", "texture_cell", "gland_shade"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d).validate()


def value_noise(h: int, w: int, cell: float, rng: np.random.Generator) -> np.ndarray:
    """Seeded lattice of uniform values, bilinearly interpolated to ``h x w``. Range [0, 1]."""
    gh = int(np.ceil((h - 1) / cell)) + 2
    gw = int(np.ceil((w - 1) / cell)) + 2
    lattice = rng.random((gh, gw))
    ys = np.arange(h) / cell
    xs = np.arange(w) / cell
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    a = lattice[y0][:, x0]
    b = lattice[y0][:, x0 + 1]
    c = lattice[y0 + 1][:, x0]
    d = lattice[y0 + 1][:, x0 + 1]
    return (1 - fy) * ((1 - fx) * a + fx * b) + fy * ((1 - fx) * c + fx * d)


def _blob_mask(h, w, cy, cx, r0, rng):
    """Star-shaped region with a smooth radius profile r(theta)."""
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    theta = np.arctan2(dy, dx)
    radius = np.full_like(theta, r0)
    for harmonic in (2, 3, 5):
        amp = rng.uniform(0.0, 0.12)
        phase = rng.uniform(0.0, 2 * np.pi)
        radius += r0 * amp * np.sin(harmonic * theta + phase)
    return np.hypot(dy, dx) <= radius


def _blend_weight(mask: np.ndarray) -> np.ndarray:
    """Soften the blob edge over roughly one pixel (3x3 box blur of the mask)."""
    m = np.pad(mask.astype(np.float64), 1, mode="edge")
    h, w = mask.shape
    acc = sum(m[i:i + h, j:j + w] for i in range(3) for j in range(3))
    return acc / 9.0


def generate_sample(config: GenConfig, label: int, seed_seq, sample_id: str) -> Sample:
    h, w = config.height, config.width
    rng = np.random.default_rng(seed_seq)

    bg_tex = value_noise(h, w, config.background_cell, rng)
    fine = value_noise(h, w, max(config.background_cell / 2.0, 1.0), rng)
    shade = 1.0 - config.background_contrast * (0.7 * bg_tex + 0.3 * fine)
    image = _STROMA[None, None, :] * shade[..., None]

    mask = np.zeros((h, w), dtype=bool)
    has_blobs = config.mode == "glas-like" or label == 1
    if has_blobs:
        count = int(rng.integers(config.blobs[0], config.blobs[1] + 1))
        for _ in range(count):
            r0 = rng.uniform(*config.radius)
            margin = min(r0 * 0.6, h / 2 - 1)
            cy = rng.uniform(margin, h - 1 - margin)
            cx = rng.uniform(margin, w - 1 - margin)
            mask |= _blob_mask(h, w, cy, cx, r0, rng)

        cell = config.texture_cell[label] if config.mode == "glas-like" else config.texture_cell[1]
        tex = value_noise(h, w, cell, rng)
        tone = 1.0 - config.gland_shade[label if config.mode == "glas-like" else 1]
        gland = tone * _GLAND[None, None, :] * (1.0 - config.texture_contrast * (2.0 * tex - 1.0))[..., None]
        alpha = _blend_weight(mask)[..., None] if mask.any() else np.zeros((h, w, 1))
        image = (1.0 - alpha) * image + alpha * gland

    image = np.clip(image, 0.0, 1.0)
    seed_val = int(seed_seq.generate_state(1)[0]) if hasattr(seed_seq, "generate_state") else 0
    return Sample(
        image=np.ascontiguousarray(image),
        label=int(label),
        mask=mask.astype(np.float64),
        id=sample_id,
        domain=config.domain,
        seed=seed_val,
    )


def generate_split(config: GenConfig, split: str) -> list:
    n = config.split_size(split)
    samples = []
    for i in range(n):
        label = i % 2
        ss = np.random.SeedSequence([config.seed, _SPLIT_CODE[split], i])
        s = generate_sample(config, label, ss, f"{split}-{i:05d}")
        if split == "val" and i // 2 < config.k_supervised:
            s.supervised = True
        samples.append(s)
    return samples


def generate_dataset(config: GenConfig) -> dict:
    """Deterministically build ``{"train", "val", "test"}`` sample lists from ``config``."""
    config.validate()
    return {split: generate_split(config, split) for split in SPLITS}


# --------------------------------------------------------------------- stains


@dataclass
class StainTransform:
    matrix: np.ndarray = field(default_factory=lambda: np.eye(3))
    offset: np.ndarray = field(default_factory=lambda: np.zeros(3))
    magnitude: float = 0.0

    def distance(self) -> float:
        """Frobenius norm of ``matrix - I`` plus L2 norm of ``offset``."""
        return float(np.linalg.norm(self.matrix - np.eye(3)) + np.linalg.norm(self.offset))

    def to_dict(self):
        return {
            "matrix": self.matrix.tolist(),
            "offset": self.offset.tolist(),
            "magnitude": self.magnitude,
            "distance": self.distance(),
        }


def apply_stain(image: np.ndarray, t: StainTransform) -> np.ndarray:
    """Per-pixel ``clamp(M @ color + b, 0, 1)``."""
    image = np.asarray(image, dtype=np.float64)
    out = image @ np.asarray(t.matrix).T + np.asarray(t.offset)
    return np.clip(out, 0.0, 1.0)


def stain_series(count: int = 10, seed: int = 0) -> list:
    """Stain shifts of increasing magnitude ``i / count`` for ``i = 1..count``.

    One random perturbation is drawn per seed and scaled, so the distance
    to the identity grows strictly with the level.
    """
    if count < 1:
        raise ConfigurationError(f"count must be >= 1, got {count}")
    rng = np.random.default_rng([seed, 0x57A1])
    perturb = rng.uniform(-0.3, 0.3, size=(3, 3))
    shift = rng.uniform(-0.12, 0.12, size=3)
    series = []
    for i in range(1, count + 1):
        s = i / count
        series.append(StainTransform(np.eye(3) + s * perturb, s * shift, s))
    return sorted(series, key=lambda t: t.distance())


# ------------------------------------------------------------------ file I/O

_HEADER_RE = re.compile(rb"(P[56])\s+(?:#.*\s+)*(\d+)\s+(?:#.*\s+)*(\d+)\s+(?:#.*\s+)*(\d+)\s")


def encode_pnm(array: np.ndarray) -> bytes:
    """Binary PPM (``H x W x 3``) or PGM (``H x W``) bytes with maxval 255."""
    a = np.asarray(array, dtype=np.float64)
    if a.ndim == 3 and a.shape[2] == 3:
        magic = b"P6"
    elif a.ndim == 2:
        magic = b"P5"
    else:
        raise FormatError(f"cannot encode array of shape {a.shape} as PPM/PGM")
    h, w = a.shape[:2]
    payload = np.round(np.clip(a, 0.0, 1.0) * 255.0).astype(np.uint8).tobytes()
    return magic + b"\n%d %d\n255\n" % (w, h) + payload


def decode_pnm(data: bytes, source: str = "<bytes>") -> np.ndarray:
    m = _HEADER_RE.match(data)
    if m is None:
        raise FormatError(f"{source}: malformed PPM/PGM header at byte offset 0")
    magic, w, h, maxval = m.group(1), int(m.group(2)), int(m.group(3)), int(m.group(4))
    if maxval != 255:
        raise FormatError(f"{source}: maxval {maxval} at byte offset {m.start(4)}; only 255 is supported")
    if w <= 0 or h <= 0:
        raise FormatError(f"{source}: non-positive size {w}x{h} at byte offset {m.start(2)}")
    channels = 3 if magic == b"P6" else 1
    start = m.end()
    expected = w * h * channels
    if len(data) - start < expected:
        raise FormatError(
            f"{source}: truncated payload at byte offset {len(data)}; expected {expected} bytes from offset {start}"
        )
    pix = np.frombuffer(data, dtype=np.uint8, count=expected, offset=start).astype(np.float64) / 255.0
    return pix.reshape(h, w, 3) if channels == 3 else pix.reshape(h, w)


def save_sample(sample: Sample, directory, stem: str | None = None) -> dict:
    """Write ``<stem>.ppm``, ``<stem>.pgm`` and ``<stem>.json`` into ``directory``.

    Returns the manifest entry with paths relative to ``directory``.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    stem = stem or sample.id
    (directory / f"{stem}.ppm").write_bytes(encode_pnm(sample.image))
    (directory / f"{stem}.pgm").write_bytes(encode_pnm(sample.mask))
    meta = {
        "id": sample.id,
        "label": sample.label,
        "domain": sample.domain,
        "seed": sample.seed,
        "supervised": sample.supervised,
    }
    (directory / f"{stem}.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
    return {
        "id": sample.id,
        "label": sample.label,
        "image": f"{stem}.ppm",
        "mask": f"{stem}.pgm",
        "meta": f"{stem}.json",
    }


def load_sample(path) -> Sample:
    """Load a sample from its ``.json`` sidecar path (or the stem without suffix)."""
    path = Path(path)
    stem = path.with_suffix("") if path.suffix in (".json", ".ppm", ".pgm") else path
    meta_path = stem.with_suffix(".json")
    try:
        meta = json.loads(meta_path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{meta_path}: invalid JSON at byte offset {exc.pos}") from exc
    for key in ("id", "label"):
        if key not in meta:
            raise FormatError(f"{meta_path}: missing field {key!r}")
    if meta["label"] not in (0, 1) or isinstance(meta["label"], bool):
        raise FormatError(f"{meta_path}: field 'label' must be 0 or 1, got {meta['label']!r}")
    ppm = stem.with_suffix(".ppm")
    pgm = stem.with_suffix(".pgm")
    image = decode_pnm(ppm.read_bytes(), str(ppm))
    mask = decode_pnm(pgm.read_bytes(), str(pgm))
    if image.ndim != 3:
        raise FormatError(f"{ppm}: expected a P6 color image")
    if mask.ndim != 2 or mask.shape != image.shape[:2]:
        raise FormatError(f"{pgm}: mask must be a P5 image of size {image.shape[1]}x{image.shape[0]}")
    if not np.all((mask == 0.0) | (mask == 1.0)):
        raise FormatError(f"{pgm}: mask is not binary")
    return Sample(
        image=image,
        label=int(meta["label"]),
        mask=mask,
        id=str(meta["id"]),
        domain=str(meta.get("domain", "source")),
        seed=int(meta.get("seed", 0)),
        supervised=bool(meta.get("supervised", False)),
    )


def save_dataset(dataset: dict, root, config: GenConfig | None = None) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for split, samples in dataset.items():
        entries = [save_sample(s, root / split) for s in samples]
        manifest = {"split": split, "count": len(entries), "samples": entries}
        (root / split / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")
    if config is not None:
        (root / "config.json").write_text(json.dumps(config.to_dict(), indent=1, sort_keys=True) + "\n")


def load_split(root, split: str) -> list:
    split_dir = Path(root) / split
    manifest_path = split_dir / "manifest.json"
    if not manifest_path.exists():
        raise FormatError(f"{manifest_path}: split manifest not found")
    manifest = json.loads(manifest_path.read_text())
    return [load_sample(split_dir / e["meta"]) for e in manifest["samples"]]


def load_dataset(root, splits=SPLITS) -> dict:
    return {split: load_split(root, split) for split in splits if (Path(root) / split).is_dir()}


def dataset_fingerprint(samples) -> str:
    """Order-sensitive identity of a split, used to refuse t-tests across different splits."""
    h = hashlib.sha256()
    for s in samples:
        h.update(s.id.encode())
        h.update(np.round(s.mask).astype(np.uint8).tobytes())
    return h.hexdigest()[:16]


def fg_fraction(samples) -> float:
    return float(np.mean([s.mask.mean() for s in samples]))

