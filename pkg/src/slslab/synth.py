"""Synthetic infrared scenes and dataset manifests.

Scenes are a smooth noisy background with low-frequency clutter plus a few
bright Gaussian blobs.  A pixel belongs to a target's mask when that target's
own contribution is at least ``MASK_FRACTION`` of its peak, so mask size is
set by the blob width.  Everything is a pure function of ``(config, seed,
index)``.

On-disk layout::

    <root>/images/<id>.pgm   8-bit P5
    <root>/masks/<id>.pgm    0/255
    <root>/manifest.json
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .metrics import BUCKETS, bucket_of

log = logging.getLogger(__name__)

MANIFEST_VERSION = 1
MASK_FRACTION = 0.25
SPLIT_POLICIES = {"4:1": 0.8, "1:1": 0.5}


class PlacementError(RuntimeError):
    """Targets could not be placed within the retry budget."""


class DatasetError(RuntimeError):
    pass


@dataclass(frozen=True)
class SceneConfig:
    size: tuple[int, int] = (64, 64)
    targets_per_image: tuple[int, int] = (1, 3)
    # blob sigma ranges (px) tried for each size bucket, smallest bucket first
    bucket_sigmas: tuple[tuple[float, float], ...] = ((0.5, 1.0), (1.1, 2.0), (2.2, 3.2))
    target_peak: tuple[float, float] = (0.35, 0.6)
    background_level: tuple[float, float] = (0.1, 0.25)
    noise_std: float = 0.02
    noise_smooth: float = 1.0
    clutter_count: tuple[int, int] = (0, 3)
    clutter_sigma: tuple[float, float] = (5.0, 12.0)
    clutter_amplitude: tuple[float, float] = (0.02, 0.1)
    scale_mix: tuple[float, float, float] = (1 / 3, 1 / 3, 1 / 3)
    contrast_margin: float = 3.0
    max_retries: int = 200
    seed: int = 0

    def __post_init__(self):
        for name in ("size", "targets_per_image", "target_peak", "background_level",
                     "clutter_count", "clutter_sigma", "clutter_amplitude", "scale_mix"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        object.__setattr__(self, "bucket_sigmas", tuple(tuple(r) for r in self.bucket_sigmas))
        for name in ("targets_per_image", "target_peak", "background_level",
                     "clutter_count", "clutter_sigma", "clutter_amplitude"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name}: empty range {lo}..{hi}")
        if self.targets_per_image[0] < 0:
            raise ValueError("targets_per_image must be non-negative")
        if len(self.bucket_sigmas) != 3 or any(lo <= 0 or lo > hi for lo, hi in self.bucket_sigmas):
            raise ValueError("bucket_sigmas needs three non-empty positive ranges")
        if len(self.scale_mix) != 3 or min(self.scale_mix) < 0 or not math.isclose(sum(self.scale_mix), 1.0):
            raise ValueError("scale_mix must be three non-negative weights summing to 1")
        if self.target_peak[0] < self.contrast_margin * self.noise_std:
            raise ValueError("minimum target peak is below contrast_margin * noise_std")
        if min(self.size) < 8:
            raise ValueError("scene too small")

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    @classmethod
    def from_dict(cls, d: dict) -> SceneConfig:
        return cls(**d)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


@dataclass
class TargetInfo:
    center: tuple[float, float]  # (x, y), 1-based column/row
    sigma: float
    peak: float
    pixel_count: int
    bucket: str


@dataclass
class Sample:
    image: np.ndarray  # float64 in [0, 1], multiples of 1/255
    mask: np.ndarray  # uint8 in {0, 1}
    targets: list[TargetInfo]
    background: np.ndarray | None = None


def _gauss_kernel(sigma: float) -> np.ndarray:
    r = max(1, int(math.ceil(3 * sigma)))
    x = np.arange(-r, r + 1)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _blur(img: np.ndarray, sigma: float) -> np.ndarray:
    if sigma <= 0:
        return img
    k = _gauss_kernel(sigma)
    r = len(k) // 2
    out = np.pad(img, ((0, 0), (r, r)), mode="reflect")
    out = np.apply_along_axis(lambda v: np.convolve(v, k, mode="valid"), 1, out)
    out = np.pad(out, ((r, r), (0, 0)), mode="reflect")
    return np.apply_along_axis(lambda v: np.convolve(v, k, mode="valid"), 0, out)


def _background(cfg: SceneConfig, rng: np.random.Generator) -> np.ndarray:
    h, w = cfg.size
    noise = _blur(rng.standard_normal((h, w)), cfg.noise_smooth)
    noise *= cfg.noise_std / max(noise.std(), 1e-12)
    bg = rng.uniform(*cfg.background_level) + noise
    rows, cols = np.mgrid[0:h, 0:w]
    for _ in range(rng.integers(cfg.clutter_count[0], cfg.clutter_count[1] + 1)):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        s = rng.uniform(*cfg.clutter_sigma)
        amp = rng.uniform(*cfg.clutter_amplitude)
        bg += amp * np.exp(-((rows - cy) ** 2 + (cols - cx) ** 2) / (2 * s * s))
    return bg


def _dilate(mask: np.ndarray) -> np.ndarray:
    p = np.pad(mask, 1)
    out = np.zeros_like(mask)
    for dr in (0, 1, 2):
        for dc in (0, 1, 2):
            out |= p[dr : dr + mask.shape[0], dc : dc + mask.shape[1]]
    return out


def generate_scene(config: SceneConfig, index: int) -> Sample:
    """Deterministic scene number ``index`` of the stream defined by ``config.seed``."""
    rng = np.random.default_rng([config.seed, index])
    h, w = config.size
    bg = _background(config, rng)
    rows, cols = np.mgrid[0:h, 0:w]
    mask = np.zeros((h, w), dtype=bool)
    signal = np.zeros((h, w))
    targets: list[TargetInfo] = []
    n_targets = rng.integers(config.targets_per_image[0], config.targets_per_image[1] + 1)
    radius_factor = math.sqrt(2.0 * math.log(1.0 / MASK_FRACTION))
    for _ in range(n_targets):
        b = rng.choice(3, p=config.scale_mix)
        name, lo, hi = BUCKETS[b]
        for _attempt in range(config.max_retries):
            sigma = rng.uniform(*config.bucket_sigmas[b])
            margin = sigma * radius_factor + 1.0
            if 2 * margin >= min(h, w):
                continue
            cy = rng.uniform(margin, h - 1 - margin)
            cx = rng.uniform(margin, w - 1 - margin)
            blob = np.exp(-((rows - cy) ** 2 + (cols - cx) ** 2) / (2 * sigma * sigma))
            own = blob >= MASK_FRACTION
            count = int(own.sum())
            if not lo < count <= hi:
                continue
            if (_dilate(own) & mask).any():
                continue
            break
        else:
            raise PlacementError(f"scene {index}: could not place a {name} target in {config.max_retries} tries")
        peak = rng.uniform(*config.target_peak)
        signal += peak * blob
        mask |= own
        # centers reported 1-based like every other coordinate in the package
        targets.append(TargetInfo((cx + 1.0, cy + 1.0), float(sigma), float(peak), count, name))
    image = np.round(np.clip(bg + signal, 0.0, 1.0) * 255.0) / 255.0
    return Sample(image, mask.astype(np.uint8), targets, bg)


# -- PGM --------------------------------------------------------------------


def write_pgm(path, array_u8: np.ndarray) -> None:
    arr = np.asarray(array_u8)
    if arr.dtype != np.uint8 or arr.ndim != 2:
        raise ValueError("write_pgm expects a 2-D uint8 array")
    h, w = arr.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + arr.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DatasetError(f"{path}: truncated PGM header")
        tokens.append(data[start:pos])
    pos += 1
    if tokens[0] != b"P5":
        raise DatasetError(f"{path}: only binary PGM (P5) is supported")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval > 255:
        raise DatasetError(f"{path}: 16-bit PGM not supported")
    body = data[pos : pos + w * h]
    if len(body) != w * h:
        raise DatasetError(f"{path}: truncated PGM body")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w).copy()


def _read_gray(path: Path) -> np.ndarray:
    if path.suffix.lower() == ".pgm":
        return read_pgm(path)
    try:
        from PIL import Image
    except ImportError as exc:  # pragma: no cover
        raise DatasetError(f"{path}: reading {path.suffix} files needs Pillow") from exc
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("L"), dtype=np.uint8)
    except OSError as exc:
        raise DatasetError(f"{path}: unreadable image ({exc})") from exc


# -- manifests --------------------------------------------------------------


@dataclass
class SampleEntry:
    id: str
    split: str
    image: str  # path relative to the manifest directory, or absolute
    mask: str
    targets: list[dict] = field(default_factory=list)


@dataclass
class DatasetManifest:
    kind: str
    seed: int
    samples: list[SampleEntry]
    config: dict | None = None
    config_hash: str | None = None
    dataset_hash: str | None = None
    skipped: list[str] = field(default_factory=list)
    root: Path | None = None

    def ids(self, split: str | None = None) -> list[str]:
        return [s.id for s in self.samples if split is None or s.split == split]

    def to_dict(self) -> dict:
        return {
            "version": MANIFEST_VERSION,
            "kind": self.kind,
            "seed": self.seed,
            "config": self.config,
            "config_hash": self.config_hash,
            "dataset_hash": self.dataset_hash,
            "skipped": self.skipped,
            "samples": [asdict(s) for s in self.samples],
        }

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path) -> DatasetManifest:
        path = Path(path)
        if path.is_dir():
            path = path / "manifest.json"
        if not path.exists():
            raise DatasetError(f"no manifest at {path}")
        d = json.loads(path.read_text())
        if d.get("version") != MANIFEST_VERSION:
            raise DatasetError(f"{path}: unsupported manifest version {d.get('version')}")
        return cls(
            kind=d["kind"],
            seed=d["seed"],
            samples=[SampleEntry(**s) for s in d["samples"]],
            config=d.get("config"),
            config_hash=d.get("config_hash"),
            dataset_hash=d.get("dataset_hash"),
            skipped=d.get("skipped", []),
            root=path.parent,
        )

    def _resolve(self, p: str) -> Path:
        q = Path(p)
        return q if q.is_absolute() or self.root is None else self.root / q

    def load_split(self, split: str) -> tuple[np.ndarray, np.ndarray]:
        """Images in [0, 1] and binary masks of one split, stacked N x H x W."""
        entries = [s for s in self.samples if s.split == split]
        if not entries:
            raise DatasetError(f"split {split!r} is empty")
        images = np.stack([_read_gray(self._resolve(s.image)).astype(np.float64) / 255.0 for s in entries])
        masks = np.stack([(_read_gray(self._resolve(s.mask)) >= 128).astype(np.uint8) for s in entries])
        return images, masks


def _hash_files(root: Path, entries: Sequence[SampleEntry]) -> str:
    h = hashlib.sha256()
    for s in entries:
        for rel in (s.image, s.mask):
            h.update(rel.encode())
            h.update((root / rel).read_bytes())
    return h.hexdigest()


def generate_dataset(config: SceneConfig, n_train: int, n_test: int, out_dir) -> DatasetManifest:
    """Write ``n_train + n_test`` scenes and their manifest under ``out_dir``."""
    if n_train <= 0 or n_test <= 0:
        raise ValueError("n_train and n_test must be positive")
    root = Path(out_dir)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    entries = []
    for index in range(n_train + n_test):
        sample = generate_scene(config, index)
        sid = f"s{index:06d}"
        img_rel, mask_rel = f"images/{sid}.pgm", f"masks/{sid}.pgm"
        write_pgm(root / img_rel, np.round(sample.image * 255).astype(np.uint8))
        write_pgm(root / mask_rel, sample.mask * np.uint8(255))
        entries.append(
            SampleEntry(
                sid,
                "train" if index < n_train else "test",
                img_rel,
                mask_rel,
                [asdict(t) for t in sample.targets],
            )
        )
    manifest = DatasetManifest(
        kind="synthetic",
        seed=config.seed,
        samples=entries,
        config=config.to_dict(),
        config_hash=config.digest(),
        dataset_hash=_hash_files(root, entries),
        root=root,
    )
    manifest.save(root / "manifest.json")
    return manifest


def regenerate(manifest: DatasetManifest, out_dir) -> DatasetManifest:
    """Rebuild a synthetic dataset from the config and seed stored in its manifest."""
    if manifest.kind != "synthetic" or manifest.config is None:
        raise DatasetError("only synthetic manifests can be regenerated")
    cfg = SceneConfig.from_dict(manifest.config)
    n_train = len(manifest.ids("train"))
    return generate_dataset(cfg, n_train, len(manifest.samples) - n_train, out_dir)


IMAGE_SUFFIXES = (".pgm", ".png", ".bmp", ".jpg", ".jpeg", ".tif", ".tiff")


def ingest_external(
    image_dir,
    mask_dir,
    split: str = "4:1",
    seed: int = 0,
    out_dir=None,
) -> DatasetManifest:
    """Index paired grayscale images and masks that share a file stem.

    Images without a mask (and masks without an image) are skipped and listed
    in ``manifest.skipped``.  Masks are read as ``>= 128``.  The split policy is
    ``"4:1"`` or ``"1:1"`` (train:test) over a seeded shuffle.
    """
    if split not in SPLIT_POLICIES:
        raise ValueError(f"unknown split policy {split!r}; expected one of {sorted(SPLIT_POLICIES)}")
    image_dir, mask_dir = Path(image_dir), Path(mask_dir)

    def by_stem(d: Path) -> dict[str, Path]:
        if not d.is_dir():
            raise DatasetError(f"{d} is not a directory")
        return {p.stem: p for p in sorted(d.iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES}

    images, masks = by_stem(image_dir), by_stem(mask_dir)
    stems = sorted(set(images) & set(masks))
    skipped = sorted(str(images[s]) for s in set(images) - set(masks))
    skipped += sorted(str(masks[s]) for s in set(masks) - set(images))
    if skipped:
        log.warning("skipping %d unpaired files", len(skipped))
    if not stems:
        raise DatasetError(f"no image/mask pairs found in {image_dir} and {mask_dir}")

    order = np.random.default_rng(seed).permutation(len(stems))
    n_train = int(round(SPLIT_POLICIES[split] * len(stems)))
    entries = []
    for rank, i in enumerate(order):
        stem = stems[i]
        img = _read_gray(images[stem])
        msk = _read_gray(masks[stem]) >= 128
        if img.shape != msk.shape:
            raise DatasetError(f"{stem}: image {img.shape} and mask {msk.shape} differ in size")
        entries.append(
            SampleEntry(
                stem,
                "train" if rank < n_train else "test",
                str(images[stem].resolve()),
                str(masks[stem].resolve()),
            )
        )
    entries.sort(key=lambda e: e.id)
    manifest = DatasetManifest(kind="external", seed=seed, samples=entries, skipped=skipped)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        manifest.root = out
        manifest.save(out / "manifest.json")
    return manifest


def bucket_fractions(manifest: DatasetManifest) -> dict[str, float]:
    counts = {name: 0 for name, _, _ in BUCKETS}
    for s in manifest.samples:
        for t in s.targets:
            counts[bucket_of(t["pixel_count"])] += 1
    total = sum(counts.values())
    return {k: (v / total if total else 0.0) for k, v in counts.items()}
