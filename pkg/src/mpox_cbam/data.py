"""Labelled image datasets: loading, resizing, augmentation, splitting, synthesis."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import EmptyClass, FormatError, InvalidConfig, UnsupportedFormat
from .imagefile import encode_ppm, read_image

logger = logging.getLogger(__name__)

CLASS_NAMES = ("Others", "Monkeypox")
IMAGE_SUFFIXES = (".png", ".ppm")


@dataclass(frozen=True, eq=False)
class ImageSample:
    pixels: np.ndarray  # 3 x H x W, values in [0, 1]
    label: int  # 0 = Others, 1 = Monkeypox
    source_id: str

    def __eq__(self, other):
        if not isinstance(other, ImageSample):
            return NotImplemented
        return (self.label, self.source_id) == (other.label, other.source_id) and np.array_equal(
            self.pixels, other.pixels)

    __hash__ = None


@dataclass(frozen=True)
class Dataset:
    samples: tuple[ImageSample, ...]
    class_names: tuple[str, str] = CLASS_NAMES
    skipped: tuple[UnsupportedFormat | FormatError, ...] = field(default=(), compare=False)

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        ids = [s.source_id for s in self.samples]
        if len(set(ids)) != len(ids):
            raise InvalidConfig("source ids must be unique within a dataset")

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.float64)

    def to_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        if not self.samples:
            return np.zeros((0, 3, 1, 1)), np.zeros(0)
        return np.stack([s.pixels for s in self.samples]), self.labels

    def subset(self, indices: Sequence[int]) -> "Dataset":
        return Dataset(tuple(self.samples[i] for i in indices), self.class_names)

    def __add__(self, other: "Dataset") -> "Dataset":
        return Dataset(self.samples + other.samples, self.class_names)


def _to_unit(img: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(img.transpose(2, 0, 1), dtype=np.float64) / 255.0


def load_directory(root, strict: bool = False) -> Dataset:
    """Load ``root/Monkeypox`` and ``root/Others`` into a :class:`Dataset`.

    Files are visited in lexicographic path order. Undecodable files are
    logged and listed in ``Dataset.skipped``; with ``strict=True`` the first
    one is raised instead.
    """
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"data directory not found: {root}")
    samples, skipped = [], []
    for label, cls in enumerate(CLASS_NAMES):
        cdir = root / cls
        if not cdir.is_dir():
            raise FileNotFoundError(f"missing class directory: {cdir}")
        count = 0
        for path in sorted(p for p in cdir.iterdir() if p.is_file()):
            try:
                img = read_image(path)
            except (UnsupportedFormat, FormatError) as exc:
                if strict:
                    raise
                logger.warning("skipping %s", exc)
                skipped.append(exc)
                continue
            samples.append(ImageSample(_to_unit(img), label, f"{cls}/{path.name}"))
            count += 1
        if count == 0:
            raise EmptyClass(f"no decodable images in {cdir}")
    samples.sort(key=lambda s: s.source_id)
    return Dataset(tuple(samples), skipped=tuple(skipped))


def write_directory(ds: Dataset, root) -> list[Path]:
    """Write every sample as an 8-bit PPM under ``root/<class>/``."""
    root = Path(root)
    written = []
    for cls in ds.class_names:
        (root / cls).mkdir(parents=True, exist_ok=True)
    for s in ds.samples:
        name = Path(s.source_id).name
        path = root / ds.class_names[s.label] / (Path(name).stem + ".ppm")
        img = np.round(np.clip(s.pixels, 0, 1) * 255.0).astype(np.uint8).transpose(1, 2, 0)
        path.write_bytes(encode_ppm(img))
        written.append(path)
    return written


# ---------------------------------------------------------------------------
# resizing


def _axis_weights(n_in: int, n_out: int):
    # half-pixel centres: output i samples input coordinate (i + 0.5) * n_in / n_out - 0.5
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def resize_array(pixels: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize of a ``C x H x W`` array."""
    if height < 1 or width < 1:
        raise InvalidConfig(f"target size must be positive, got {height}x{width}")
    _, h, w = pixels.shape
    if (h, w) == (height, width):
        return pixels.copy()
    y0, y1, wy = _axis_weights(h, height)
    x0, x1, wx = _axis_weights(w, width)
    top = pixels[:, y0, :]
    rows = top + (pixels[:, y1, :] - top) * wy[None, :, None]
    left = rows[:, :, x0]
    out = left + (rows[:, :, x1] - left) * wx[None, None, :]
    return np.clip(out, 0.0, 1.0)


def resize_bilinear(img: ImageSample, target: tuple[int, int]) -> ImageSample:
    return ImageSample(resize_array(img.pixels, *target), img.label, img.source_id)


def resize_dataset(ds: Dataset, target: tuple[int, int]) -> Dataset:
    return Dataset(tuple(resize_bilinear(s, target) for s in ds), ds.class_names, ds.skipped)


# ---------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentationSpec:
    horizontal_flip: bool = False
    vertical_flip: bool = False
    rotations: tuple[int, ...] = ()

    def __post_init__(self):
        rot = tuple(sorted(set(int(r) for r in self.rotations)))
        if any(r not in (90, 180, 270) for r in rot):
            raise InvalidConfig(f"rotations must be a subset of 90/180/270, got {self.rotations}")
        object.__setattr__(self, "rotations", rot)

    @property
    def transforms(self) -> list[str]:
        names = []
        if self.horizontal_flip:
            names.append("hflip")
        if self.vertical_flip:
            names.append("vflip")
        names.extend(f"rot{r}" for r in self.rotations)
        return names

    @property
    def copies_per_image(self) -> int:
        return 1 + len(self.transforms)


def apply_transform(pixels: np.ndarray, name: str) -> np.ndarray:
    if name == "hflip":
        return pixels[:, :, ::-1].copy()
    if name == "vflip":
        return pixels[:, ::-1, :].copy()
    if name.startswith("rot"):
        # counter-clockwise quarter turns in the H-W plane
        return np.rot90(pixels, k=int(name[3:]) // 90, axes=(1, 2)).copy()
    raise InvalidConfig(f"unknown transform {name!r}")


def augment(ds: Dataset, spec: AugmentationSpec) -> Dataset:
    """Originals followed by one deterministic copy per sample per enabled transform."""
    out = list(ds.samples)
    for name in spec.transforms:
        out.extend(ImageSample(apply_transform(s.pixels, name), s.label, f"{s.source_id}#{name}") for s in ds)
    return Dataset(tuple(out), ds.class_names)


# ---------------------------------------------------------------------------
# splitting


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.70
    test_fraction: float = 0.10
    val_fraction: float = 0.20
    seed: int = 0

    def __post_init__(self):
        fr = (self.train_fraction, self.test_fraction, self.val_fraction)
        if any(f < 0 for f in fr) or abs(sum(fr) - 1.0) > 1e-12:
            raise InvalidConfig(f"split fractions must be non-negative and sum to 1, got {fr}")


def _cut(n: int, frac: float) -> int:
    # guard against 0.7 * 10 style products landing just below an integer
    return int(math.floor(frac * n + 1e-9))


def split(ds: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset, Dataset]:
    """Stratified (train, test, val) partition.

    Each class is shuffled with its own seeded generator, then cut at the
    train and test fractions (floored); the remainder goes to validation.
    """
    if len(ds) < 10:
        raise InvalidConfig(f"need at least 10 samples to split, got {len(ds)}")
    labels = ds.labels
    parts: tuple[list, list, list] = ([], [], [])
    for cls in (0, 1):
        idx = np.flatnonzero(labels == cls)
        idx = idx[np.random.default_rng([spec.seed, cls]).permutation(len(idx))]
        n_train = _cut(len(idx), spec.train_fraction)
        n_test = _cut(len(idx), spec.test_fraction)
        parts[0].extend(idx[:n_train])
        parts[1].extend(idx[n_train : n_train + n_test])
        parts[2].extend(idx[n_train + n_test :])
    return tuple(ds.subset(sorted(p)) for p in parts)


# ---------------------------------------------------------------------------
# synthetic data


def synth_generate(n: int, image_size: tuple[int, int] = (32, 32), seed: int = 0) -> Dataset:
    """Balanced two-class images: dark noise, plus a bright Gaussian blob for class 1.

    Background pixels are N(0.2, 0.05) clamped to [0, 1]; the blob peaks at
    0.9 and its centre is uniform over the central half of the image. Pixels
    are quantised to multiples of 1/255 so they survive an 8-bit round trip.
    """
    h, w = image_size
    if n < 2 or n % 2:
        raise InvalidConfig(f"n must be a positive even number, got {n}")
    if h < 8 or w < 8:
        raise InvalidConfig(f"image size must be at least 8x8, got {h}x{w}")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.repeat([0, 1], n // 2))
    sigma = min(h, w) / 8.0
    yy, xx = np.mgrid[0:h, 0:w]
    samples = []
    for i, label in enumerate(labels):
        img = np.clip(rng.normal(0.2, 0.05, size=(3, h, w)), 0.0, 1.0)
        if label == 1:
            cy = rng.uniform(h / 4, 3 * h / 4)
            cx = rng.uniform(w / 4, 3 * w / 4)
            blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))
            img = img * (1.0 - blob) + 0.9 * blob
        img = np.round(img * 255.0) / 255.0
        samples.append(ImageSample(img, int(label), f"{CLASS_NAMES[label]}/synth_{i:05d}"))
    return Dataset(tuple(samples))
