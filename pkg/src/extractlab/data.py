"""Secret tasks and thief pools: synthetic generators, IDX files, splits.

Everything here is a pure function of its inputs and seed. Labels are stored
as ``(n, J)`` float arrays, one-hot for hard labels.
"""

from __future__ import annotations

import csv
import gzip
import struct
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .nn import one_hot

IDX_IMAGE_MAGIC = 2051
IDX_LABEL_MAGIC = 2049


class IdxFormatError(ValueError):
    pass


@dataclass
class LabeledDataset:
    samples: np.ndarray
    labels: np.ndarray
    fold: str = "train"

    def __post_init__(self):
        self.samples = np.atleast_2d(np.asarray(self.samples, dtype=np.float64))
        self.labels = np.atleast_2d(np.asarray(self.labels, dtype=np.float64))
        if len(self.samples) != len(self.labels):
            raise ValueError(f"{len(self.samples)} samples but {len(self.labels)} labels")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("samples must be finite")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def num_classes(self) -> int:
        return self.labels.shape[1]

    @property
    def classes(self) -> np.ndarray:
        return self.labels.argmax(axis=1)

    def subset(self, idx, fold: Optional[str] = None) -> "LabeledDataset":
        return LabeledDataset(self.samples[idx], self.labels[idx], fold or self.fold)


@dataclass
class UnlabeledPool:
    train: np.ndarray
    valid: np.ndarray
    provenance: str = "synthetic-natural"

    def __post_init__(self):
        self.train = np.asarray(self.train, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=np.float64)


@dataclass(frozen=True)
class SyntheticTaskSpec:
    kind: str
    num_classes: int = 2
    n_train: int = 2000
    n_valid: int = 500
    n_test: int = 2000
    noise: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("blobs", "rings", "checkerboard"):
            raise ValueError(f"unknown synthetic task {self.kind!r}")
        if self.kind in ("rings", "checkerboard") and self.num_classes != 2:
            raise ValueError(f"{self.kind} is a 2-class task")
        if self.num_classes < 2:
            raise ValueError("need at least 2 classes")
        if min(self.n_train, self.n_valid, self.n_test) < 1 or self.noise < 0:
            raise ValueError("fold sizes must be positive and noise nonnegative")


# rings: unit-width annuli alternate labels, [0,1) -> 0, [1,2) -> 1, ... out to RING_COUNT
RING_COUNT = 5
BLOB_RADIUS = 3.0
CHECKER_HALF_WIDTH = 2.0


def task_bounds(spec: SyntheticTaskSpec) -> tuple[np.ndarray, np.ndarray]:
    """Axis-aligned box that contains the task's data (noise-free support plus margin)."""
    if spec.kind == "rings":
        r = RING_COUNT + 3 * spec.noise
    elif spec.kind == "blobs":
        r = BLOB_RADIUS + 1.0 + 3 * spec.noise
    else:
        r = CHECKER_HALF_WIDTH + 3 * spec.noise
    return np.array([-r, -r]), np.array([r, r])


def ring_label(points) -> np.ndarray:
    r = np.linalg.norm(np.atleast_2d(points), axis=1)
    return (np.floor(r).astype(np.int64) % 2)


def checker_label(points) -> np.ndarray:
    p = np.atleast_2d(points)
    return (np.floor(p[:, 0]).astype(np.int64) + np.floor(p[:, 1]).astype(np.int64)) % 2


def blob_centers(num_classes: int) -> np.ndarray:
    ang = 2 * np.pi * np.arange(num_classes) / num_classes
    return BLOB_RADIUS * np.stack([np.cos(ang), np.sin(ang)], axis=1)


def _draw(spec: SyntheticTaskSpec, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    if spec.kind == "blobs":
        cls = rng.integers(0, spec.num_classes, size=n)
        x = blob_centers(spec.num_classes)[cls] + spec.noise * rng.standard_normal((n, 2))
    elif spec.kind == "rings":
        # area-uniform over the disc of radius RING_COUNT
        r = RING_COUNT * np.sqrt(rng.random(n))
        theta = 2 * np.pi * rng.random(n)
        base = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)
        cls = ring_label(base)
        x = base + spec.noise * rng.standard_normal((n, 2))
    else:
        base = rng.uniform(-CHECKER_HALF_WIDTH, CHECKER_HALF_WIDTH, size=(n, 2))
        cls = checker_label(base)
        x = base + spec.noise * rng.standard_normal((n, 2))
    return x, cls


def gen_synthetic(spec: SyntheticTaskSpec) -> dict[str, LabeledDataset]:
    """Train/valid/test folds of a 2-D synthetic task; labels come from construction."""
    out = {}
    for i, (fold, n) in enumerate((("train", spec.n_train), ("valid", spec.n_valid), ("test", spec.n_test))):
        x, cls = _draw(spec, n, np.random.default_rng([spec.seed, i]))
        out[fold] = LabeledDataset(x, one_hot(cls, spec.num_classes), fold)
    return out


def gen_thief_pool(bounds, n_train: int, n_valid: int, mode: str = "natural", seed: int = 0,
                   n_components: int = 24) -> UnlabeledPool:
    """Unlabeled attacker data over a bounding box.

    ``noise`` draws i.i.d. uniform points in the box. ``natural`` draws from a
    wide Gaussian mixture whose centers are spread over the box, so the pool
    covers the whole input region with uneven density.
    """
    lo, hi = (np.asarray(b, dtype=np.float64) for b in bounds)
    if lo.shape != hi.shape or np.any(hi <= lo):
        raise ValueError("degenerate bounds: every upper bound must exceed its lower bound")
    if n_train < 1 or n_valid < 1:
        raise ValueError("pool partitions must be nonempty")
    rng = np.random.default_rng([seed, 17])
    n = n_train + n_valid
    if mode == "noise":
        x = rng.uniform(lo, hi, size=(n, lo.size))
        provenance = "uniform-noise"
    elif mode == "natural":
        centers = rng.uniform(lo, hi, size=(n_components, lo.size))
        scale = 0.15 * (hi - lo)
        comp = rng.integers(0, n_components, size=n)
        x = centers[comp] + scale * rng.standard_normal((n, lo.size))
        provenance = "synthetic-natural"
    else:
        raise ValueError(f"unknown thief mode {mode!r}")
    return UnlabeledPool(x[:n_train], x[n_train:], provenance)


def uniform_noise_pool(dim: int, n_train: int, n_valid: int, seed: int = 0) -> UnlabeledPool:
    """Uniform noise in the unit hypercube, the baseline thief for image tasks."""
    return gen_thief_pool((np.zeros(dim), np.ones(dim)), n_train, n_valid, "noise", seed)


def _exact_sizes(n: int, fractions: Sequence[float]) -> list[int]:
    fr = [Fraction(str(f)) for f in fractions]
    if any(f <= 0 for f in fr):
        raise ValueError("split fractions must be positive")
    if sum(fr) > 1:
        raise ValueError(f"split fractions sum to {float(sum(fr))} > 1")
    return [int(f * n) for f in fr]


def split(dataset: LabeledDataset, fractions: Sequence[float], seed: int = 0,
          folds: Optional[Sequence[str]] = None) -> list[LabeledDataset]:
    """Shuffle indices with ``seed`` and cut consecutive disjoint folds of ``floor(f * n)`` samples."""
    sizes = _exact_sizes(len(dataset), fractions)
    folds = list(folds) if folds is not None else [dataset.fold] * len(sizes)
    if len(sizes) == 1 and sizes[0] == len(dataset):
        return [dataset.subset(np.arange(len(dataset)), folds[0])]
    perm = np.random.default_rng(seed).permutation(len(dataset))
    out, start = [], 0
    for size, fold in zip(sizes, folds):
        out.append(dataset.subset(np.sort(perm[start:start + size]), fold))
        start += size
    return out


def split_indices(n: int, fractions: Sequence[float], seed: int = 0) -> list[np.ndarray]:
    sizes = _exact_sizes(n, fractions)
    perm = np.random.default_rng(seed).permutation(n)
    bounds = np.cumsum([0, *sizes])
    return [np.sort(perm[a:b]) for a, b in zip(bounds[:-1], bounds[1:])]


# IDX files: big-endian header, magic 2051 for images and 2049 for labels.

def _open(path):
    path = Path(path)
    if path.suffix == ".gz":
        return gzip.open(path, "rb")
    return open(path, "rb")


def read_idx_images(path) -> np.ndarray:
    with _open(path) as f:
        head = f.read(16)
        if len(head) < 16:
            raise IdxFormatError(f"{path}: truncated header")
        magic, count, rows, cols = struct.unpack(">iiii", head)
        if magic != IDX_IMAGE_MAGIC:
            raise IdxFormatError(f"{path}: bad magic number {magic}, expected {IDX_IMAGE_MAGIC}")
        payload = f.read()
    need = count * rows * cols
    if len(payload) < need:
        raise IdxFormatError(f"{path}: truncated payload ({len(payload)} of {need} bytes)")
    return np.frombuffer(payload[:need], dtype=np.uint8).reshape(count, rows, cols)


def read_idx_labels(path) -> np.ndarray:
    with _open(path) as f:
        head = f.read(8)
        if len(head) < 8:
            raise IdxFormatError(f"{path}: truncated header")
        magic, count = struct.unpack(">ii", head)
        if magic != IDX_LABEL_MAGIC:
            raise IdxFormatError(f"{path}: bad magic number {magic}, expected {IDX_LABEL_MAGIC}")
        payload = f.read()
    if len(payload) < count:
        raise IdxFormatError(f"{path}: truncated payload ({len(payload)} of {count} bytes)")
    return np.frombuffer(payload[:count], dtype=np.uint8).copy()


def write_idx_images(path, images) -> None:
    images = np.asarray(images, dtype=np.uint8)
    count, rows, cols = images.shape
    with open(path, "wb") as f:
        f.write(struct.pack(">iiii", IDX_IMAGE_MAGIC, count, rows, cols))
        f.write(images.tobytes())


def write_idx_labels(path, labels) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack(">ii", IDX_LABEL_MAGIC, labels.size))
        f.write(labels.tobytes())


def load_idx(images_path, labels_path, num_classes: Optional[int] = None, fold: str = "train") -> LabeledDataset:
    """Images scaled to [0, 1] and flattened row-major; labels one-hot."""
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if len(images) != len(labels):
        raise IdxFormatError(f"count mismatch: {len(images)} images vs {len(labels)} labels")
    j = num_classes or max(int(labels.max()) + 1 if labels.size else 2, 2)
    x = images.reshape(len(images), -1).astype(np.float64) / 255.0
    return LabeledDataset(x, one_hot(labels, j), fold)


def load_idx_unlabeled(images_path) -> np.ndarray:
    images = read_idx_images(images_path)
    return images.reshape(len(images), -1).astype(np.float64) / 255.0


IDX_NAMES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def find_idx_pair(directory, fold: str = "train") -> tuple[Path, Path]:
    """Locate the standard MNIST-style file pair in ``directory`` (plain or .gz)."""
    directory = Path(directory)
    found = []
    for name in IDX_NAMES[fold]:
        for cand in (directory / name, directory / (name + ".gz")):
            if cand.exists():
                found.append(cand)
                break
        else:
            raise FileNotFoundError(f"no {name}[.gz] in {directory}")
    return found[0], found[1]


def to_csv(dataset: LabeledDataset, path) -> None:
    d = dataset.samples.shape[1]
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow([f"x{i}" for i in range(d)] + ["label"])
        for x, c in zip(dataset.samples, dataset.classes):
            w.writerow([repr(float(v)) for v in x] + [int(c)])


# Bundled stand-ins for the image experiments. The secret task renders
# scikit-learn's 8x8 digits MNIST-style (20x20 glyph centered on a 28x28
# canvas); the natural thief is a pool of grayscale crops from the photographs
# that ship with scikit-image and scikit-learn.

def render_digits(images8: np.ndarray, size: int = 28, glyph: int = 20) -> np.ndarray:
    """Upscale 8x8 glyphs (values in [0, 1]) bilinearly and center them on a blank canvas."""
    from scipy.ndimage import zoom

    pad = (size - glyph) // 2
    out = np.zeros((len(images8), size, size))
    for i, img in enumerate(images8):
        big = zoom(img, glyph / img.shape[0], order=1)
        out[i, pad:pad + glyph, pad:pad + glyph] = np.clip(big, 0.0, 1.0)
    return out.reshape(len(images8), -1)


def load_digits_task(seed: int = 0, size: int = 28) -> dict[str, LabeledDataset]:
    from sklearn.datasets import load_digits

    d = load_digits()
    x = render_digits(d.images / 16.0, size)
    full = LabeledDataset(x, one_hot(d.target, 10))
    train, valid, test = split(full, (0.6, 0.15, 0.25), seed=seed, folds=("train", "valid", "test"))
    return {"train": train, "valid": valid, "test": test}


def bundled_photographs() -> list[np.ndarray]:
    """Grayscale float images in [0, 1] from files bundled with scikit-image and scikit-learn."""
    import skimage.data
    from skimage.color import rgb2gray
    from skimage.io import imread
    from sklearn.datasets import load_sample_images

    out = []
    root = Path(skimage.data.__file__).parent
    for path in sorted(root.glob("*.png")) + sorted(root.glob("*.jpg")):
        img = np.asarray(imread(path), dtype=np.float64)
        if img.ndim == 3:
            img = rgb2gray(img[..., :3] / 255.0)
        elif img.max() > 1.0:
            img = img / 255.0
        if min(img.shape) >= 64:
            out.append(img)
    out.extend(rgb2gray(img / 255.0) for img in load_sample_images().images)
    return out


def natural_image_patches(n: int, size: int = 28, seed: int = 0) -> np.ndarray:
    """Random square crops of the bundled photographs, block-averaged down to ``size x size``."""
    rng = np.random.default_rng([seed, 23])
    photos = bundled_photographs()
    scales = (1, 2, 3, 4, 6, 8)
    out = np.empty((n, size * size))
    which = rng.integers(0, len(photos), size=n)
    for i in range(n):
        g = photos[which[i]]
        usable = [s for s in scales if size * s <= min(g.shape)]
        s = int(rng.choice(usable))
        span = size * s
        r0 = rng.integers(0, g.shape[0] - span + 1)
        c0 = rng.integers(0, g.shape[1] - span + 1)
        out[i] = g[r0:r0 + span, c0:c0 + span].reshape(size, s, size, s).mean(axis=(1, 3)).ravel()
    return out


def natural_patch_pool(n_train: int, n_valid: int, size: int = 28, seed: int = 0) -> UnlabeledPool:
    x = natural_image_patches(n_train + n_valid, size, seed)
    return UnlabeledPool(x[:n_train], x[n_train:], "natural-images")
