"""Dataset loading and generation.

Images are a single float32 array [N,C,H,W] with values in [0,1]; labels are
int64 class indices. The IDX reader/writer round-trips byte-exact pixel
values (load scales by /255, write inverts it).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError, FormatError

_IDX_IMAGES_MAGIC = 0x00000803
_IDX_LABELS_MAGIC = 0x00000801

#: Default digit size range, as a fraction of the nominal 20x12 bounding box.
DEFAULT_SCALE_RANGE = (0.8, 1.0)
#: Scale-augmentation tail used when *training*: fraction of images drawn at
#: the low-scale range. The generator itself defaults to no tail so that
#: evaluation sets stay on the clean size distribution.
TRAIN_SMALL_FRACTION = 0.15
DEFAULT_SMALL_RANGE = (0.45, 0.55)


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray  # [N,C,H,W] float32 in [0,1]
    labels: np.ndarray  # [N] int64
    num_classes: int

    def __post_init__(self):
        if self.images.ndim != 4:
            raise ArgumentError(f"images must be [N,C,H,W], got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ArgumentError(
                f"{len(self.images)} images vs {len(self.labels)} labels"
            )
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ArgumentError(f"labels outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    def take(self, indices) -> "Dataset":
        return Dataset(self.images[indices], self.labels[indices], self.num_classes)


def _read_exact(f, n: int, what: str, path) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise FormatError(f"{path}: truncated while reading {what} ({len(data)}/{n} bytes)")
    return data


def load_idx(images_path, labels_path, num_classes: int | None = None) -> Dataset:
    """Parse an IDX image/label file pair (big-endian, unsigned bytes)."""
    with open(images_path, "rb") as f:
        (magic,) = struct.unpack(">I", _read_exact(f, 4, "magic", images_path))
        if magic != _IDX_IMAGES_MAGIC:
            raise FormatError(f"{images_path}: magic 0x{magic:08x}, expected 0x{_IDX_IMAGES_MAGIC:08x}")
        n, h, w = struct.unpack(">III", _read_exact(f, 12, "dimensions", images_path))
        raw = _read_exact(f, n * h * w, f"{n} images of {h}x{w}", images_path)
    pixels = np.frombuffer(raw, dtype=np.uint8).reshape(n, 1, h, w)
    with open(labels_path, "rb") as f:
        (magic,) = struct.unpack(">I", _read_exact(f, 4, "magic", labels_path))
        if magic != _IDX_LABELS_MAGIC:
            raise FormatError(f"{labels_path}: magic 0x{magic:08x}, expected 0x{_IDX_LABELS_MAGIC:08x}")
        (n_labels,) = struct.unpack(">I", _read_exact(f, 4, "count", labels_path))
        raw = _read_exact(f, n_labels, f"{n_labels} labels", labels_path)
    if n_labels != n:
        raise FormatError(f"{images_path} has {n} images but {labels_path} has {n_labels} labels")
    labels = np.frombuffer(raw, dtype=np.uint8).astype(np.int64)
    images = (pixels.astype(np.float32) / np.float32(255.0))
    k = num_classes if num_classes is not None else (int(labels.max()) + 1 if n else 10)
    return Dataset(images, labels, k)


def write_idx(dataset: Dataset, images_path, labels_path) -> None:
    """Inverse of load_idx; pixels are quantized with round(v*255)."""
    n, c, h, w = dataset.images.shape
    if c != 1:
        raise ArgumentError(f"IDX stores single-channel images, got {c} channels")
    pixels = np.clip(np.rint(dataset.images * 255.0), 0, 255).astype(np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", _IDX_IMAGES_MAGIC, n, h, w))
        f.write(pixels.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", _IDX_LABELS_MAGIC, n))
        f.write(dataset.labels.astype(np.uint8).tobytes())


def synthetic_blobs(n: int, classes: int = 10, image_hw: int = 28, seed: int = 0) -> Dataset:
    """Bright Gaussian blob at a class-specific grid location, plus noise."""
    if n < classes:
        raise ArgumentError(f"need at least {classes} samples for {classes} classes")
    if classes > 12:
        raise ArgumentError("blob generator supports at most 12 classes")
    rng = np.random.default_rng(seed)
    margin = image_hw // 5
    xs = np.linspace(margin, image_hw - 1 - margin, 3)
    ys = np.linspace(margin, image_hw - 1 - margin, 4)
    centers = [(ys[c // 3], xs[c % 3]) for c in range(classes)]
    labels = (np.arange(n) % classes).astype(np.int64)
    grid_i, grid_j = np.mgrid[0:image_hw, 0:image_hw]
    sigma = image_hw / 10.0
    images = np.empty((n, 1, image_hw, image_hw), dtype=np.float32)
    for i in range(n):
        cy, cx = centers[labels[i]]
        cy += rng.uniform(-1.0, 1.0)
        cx += rng.uniform(-1.0, 1.0)
        blob = np.exp(-((grid_i - cy) ** 2 + (grid_j - cx) ** 2) / (2 * sigma**2))
        img = blob * rng.uniform(0.8, 1.0) + rng.normal(0.0, 0.05, blob.shape)
        images[i, 0] = np.clip(img, 0.0, 1.0)
    return Dataset(images, labels, classes)


# Seven-segment layout: each segment is a rectangle in unit coordinates of the
# digit bounding box (r0, r1, c0, c1).
_SEGMENTS = {
    "top": (0.00, 0.15, 0.0, 1.0),
    "mid": (0.425, 0.575, 0.0, 1.0),
    "bot": (0.85, 1.00, 0.0, 1.0),
    "tl": (0.0, 0.5, 0.00, 0.25),
    "tr": (0.0, 0.5, 0.75, 1.00),
    "bl": (0.5, 1.0, 0.00, 0.25),
    "br": (0.5, 1.0, 0.75, 1.00),
}

_DIGIT_SEGMENTS = {
    0: ("top", "tl", "tr", "bl", "br", "bot"),
    1: ("tr", "br"),
    2: ("top", "tr", "mid", "bl", "bot"),
    3: ("top", "tr", "mid", "br", "bot"),
    4: ("tl", "tr", "mid", "br"),
    5: ("top", "tl", "mid", "br", "bot"),
    6: ("top", "tl", "mid", "bl", "br", "bot"),
    7: ("top", "tr", "br"),
    8: ("top", "tl", "tr", "mid", "bl", "br", "bot"),
    9: ("top", "tl", "tr", "mid", "br", "bot"),
}


def _digit_mask(digit: int, box_h: int, box_w: int, rng=None,
                thickness_jitter: float = 0.0) -> np.ndarray:
    """Binary segment mask; a nonzero thickness_jitter varies each segment's
    cross-section by the given relative amount (one rng draw per segment)."""
    mask = np.zeros((box_h, box_w), dtype=np.float32)
    for seg in _DIGIT_SEGMENTS[digit]:
        r0f, r1f, c0f, c1f = _SEGMENTS[seg]
        if thickness_jitter > 0.0:
            factor = rng.uniform(1.0 - thickness_jitter, 1.0 + thickness_jitter)
            if r1f - r0f < 0.5:  # horizontal bar: vary its height
                mid, half = (r0f + r1f) / 2, (r1f - r0f) / 2 * factor
                r0f, r1f = np.clip(mid - half, 0, 1), np.clip(mid + half, 0, 1)
            else:  # vertical bar: vary its width
                mid, half = (c0f + c1f) / 2, (c1f - c0f) / 2 * factor
                c0f, c1f = np.clip(mid - half, 0, 1), np.clip(mid + half, 0, 1)
        r0 = int(round(r0f * box_h))
        r1 = max(r0 + 1, int(round(r1f * box_h)))
        c0 = int(round(c0f * box_w))
        c1 = max(c0 + 1, int(round(c1f * box_w)))
        mask[r0:min(r1, box_h), c0:min(c1, box_w)] = 1.0
    return mask


def _shear_rows(mask: np.ndarray, shear: float) -> np.ndarray:
    """Shift each row horizontally by shear * (row - center), zero-filled."""
    box_h, box_w = mask.shape
    out = np.zeros_like(mask)
    for r in range(box_h):
        off = int(round(shear * (r - box_h / 2)))
        src = mask[r, max(0, off):box_w + min(0, off)]
        if src.size:
            out[r, max(0, -off):max(0, -off) + src.size] = src
    return out


def synthetic_digits(
    n: int,
    seed: int = 0,
    image_hw: int = 28,
    scale_range: tuple[float, float] = DEFAULT_SCALE_RANGE,
    noise: float = 0.0,
    jitter: int = 4,
    thickness_jitter: float = 0.35,
    shear_max: float = 0.25,
    small_fraction: float = 0.0,
    small_range: tuple[float, float] = DEFAULT_SMALL_RANGE,
) -> Dataset:
    """Seven-segment digit shapes with handwriting-like variability: random
    stroke thickness per segment, horizontal shear, size scale, placement
    jitter around the center, and stroke intensity. The background is exactly
    zero unless additive noise is requested.

    A `small_fraction` of images is drawn at `small_range` scale instead of
    `scale_range` — scale-robustness augmentation so that models trained on
    this set also recognize digits downscaled into composite tiles. Training
    pipelines pass TRAIN_SMALL_FRACTION; the generator default is no tail,
    keeping evaluation sets on the clean size distribution.

    Classes are shape-coded (not position-coded), so a digit is still
    recognizable after downscaling into a tile of a composite image.
    """
    if n < 1:
        raise ArgumentError("need at least one sample")
    rng = np.random.default_rng(seed)
    base_h, base_w = 20, 12
    labels = (np.arange(n) % 10).astype(np.int64)
    rng.shuffle(labels)
    images = np.zeros((n, 1, image_hw, image_hw), dtype=np.float32)
    for i in range(n):
        if small_fraction > 0.0 and rng.uniform() < small_fraction:
            s = rng.uniform(small_range[0], small_range[1])
        else:
            s = rng.uniform(scale_range[0], scale_range[1])
        box_h = max(6, int(round(base_h * s)))
        box_w = max(4, int(round(base_w * s)))
        mask = _digit_mask(int(labels[i]), box_h, box_w, rng, thickness_jitter)
        if shear_max > 0.0:
            mask = _shear_rows(mask, rng.uniform(-shear_max, shear_max))
        top = int(np.clip((image_hw - box_h) // 2 + rng.integers(-jitter, jitter + 1),
                          0, image_hw - box_h))
        left = int(np.clip((image_hw - box_w) // 2 + rng.integers(-jitter, jitter + 1),
                           0, image_hw - box_w))
        img = np.zeros((image_hw, image_hw), dtype=np.float32)
        img[top:top + box_h, left:left + box_w] = mask * rng.uniform(0.75, 1.0)
        if noise > 0:
            img += rng.normal(0.0, noise, img.shape).astype(np.float32)
        images[i, 0] = np.clip(img, 0.0, 1.0)
    return Dataset(images, labels, 10)


def subsample(dataset: Dataset, n: int, seed: int = 0) -> Dataset:
    """Uniform sample without replacement; deterministic by seed."""
    if n > len(dataset):
        raise ArgumentError(f"cannot take {n} of {len(dataset)} samples")
    rng = np.random.default_rng(seed)
    idx = rng.permutation(len(dataset))[:n]
    return dataset.take(idx)


def mean_pixel(dataset: Dataset) -> float:
    return float(dataset.images.mean())
