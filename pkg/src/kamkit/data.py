"""Deterministic synthetic image data, class-subset splits, transfer sets, IDX files.

Images are float32 [N, C, H, W] with values in [0, 1]. Labels are global
class ids; a LabeledSet additionally records which global classes it covers
(its class list), in order, which defines the local indexing its classifier
uses.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .rng import Rng


class IdxFormatError(ValueError):
    """Malformed IDX file."""


@dataclass
class LabeledSet:
    images: np.ndarray             # [N, C, H, W] float32 in [0, 1]
    labels: np.ndarray             # [N] global class ids
    class_ids: tuple               # ordered global classes covered by this set

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.class_ids = tuple(int(c) for c in self.class_ids)
        if self.images.ndim != 4 or self.images.shape[0] != self.labels.shape[0]:
            raise ValueError(f"images {self.images.shape} inconsistent with labels {self.labels.shape}")
        if self.images.shape[0] < 1:
            raise ValueError("empty dataset")
        present = set(int(l) for l in self.labels)
        if not present.issubset(self.class_ids):
            raise ValueError(f"labels {sorted(present)} not covered by class_ids {self.class_ids}")

    def __len__(self):
        return self.images.shape[0]

    def local_labels(self) -> np.ndarray:
        """Labels as positions in this set's class_ids order."""
        lookup = {c: i for i, c in enumerate(self.class_ids)}
        return np.asarray([lookup[int(l)] for l in self.labels], dtype=np.int64)


@dataclass
class TransferSet:
    """Unlabeled images used to probe the teachers."""

    images: np.ndarray

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        if self.images.ndim != 4 or self.images.shape[0] < 1:
            raise ValueError(f"transfer set needs [K, C, H, W] images, got {self.images.shape}")

    def __len__(self):
        return self.images.shape[0]


@dataclass(frozen=True)
class ClassSplit:
    """Ordered class lists, one per teacher; disjoint unless overlap is allowed."""

    parts: tuple
    overlap_allowed: bool = False

    def __post_init__(self):
        object.__setattr__(self, "parts", tuple(tuple(int(c) for c in p) for p in self.parts))
        if not self.overlap_allowed:
            seen = set()
            for p in self.parts:
                if seen & set(p):
                    raise ValueError(f"overlapping classes {sorted(seen & set(p))} in a disjoint split")
                seen |= set(p)

    def all_classes(self):
        out, seen = [], set()
        for p in self.parts:
            for c in p:
                if c not in seen:
                    seen.add(c)
                    out.append(c)
        return tuple(out)


def _class_template(shape, class_id: int, rng: Rng) -> np.ndarray:
    """Sum of three random Gaussian bumps plus a class-unique low-frequency wave."""
    c, h, w = shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    st = rng.stream("template", class_id)
    tpl = np.zeros((c, h, w))
    for j in range(3):
        bs = st.stream("bump", j)
        cy = bs.uniform(0, h)
        cx = bs.uniform(0, w)
        width = bs.uniform(0.1 * h, 0.35 * h)
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width ** 2))
        amps = bs.uniform(0.25, 0.85, c)
        tpl += amps[:, None, None] * blob[None]
    fy = 1 + class_id % 3
    fx = 1 + (class_id // 3) % 3
    phase = st.stream("wave").uniform(0, 2 * np.pi)
    wave = 0.3 * (1 + np.sin(2 * np.pi * (fy * yy / h + fx * xx / w) + phase))
    tpl += wave[None]
    return np.clip(tpl, 0.0, 1.0)


def gen_synthetic(num_classes: int, per_class: int, shape=(3, 32, 32),
                  noise_sigma: float = 0.08, seed: int = 0,
                  first_sample_index: int = 0) -> LabeledSet:
    """Separable synthetic classification images, fully determined by the seed.

    Each class has a fixed template; samples add per-pixel Gaussian noise
    drawn from the stream (seed, class, sample index) and clamp to [0, 1].
    Disjoint sets (train/test) come from disjoint sample-index ranges via
    `first_sample_index`.
    """
    if num_classes < 2 or per_class < 1:
        raise ValueError(f"need num_classes >= 2 and per_class >= 1, got {num_classes}, {per_class}")
    if noise_sigma < 0:
        raise ValueError(f"noise_sigma must be >= 0, got {noise_sigma}")
    shape = tuple(int(v) for v in shape)
    if len(shape) != 3 or any(v < 1 for v in shape):
        raise ValueError(f"degenerate image shape {shape}")

    root = Rng(seed)
    images = np.empty((num_classes * per_class,) + shape, dtype=np.float32)
    labels = np.empty(num_classes * per_class, dtype=np.int64)
    row = 0
    for k in range(num_classes):
        tpl = _class_template(shape, k, root)
        for s in range(per_class):
            noise = root.stream("noise", k, first_sample_index + s).normal(0, 1, shape)
            images[row] = np.clip(tpl + noise_sigma * noise, 0.0, 1.0).astype(np.float32)
            labels[row] = k
            row += 1
    return LabeledSet(images, labels, tuple(range(num_classes)))


def class_templates(num_classes: int, shape, seed: int) -> np.ndarray:
    """The noise-free class templates of gen_synthetic (for oracle classifiers)."""
    root = Rng(seed)
    return np.stack([_class_template(tuple(shape), k, root) for k in range(num_classes)]
                    ).astype(np.float32)


def equal_split(class_ids, n_parts: int, seed: int) -> ClassSplit:
    """Shuffle class ids with the seed and chop into equal ordered ranges."""
    ids = list(class_ids)
    if len(ids) % n_parts != 0:
        raise ValueError(f"{len(ids)} classes do not split evenly into {n_parts} parts")
    perm = Rng(seed).stream("class-split").permutation(len(ids))
    shuffled = [ids[i] for i in perm]
    size = len(ids) // n_parts
    return ClassSplit(tuple(tuple(shuffled[i * size:(i + 1) * size]) for i in range(n_parts)))


def split_classes(dataset: LabeledSet, split: ClassSplit):
    """One LabeledSet per part, keeping global labels and the part's class order."""
    known = set(dataset.class_ids)
    out = []
    for part in split.parts:
        unknown = [c for c in part if c not in known]
        if unknown:
            raise ValueError(f"split references unknown class ids {unknown}")
        mask = np.isin(dataset.labels, part)
        out.append(LabeledSet(dataset.images[mask], dataset.labels[mask], part))
    return out


def make_transfer_set(sets, seed: int) -> TransferSet:
    """Pool images from all sets, drop labels, apply a seeded permutation."""
    shapes = {s.images.shape[1:] for s in sets}
    if len(shapes) != 1:
        raise ValueError(f"inconsistent image shapes across sets: {sorted(shapes)}")
    images = np.concatenate([s.images for s in sets], axis=0)
    perm = Rng(seed).stream("transfer").permutation(images.shape[0])
    return TransferSet(images[perm])


def batch_indices(n: int, batch_size: int, rng: Rng | None = None, shuffle: bool = False):
    """Index arrays covering 0..n-1 exactly once; the last batch may be short."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    order = rng.permutation(n) if shuffle else np.arange(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


_IDX_IMAGES_MAGIC = 0x00000803
_IDX_LABELS_MAGIC = 0x00000801


def _read_exact(f, n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise IdxFormatError(f"truncated IDX file: expected {n} more bytes for {what}")
    return buf


def load_idx(images_path, labels_path) -> LabeledSet:
    """Parse big-endian IDX image/label files into a LabeledSet (C=1, pixels/255)."""
    with open(images_path, "rb") as f:
        magic, n, h, w = struct.unpack(">IIII", _read_exact(f, 16, "image header"))
        if magic != _IDX_IMAGES_MAGIC:
            raise IdxFormatError(f"bad magic 0x{magic:08x} in image file (expected 0x{_IDX_IMAGES_MAGIC:08x})")
        pixels = np.frombuffer(_read_exact(f, n * h * w, "image data"), dtype=np.uint8)
    with open(labels_path, "rb") as f:
        magic, nl = struct.unpack(">II", _read_exact(f, 8, "label header"))
        if magic != _IDX_LABELS_MAGIC:
            raise IdxFormatError(f"bad magic 0x{magic:08x} in label file (expected 0x{_IDX_LABELS_MAGIC:08x})")
        labels = np.frombuffer(_read_exact(f, nl, "label data"), dtype=np.uint8)
    if n != nl:
        raise IdxFormatError(f"count mismatch: {n} images vs {nl} labels")
    images = (pixels.astype(np.float32) / 255.0).reshape(n, 1, h, w)
    return LabeledSet(images, labels.astype(np.int64), tuple(sorted(set(int(l) for l in labels))))


def save_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path):
    """Write u8 IDX files (inverse of load_idx; values scaled by 255)."""
    n, _, h, w = images.shape
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", _IDX_IMAGES_MAGIC, n, h, w))
        f.write(np.clip(np.round(images[:, 0] * 255.0), 0, 255).astype(np.uint8).tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", _IDX_LABELS_MAGIC, n))
        f.write(np.asarray(labels, dtype=np.uint8).tobytes())
