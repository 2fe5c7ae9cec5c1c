"""Datasets, imbalance/diversity simulation and class-incremental streams."""

from __future__ import annotations

import configparser
import struct
from dataclasses import dataclass, field, replace
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .core import Batch, Instance

IMAGE_MAGIC = 0x00000803  # 2051
LABEL_MAGIC = 0x00000801  # 2049
RETENTION_FACTORS = (0.01, 0.05, 0.1, 0.3, 1.0)


class IdxError(ValueError):
    pass


class BadMagicError(IdxError):
    pass


class TruncatedFileError(IdxError):
    pass


class CountMismatchError(IdxError):
    pass


@dataclass
class Dataset:
    """Column-oriented labeled data.

    ``ids`` are the positions in the source file and survive retention and
    merging, so subsets can be traced back to their origin.
    """

    features: np.ndarray  # (n, d) float32 in [0, 1]
    labels: np.ndarray  # (n,) int64, contiguous 0..class_count-1
    sub_labels: Optional[np.ndarray] = None
    ids: Optional[np.ndarray] = None
    class_count: int = 0
    merge_map: Optional[dict[int, int]] = None
    retention: Optional["RetentionPlan"] = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.ids is None:
            self.ids = np.arange(len(self.labels), dtype=np.int64)
        if not self.class_count and len(self.labels):
            self.class_count = int(self.labels.max()) + 1

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def class_sizes(self) -> dict[int, int]:
        return {c: int((self.labels == c).sum()) for c in range(self.class_count)}

    def instance(self, i: int, stream_id: Optional[int] = None) -> Instance:
        sub = None if self.sub_labels is None else int(self.sub_labels[i])
        return Instance(int(self.ids[i]) if stream_id is None else stream_id,
                        self.features[i], int(self.labels[i]), sub)

    @property
    def instances(self) -> list[Instance]:
        return [self.instance(i) for i in range(len(self))]

    def subset(self, idx: np.ndarray) -> "Dataset":
        return replace(self, features=self.features[idx], labels=self.labels[idx],
                       sub_labels=None if self.sub_labels is None else self.sub_labels[idx],
                       ids=self.ids[idx])


# -- IDX ------------------------------------------------------------------------


def _read_idx(path, magic: int) -> tuple[tuple[int, ...], bytes]:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise TruncatedFileError(f"{path}: header truncated")
    found, = struct.unpack(">I", raw[:4])
    if found != magic:
        raise BadMagicError(f"{path}: magic {found}, expected {magic}")
    ndim = raw[3]
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise TruncatedFileError(f"{path}: header truncated")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    size = int(np.prod(dims))
    payload = raw[header:]
    if len(payload) < size:
        raise TruncatedFileError(f"{path}: payload has {len(payload)} bytes, expected {size}")
    return dims, payload[:size]


def load_idx(images_path, labels_path) -> Dataset:
    """Read an IDX image/label pair; pixels are scaled to [0, 1]."""
    dims, pixels = _read_idx(images_path, IMAGE_MAGIC)
    (n_labels,), labels = _read_idx(labels_path, LABEL_MAGIC)
    if dims[0] != n_labels:
        raise CountMismatchError(f"{dims[0]} images but {n_labels} labels")
    x = np.frombuffer(pixels, dtype=np.uint8).reshape(dims[0], -1).astype(np.float32) / 255.0
    y = np.frombuffer(labels, dtype=np.uint8).astype(np.int64)
    return Dataset(x, y, class_count=int(y.max()) + 1 if len(y) else 0)


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Write uint8 images (n, rows, cols) and labels (n,) as an IDX pair."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">I", IMAGE_MAGIC) + struct.pack(f">{images.ndim}I", *images.shape))
        f.write(images.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", LABEL_MAGIC, len(labels)))
        f.write(labels.tobytes())


def load_split(root, split: str = "train") -> Dataset:
    """Load ``{train,t10k}-{images-idx3,labels-idx1}-ubyte`` from ``root``."""
    root = Path(root)
    return load_idx(root / f"{split}-images-idx3-ubyte", root / f"{split}-labels-idx1-ubyte")


# -- imbalance ------------------------------------------------------------------


@dataclass
class RetentionPlan:
    factors: tuple[float, ...]
    per_class: dict[int, float] = field(default_factory=dict)


def retained_count(factor: float, size: int) -> int:
    """round-half-up(factor * size), computed exactly in decimal."""
    return int((Decimal(str(factor)) * size).to_integral_value(rounding=ROUND_HALF_UP))


def assign_retention(labels: Sequence[int], factors: Sequence[float],
                     rng: np.random.Generator) -> RetentionPlan:
    """Draw a factor per class without replacement, refilling the pool when empty."""
    if not factors:
        raise ValueError("retention factors must be non-empty")
    for f in factors:
        if not 0.0 < f <= 1.0:
            raise ValueError(f"retention factor {f} outside (0, 1]")
    plan = RetentionPlan(tuple(factors))
    pool: list[float] = []
    for c in sorted(labels):
        if not pool:
            pool = list(factors)
        plan.per_class[int(c)] = pool.pop(int(rng.integers(len(pool))))
    return plan


def apply_retention(dataset: Dataset, factors: Sequence[float],
                    rng: np.random.Generator) -> Dataset:
    plan = assign_retention(range(dataset.class_count), factors, rng)
    keep = []
    for c, f in plan.per_class.items():
        members = np.flatnonzero(dataset.labels == c)
        n = retained_count(f, len(members))
        if n == len(members):
            keep.append(members)
        else:
            keep.append(np.sort(rng.choice(members, size=n, replace=False)))
    idx = np.sort(np.concatenate(keep)) if keep else np.zeros(0, dtype=np.int64)
    out = dataset.subset(idx)
    out.retention = plan
    return out


# -- diversity ------------------------------------------------------------------


def merge_groups(class_count: int, target_count: int,
                 rng: np.random.Generator) -> dict[int, int]:
    """Randomly partition labels into near-equal groups; returns label -> group.

    Groups are numbered by their smallest member, so merging into as many
    groups as there are labels is the identity map.
    """
    if not 1 <= target_count <= class_count:
        raise ValueError(f"target_count must be in [1, {class_count}]")
    order = rng.permutation(class_count)
    base, extra = divmod(class_count, target_count)
    groups, start = [], 0
    for g in range(target_count):
        size = base + (1 if g < extra else 0)
        groups.append(sorted(int(c) for c in order[start:start + size]))
        start += size
    groups.sort(key=lambda members: members[0])
    return {c: g for g, members in enumerate(groups) for c in members}


def apply_merge(dataset: Dataset, merge_map: dict[int, int]) -> Dataset:
    lookup = np.array([merge_map[c] for c in range(dataset.class_count)], dtype=np.int64)
    return replace(dataset, labels=lookup[dataset.labels], sub_labels=dataset.labels.copy(),
                   class_count=len(set(merge_map.values())), merge_map=dict(merge_map))


def merge_classes(dataset: Dataset, target_count: int, rng: np.random.Generator) -> Dataset:
    return apply_merge(dataset, merge_groups(dataset.class_count, target_count, rng))


# -- streams --------------------------------------------------------------------


@dataclass
class StreamPlan:
    class_order: list[int]
    batches: list[Batch]
    batch_size: int
    source_ids: np.ndarray  # stream id -> Dataset.ids entry

    def __len__(self) -> int:
        return len(self.batches)

    @property
    def n_instances(self) -> int:
        return len(self.source_ids)

    def instances(self):
        for b in self.batches:
            yield from b.instances


def build_stream(dataset: Dataset, batch_size: int, rng: np.random.Generator) -> StreamPlan:
    """Classes arrive one at a time in a random order, each shuffled and batched."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if len(dataset) == 0:
        raise ValueError("cannot stream an empty dataset")
    present = sorted(int(c) for c in np.unique(dataset.labels))
    order = [present[i] for i in rng.permutation(len(present))]
    batches: list[Batch] = []
    source: list[int] = []
    next_id = 0
    for c in order:
        members = np.flatnonzero(dataset.labels == c)
        members = members[rng.permutation(len(members))]
        for start in range(0, len(members), batch_size):
            chunk = members[start:start + batch_size]
            batch = []
            for i in chunk:
                batch.append(dataset.instance(int(i), stream_id=next_id))
                source.append(int(dataset.ids[i]))
                next_id += 1
            batches.append(Batch(batch, origin="stream"))
    return StreamPlan(order, batches, batch_size, np.asarray(source, dtype=np.int64))


# -- synthetic fixtures ---------------------------------------------------------


@dataclass
class Blob:
    label: int
    mean: tuple[float, ...]
    variance: float
    count: int


def make_synthetic(blobs: Sequence[Blob], rng: np.random.Generator) -> Dataset:
    """Isotropic Gaussian blobs clamped to [0, 1]; sub_label is the blob index."""
    if not blobs:
        raise ValueError("no blobs")
    dim = len(blobs[0].mean)
    xs, ys, subs = [], [], []
    for b_id, b in enumerate(blobs):
        if len(b.mean) != dim:
            raise ValueError(f"blob {b_id} has dimension {len(b.mean)}, expected {dim}")
        if not np.isfinite(b.variance) or b.variance < 0:
            raise ValueError(f"blob {b_id}: invalid variance {b.variance}")
        if b.count < 0:
            raise ValueError(f"blob {b_id}: negative count")
        pts = np.asarray(b.mean, dtype=np.float64) + np.sqrt(b.variance) * rng.standard_normal((b.count, dim))
        xs.append(np.clip(pts, 0.0, 1.0))
        ys.append(np.full(b.count, b.label))
        subs.append(np.full(b.count, b_id))
    labels = np.concatenate(ys).astype(np.int64)
    present = sorted(set(labels.tolist()))
    if present != list(range(len(present))):
        raise ValueError(f"blob labels must be contiguous from 0, got {present}")
    return Dataset(np.concatenate(xs).astype(np.float32), labels,
                   sub_labels=np.concatenate(subs).astype(np.int64), class_count=len(present))


def parse_synthetic(text: str) -> list[Blob]:
    """Parse a key-value blob document.

    One section per blob::

        [blob 0]
        class = 0
        mean = 0.2 0.3
        variance = 0.001
        count = 900
    """
    cp = configparser.ConfigParser()
    cp.read_string(text)
    blobs = []
    for name in cp.sections():
        sec = cp[name]
        try:
            blobs.append(Blob(label=int(sec["class"]),
                              mean=tuple(float(v) for v in sec["mean"].replace(",", " ").split()),
                              variance=float(sec["variance"]),
                              count=int(sec["count"])))
        except (KeyError, ValueError) as exc:
            raise ValueError(f"section [{name}]: {exc}") from exc
    return blobs


def format_synthetic(blobs: Sequence[Blob]) -> str:
    out = []
    for i, b in enumerate(blobs):
        out.append(f"[blob {i}]\nclass = {b.label}\nmean = {' '.join(repr(float(v)) for v in b.mean)}\n"
                   f"variance = {b.variance!r}\ncount = {b.count}\n")
    return "\n".join(out)


def figure_fixture(minority_share: float = 0.1, sizes=(2000, 1000, 600, 300, 150),
                   variance: float = 0.002) -> list[Blob]:
    """Five classes of two sub-clusters each, imbalanced across classes.

    Class c has means on a 2-D grid; its minority blob holds
    ``minority_share`` of the class.
    """
    blobs = []
    for c, size in enumerate(sizes):
        minority = max(1, int(round(size * minority_share)))
        x = 0.1 + 0.2 * c
        blobs.append(Blob(c, (x, 0.25), variance, size - minority))
        blobs.append(Blob(c, (x, 0.75), variance, minority))
    return blobs
