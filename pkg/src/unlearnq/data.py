"""Synthetic desk-scale datasets and forget/retain splits.

Every ``LabeledSet`` carries the original row indices of its samples so
that disjointness of forget, retain and test sets can be checked exactly.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

KINDS = ("blobs", "moons", "rings")


@dataclass
class LabeledSet:
    features: np.ndarray
    labels: np.ndarray
    n_classes: int
    indices: Optional[np.ndarray] = None
    provenance: str = ""

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise ValueError("features must be an N x d matrix")
        if self.labels.shape != (self.features.shape[0],):
            raise ValueError("need exactly one label per row")
        if len(self.labels) and ((self.labels < 0).any() or (self.labels >= self.n_classes).any()):
            raise ValueError(f"labels must lie in [0, {self.n_classes})")
        if not np.isfinite(self.features).all():
            raise ValueError("features contain non-finite values")
        if self.indices is None:
            self.indices = np.arange(len(self.labels))
        self.indices = np.asarray(self.indices, dtype=np.int64)

    def __len__(self):
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, rows, provenance: Optional[str] = None) -> "LabeledSet":
        rows = np.asarray(rows, dtype=np.int64)
        return LabeledSet(self.features[rows], self.labels[rows], self.n_classes,
                          self.indices[rows], provenance or self.provenance)

    def digest(self) -> str:
        h = hashlib.sha256()
        for a in (self.features, self.labels, self.indices):
            h.update(np.ascontiguousarray(a).tobytes())
        h.update(str(self.n_classes).encode())
        return h.hexdigest()[:16]


@dataclass
class Split:
    forget: LabeledSet
    retain: LabeledSet
    test: LabeledSet
    scenario: str
    ratio: Optional[float] = None
    class_id: Optional[int] = None

    def digest(self) -> str:
        h = hashlib.sha256()
        for part in (self.forget, self.retain, self.test):
            h.update(part.digest().encode())
        return h.hexdigest()[:16]


def _balanced_labels(k: int, n: int) -> np.ndarray:
    return np.arange(n) % k


def gen_synthetic(kind: str, k: int, n: int, noise: float = 0.1, seed: int = 0,
                  dim: int = 2) -> LabeledSet:
    """Balanced synthetic classification data.

    ``blobs``: K isotropic Gaussian clusters. Centres sit evenly on a circle of
    radius ``max(3, 0.75 K)`` in the first two coordinates (adjacent centres
    at least ~4.2 apart); any further coordinates get seeded N(0, 1) offsets. ``moons``: two interleaving half circles (K=2 only).
    ``rings``: K concentric circles of radius 1..K.
    """
    if kind not in KINDS:
        raise ValueError(f"unknown dataset kind {kind!r}; expected one of {KINDS}")
    if k < 2 or n < k:
        raise ValueError(f"need K >= 2 and N >= K, got K={k}, N={n}")
    if kind == "moons" and k != 2:
        raise ValueError("moons requires K=2")
    if noise < 0:
        raise ValueError("noise must be non-negative")
    rng = np.random.default_rng(seed)
    y = _balanced_labels(k, n)
    if kind == "blobs":
        if dim < 2:
            raise ValueError("blobs needs dim >= 2")
        ang = 2 * np.pi * np.arange(k) / k
        centres = np.zeros((k, dim))
        centres[:, 0], centres[:, 1] = np.cos(ang), np.sin(ang)
        centres[:, :2] *= max(3.0, 0.75 * k)
        centres[:, 2:] = rng.standard_normal((k, dim - 2))
        x = centres[y] + noise * rng.standard_normal((n, dim))
    elif kind == "moons":
        t = rng.uniform(0.0, np.pi, size=n)
        x = np.where(
            (y == 0)[:, None],
            np.c_[np.cos(t), np.sin(t)],
            np.c_[1.0 - np.cos(t), 0.5 - np.sin(t)],
        )
        x = x + noise * rng.standard_normal((n, 2))
    else:
        t = rng.uniform(0.0, 2 * np.pi, size=n)
        radius = (y + 1.0)[:, None]
        x = radius * np.c_[np.cos(t), np.sin(t)] + noise * rng.standard_normal((n, 2))
    perm = rng.permutation(n)
    return LabeledSet(x[perm], y[perm], k, provenance=f"{kind}(K={k},N={n},noise={noise},seed={seed})")


def train_test_split(data: LabeledSet, test_fraction: float, seed: int) -> tuple[LabeledSet, LabeledSet]:
    if not 0 < test_fraction < 1:
        raise ValueError("test_fraction must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(data))
    n_test = int(round(test_fraction * len(data)))
    if n_test == 0 or n_test == len(data):
        raise ValueError("test split would be empty or cover everything")
    return (data.subset(np.sort(perm[n_test:]), "train"), data.subset(np.sort(perm[:n_test]), "test"))


def split_random(train: LabeledSet, ratio: float, seed: int, test: Optional[LabeledSet] = None) -> Split:
    """Forget a seeded random ``round(ratio * N)`` samples (half-to-even rounding)."""
    if not 0 < ratio < 1:
        raise ValueError(f"ratio must lie in (0, 1), got {ratio}")
    n = len(train)
    n_forget = int(round(ratio * n))
    if n_forget == 0 or n_forget == n:
        raise ValueError(f"ratio {ratio} on N={n} leaves an empty forget or retain set")
    perm = np.random.default_rng(seed).permutation(n)
    forget = train.subset(np.sort(perm[:n_forget]), "forget")
    retain = train.subset(np.sort(perm[n_forget:]), "retain")
    return Split(forget, retain, test if test is not None else _empty_like(train), "random", ratio=ratio)


def split_classwise(train: LabeledSet, class_id: int, seed: int = 0, test: Optional[LabeledSet] = None) -> Split:
    """Forget every sample of ``class_id``. ``seed`` is accepted for interface symmetry."""
    hit = train.labels == class_id
    if not hit.any():
        raise ValueError(f"class {class_id} is absent from the data")
    forget = train.subset(np.flatnonzero(hit), "forget")
    retain = train.subset(np.flatnonzero(~hit), "retain")
    if len(retain) == 0:
        raise ValueError("class-wise split leaves an empty retain set")
    return Split(forget, retain, test if test is not None else _empty_like(train), "classwise",
                 class_id=int(class_id))


def _empty_like(data: LabeledSet) -> LabeledSet:
    return LabeledSet(np.zeros((0, data.dim)), np.zeros(0, dtype=np.int64), data.n_classes, provenance="test")


# -- dataset file --------------------------------------------------------------
#
# Header: N, d, K as little-endian int32. Then N*d float64 features (row-major,
# little-endian), then N int32 labels (little-endian). Nothing else.


def save_dataset(path, data: LabeledSet) -> Path:
    path = Path(path)
    n, d = data.features.shape
    payload = b"".join([
        struct.pack("<iii", n, d, data.n_classes),
        np.ascontiguousarray(data.features, dtype="<f8").tobytes(),
        np.ascontiguousarray(data.labels, dtype="<i4").tobytes(),
    ])
    path.write_bytes(payload)
    return path


def load_dataset(path) -> LabeledSet:
    raw = Path(path).read_bytes()
    if len(raw) < 12:
        raise ValueError(f"{path}: truncated header")
    n, d, k = struct.unpack_from("<iii", raw, 0)
    want = 12 + 8 * n * d + 4 * n
    if n < 0 or d < 0 or len(raw) != want:
        raise ValueError(f"{path}: expected {want} bytes for N={n}, d={d}, got {len(raw)}")
    x = np.frombuffer(raw, dtype="<f8", count=n * d, offset=12).reshape(n, d).astype(np.float64)
    y = np.frombuffer(raw, dtype="<i4", count=n, offset=12 + 8 * n * d).astype(np.int64)
    return LabeledSet(x, y, k, provenance=f"file:{Path(path).name}")
