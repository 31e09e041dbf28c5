"""Dataset generation and ingestion.

Synthetic 2-D desk-scale datasets (two moons, Gaussian blobs, and a
checkerboard that lives outside the moons' region, used as the OOD
split), a small binary dataset container ("VNDD"), CSV import for flat
features, and an IDX reader for MNIST-like tensors.

Split tags: 0 = train, 1 = test, 2 = ood.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

MAGIC = b"VNDD"
VERSION = 1

TRAIN, TEST, OOD = 0, 1, 2
_SPLIT_NAMES = {TRAIN: "train", TEST: "test", OOD: "ood"}

SYNTHETIC_KINDS = ("two_moons", "gaussian_blobs", "checkerboard_ood")


class DatasetError(RuntimeError):
    pass


@dataclass
class DatasetHandle:
    features: np.ndarray  # (n, d) float64 or (n, c, h, w)
    labels: np.ndarray  # (n,) int64
    splits: np.ndarray  # (n,) uint8 codes
    provenance: str = ""

    def __post_init__(self) -> None:
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.splits = np.asarray(self.splits, dtype=np.uint8)
        n = self.features.shape[0]
        if self.labels.shape != (n,) or self.splits.shape != (n,):
            raise DatasetError("feature, label and split counts must match")
        if not set(np.unique(self.splits)) <= set(_SPLIT_NAMES):
            raise DatasetError("unknown split tag")

    def split(self, tag: int) -> tuple[np.ndarray, np.ndarray]:
        keep = self.splits == tag
        return self.features[keep], self.labels[keep]

    def torch_split(self, tag: int) -> tuple[torch.Tensor, torch.Tensor]:
        x, y = self.split(tag)
        return torch.as_tensor(x, dtype=torch.float64), torch.as_tensor(y)

    @property
    def n_classes(self) -> int:
        labeled = self.labels[self.splits != OOD]
        return int(labeled.max()) + 1 if labeled.size else 0


# ---------------------------------------------------------------------------
# Synthetic generators
# ---------------------------------------------------------------------------


def make_two_moons(n: int, noise: float, rng: np.random.Generator):
    """Two interleaved half circles, balanced classes (n // 2 each)."""
    n0 = n // 2
    n1 = n - n0
    t0 = np.linspace(0.0, np.pi, n0)
    t1 = np.linspace(0.0, np.pi, n1)
    outer = np.stack([np.cos(t0), np.sin(t0)], axis=1)
    inner = np.stack([1.0 - np.cos(t1), 0.5 - np.sin(t1)], axis=1)
    x = np.concatenate([outer, inner])
    y = np.concatenate([np.zeros(n0, dtype=np.int64), np.ones(n1, dtype=np.int64)])
    x = x + noise * rng.standard_normal(x.shape)
    return x, y


# Everything the moons (plus noise margin) can reach; the checkerboard
# rejects this box so the OOD split is disjoint from it in input space.
_MOONS_BOX = (-2.0, 3.0, -1.5, 2.0)


def make_gaussian_blobs(n: int, noise: float, rng: np.random.Generator):
    """Three isotropic blobs with standard deviation ``noise``."""
    centers = np.array([[0.0, 0.0], [3.0, 3.0], [-3.0, 3.0]])
    y = np.arange(n, dtype=np.int64) % len(centers)
    x = centers[y] + noise * rng.standard_normal((n, 2))
    return x, y


def make_checkerboard_ood(n: int, noise: float, rng: np.random.Generator):
    """Checkerboard-labeled points outside the two-moons region."""
    xs = []
    while sum(len(a) for a in xs) < n:
        cand = rng.uniform(-5.0, 5.0, size=(4 * n, 2))
        x0, x1, y0, y1 = _MOONS_BOX
        inside = (
            (cand[:, 0] > x0) & (cand[:, 0] < x1) & (cand[:, 1] > y0) & (cand[:, 1] < y1)
        )
        xs.append(cand[~inside])
    x = np.concatenate(xs)[:n]
    x = x + noise * rng.standard_normal(x.shape)
    y = ((np.floor(x[:, 0]) + np.floor(x[:, 1])) % 2).astype(np.int64)
    return x, y


def gen_dataset(
    kind: str, n: int, noise: float, seed: int, test_fraction: float = 0.25
) -> DatasetHandle:
    """Deterministic synthetic dataset with train/test (or ood) split tags."""
    if kind not in SYNTHETIC_KINDS:
        raise DatasetError(f"unknown synthetic dataset {kind!r}")
    if n < 1:
        raise DatasetError("n must be positive")
    rng = np.random.default_rng(seed)
    if kind == "two_moons":
        x, y = make_two_moons(n, noise, rng)
    elif kind == "gaussian_blobs":
        x, y = make_gaussian_blobs(n, noise, rng)
    else:
        x, y = make_checkerboard_ood(n, noise, rng)
    if kind == "checkerboard_ood":
        splits = np.full(n, OOD, dtype=np.uint8)
    else:
        splits = np.full(n, TRAIN, dtype=np.uint8)
        n_test = int(round(test_fraction * n))
        order = rng.permutation(n)
        splits[order[:n_test]] = TEST
    prov = f"synthetic:{kind}(n={n},noise={noise},seed={seed})"
    return DatasetHandle(x, y, splits, prov)


# ---------------------------------------------------------------------------
# VNDD container
# ---------------------------------------------------------------------------


def save_dataset(path: str | Path, handle: DatasetHandle) -> None:
    feats = np.ascontiguousarray(handle.features, dtype=np.float64)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<B", feats.ndim))
        for d in feats.shape:
            fh.write(struct.pack("<Q", d))
        fh.write(feats.tobytes())
        fh.write(np.ascontiguousarray(handle.labels, dtype="<i8").tobytes())
        fh.write(np.ascontiguousarray(handle.splits, dtype=np.uint8).tobytes())
        prov = handle.provenance.encode("utf-8")
        fh.write(struct.pack("<Q", len(prov)))
        fh.write(prov)


def load_dataset(path: str | Path) -> DatasetHandle:
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise DatasetError(f"{path}: not a dataset file")
    (version,) = struct.unpack("<I", blob[4:8])
    if version != VERSION:
        raise DatasetError(f"{path}: unsupported dataset version {version}")
    pos = 8
    (ndim,) = struct.unpack("<B", blob[pos : pos + 1])
    pos += 1
    shape = []
    for _ in range(ndim):
        (d,) = struct.unpack("<Q", blob[pos : pos + 8])
        shape.append(d)
        pos += 8
    numel = int(np.prod(shape)) if shape else 0
    n = shape[0] if shape else 0
    need = numel * 8 + n * 8 + n + 8
    if len(blob) < pos + need:
        raise DatasetError(f"{path}: truncated payload")
    feats = np.frombuffer(blob, dtype="<f8", count=numel, offset=pos).reshape(shape)
    pos += numel * 8
    labels = np.frombuffer(blob, dtype="<i8", count=n, offset=pos)
    pos += n * 8
    splits = np.frombuffer(blob, dtype=np.uint8, count=n, offset=pos)
    pos += n
    (plen,) = struct.unpack("<Q", blob[pos : pos + 8])
    pos += 8
    if len(blob) < pos + plen:
        raise DatasetError(f"{path}: truncated provenance")
    prov = blob[pos : pos + plen].decode("utf-8")
    return DatasetHandle(feats.copy(), labels.copy(), splits.copy(), prov)


# ---------------------------------------------------------------------------
# CSV import (flat 2-D features)
# ---------------------------------------------------------------------------


def load_csv_dataset(path: str | Path, test_fraction: float = 0.25, seed: int = 0) -> DatasetHandle:
    """Columns x1..xd,label[,split]; split values train/test/ood.

    Without a split column, rows are split deterministically from ``seed``.
    """
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        rows = [line.strip().split(",") for line in fh if line.strip()]
    if "label" not in header:
        raise DatasetError(f"{path}: no label column")
    li = header.index("label")
    si = header.index("split") if "split" in header else None
    feat_idx = [i for i, name in enumerate(header) if i not in (li, si)]
    feats = np.array([[float(r[i]) for i in feat_idx] for r in rows])
    labels = np.array([int(float(r[li])) for r in rows], dtype=np.int64)
    if si is not None:
        names = {v: k for k, v in _SPLIT_NAMES.items()}
        try:
            splits = np.array([names[r[si]] for r in rows], dtype=np.uint8)
        except KeyError as exc:
            raise DatasetError(f"{path}: unknown split name {exc}") from None
    else:
        rng = np.random.default_rng(seed)
        splits = np.full(len(rows), TRAIN, dtype=np.uint8)
        order = rng.permutation(len(rows))
        splits[order[: int(round(test_fraction * len(rows)))]] = TEST
    return DatasetHandle(feats, labels, splits, f"csv:{path}")


# ---------------------------------------------------------------------------
# IDX reader
# ---------------------------------------------------------------------------

_IDX_DTYPES = {
    0x08: np.uint8,
    0x09: np.int8,
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}


def read_idx(path: str | Path, take: int | None = None) -> np.ndarray:
    """Parse an IDX tensor file (big-endian magic, dims, payload).

    ``take`` keeps only the first n entries along the leading axis, in
    file order.
    """
    blob = Path(path).read_bytes()
    if len(blob) < 4 or blob[0] != 0 or blob[1] != 0:
        raise DatasetError(f"{path}: bad IDX magic")
    dtype_code, ndim = blob[2], blob[3]
    if dtype_code not in _IDX_DTYPES:
        raise DatasetError(f"{path}: unknown IDX dtype 0x{dtype_code:02x}")
    if len(blob) < 4 + 4 * ndim:
        raise DatasetError(f"{path}: truncated IDX header")
    dims = struct.unpack(">" + "I" * ndim, blob[4 : 4 + 4 * ndim])
    dtype = np.dtype(_IDX_DTYPES[dtype_code])
    numel = int(np.prod(dims)) if ndim else 1
    need = 4 + 4 * ndim + numel * dtype.itemsize
    if len(blob) < need:
        raise DatasetError(
            f"{path}: truncated IDX payload ({len(blob)} bytes, need {need})"
        )
    arr = np.frombuffer(blob, dtype=dtype, count=numel, offset=4 + 4 * ndim)
    arr = arr.reshape(dims)
    if take is not None:
        arr = arr[:take]
    return np.ascontiguousarray(arr)


def load_idx_pair(
    images_path: str | Path,
    labels_path: str | Path,
    take: int | None = None,
    test_fraction: float = 0.25,
    seed: int = 0,
) -> DatasetHandle:
    """IDX image + label files as a dataset; pixels rescaled to [0, 1]."""
    images = read_idx(images_path, take).astype(np.float64)
    labels = read_idx(labels_path, take).astype(np.int64)
    if images.shape[0] != labels.shape[0]:
        raise DatasetError("image and label counts differ")
    if images.ndim == 3:
        images = images[:, None, :, :]
    if images.max() > 1.0:
        images = images / 255.0
    rng = np.random.default_rng(seed)
    splits = np.full(images.shape[0], TRAIN, dtype=np.uint8)
    order = rng.permutation(images.shape[0])
    splits[order[: int(round(test_fraction * images.shape[0]))]] = TEST
    return DatasetHandle(images, labels, splits, f"idx:{images_path}")
