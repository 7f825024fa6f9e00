"""Datasets: CIFAR-10 binary records, grayscale preprocessing, synthetic sets."""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

RECORD_BYTES = 3073
PIXEL_BYTES = 3072
LUMA = (0.299, 0.587, 0.114)
GRAY_BOUNDS = (-128.0, 127.0)


@dataclass(frozen=True)
class DatasetRecord:
    features: np.ndarray
    label: int


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray
    num_classes: int
    input_bounds: tuple[float, float]

    def __len__(self):
        return len(self.y)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.x[idx], self.y[idx], self.num_classes, self.input_bounds)

    def records(self) -> list[DatasetRecord]:
        return [DatasetRecord(self.x[i], int(self.y[i])) for i in range(len(self))]

    @classmethod
    def from_records(cls, records: Sequence[DatasetRecord], num_classes: int, input_bounds) -> "Dataset":
        if not records:
            raise ValueError("no records")
        x = np.stack([np.asarray(r.features, dtype=np.float64) for r in records])
        y = np.array([r.label for r in records], dtype=np.int64)
        return cls(x, y, num_classes, tuple(input_bounds))


def _cifar_files(path) -> list[Path]:
    p = Path(path)
    if p.is_dir():
        files = sorted(p.glob("*.bin"))
        files = [f for f in files if f.name != "batches.meta.txt"]
        if not files:
            raise FileNotFoundError(f"no .bin files under {p}")
        return files
    if not p.exists():
        raise FileNotFoundError(f"{p} does not exist")
    return [p]


def load_cifar10_binary(path, class_subset: Iterable[int] | None = None, cap: int | None = None) -> list[DatasetRecord]:
    """Read CIFAR-10 binary records (1 label byte + 3072 channel-planar pixel bytes).

    ``path`` may be a file, a directory of ``*.bin`` batches, or a list of files.
    Pixels are returned untouched as uint8 vectors of length 3072.
    """
    files = [Path(f) for f in path] if isinstance(path, (list, tuple)) else _cifar_files(path)
    keep = None if class_subset is None else set(int(c) for c in class_subset)
    if keep is not None and not keep:
        raise ValueError("class subset is empty")
    out: list[DatasetRecord] = []
    for f in files:
        raw = f.read_bytes()
        if len(raw) % RECORD_BYTES:
            raise ValueError(f"corrupt record stream: {f} has {len(raw)} bytes, not a multiple of {RECORD_BYTES}")
        arr = np.frombuffer(raw, dtype=np.uint8).reshape(-1, RECORD_BYTES)
        bad = np.flatnonzero(arr[:, 0] >= 10)
        if bad.size:
            raise ValueError(f"label byte {arr[bad[0], 0]} out of range in record {bad[0]} of {f}")
        for row in arr:
            label = int(row[0])
            if keep is not None and label not in keep:
                continue
            out.append(DatasetRecord(row[1:].copy(), label))
            if cap is not None and len(out) >= cap:
                return out
    return out


def write_cifar10_binary(path, labels: Sequence[int], pixels: np.ndarray):
    pixels = np.asarray(pixels, dtype=np.uint8).reshape(len(labels), PIXEL_BYTES)
    rows = np.concatenate([np.asarray(labels, dtype=np.uint8)[:, None], pixels], axis=1)
    Path(path).write_bytes(rows.tobytes())


def preprocess_grayscale(record: DatasetRecord, downsample: int = 1) -> DatasetRecord:
    """RGB bytes -> luminance in [-128, 127], shaped (H, W, 1), block-averaged by ``downsample``."""
    if downsample not in (1, 2, 4):
        raise ValueError("downsample must be 1, 2 or 4")
    px = np.asarray(record.features, dtype=np.float64).reshape(3, 32, 32) / 255.0
    gray = LUMA[0] * px[0] + LUMA[1] * px[1] + LUMA[2] * px[2]
    g = np.clip(gray * 255.0 - 128.0, *GRAY_BOUNDS)
    if downsample > 1:
        s = 32 // downsample
        g = g.reshape(s, downsample, s, downsample).mean(axis=(1, 3))
    return DatasetRecord(g[:, :, None], record.label)


def cifar_dataset(path, class_subset: Sequence[int] = (0, 1), cap: int | None = None, downsample: int = 4) -> Dataset:
    """Grayscale CIFAR subset with labels renumbered 0..len(class_subset)-1."""
    subset = list(class_subset)
    recs = load_cifar10_binary(path, subset, cap)
    remap = {c: i for i, c in enumerate(subset)}
    recs = [preprocess_grayscale(DatasetRecord(r.features, remap[r.label]), downsample) for r in recs]
    return Dataset.from_records(recs, len(subset), GRAY_BOUNDS)


def synthesize_dataset(
    kind: str,
    n: int,
    seed: int = 0,
    dim: int = 2,
    separation: float = 4.0,
    sigma: float = 0.1,
    num_classes: int = 2,
) -> Dataset:
    """Toy sets inside the box [-1, 1]^dim.

    gaussians: isotropic clusters whose centres are ``separation`` sigmas apart
    (two classes along the first axis, more on a circle in the first two).
    checkerboard: uniform points labelled by the XOR of the first two coordinate signs.
    """
    if n < 2:
        raise ValueError("n must be >= 2")
    rng = np.random.default_rng(seed)
    bounds = (-1.0, 1.0)
    if kind == "gaussians":
        if num_classes < 2 or dim < 1 or (num_classes > 2 and dim < 2):
            raise ValueError("need >= 2 classes (and dim >= 2 for more than two)")
        y = rng.permutation(np.arange(n) % num_classes)
        r = separation * sigma / 2.0
        if num_classes == 2:
            centers = np.zeros((2, dim))
            centers[0, 0], centers[1, 0] = -r, r
        else:
            ang = 2 * np.pi * np.arange(num_classes) / num_classes
            # chord between neighbours equals the separation
            rad = r / np.sin(np.pi / num_classes)
            centers = np.zeros((num_classes, dim))
            centers[:, 0], centers[:, 1] = rad * np.cos(ang), rad * np.sin(ang)
        x = centers[y] + sigma * rng.standard_normal((n, dim))
    elif kind == "checkerboard":
        if dim < 2:
            raise ValueError("checkerboard needs dim >= 2")
        y = rng.permutation(np.arange(n) % 2)
        x = rng.uniform(0.05, 1.0, size=(n, dim)) * rng.choice([-1.0, 1.0], size=(n, dim))
        # flip the second coordinate's sign so that the XOR rule gives the drawn label
        s0 = x[:, 0] > 0
        want1 = (y == 1) ^ s0
        x[:, 1] = np.abs(x[:, 1]) * np.where(want1, 1.0, -1.0)
        num_classes = 2
    else:
        raise ValueError(f"unknown synthetic kind {kind!r}")
    return Dataset(np.clip(x, *bounds), y.astype(np.int64), num_classes, bounds)


def default_cifar_dir() -> str:
    return os.path.join(os.getcwd(), "data", "cifar-10-batches-bin")
