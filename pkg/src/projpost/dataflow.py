"""Datasets: synthetic generators, IDX/CSV loaders, rotation shift, batching."""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataFormatError

IDX_U8 = 0x08


@dataclass(frozen=True)
class Dataset:
    """``inputs`` is ``(N, I)``. ``targets`` is ``(N, O)`` floats for
    regression or ``(N,)`` integer class indices for classification."""

    inputs: np.ndarray
    targets: np.ndarray
    kind: str
    name: str = ""
    n_classes: int | None = None

    def __post_init__(self):
        if self.kind not in ("regression", "classification"):
            raise ConfigError(f"dataset kind must be regression or classification, got {self.kind!r}")
        X = np.asarray(self.inputs, dtype=np.float64)
        if X.ndim != 2 or X.shape[0] < 1:
            raise DataFormatError(f"inputs must be a non-empty (N, I) matrix, got shape {X.shape}")
        if not np.all(np.isfinite(X)):
            raise DataFormatError(f"dataset {self.name!r} has non-finite inputs")
        if self.kind == "regression":
            T = np.asarray(self.targets, dtype=np.float64)
            if T.ndim == 1:
                T = T[:, None]
            if not np.all(np.isfinite(T)):
                raise DataFormatError(f"dataset {self.name!r} has non-finite targets")
        else:
            T = np.asarray(self.targets).astype(np.int64)
            n_classes = self.n_classes if self.n_classes is not None else int(T.max()) + 1
            if np.any(T < 0) or np.any(T >= n_classes):
                raise DataFormatError(f"class labels must lie in [0, {n_classes})")
            object.__setattr__(self, "n_classes", int(n_classes))
        if T.shape[0] != X.shape[0]:
            raise DataFormatError(f"{X.shape[0]} inputs but {T.shape[0]} targets")
        object.__setattr__(self, "inputs", X)
        object.__setattr__(self, "targets", T)

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def input_dim(self) -> int:
        return self.inputs.shape[1]

    @property
    def output_dim(self) -> int:
        return self.n_classes if self.kind == "classification" else self.targets.shape[1]

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.inputs[idx], self.targets[idx], self.kind, self.name, self.n_classes)


@dataclass(frozen=True)
class BatchPartition:
    batch_size: int
    index_lists: tuple[np.ndarray, ...]
    seed: int

    def __len__(self) -> int:
        return len(self.index_lists)


# -- generators ---------------------------------------------------------------


def gen_toy_regression(n_per_cluster: int, noise_sd: float, seed: int) -> Dataset:
    """Two clusters on [-1, -0.4] and [0.4, 1] with targets sin(3x) + noise."""
    if n_per_cluster < 1 or noise_sd < 0:
        raise ConfigError("need n_per_cluster >= 1 and noise_sd >= 0")
    rng = np.random.default_rng(seed)
    left = rng.uniform(-1.0, -0.4, n_per_cluster)
    right = rng.uniform(0.4, 1.0, n_per_cluster)
    x = np.concatenate([left, right])
    y = np.sin(3.0 * x)
    if noise_sd > 0:
        y = y + noise_sd * rng.standard_normal(x.shape[0])
    return Dataset(x[:, None], y[:, None], "regression", "toy_regression")


def gen_two_moons(n: int, noise_sd: float, seed: int) -> Dataset:
    """Interleaved half circles; class 0 is the upper moon and gets ceil(n/2) points."""
    if n < 2 or noise_sd < 0:
        raise ConfigError("need n >= 2 and noise_sd >= 0")
    n_up = (n + 1) // 2
    n_down = n // 2
    t_up = np.linspace(0.0, math.pi, n_up)
    t_down = np.linspace(0.0, math.pi, n_down)
    upper = np.stack([np.cos(t_up), np.sin(t_up)], axis=1)
    lower = np.stack([1.0 - np.cos(t_down), 0.5 - np.sin(t_down)], axis=1)
    X = np.concatenate([upper, lower])
    y = np.concatenate([np.zeros(n_up, dtype=np.int64), np.ones(n_down, dtype=np.int64)])
    if noise_sd > 0:
        X = X + noise_sd * np.random.default_rng(seed).standard_normal(X.shape)
    return Dataset(X, y, "classification", "two_moons", n_classes=2)


def gen_ood_blob(n: int, center, sd: float, seed: int, n_classes: int = 2) -> Dataset:
    """Isotropic Gaussian cloud, every point labelled class 0."""
    center = np.asarray(center, dtype=np.float64)
    if n < 1 or sd < 0 or center.ndim != 1:
        raise ConfigError("need n >= 1, sd >= 0 and a 1-D center")
    rng = np.random.default_rng(seed)
    X = center + sd * rng.standard_normal((n, center.shape[0]))
    return Dataset(X, np.zeros(n, dtype=np.int64), "classification", "ood_blob", n_classes=n_classes)


# -- file formats -------------------------------------------------------------


def load_idx(path) -> np.ndarray:
    """Read an IDX file of unsigned bytes into an array shaped by its header."""
    data = Path(path).read_bytes()
    if len(data) < 4:
        raise DataFormatError(f"{path}: too short for an IDX header")
    zero0, zero1, dtype, ndim = data[:4]
    if zero0 != 0 or zero1 != 0:
        raise DataFormatError(f"{path}: bad IDX magic {data[:4].hex()}")
    if dtype != IDX_U8:
        raise DataFormatError(f"{path}: unsupported IDX type code 0x{dtype:02x}")
    header = 4 + 4 * ndim
    if len(data) < header:
        raise DataFormatError(f"{path}: truncated IDX dimension table")
    dims = struct.unpack(f">{ndim}I", data[4:header])
    count = math.prod(dims)
    payload = data[header:]
    if len(payload) != count:
        raise DataFormatError(f"{path}: payload has {len(payload)} bytes, header promises {count}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims).copy()


def write_idx(path, array) -> None:
    arr = np.asarray(array)
    if arr.dtype != np.uint8:
        raise DataFormatError("only uint8 arrays can be written as IDX")
    header = bytes([0, 0, IDX_U8, arr.ndim]) + struct.pack(f">{arr.ndim}I", *arr.shape)
    Path(path).write_bytes(header + np.ascontiguousarray(arr).tobytes())


def idx_dataset(images_path, labels_path, limit: int | None = None, offset: int = 0,
                n_classes: int = 10, name: str = "idx") -> Dataset:
    """Images scaled to [0, 1] and flattened, paired with u8 labels."""
    images = load_idx(images_path)
    labels = load_idx(labels_path)
    if images.shape[0] != labels.shape[0] or labels.ndim != 1:
        raise DataFormatError("image and label files disagree on the number of items")
    stop = images.shape[0] if limit is None else offset + limit
    X = images[offset:stop].reshape(-1, math.prod(images.shape[1:])).astype(np.float64) / 255.0
    return Dataset(X, labels[offset:stop].astype(np.int64), "classification", name, n_classes)


def load_csv(path, I: int, O: int, kind: str) -> Dataset:
    """Rows are ``I`` inputs followed by the target(s).

    Regression rows carry ``O`` target columns; classification rows carry a
    single class index and ``O`` is the number of classes.
    """
    n_targets = O if kind == "regression" else 1
    width = I + n_targets
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row:
                continue
            if len(row) != width:
                raise DataFormatError(f"{path}:{lineno}: expected {width} columns, got {len(row)}")
            try:
                values = [float(v) for v in row]
            except ValueError as exc:
                raise DataFormatError(f"{path}:{lineno}: {exc}") from exc
            if not all(math.isfinite(v) for v in values):
                raise DataFormatError(f"{path}:{lineno}: non-finite value")
            rows.append(values)
    if not rows:
        raise DataFormatError(f"{path}: no data rows")
    A = np.array(rows)
    if kind == "classification":
        labels = A[:, I]
        if not np.all(labels == np.round(labels)):
            raise DataFormatError(f"{path}: class labels must be integers")
        return Dataset(A[:, :I], labels.astype(np.int64), kind, Path(path).stem, n_classes=O)
    return Dataset(A[:, :I], A[:, I:], kind, Path(path).stem)


# -- shifts and batching --------------------------------------------------------


def rotate_square_images(dataset: Dataset, degrees: float) -> Dataset:
    """Rotate every flattened ``W x W`` image about its centre.

    Nearest-neighbour inverse mapping; pixels whose source falls outside the
    image become 0.
    """
    N, D = dataset.inputs.shape
    W = math.isqrt(D)
    if W * W != D:
        raise ConfigError(f"input dimension {D} is not a square image")
    if degrees == 0:
        return dataset
    rad = math.radians(degrees)
    c, s = math.cos(rad), math.sin(rad)
    centre = (W - 1) / 2.0
    r, col = np.meshgrid(np.arange(W), np.arange(W), indexing="ij")
    dy, dx = r - centre, col - centre
    # inverse rotation: where does each output pixel come from?
    src_r = np.rint(centre + c * dy - s * dx).astype(np.int64)
    src_c = np.rint(centre + s * dy + c * dx).astype(np.int64)
    inside = (src_r >= 0) & (src_r < W) & (src_c >= 0) & (src_c < W)
    src = np.where(inside, src_r * W + src_c, 0).ravel()
    out = dataset.inputs[:, src] * inside.ravel()
    return Dataset(out, dataset.targets, dataset.kind, f"{dataset.name}_rot{degrees:g}", dataset.n_classes)


def partition(dataset_or_n, S: int, seed: int) -> BatchPartition:
    """Shuffle indices with ``seed`` and cut them into ``ceil(N/S)`` batches."""
    N = dataset_or_n if isinstance(dataset_or_n, (int, np.integer)) else len(dataset_or_n)
    if S < 1 or N < 1:
        raise ConfigError("batch size and dataset size must be positive")
    perm = np.random.default_rng(seed).permutation(N)
    lists = tuple(perm[i:i + S] for i in range(0, N, S))
    return BatchPartition(S, lists, seed)
