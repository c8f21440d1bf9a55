"""Synthetic labeled image sets and the on-disk dataset layout.

A dataset directory holds ``x.odt`` (float32, N x C x H x W), ``y.odt``
(uint8 labels) and ``meta.json`` with at least ``n_train``: the first
``n_train`` samples are the training split, the rest validation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .serialize import FormatError, load_tensor, save_tensor


class DatasetError(ValueError):
    pass


@dataclass
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray
    classes: int

    @property
    def shape(self) -> tuple:
        return tuple(self.x_train.shape[1:])

    def subset(self, n_train: int | None = None, n_val: int | None = None) -> "Dataset":
        return Dataset(self.x_train[:n_train], self.y_train[:n_train], self.x_val[:n_val], self.y_val[:n_val], self.classes)


def _prototypes(rng, classes: int, size: int) -> np.ndarray:
    """Each class is a pair of Gaussian blobs at class-specific positions and widths."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    protos = np.zeros((classes, size, size))
    used = set()
    for k in range(classes):
        # small images may not have enough distinct position pairs; widths still differ
        for _ in range(100):
            centers = tuple(map(tuple, rng.integers(1, size - 1, size=(2, 2))))
            key = tuple(sorted(centers))
            if key not in used and centers[0] != centers[1]:
                break
        used.add(key)
        for (cy, cx), sign in zip(centers, (1.0, 0.6)):
            width = rng.uniform(0.8, 1.6)
            protos[k] += sign * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width**2))
    return protos / protos.max(axis=(1, 2), keepdims=True)


def gen_synthetic(classes: int = 10, n: int = 3000, size: int = 8, seed: int = 0, noise: float = 0.2,
                  val_fraction: float = 0.2) -> Dataset:
    """Deterministic blob-pattern images in [0, 1] with one channel.

    Samples are class prototypes shifted by up to one pixel, rescaled in
    contrast and corrupted by Gaussian noise.
    """
    if classes < 2:
        raise DatasetError("need at least two classes")
    if size < 4:
        raise DatasetError("image size must be at least 4")
    rng = np.random.default_rng(seed)
    protos = _prototypes(rng, classes, size)
    y = np.arange(n) % classes
    rng.shuffle(y)
    shifts = rng.integers(-1, 2, size=(n, 2))
    gain = rng.uniform(0.7, 1.2, size=n)
    x = np.empty((n, 1, size, size))
    for i in range(n):
        img = np.roll(protos[y[i]], tuple(shifts[i]), axis=(0, 1))
        x[i, 0] = gain[i] * img
    x += noise * rng.normal(size=x.shape)
    x = np.clip(x, 0.0, 1.0).astype(np.float32)
    n_train = n - int(round(n * val_fraction))
    y = y.astype(np.uint8)
    return Dataset(x[:n_train], y[:n_train], x[n_train:], y[n_train:], classes)


def save_dataset(ds: Dataset, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_tensor(d / "x.odt", np.concatenate([ds.x_train, ds.x_val]).astype(np.float32))
    save_tensor(d / "y.odt", np.concatenate([ds.y_train, ds.y_val]).astype(np.uint8))
    meta = {"n_train": int(len(ds.y_train)), "classes": int(ds.classes), "shape": list(ds.shape)}
    (d / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")


def load_dataset(directory) -> Dataset:
    d = Path(directory)
    try:
        meta = json.loads((d / "meta.json").read_text())
        x = load_tensor(d / "x.odt")
        y = load_tensor(d / "y.odt")
    except FileNotFoundError as exc:
        raise DatasetError(f"incomplete dataset directory {d}: {exc.filename} missing") from exc
    except FormatError as exc:
        raise DatasetError(f"{d}: {exc}") from exc
    if x.dtype != np.float32 or x.ndim != 4:
        raise DatasetError(f"x.odt must be float32 N x C x H x W, got {x.dtype} {x.shape}")
    if y.dtype != np.uint8 or y.shape != (x.shape[0],):
        raise DatasetError(f"y.odt must be uint8 of length {x.shape[0]}, got {y.dtype} {y.shape}")
    if "shape" in meta and list(x.shape[1:]) != list(meta["shape"]):
        raise DatasetError(f"declared sample shape {meta['shape']} but x.odt holds {list(x.shape[1:])}")
    n_train = int(meta["n_train"])
    if not 0 < n_train <= len(y):
        raise DatasetError(f"n_train={n_train} outside [1, {len(y)}]")
    classes = int(meta.get("classes", int(y.max()) + 1))
    if len(y) and y.max() >= classes:
        raise DatasetError(f"label {int(y.max())} >= classes {classes}")
    return Dataset(x[:n_train], y[:n_train], x[n_train:], y[n_train:], classes)
