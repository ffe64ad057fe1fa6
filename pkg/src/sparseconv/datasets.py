"""Seeded synthetic image classification data for desk-scale experiments."""
from __future__ import annotations

import numpy as np

from .errors import ShapeError


def synthetic_blobs(n_samples: int, num_classes: int = 4, image_size: int = 12,
                    channels: int = 1, noise: float = 0.35, seed: int = 0):
    """Gaussian-bump + texture classes, returned as (X NCHW f32, y int64).

    Each class has a bump in a distinct image region plus a class-specific
    sinusoidal texture, so a small CNN separates them quickly while keeping
    the task non-trivial under pruning.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:image_size, 0:image_size].astype(np.float64)
    centers = [(image_size * (0.25 + 0.5 * (c % 2)),
                image_size * (0.25 + 0.5 * ((c // 2) % 2))) for c in range(num_classes)]
    freqs = [1 + (c % 3) for c in range(num_classes)]
    x = np.empty((n_samples, channels, image_size, image_size), dtype=np.float32)
    y = rng.integers(0, num_classes, size=n_samples)
    for i in range(n_samples):
        c = y[i]
        cy, cx = centers[c]
        bump = np.exp(-(((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * (image_size / 5) ** 2)))
        texture = 0.4 * np.sin(2 * np.pi * freqs[c] * xx / image_size)
        img = bump + texture + noise * rng.standard_normal((image_size, image_size))
        for ch in range(channels):
            x[i, ch] = img if ch == 0 else np.rot90(img, ch)
    return x, y.astype(np.int64)


def split_train_val(x, y, val_fraction: float = 0.2, seed: int = 0):
    """Deterministic shuffled split into (x_tr, y_tr, x_val, y_val)."""
    n = len(y)
    n_val = int(round(n * val_fraction))
    if n_val < 1 or n - n_val < 1:
        raise ShapeError(f"dataset of {n} samples too small for validation split")
    perm = np.random.default_rng(seed).permutation(n)
    val, tr = perm[:n_val], perm[n_val:]
    return x[tr], y[tr], x[val], y[val]


def load_dataset_npz(path):
    """Load an .npz with arrays 'x' (NCHW) and 'y' (labels)."""
    with np.load(path) as data:
        if "x" not in data or "y" not in data:
            raise ShapeError("dataset file must contain arrays 'x' and 'y'")
        x, y = data["x"], data["y"]
    if x.ndim != 4 or len(x) != len(y):
        raise ShapeError("dataset arrays must be x: NCHW, y: N labels")
    return x.astype(np.float32), y.astype(np.int64)
