"""Procedural toy image datasets.

Images live in [0, 1]; the diffusion model works on latents in [-1, 1]
(``to_latent`` / ``to_image``). The Gaussian dataset is generated directly in
latent space.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

SHAPE_CLASSES = ("disk", "ring", "cross", "square")


def to_latent(img):
    return 2.0 * img - 1.0


def to_image(x):
    return 0.5 * (x + 1.0)


@dataclass
class ToyDataset:
    data: np.ndarray          # (N, side, side) model-space latents
    labels: np.ndarray        # (N,) int
    class_names: tuple[str, ...]
    kind: str = "shapes"

    def __len__(self) -> int:
        return len(self.data)

    @property
    def side(self) -> int:
        return int(self.data.shape[-1])

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def class_mean(self, label: int) -> np.ndarray:
        """Mean latent of one class."""
        return self.data[self.labels == label].mean(axis=0)

    def class_mean_image(self, label: int) -> np.ndarray:
        return to_image(self.class_mean(label))

    def label_of(self, name: str) -> int:
        return self.class_names.index(name)


def _render_shape(name: str, side: int, cx: float, cy: float, size: float, supersample: int = 4) -> np.ndarray:
    n = side * supersample
    coords = (np.arange(n) + 0.5) / supersample
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    dx, dy = xx - cx, yy - cy
    r = np.hypot(dx, dy)
    if name == "disk":
        mask = r <= size
    elif name == "ring":
        mask = (r <= size) & (r >= 0.6 * size)
    elif name == "cross":
        arm = 0.3 * size
        mask = ((np.abs(dx) <= arm) & (np.abs(dy) <= size)) | ((np.abs(dy) <= arm) & (np.abs(dx) <= size))
    elif name == "square":
        mask = (np.abs(dx) <= 0.85 * size) & (np.abs(dy) <= 0.85 * size)
    else:
        raise ValueError(f"unknown shape class {name!r}")
    return mask.reshape(side, supersample, side, supersample).mean(axis=(1, 3))


def shape_mask(name: str, side: int = 32, size: float | None = None) -> np.ndarray:
    """Boolean support of a centered, unjittered shape."""
    size = 0.3 * side if size is None else size
    return _render_shape(name, side, side / 2, side / 2, size) > 0.5


def make_shapes(n_per_class: int = 256, side: int = 32, rng: np.random.Generator | None = None,
                classes=SHAPE_CLASSES, jitter: float = 1.0, size_jitter: float = 0.08) -> ToyDataset:
    """Centered shape classes with small position and size jitter."""
    rng = np.random.default_rng(0) if rng is None else rng
    images, labels = [], []
    for label, name in enumerate(classes):
        for _ in range(n_per_class):
            cx, cy = side / 2 + rng.uniform(-jitter, jitter, size=2)
            size = 0.3 * side * (1.0 + rng.uniform(-size_jitter, size_jitter))
            images.append(_render_shape(name, side, cx, cy, size))
            labels.append(label)
    data = to_latent(np.stack(images)).astype(np.float32)
    return ToyDataset(data, np.asarray(labels, dtype=np.int64), tuple(classes), "shapes")


def make_gaussian(n: int, side: int, mu: np.ndarray, var_d: float,
                  rng: np.random.Generator | None = None) -> ToyDataset:
    """Samples of N(mu, var_d I) in latent space, all under label 0."""
    rng = np.random.default_rng(0) if rng is None else rng
    mu = np.broadcast_to(np.asarray(mu, dtype=np.float64), (side, side))
    data = mu + np.sqrt(var_d) * rng.standard_normal((n, side, side))
    return ToyDataset(data.astype(np.float32), np.zeros(n, dtype=np.int64), ("gaussian",), "gaussian")


def load_npz(path: str | Path) -> ToyDataset:
    """Load ``images`` in [0, 1] with shape (N, side, side) and optional ``labels``."""
    with np.load(Path(path)) as f:
        images = np.asarray(f["images"], dtype=np.float32)
        labels = np.asarray(f["labels"], dtype=np.int64) if "labels" in f else np.zeros(len(images), np.int64)
        names = tuple(str(s) for s in f["class_names"]) if "class_names" in f else tuple(
            f"class{i}" for i in range(int(labels.max()) + 1))
    return ToyDataset(to_latent(images), labels, names, "file")
