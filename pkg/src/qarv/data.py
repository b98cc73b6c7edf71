"""Training data: directory ingestion, crop/flip batching, synthetic textures."""

from __future__ import annotations

import glob as globmod
import os

import numpy as np

from . import ppm


class DataError(ValueError):
    pass


class ImageDataset:
    """In-memory image collection with deterministic crop/flip sampling."""

    def __init__(self, images: list[np.ndarray]):
        if not images:
            raise DataError("dataset is empty")
        for img in images:
            if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
                raise DataError("images must be (H, W, 3) uint8")
        self.images = images

    def __len__(self) -> int:
        return len(self.images)

    @classmethod
    def from_dir(cls, path: str, pattern: str = "*.ppm") -> "ImageDataset":
        if not os.path.isdir(path):
            raise DataError(f"dataset directory not found: {path}")
        files = sorted(globmod.glob(os.path.join(path, pattern)))
        if not files:
            raise DataError(f"no files matching {pattern!r} in {path}")
        return cls([ppm.read_image(f) for f in files])

    def min_size(self) -> tuple[int, int]:
        hs = min(img.shape[0] for img in self.images)
        ws = min(img.shape[1] for img in self.images)
        return hs, ws

    def sample_batch(self, rng: np.random.Generator, batch: int, crop: int,
                     flip_prob: float = 0.5) -> np.ndarray:
        """(B, 3, crop, crop) float32 in [0, 1]; draw order is fixed so the
        batch is a pure function of the generator state."""
        hmin, wmin = self.min_size()
        if crop > hmin or crop > wmin:
            raise DataError(f"crop {crop} larger than smallest image {hmin}x{wmin}")
        out = np.empty((batch, 3, crop, crop), dtype=np.float32)
        for b in range(batch):
            idx = int(rng.integers(len(self.images)))
            img = self.images[idx]
            y0 = int(rng.integers(img.shape[0] - crop + 1))
            x0 = int(rng.integers(img.shape[1] - crop + 1))
            flip = bool(rng.random() < flip_prob)
            patch = img[y0:y0 + crop, x0:x0 + crop]
            if flip:
                patch = patch[:, ::-1]
            out[b] = patch.astype(np.float32).transpose(2, 0, 1) / 255.0
        return out


def synthetic_textures(count: int, size: int = 32, seed: int = 0) -> list[np.ndarray]:
    """Seeded generator of smooth gradient + grating textures, (size, size, 3) uint8.

    Content is low-frequency and strongly structured, so a small codec can
    beat the predict-the-dataset-mean baseline by a wide margin.
    """
    rng = np.random.default_rng(seed)
    ys, xs = np.meshgrid(np.linspace(0.0, 1.0, size), np.linspace(0.0, 1.0, size),
                         indexing="ij")
    images = []
    for _ in range(count):
        base = rng.uniform(0.3, 0.7, size=3)
        gx = rng.uniform(-0.35, 0.35, size=3)
        gy = rng.uniform(-0.35, 0.35, size=3)
        img = (base[:, None, None]
               + gx[:, None, None] * (xs - 0.5)
               + gy[:, None, None] * (ys - 0.5))
        for _ in range(2):
            freq = rng.uniform(0.8, 3.5)
            theta = rng.uniform(0.0, np.pi)
            phase = rng.uniform(0.0, 2 * np.pi)
            amp = rng.uniform(0.04, 0.16)
            weights = rng.uniform(0.2, 1.0, size=3)
            wave = np.sin(2 * np.pi * freq * (xs * np.cos(theta) + ys * np.sin(theta))
                          + phase)
            img += amp * weights[:, None, None] * wave
        img = np.clip(img, 0.02, 0.98)
        images.append(np.rint(img.transpose(1, 2, 0) * 255.0).astype(np.uint8))
    return images


def write_dataset(images: list[np.ndarray], directory: str, prefix: str = "img") -> list[str]:
    os.makedirs(directory, exist_ok=True)
    paths = []
    for i, img in enumerate(images):
        path = os.path.join(directory, f"{prefix}_{i:05d}.ppm")
        ppm.write_image(path, img)
        paths.append(path)
    return paths
