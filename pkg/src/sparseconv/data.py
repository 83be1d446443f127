"""Procedural shape-classification data: filled squares, circles, crosses.

Images are single-channel float32 grids in [0, 1] with the shape drawn at
a random position, size and intensity over light background noise.  The
whole dataset is a pure function of (count, seed, size).
"""

import numpy as np

CLASS_NAMES = ("square", "circle", "cross")


def make_shapes_dataset(count: int, seed: int, size: int = 32, noise: float = 0.05):
    """Returns (images (count, size, size, 1) float32, labels (count,) int64)."""
    rng = np.random.default_rng(seed)
    images = np.zeros((count, size, size, 1), dtype=np.float32)
    labels = rng.integers(0, 3, size=count).astype(np.int64)
    yy, xx = np.mgrid[0:size, 0:size]
    for i in range(count):
        half = int(rng.integers(3, max(4, size // 4)))
        cy = int(rng.integers(half, size - half))
        cx = int(rng.integers(half, size - half))
        val = float(rng.uniform(0.6, 1.0))
        img = images[i, :, :, 0]
        if labels[i] == 0:
            img[cy - half:cy + half, cx - half:cx + half] = val
        elif labels[i] == 1:
            img[(yy - cy) ** 2 + (xx - cx) ** 2 <= half * half] = val
        else:
            thick = max(1, half // 3)
            img[cy - thick:cy + thick, cx - half:cx + half] = val
            img[cy - half:cy + half, cx - thick:cx + thick] = val
    if noise:
        images += rng.normal(0.0, noise, size=images.shape).astype(np.float32)
        np.clip(images, 0.0, 1.0, out=images)
    return images, labels


def batch_stream(images: np.ndarray, labels: np.ndarray, batch_size: int, seed: int):
    """Endless deterministic batch generator; reshuffles every epoch."""
    if len(images) != len(labels):
        raise ValueError(f"{len(images)} images vs {len(labels)} labels")
    rng = np.random.default_rng(seed)
    n = len(images)
    while True:
        order = rng.permutation(n)
        for start in range(0, n - batch_size + 1, batch_size):
            idx = order[start:start + batch_size]
            yield images[idx], labels[idx]
