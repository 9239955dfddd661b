"""Adaptive learning-material update: erase the most informative region."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .model import ReIDNet, compute_cam, embed_images, most_informative_point

FILLS = ("dataset_mean", "zero", "uniform_noise")


@dataclass(frozen=True)
class EraseConfig:
    prob: float = 0.4
    erase_h: int = 16
    erase_w: int = 8
    fill: str = "dataset_mean"

    def __post_init__(self):
        if not 0.0 <= self.prob <= 1.0:
            raise ValueError(f"prob must lie in [0, 1], got {self.prob}")
        if self.erase_h < 1 or self.erase_w < 1:
            raise ValueError("erase size must be positive")
        if self.fill not in FILLS:
            raise ValueError(f"fill must be one of {FILLS}, got {self.fill!r}")

    def check_image(self, height: int, width: int) -> None:
        if self.erase_h > height or self.erase_w > width:
            raise ValueError("erase rectangle is larger than the image")


def erase_box(point: tuple[int, int], cfg: EraseConfig, height: int, width: int) -> tuple[int, int, int, int]:
    """Rows [y0, y1) and columns [x0, x1) of the rectangle centred on
    ``point = (x, y)``, clipped to the image."""
    x, y = int(point[0]), int(point[1])
    y0 = y - cfg.erase_h // 2
    x0 = x - cfg.erase_w // 2
    return max(y0, 0), min(y0 + cfg.erase_h, height), max(x0, 0), min(x0 + cfg.erase_w, width)


def adaptive_erase(
    images: np.ndarray,
    points: np.ndarray,
    cfg: EraseConfig,
    rng: np.random.Generator,
    mean: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Erase around one point per image with probability ``cfg.prob``.

    ``images`` is N x C x H x W; ``points`` is N x 2 as (x, y).  Returns the
    erased copy and the boolean per-image decision.  Exactly one uniform draw
    is taken per image (plus noise draws for erased ``uniform_noise`` fills).
    """
    n, c, h, w = images.shape
    cfg.check_image(h, w)
    points = np.asarray(points)
    if points.shape != (n, 2):
        raise ValueError("need one (x, y) point per image")
    if (points[:, 0] < 0).any() or (points[:, 0] >= w).any() or (points[:, 1] < 0).any() or (points[:, 1] >= h).any():
        raise ValueError("erase point outside the image")
    if cfg.fill == "dataset_mean":
        if mean is None:
            raise ValueError("dataset_mean fill needs the per-channel mean")
        mean = np.asarray(mean, dtype=images.dtype).reshape(c, 1, 1)

    out = images.copy()
    decide = rng.random(n) < cfg.prob
    for i in np.flatnonzero(decide):
        y0, y1, x0, x1 = erase_box(points[i], cfg, h, w)
        if cfg.fill == "zero":
            out[i, :, y0:y1, x0:x1] = 0
        elif cfg.fill == "dataset_mean":
            out[i, :, y0:y1, x0:x1] = mean
        else:
            out[i, :, y0:y1, x0:x1] = rng.random((c, y1 - y0, x1 - x0))
    return out, decide


def informative_points(model: ReIDNet, images: np.ndarray, class_index) -> np.ndarray:
    """(x, y) of the CAM peak for each image under ``model`` (eval mode)."""
    bundle = embed_images(model, images)
    cam = compute_cam(bundle, model.classifier.weight.detach(), torch.as_tensor(class_index))
    return most_informative_point(cam, model.input_size)


def random_points(n: int, height: int, width: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform random erase centres, the non-adaptive comparison arm."""
    return np.stack([rng.integers(0, width, n), rng.integers(0, height, n)], axis=1)


def dump_erase_examples(
    model: ReIDNet,
    images: np.ndarray,
    class_index,
    cfg: EraseConfig,
    directory,
    mean: np.ndarray | None = None,
) -> list:
    """Write one PNG per image: original | CAM overlay | erased view."""
    from pathlib import Path

    from PIL import Image

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    bundle = embed_images(model, images)
    cam = compute_cam(bundle, model.classifier.weight.detach(), torch.as_tensor(class_index)).numpy()
    points = most_informative_point(cam, model.input_size)
    forced = EraseConfig(1.0, cfg.erase_h, cfg.erase_w, cfg.fill)
    erased, _ = adaptive_erase(images, points, forced, np.random.default_rng(0), mean)
    h, w = model.input_size
    paths = []
    for i in range(len(images)):
        heat = cam[i] - cam[i].min()
        heat = heat / heat.max() if heat.max() > 0 else heat
        heat = np.kron(heat, np.ones((h // heat.shape[0], w // heat.shape[1])))
        original = images[i].transpose(1, 2, 0)
        overlay = 0.5 * original + 0.5 * np.stack([heat, np.zeros_like(heat), 1.0 - heat], axis=2)
        panel = np.concatenate([original, overlay, erased[i].transpose(1, 2, 0)], axis=1)
        path = directory / f"erase_{i:03d}.png"
        Image.fromarray(np.round(np.clip(panel, 0, 1) * 255).astype(np.uint8)).save(path)
        paths.append(path)
    return paths
