"""Background colour normalization across a corpus of smear images.

Every image is shifted by the difference between the corpus-wide background
mean and its own background mean, channel by channel.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .raster import check_rgb, dilate

BG_DILATION = 5
BG_BORDER = 5


class NoBackgroundError(ValueError):
    pass


def background_region(fg_mask: np.ndarray, dilation: int = BG_DILATION,
                      border: int = BG_BORDER) -> np.ndarray:
    """Pixels outside the dilated foreground and away from the image frame."""
    bg = ~dilate(np.asarray(fg_mask, dtype=bool), dilation)
    if border > 0:
        bg[:border, :] = False
        bg[-border:, :] = False
        bg[:, :border] = False
        bg[:, -border:] = False
    return bg


def background_stats(img: np.ndarray, fg_mask: np.ndarray, dilation: int = BG_DILATION,
                     border: int = BG_BORDER) -> tuple[tuple[float, float, float], int]:
    img = check_rgb(img)
    fg_mask = np.asarray(fg_mask, dtype=bool)
    if fg_mask.shape != img.shape[:2]:
        raise ValueError(f"mask shape {fg_mask.shape} does not match image {img.shape[:2]}")
    bg = background_region(fg_mask, dilation, border)
    n = int(bg.sum())
    if n == 0:
        raise NoBackgroundError("no background")
    sums = img[bg].astype(np.float64).sum(axis=0)
    mean = sums / n
    return (float(mean[0]), float(mean[1]), float(mean[2])), n


def background_mean(img: np.ndarray, fg_mask: np.ndarray, dilation: int = BG_DILATION,
                    border: int = BG_BORDER) -> tuple[float, float, float]:
    """Per-channel mean over background pixels.

    The foreground mask is dilated by ``dilation`` pixels (disc) and a frame
    of ``border`` pixels is excluded before averaging. Raises
    ``NoBackgroundError`` when nothing is left.
    """
    return background_stats(img, fg_mask, dilation, border)[0]


@dataclass
class NormalizationStats:
    global_mean: tuple[float, float, float]
    per_image: dict[str, tuple[float, float, float]] = field(default_factory=dict)
    bg_pixels: dict[str, int] = field(default_factory=dict)

    @property
    def image_count(self) -> int:
        return len(self.per_image)

    def to_json(self) -> str:
        doc = {
            "global_mean": [_real(v) for v in self.global_mean],
            "images": {
                k: {"mean": [_real(v) for v in self.per_image[k]], "bg_pixels": self.bg_pixels.get(k, 0)}
                for k in sorted(self.per_image)
            },
            "version": 1,
        }
        return json.dumps(doc, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "NormalizationStats":
        doc = json.loads(text)
        if doc.get("version") != 1:
            raise ValueError(f"unsupported stats version {doc.get('version')!r}")
        images = doc.get("images", {})
        return cls(
            global_mean=tuple(float(v) for v in doc["global_mean"]),
            per_image={k: tuple(float(v) for v in rec["mean"]) for k, rec in images.items()},
            bg_pixels={k: int(rec["bg_pixels"]) for k, rec in images.items()},
        )

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "NormalizationStats":
        return cls.from_json(Path(path).read_text())


def _real(v: float) -> float:
    # 17 significant digits round-trips a double exactly.
    return float(f"{v:.17g}")


def fit_corpus(images: Iterable[tuple[str, np.ndarray, np.ndarray]], dilation: int = BG_DILATION,
               border: int = BG_BORDER) -> NormalizationStats:
    """Background means per image plus their pixel-count-weighted global mean."""
    per_image = {}
    counts = {}
    for image_id, img, fg in images:
        if image_id in per_image:
            raise ValueError(f"duplicate image id {image_id!r}")
        try:
            per_image[image_id], counts[image_id] = background_stats(img, fg, dilation, border)
        except NoBackgroundError as exc:
            raise NoBackgroundError(f"no background in image {image_id!r}") from exc
    if not per_image:
        raise ValueError("empty corpus")
    total = np.zeros(3)
    n = 0
    for image_id in sorted(per_image):
        total += np.asarray(per_image[image_id]) * counts[image_id]
        n += counts[image_id]
    mean = total / n
    return NormalizationStats((float(mean[0]), float(mean[1]), float(mean[2])), per_image, counts)


def normalize_image(img: np.ndarray, img_mean, global_mean) -> np.ndarray:
    """Shift every pixel by ``global_mean - img_mean`` and clamp to [0, 255].

    Returns a float64 array so the shift stays exact; use ``to_uint8`` to
    quantize.
    """
    img = check_rgb(img)
    img_mean = np.asarray(img_mean, dtype=np.float64)
    global_mean = np.asarray(global_mean, dtype=np.float64)
    for m in (img_mean, global_mean):
        if m.shape != (3,) or np.any(m < 0) or np.any(m > 255):
            raise ValueError("means must be three values in [0, 255]")
    offset = global_mean - img_mean
    return np.clip(img.astype(np.float64) + offset, 0.0, 255.0)


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(img), 0, 255).astype(np.uint8)
