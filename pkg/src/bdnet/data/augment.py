"""Training-time augmentation: random scale, horizontal flip, crop, then normalization."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..tensor.functional import resize_matrix

MEAN = 0.5
STD = 0.25


@dataclass
class AugmentConfig:
    scale: tuple[float, float] = (0.75, 1.25)
    flip_prob: float = 0.5
    crop: str = "random"  # or "center"
    out_height: int | None = None  # defaults to the input extents
    out_width: int | None = None


def normalize(image: np.ndarray) -> np.ndarray:
    return ((np.asarray(image, dtype=np.float64) - MEAN) / STD).astype(np.float32)


def denormalize(image: np.ndarray) -> np.ndarray:
    return np.asarray(image, dtype=np.float64) * STD + MEAN


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = image.shape
    return resize_matrix(h, out_h) @ image @ resize_matrix(w, out_w).T


def resize_nearest(mask: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = mask.shape
    rows = np.minimum(((np.arange(out_h) + 0.5) * h / out_h).astype(np.int64), h - 1)
    cols = np.minimum(((np.arange(out_w) + 0.5) * w / out_w).astype(np.int64), w - 1)
    return mask[rows[:, None], cols[None, :]]


def _crop_axis(size: int, target: int, mode: str, rng: np.random.Generator) -> tuple[int, int, int]:
    """(pad_before, pad_after, offset) taking ``target`` out of ``size``."""
    if size < target:
        short = target - size
        before = short // 2 if mode == "center" else int(rng.integers(0, short + 1))
        return before, short - before, 0
    slack = size - target
    return 0, 0, slack // 2 if mode == "center" else int(rng.integers(0, slack + 1))


def augment(
    image: np.ndarray,
    mask: np.ndarray,
    rng: np.random.Generator,
    cfg: AugmentConfig | None = None,
    flip: bool | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Return (normalized float32 image, uint8 mask) with identical geometry.

    ``flip`` forces (True) or forbids (False) the horizontal flip; ``None``
    draws it with ``cfg.flip_prob``.
    """
    cfg = cfg or AugmentConfig()
    h, w = image.shape
    out_h = cfg.out_height or h
    out_w = cfg.out_width or w
    factor = float(rng.uniform(*cfg.scale))
    do_flip = bool(rng.random() < cfg.flip_prob)
    if flip is not None:
        do_flip = flip
    sh, sw = max(1, int(round(h * factor))), max(1, int(round(w * factor)))
    img = resize_bilinear(np.asarray(image, dtype=np.float64), sh, sw) if (sh, sw) != (h, w) else np.asarray(image, dtype=np.float64)
    msk = resize_nearest(np.asarray(mask), sh, sw) if (sh, sw) != (h, w) else np.asarray(mask)
    if do_flip:
        img, msk = img[:, ::-1], msk[:, ::-1]
    pt, pb, oy = _crop_axis(sh, out_h, cfg.crop, rng)
    pl, pr, ox = _crop_axis(sw, out_w, cfg.crop, rng)
    if pt or pb or pl or pr:
        img = np.pad(img, ((pt, pb), (pl, pr)), mode="reflect")
        msk = np.pad(msk, ((pt, pb), (pl, pr)), mode="reflect")
    img = img[oy : oy + out_h, ox : ox + out_w]
    msk = msk[oy : oy + out_h, ox : ox + out_w]
    return normalize(img), np.ascontiguousarray(msk, dtype=np.uint8)


def augment_seeded(image, mask, seed: int, epoch: int, index: int, cfg: AugmentConfig | None = None):
    """Augmentation as a pure function of (seed, epoch, sample index)."""
    return augment(image, mask, np.random.default_rng([seed, epoch, index, 0xA5]), cfg)
