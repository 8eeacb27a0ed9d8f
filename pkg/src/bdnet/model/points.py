"""Uncertainty margins and selection of the points handed to the refinement head."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..tensor import Tensor, note_branch


@dataclass
class PointSet:
    """The P most uncertain pixels of each image.

    coords: N x P x 2 normalized (u, v) pixel centres, u along width.
    margins: N x P top-1 minus top-2 scores, non-decreasing along P.
    logits: N x C x P re-predicted scores (after the point head).
    labels: N x P ground-truth classes at the points (training only).
    """

    coords: np.ndarray
    margins: np.ndarray
    logits: Tensor | None = None
    labels: np.ndarray | None = None

    @property
    def num_points(self) -> int:
        return self.coords.shape[1]

    def pixel_indices(self, height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
        """Integer (row, col) of every point."""
        col = np.floor(self.coords[..., 0] * width).astype(np.int64)
        row = np.floor(self.coords[..., 1] * height).astype(np.int64)
        return row, col


def uncertainty(scores: np.ndarray, axis: int = 0) -> np.ndarray:
    """Top-1 minus top-2 class score along ``axis``; small values mean uncertain."""
    scores = np.asarray(scores)
    if scores.shape[axis] < 2:
        raise ValueError("uncertainty needs at least two class scores")
    top2 = np.partition(scores, -2, axis=axis)
    return np.take(top2, -1, axis=axis) - np.take(top2, -2, axis=axis)


def pixel_centres(flat_index: np.ndarray, height: int, width: int) -> np.ndarray:
    row, col = np.divmod(flat_index, width)
    return np.stack([(col + 0.5) / width, (row + 0.5) / height], axis=-1)


def select_points(logit_map: np.ndarray, num_points: int) -> PointSet:
    """Pick the ``num_points`` smallest-margin pixels per image.

    Ties keep row-major pixel order.  ``logit_map`` is N x C x H x W.
    """
    logit_map = np.asarray(logit_map)
    n, _, h, w = logit_map.shape
    if num_points > h * w:
        raise ValueError(f"cannot select {num_points} points from a {h}x{w} map")
    margins = uncertainty(logit_map, axis=1).reshape(n, h * w)
    order = np.argsort(margins, axis=1, kind="stable")[:, :num_points]
    note_branch(order)
    return PointSet(
        coords=pixel_centres(order, h, w),
        margins=np.take_along_axis(margins, order, axis=1),
    )


def select_points_importance(logit_map: np.ndarray, num_points: int, rng: np.random.Generator, oversample: int = 3, ratio: float = 0.75) -> PointSet:
    """Stochastic variant: the ``ratio * P`` most uncertain of ``oversample * P``
    random candidates plus uniformly drawn pixels for the remainder.

    Points are still emitted in non-decreasing margin order.
    """
    logit_map = np.asarray(logit_map)
    n, _, h, w = logit_map.shape
    if num_points > h * w:
        raise ValueError(f"cannot select {num_points} points from a {h}x{w} map")
    margins = uncertainty(logit_map, axis=1).reshape(n, h * w)
    n_imp = int(round(ratio * num_points))
    picks = np.empty((n, num_points), dtype=np.int64)
    for i in range(n):
        cand = rng.choice(h * w, size=min(h * w, oversample * num_points), replace=False)
        cand = cand[np.argsort(margins[i, cand], kind="stable")[:n_imp]]
        rest = np.setdiff1d(np.arange(h * w), cand)
        extra = rng.choice(rest, size=num_points - len(cand), replace=False)
        picks[i] = np.concatenate([cand, extra])
    picked = np.take_along_axis(margins, picks, axis=1)
    order = np.argsort(picked, axis=1, kind="stable")
    picks = np.take_along_axis(picks, order, axis=1)
    note_branch(picks)
    return PointSet(coords=pixel_centres(picks, h, w), margins=np.take_along_axis(margins, picks, axis=1))
