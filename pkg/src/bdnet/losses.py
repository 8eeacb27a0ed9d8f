"""Cross entropy, point cross entropy, lovász-softmax and their staged combination."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, log_softmax_channel, note_branch, softmax_channel, take_channel


@dataclass
class LossConfig:
    alpha: int = 1
    class_averaging: str = "present"  # or "all"
    ignore_label: int | None = None
    point_loss: bool = True

    def __post_init__(self):
        if self.alpha not in (0, 1):
            raise ValueError(f"alpha takes 0 or 1, got {self.alpha!r}")
        if self.class_averaging not in ("present", "all"):
            raise ValueError(f"class_averaging must be 'present' or 'all', got {self.class_averaging!r}")


def _valid_mask(labels: np.ndarray, num_classes: int, ignore_label: int | None) -> np.ndarray:
    labels = np.asarray(labels)
    valid = np.ones(labels.shape, dtype=bool) if ignore_label is None else labels != ignore_label
    bad = valid & ((labels < 0) | (labels >= num_classes))
    if bad.any():
        raise ValueError(f"labels must lie in [0, {num_classes}) or equal ignore_label; found {np.unique(labels[bad])[:5]}")
    return valid


def cross_entropy(logits: Tensor, labels: np.ndarray, ignore_label: int | None = None) -> Tensor:
    """Mean over non-ignored positions of -log softmax(logits)[true class].

    logits: N x C x ... ; labels: N x ... integers.
    """
    labels = np.asarray(labels)
    valid = _valid_mask(labels, logits.shape[1], ignore_label)
    count = int(valid.sum())
    if count == 0:
        raise ValueError("cross_entropy: every position is ignored")
    safe = np.where(valid, labels, 0)
    picked = take_channel(log_softmax_channel(logits), safe)
    weights = valid.astype(logits.dtype) * (-1.0 / count)
    return (picked * weights).sum()


def point_cross_entropy(point_logits: Tensor, point_labels: np.ndarray, ignore_label: int | None = None) -> Tensor:
    """Cross entropy over a point set (logits N x C x P, labels N x P)."""
    if point_logits.ndim != 3:
        raise ValueError(f"point logits must be N x C x P, got {point_logits.shape}")
    return cross_entropy(point_logits, point_labels, ignore_label)


def lovasz_grad(gt_sorted: np.ndarray) -> np.ndarray:
    """Increments of the Jaccard loss along an error ordering.

    ``gt_sorted`` is the ground-truth indicator of the class, permuted by
    descending error.
    """
    gts = gt_sorted.sum()
    intersection = gts - np.cumsum(gt_sorted)
    union = gts + np.cumsum(1.0 - gt_sorted)
    jaccard = 1.0 - intersection / union
    if len(jaccard) > 1:
        jaccard[1:] = jaccard[1:] - jaccard[:-1]
    return jaccard


def lovasz_softmax(probs: Tensor, labels: np.ndarray, cfg: LossConfig | None = None) -> Tensor:
    """Lovász extension of the per-class Jaccard loss on softmax probabilities.

    Per image, classes are averaged (present-in-ground-truth only, or all);
    the result is the mean over images.  The error ordering is treated as a
    fixed permutation for the gradient.
    """
    cfg = cfg or LossConfig()
    p = probs.data
    if p.ndim < 3:
        raise ValueError(f"probs must be N x C x ..., got {probs.shape}")
    n, c = p.shape[:2]
    if np.abs(p.sum(axis=1) - 1.0).max() > 1e-4:
        raise ValueError("lovasz_softmax expects probabilities that sum to 1 over classes")
    labels = np.asarray(labels).reshape(n, -1)
    valid = _valid_mask(labels, c, cfg.ignore_label)
    flat = p.reshape(n, c, -1)
    grad = np.zeros_like(flat)
    total = 0.0
    for i in range(n):
        keep = valid[i]
        pi, li = flat[i][:, keep], labels[i][keep]
        classes = [k for k in range(c) if cfg.class_averaging == "all" or np.any(li == k)]
        if not classes:
            continue
        gi = np.zeros_like(pi)
        for k in classes:
            fg = (li == k).astype(p.dtype)
            sign = np.where(fg > 0, -1.0, 1.0).astype(p.dtype)
            errors = fg + sign * pi[k]  # 1 - f for the true class, f otherwise
            order = np.argsort(-errors, kind="stable")
            note_branch(order)
            g = lovasz_grad(fg[order])
            total += float(np.dot(errors[order], g)) / len(classes) / n
            gi[k, order] += sign[order] * g / len(classes) / n
        grad[i][:, keep] = gi
    grad = grad.reshape(p.shape)
    out = np.asarray(total, dtype=p.dtype)
    return Tensor.from_op(out, (probs,), lambda g: (g * grad,), "lovasz_softmax")


@dataclass
class LossTerms:
    total: Tensor
    ce: float
    pce: float | None
    ls: float | None

    def as_dict(self) -> dict[str, float | None]:
        return {"loss": self.total.item(), "ce": self.ce, "pce": self.pce, "ls": self.ls}


def combined_loss(pred, labels: np.ndarray, cfg: LossConfig) -> LossTerms:
    """L_CE + (1 - alpha) L_LS + alpha L_PCE on a model Prediction.

    alpha = 1 uses cross entropy on the mask plus point cross entropy;
    alpha = 0 uses cross entropy plus lovász-softmax.
    """
    ce = cross_entropy(pred.refined_logits, labels, cfg.ignore_label)
    if cfg.alpha == 1:
        if not cfg.point_loss:
            return LossTerms(ce, ce.item(), None, None)
        pts = pred.points
        if pts is None or pts.logits is None or pts.labels is None:
            raise ValueError("alpha = 1 needs point logits and point labels (run the model with labels)")
        pce = point_cross_entropy(pts.logits, pts.labels, cfg.ignore_label)
        return LossTerms(ce + pce, ce.item(), pce.item(), None)
    ls = lovasz_softmax(softmax_channel(pred.refined_logits), labels, cfg)
    return LossTerms(ce + ls, ce.item(), None, ls.item())
