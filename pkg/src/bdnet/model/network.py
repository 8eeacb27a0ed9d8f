"""The BDNet segmentation network."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..tensor import (
    ShapeError,
    Tensor,
    adaptive_avg_pool2d,
    bilinear_resize,
    concat,
    no_grad,
    relu,
    sample_points_bilinear,
    scatter_points,
)
from .config import ModelConfig
from .layers import Conv2d, ConvBNAct, ConvResidual, InvertedResidual, LayerCount, Module
from .points import PointSet, select_points, select_points_importance


@dataclass
class FeaturePyramid:
    f2: Tensor
    f4: Tensor
    f8: Tensor
    f32e: Tensor


@dataclass
class Prediction:
    coarse_logits: Tensor
    refined_logits: Tensor
    points: PointSet | None
    upsampled_logits: Tensor | None = None

    def mask(self) -> np.ndarray:
        """Predicted class per pixel (argmax of the refined logits)."""
        return self.refined_logits.data.argmax(axis=1)


class Encoder(Module):
    """Five stride-2 stages plus a stride-1 embedding block."""

    def __init__(self, cfg: ModelConfig, rng):
        super().__init__()
        block = ConvResidual if cfg.conv_twin else InvertedResidual
        widths = [1, *cfg.stage_channels]
        self.stages = [block(widths[i], widths[i + 1], 2, cfg.expand_ratio, rng, cfg.kernel_size) for i in range(5)]
        self.embed = block(widths[-1], cfg.embed_channels, 1, cfg.expand_ratio, rng, cfg.kernel_size)

    def forward(self, x: Tensor) -> FeaturePyramid:
        saved = []
        for stage in self.stages:
            x = stage(x)
            saved.append(x)
        return FeaturePyramid(saved[0], saved[1], saved[2], self.embed(x))

    def profile(self, h, w):
        recs = []
        for i, stage in enumerate(self.stages):
            r, h, w = stage.profile(f"encoder.stages.{i}", h, w)
            recs += r
        r, h, w = self.embed.profile("encoder.embed", h, w)
        return recs + r


class MultiScaleFusion(Module):
    """Per-scale 1x1 projection, resize to 1/8, concatenate, conv3x3 + BN + ReLU."""

    def __init__(self, in_channels: list[int], channels: int, rng):
        super().__init__()
        self.proj = [Conv2d(c, channels, 1, rng, bias=True) for c in in_channels]
        self.fuse = ConvBNAct(Conv2d(channels * len(in_channels), channels, 3, rng), "relu")

    def forward(self, pyramid: FeaturePyramid, out_h: int, out_w: int) -> Tensor:
        levels = (pyramid.f2, pyramid.f4, pyramid.f8, pyramid.f32e)
        parts = [bilinear_resize(proj(f), out_h, out_w) for proj, f in zip(self.proj, levels)]
        return self.fuse(concat(parts, axis=1))

    def profile(self, h, w):
        recs = []
        for i, (proj, s) in enumerate(zip(self.proj, (2, 4, 8, 32))):
            recs += proj.profile(f"fusion.proj.{i}", h // s, w // s)[0]
        return recs + self.fuse.profile("fusion.fuse", h // 8, w // 8)[0]


class PyramidPooling(Module):
    """Bin-wise adaptive pooling branches fused with their input."""

    def __init__(self, cin: int, bins: tuple[int, ...], branch_channels: int, cout: int, rng):
        super().__init__()
        self.bins = bins
        self.branches = [ConvBNAct(Conv2d(cin, branch_channels, 1, rng), "relu") for _ in bins]
        self.fuse = ConvBNAct(Conv2d(cin + branch_channels * len(bins), cout, 3, rng), "relu")

    def branch_outputs(self, f: Tensor) -> list[Tensor]:
        h, w = f.shape[2:]
        return [bilinear_resize(branch(adaptive_avg_pool2d(f, b, b)), h, w) for b, branch in zip(self.bins, self.branches)]

    def forward(self, f: Tensor) -> Tensor:
        return self.fuse(concat([f, *self.branch_outputs(f)], axis=1))

    def profile(self, h8, w8):
        recs = []
        for b, branch in zip(self.bins, self.branches):
            recs += branch.profile(f"psp.branches.{b}", b, b, area_scaled=False)[0]
        return recs + self.fuse.profile("psp.fuse", h8, w8)[0]


class PointHead(Module):
    """Shared per-point MLP: two hidden ReLU layers, then class scores."""

    def __init__(self, cin: int, hidden: int, num_classes: int, rng):
        super().__init__()
        self.fc1 = Conv2d(cin, hidden, 1, rng, bias=True)
        self.fc2 = Conv2d(hidden, hidden, 1, rng, bias=True)
        self.out = Conv2d(hidden, num_classes, 1, rng, bias=True)

    def forward(self, feats: Tensor) -> Tensor:
        n, c, p = feats.shape
        x = feats.reshape(n, c, p, 1)
        x = relu(self.fc1(x))
        x = relu(self.fc2(x))
        y = self.out(x)
        return y.reshape(n, y.shape[1], p)

    def profile(self, num_points):
        recs = []
        for name in ("fc1", "fc2", "out"):
            recs += getattr(self, name).profile(f"point_head.{name}", num_points, 1, area_scaled=False)[0]
        return recs


class BDNet(Module):
    """Encoder -> multi-scale fusion -> PSP -> coarse head -> boundary refinement."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__()
        config.validate()
        self.config = config
        rng = np.random.default_rng(seed)
        cfg = config
        self.encoder = Encoder(cfg, rng)
        if cfg.use_multiscale:
            self.fusion = MultiScaleFusion([*cfg.stage_channels[:3], cfg.embed_channels], cfg.fusion_channels, rng)
        if cfg.use_psp:
            self.psp = PyramidPooling(cfg.fusion_input_channels, cfg.psp_bins, cfg.psp_branch_channels, cfg.psp_channels, rng)
        self.seg_head = Conv2d(cfg.fine_channels, cfg.num_classes, 1, rng, bias=True)
        if cfg.use_refine:
            self.point_head = PointHead(cfg.fine_channels + cfg.num_classes, cfg.head_hidden, cfg.num_classes, rng)

    # -- stages --------------------------------------------------------------
    def encode(self, image: Tensor) -> FeaturePyramid:
        if image.ndim != 4 or image.shape[1] != 1:
            raise ShapeError(f"expected N x 1 x H x W grayscale input, got {image.shape}")
        h, w = image.shape[2:]
        if h % 32 or w % 32:
            raise ShapeError(f"input extents {h}x{w} must be multiples of 32")
        return self.encoder(image)

    def fine_features(self, pyramid: FeaturePyramid, h: int, w: int) -> Tensor:
        h8, w8 = h // 8, w // 8
        if self.config.use_multiscale:
            f = self.fusion(pyramid, h8, w8)
        else:
            f = bilinear_resize(pyramid.f32e, h8, w8)
        if self.config.use_psp:
            if max(self.config.psp_bins) > min(h8, w8):
                raise ShapeError(f"psp bin {max(self.config.psp_bins)} exceeds the {h8}x{w8} feature map")
            f = self.psp(f)
        return f

    def refine(
        self,
        coarse: Tensor,
        fine: Tensor,
        h: int,
        w: int,
        labels: np.ndarray | None = None,
        num_points: int | None = None,
        rng: np.random.Generator | None = None,
    ) -> Prediction:
        up = bilinear_resize(coarse, h, w)
        p = self.config.num_points if num_points is None else num_points
        if not self.config.use_refine or p == 0:
            return Prediction(coarse, up, None, up)
        p = min(p, h * w)
        if self.training and self.config.point_sampling == "importance":
            points = select_points_importance(up.data, p, rng or np.random.default_rng(0), self.config.oversample, self.config.importance_ratio)
        else:
            points = select_points(up.data, p)
        feats = concat([sample_points_bilinear(fine, points.coords), sample_points_bilinear(up, points.coords)], axis=1)
        points.logits = self.point_head(feats)
        refined = scatter_points(up, points.coords, points.logits)
        if labels is not None:
            row, col = points.pixel_indices(h, w)
            points.labels = np.take_along_axis(labels.reshape(labels.shape[0], -1), row * w + col, axis=1)
        return Prediction(coarse, refined, points, up)

    def forward(self, image: Tensor, labels: np.ndarray | None = None, rng: np.random.Generator | None = None, num_points: int | None = None) -> Prediction:
        h, w = image.shape[2:]
        pyramid = self.encode(image)
        fine = self.fine_features(pyramid, h, w)
        coarse = self.seg_head(fine)
        return self.refine(coarse, fine, h, w, labels=labels, num_points=num_points, rng=rng)

    def predict(self, image: np.ndarray) -> Prediction:
        """Eval-mode inference on an N x 1 x H x W (or H x W) normalized array."""
        arr = np.asarray(image, dtype=np.float32)
        if arr.ndim == 2:
            arr = arr[None, None]
        was_training = self.training
        self.eval()
        try:
            with no_grad():
                return self.forward(Tensor(arr))
        finally:
            self.train(was_training)

    # -- accounting ----------------------------------------------------------
    def module_of(self, name: str) -> str:
        top = name.split(".", 1)[0]
        if top == "encoder":
            return "downsampling"
        if top == "point_head":
            return "boundary refinement"
        return "fusion"

    def profile(self, h: int | None = None, w: int | None = None) -> list[LayerCount]:
        cfg = self.config
        h = cfg.height if h is None else h
        w = cfg.width if w is None else w
        recs = self.encoder.profile(h, w)
        if cfg.use_multiscale:
            recs += self.fusion.profile(h, w)
        if cfg.use_psp:
            recs += self.psp.profile(h // 8, w // 8)
        recs += self.seg_head.profile("seg_head", h // 8, w // 8)[0]
        if cfg.use_refine and cfg.num_points:
            recs += self.point_head.profile(min(cfg.num_points, h * w))
        return recs
