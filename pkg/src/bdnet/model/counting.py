"""Parameter and FLOPs enumeration per module."""

from __future__ import annotations

from dataclasses import dataclass, field

from .config import ModelConfig
from .layers import LayerCount
from .network import BDNet

MODULES = ("downsampling", "fusion", "boundary refinement")


@dataclass
class ModuleCount:
    params: int = 0
    flops: int = 0


@dataclass
class ModelCount:
    """Totals at a stated input extent; FLOPs are 2 per multiply-accumulate."""

    height: int
    width: int
    params: int
    flops: int
    modules: dict[str, ModuleCount] = field(default_factory=dict)
    layers: list[LayerCount] = field(default_factory=list)

    def proportion(self, module: str) -> float:
        return self.modules[module].params / self.params if self.params else 0.0


def count_model(config: ModelConfig, height: int | None = None, width: int | None = None, model: BDNet | None = None) -> ModelCount:
    """Enumerate every learnable tensor and every conv/MLP multiply-accumulate."""
    h = config.height if height is None else height
    w = config.width if width is None else width
    net = model if model is not None else BDNet(config, seed=0)
    modules = {m: ModuleCount() for m in MODULES}
    for name, p in net.named_parameters():
        modules[net.module_of(name)].params += p.size
    layers = net.profile(h, w)
    for rec in layers:
        modules[net.module_of(rec.name)].flops += 2 * rec.macs
    return ModelCount(
        height=h,
        width=w,
        params=sum(m.params for m in modules.values()),
        flops=sum(m.flops for m in modules.values()),
        modules=modules,
        layers=layers,
    )


@dataclass
class TwinComparison:
    dsconv_params: int
    conv_params: int
    predicted_ratio: float

    @property
    def ratio(self) -> float:
        return self.dsconv_params / self.conv_params

    @property
    def relative_gap(self) -> float:
        return abs(self.ratio - self.predicted_ratio) / self.predicted_ratio


def compare_twins(config: ModelConfig) -> TwinComparison:
    """Downsampling params of the depthwise-separable encoder vs its conventional twin.

    The predicted ratio applies ``1/Co + 1/K^2`` to each replaced KxK convolution
    and keeps the shared 1x1 expansion layers as they are (bias-free, BN-free).
    """
    ds = count_model(config.replace(conv_twin=False)).modules["downsampling"].params
    tw = count_model(config.replace(conv_twin=True)).modules["downsampling"].params
    k = config.kernel_size
    widths = [1, *config.stage_channels, config.embed_channels]
    ins = [*widths[:5], widths[5]]
    outs = [*widths[1:6], widths[6]]
    shared = predicted = conv = 0.0
    for cin, cout in zip(ins, outs):
        hidden = cin * config.expand_ratio
        full = hidden * cout * k * k
        shared += cin * hidden
        conv += full
        predicted += full * (1.0 / cout + 1.0 / (k * k))
    return TwinComparison(ds, tw, (shared + predicted) / (shared + conv))
