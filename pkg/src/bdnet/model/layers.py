"""Parameter containers and the convolutional building blocks."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from ..tensor import Tensor, activation, add, batch_norm, conv2d, depthwise_conv2d


@dataclass
class LayerCount:
    """One multiply-accumulate-bearing layer at a given input extent."""

    name: str
    params: int
    macs: int
    area_scaled: bool


class Module:
    """Tree of named parameters (Tensors) and buffers (ndarrays)."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Module):
            self._children[name] = value
        elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
            self._children[name] = ModuleList(value)
            value = self._children[name]
        object.__setattr__(self, name, value)

    def param(self, name: str, data: np.ndarray) -> Tensor:
        t = Tensor(np.asarray(data, dtype=np.float32), requires_grad=True)
        self._params[name] = t
        object.__setattr__(self, name, t)
        return t

    def buffer(self, name: str, data: np.ndarray) -> np.ndarray:
        arr = np.asarray(data, dtype=np.float32).copy()
        self._buffers[name] = arr
        object.__setattr__(self, name, arr)
        return arr

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, b in self._buffers.items():
            yield prefix + name, b
        for cname, child in self._children.items():
            yield from child.named_buffers(f"{prefix}{cname}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def train(self, mode: bool = True) -> Module:
        object.__setattr__(self, "training", mode)
        for child in self._children.values():
            child.train(mode)
        return self

    def eval(self) -> Module:
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(dict(self.named_buffers()))
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        bufs = dict(self.named_buffers())
        missing = sorted((set(own) | set(bufs)) - set(state))
        extra = sorted(set(state) - set(own) - set(bufs))
        if missing or extra:
            raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={extra[:5]}")
        for name, p in own.items():
            src = np.asarray(state[name])
            if src.shape != p.shape:
                raise ValueError(f"{name}: shape {src.shape} != {p.shape}")
            p.data = src.astype(p.dtype).copy()
        for name, b in bufs.items():
            src = np.asarray(state[name])
            if src.shape != b.shape:
                raise ValueError(f"{name}: shape {src.shape} != {b.shape}")
            b[...] = src

    def to(self, dtype) -> Module:
        """Cast parameters (float32 for training, float64 for gradient checks) and buffers in place."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        for mod in self.modules():
            for name, b in list(mod._buffers.items()):
                nb = b.astype(dtype)
                mod._buffers[name] = nb
                object.__setattr__(mod, name, nb)
        return self

    def modules(self) -> Iterator[Module]:
        yield self
        for child in self._children.values():
            yield from child.modules()

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class ModuleList(Module):
    def __init__(self, items):
        super().__init__()
        object.__setattr__(self, "_items", list(items))
        for i, m in enumerate(self._items):
            self._children[str(i)] = m

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


def uniform_fan_in(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int, rng, stride: int = 1, pad: int | None = None, bias: bool = False):
        super().__init__()
        self.cin, self.cout, self.k, self.stride = cin, cout, k, stride
        self.pad = k // 2 if pad is None else pad
        self.param("weight", uniform_fan_in(rng, (cout, cin, k, k), cin * k * k))
        self.bias = self.param("bias", np.zeros(cout)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.pad)

    def out_extent(self, h: int, w: int) -> tuple[int, int]:
        return (h + 2 * self.pad - self.k) // self.stride + 1, (w + 2 * self.pad - self.k) // self.stride + 1

    def profile(self, name: str, h: int, w: int, area_scaled: bool = True) -> tuple[list[LayerCount], int, int]:
        ho, wo = self.out_extent(h, w)
        macs = self.cout * self.cin * self.k * self.k * ho * wo
        return [LayerCount(name, self.num_parameters(), macs, area_scaled)], ho, wo


class DepthwiseConv2d(Conv2d):
    def __init__(self, channels: int, k: int, rng, stride: int = 1, bias: bool = False):
        Module.__init__(self)
        self.cin = self.cout = channels
        self.k, self.stride, self.pad = k, stride, k // 2
        self.param("weight", uniform_fan_in(rng, (channels, 1, k, k), k * k))
        self.bias = self.param("bias", np.zeros(channels)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return depthwise_conv2d(x, self.weight, self.bias, self.stride, self.pad)

    def profile(self, name, h, w, area_scaled=True):
        ho, wo = self.out_extent(h, w)
        return [LayerCount(name, self.num_parameters(), self.cout * self.k * self.k * ho * wo, area_scaled)], ho, wo


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.momentum, self.eps = momentum, eps
        self.param("gamma", np.ones(channels))
        self.param("beta", np.zeros(channels))
        self.buffer("running_mean", np.zeros(channels))
        self.buffer("running_var", np.ones(channels))

    def forward(self, x: Tensor) -> Tensor:
        return batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var, self.training, self.momentum, self.eps)


class ConvBNAct(Module):
    """conv -> BN -> optional activation."""

    def __init__(self, conv: Conv2d, act: str | None):
        super().__init__()
        self.conv = conv
        self.bn = BatchNorm2d(conv.cout)
        self.act = act

    def forward(self, x: Tensor) -> Tensor:
        y = self.bn(self.conv(x))
        return activation(y, self.act) if self.act else y

    def profile(self, name, h, w, area_scaled=True):
        recs, ho, wo = self.conv.profile(name, h, w, area_scaled)
        recs[0].params += self.bn.num_parameters()
        return recs, ho, wo


class InvertedResidual(Module):
    """1x1 expand -> KxK depthwise (stride s) -> 1x1 linear projection, skip when shapes allow."""

    def __init__(self, cin: int, cout: int, stride: int, expand_ratio: int, rng, k: int = 3):
        super().__init__()
        if stride not in (1, 2):
            raise ValueError(f"inverted residual stride must be 1 or 2, got {stride}")
        hidden = cin * expand_ratio
        self.expand = ConvBNAct(Conv2d(cin, hidden, 1, rng), "relu6")
        self.depthwise = ConvBNAct(DepthwiseConv2d(hidden, k, rng, stride=stride), "relu6")
        self.project = ConvBNAct(Conv2d(hidden, cout, 1, rng), None)
        self.use_skip = stride == 1 and cin == cout

    def forward(self, x: Tensor) -> Tensor:
        y = self.project(self.depthwise(self.expand(x)))
        return add(x, y) if self.use_skip else y

    def profile(self, name, h, w, area_scaled=True):
        out = []
        for part in ("expand", "depthwise", "project"):
            recs, h, w = getattr(self, part).profile(f"{name}.{part}", h, w, area_scaled)
            out += recs
        return out, h, w


class ConvResidual(Module):
    """Conventional-convolution twin of :class:`InvertedResidual`.

    The depthwise-separable pair (KxK depthwise + 1x1 projection) is replaced by
    a single KxK convolution from the expanded width to the output width.
    """

    def __init__(self, cin: int, cout: int, stride: int, expand_ratio: int, rng, k: int = 3):
        super().__init__()
        if stride not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {stride}")
        hidden = cin * expand_ratio
        self.expand = ConvBNAct(Conv2d(cin, hidden, 1, rng), "relu6")
        self.conv = ConvBNAct(Conv2d(hidden, cout, k, rng, stride=stride), None)
        self.use_skip = stride == 1 and cin == cout

    def forward(self, x: Tensor) -> Tensor:
        y = self.conv(self.expand(x))
        return add(x, y) if self.use_skip else y

    def profile(self, name, h, w, area_scaled=True):
        a, h, w = self.expand.profile(f"{name}.expand", h, w, area_scaled)
        b, h, w = self.conv.profile(f"{name}.conv", h, w, area_scaled)
        return a + b, h, w
