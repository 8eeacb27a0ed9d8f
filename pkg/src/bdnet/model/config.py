"""Architecture hyperparameters and their text serialisation."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields

REFERENCE_POINTS = 640
REFERENCE_AREA = 256 * 256


def default_num_points(height: int, width: int) -> int:
    """640 points at 256x256, scaled with image area."""
    return max(1, round(REFERENCE_POINTS * height * width / REFERENCE_AREA))


@dataclass
class ModelConfig:
    num_classes: int = 2
    stage_channels: tuple[int, ...] = (16, 24, 32, 64, 128)
    embed_channels: int = 128
    expand_ratio: int = 6
    kernel_size: int = 3
    fusion_channels: int = 64
    psp_bins: tuple[int, ...] = (1, 2, 3, 6)
    psp_channels: int = 64
    head_hidden: int = 256
    num_points: int | None = None
    height: int = 256
    width: int = 256
    use_multiscale: bool = True
    use_psp: bool = True
    use_refine: bool = True
    conv_twin: bool = False
    point_sampling: str = "topk"
    oversample: int = 3
    importance_ratio: float = 0.75

    def __post_init__(self):
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        self.psp_bins = tuple(int(b) for b in self.psp_bins)
        if self.num_points is None:
            self.num_points = default_num_points(self.height, self.width)
        self.validate()

    def validate(self) -> None:
        errors = []
        if self.num_classes < 2:
            errors.append("num_classes must be >= 2")
        if len(self.stage_channels) != 5:
            errors.append("stage_channels needs exactly 5 widths (one per stride-2 stage)")
        widths = [*self.stage_channels, self.embed_channels, self.fusion_channels, self.psp_channels, self.head_hidden, self.expand_ratio]
        if any(c < 1 for c in widths):
            errors.append("all channel counts and expand_ratio must be >= 1")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            errors.append("kernel_size must be odd and >= 1")
        if self.height % 32 or self.width % 32 or self.height < 32 or self.width < 32:
            errors.append(f"input extents {self.height}x{self.width} must be positive multiples of 32")
        bins = self.psp_bins
        if not bins or any(b2 <= b1 for b1, b2 in zip(bins, bins[1:])) or bins[0] < 1:
            errors.append(f"psp_bins {bins} must be strictly increasing positive integers")
        elif bins[-1] > self.height // 8 or bins[-1] > self.width // 8:
            errors.append(f"psp bin {bins[-1]} exceeds the 1/8 feature extent {self.height // 8}x{self.width // 8}")
        if not 0 <= self.num_points <= self.height * self.width:
            errors.append(f"num_points {self.num_points} must lie in [0, H*W]")
        if self.point_sampling not in ("topk", "importance"):
            errors.append(f"point_sampling must be 'topk' or 'importance', got {self.point_sampling!r}")
        if errors:
            raise ValueError("invalid ModelConfig: " + "; ".join(errors))

    @property
    def psp_branch_channels(self) -> int:
        return max(1, self.fusion_input_channels // len(self.psp_bins))

    @property
    def fusion_input_channels(self) -> int:
        """Channels of the 1/8 map that enters PSP (fused features, or embedded features without fusion)."""
        return self.fusion_channels if self.use_multiscale else self.embed_channels

    @property
    def fine_channels(self) -> int:
        return self.psp_channels if self.use_psp else self.fusion_input_channels

    def replace(self, **changes) -> ModelConfig:
        """Copy with changes; an area-derived point count follows new extents."""
        if "num_points" not in changes and ("height" in changes or "width" in changes):
            if self.num_points == default_num_points(self.height, self.width):
                changes["num_points"] = None
        return dataclasses.replace(self, **changes)

    # -- key = value form (checkpoint header and config files) ----------------
    def to_lines(self) -> list[str]:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name} = {v}")
        return lines

    @classmethod
    def from_mapping(cls, kv: dict[str, str]) -> ModelConfig:
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(kv) - set(known))
        if unknown:
            raise ValueError(f"unknown model keys: {', '.join(unknown)}")
        kwargs = {name: parse_value(known[name].type, raw) for name, raw in kv.items()}
        return cls(**kwargs)


def parse_value(type_name, raw: str):
    """Parse a config string according to a dataclass field annotation (as a string)."""
    t = str(type_name)
    raw = str(raw).strip()
    if t.startswith("tuple"):
        return tuple(int(x) for x in raw.replace(" ", "").split(",") if x)
    if t == "bool":
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if t.startswith("int"):
        if raw.lower() in ("none", ""):
            return None
        return int(raw)
    if t == "float":
        return float(raw)
    return raw


PRESETS: dict[str, dict] = {
    "default": {},
    # desk-scale training model used by the end-to-end runs
    "toy": dict(
        stage_channels=(8, 12, 16, 24, 32),
        embed_channels=32,
        expand_ratio=4,
        fusion_channels=32,
        psp_channels=32,
        head_hidden=64,
        height=64,
        width=64,
        num_points=768,
    ),
    # smallest composed network for finite-difference checks
    "gradcheck": dict(
        stage_channels=(4, 4, 8, 8, 8),
        embed_channels=8,
        expand_ratio=2,
        fusion_channels=4,
        psp_bins=(1, 2, 3, 4),
        psp_channels=4,
        head_hidden=8,
        height=32,
        width=32,
        num_points=24,
    ),
}


def preset(name: str, **overrides) -> ModelConfig:
    if name not in PRESETS:
        raise ValueError(f"unknown model preset {name!r}; choose from {sorted(PRESETS)}")
    return ModelConfig(**{**PRESETS[name], **overrides})
