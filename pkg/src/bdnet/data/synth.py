"""Synthetic longitudinal vessel images with faint and interrupted walls.

Each image holds two wavy horizontal wall bands around a dark lumen.  The
label marks every wall pixel; dark segments only attenuate the image and gap
segments erase the wall from the image while keeping it in the label.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import configio


@dataclass
class SynthConfig:
    height: int = 256
    width: int = 256
    thickness: tuple[int, int] = (6, 14)
    separation: tuple[int, int] = (40, 100)
    wall_intensity: tuple[float, float] = (0.55, 0.9)
    lumen_intensity: tuple[float, float] = (0.0, 0.15)
    background_intensity: tuple[float, float] = (0.2, 0.45)
    speckle: float = 0.25
    dark_prob: float = 0.5
    dark_length: tuple[int, int] = (24, 96)
    dark_attenuation: tuple[float, float] = (0.25, 0.5)
    gap_prob: float = 0.35
    gap_length: tuple[int, int] = (8, 40)
    wave_amplitude: tuple[float, float] = (2.0, 10.0)
    wave_length: tuple[float, float] = (96.0, 320.0)
    seed: int = 0

    def __post_init__(self):
        for name in ("thickness", "separation", "dark_length", "gap_length"):
            setattr(self, name, tuple(int(v) for v in getattr(self, name)))
        for name in ("wall_intensity", "lumen_intensity", "background_intensity", "dark_attenuation", "wave_amplitude", "wave_length"):
            setattr(self, name, tuple(float(v) for v in getattr(self, name)))
        self.validate()

    def validate(self) -> None:
        errors = []

        def ordered(name, lo=None, hi=None, open_lo=False, open_hi=False):
            a, b = getattr(self, name)
            if a > b:
                errors.append(f"{name} range {a}..{b} is reversed")
            if lo is not None and (a <= lo if open_lo else a < lo):
                errors.append(f"{name} lower end {a} out of bounds")
            if hi is not None and (b >= hi if open_hi else b > hi):
                errors.append(f"{name} upper end {b} out of bounds")

        if self.height < 8 or self.width < 8:
            errors.append("extents must be at least 8x8")
        ordered("thickness", lo=1)
        ordered("separation", lo=1)
        for name in ("wall_intensity", "lumen_intensity", "background_intensity"):
            ordered(name, lo=0.0, hi=1.0)
        ordered("dark_attenuation", lo=0.0, hi=1.0, open_lo=True, open_hi=True)
        ordered("dark_length", lo=1)
        ordered("gap_length", lo=1)
        ordered("wave_amplitude", lo=0.0)
        ordered("wave_length", lo=0.0, open_lo=True)
        if not errors and self.separation[0] <= 2 * self.thickness[1]:
            errors.append(f"separation {self.separation[0]} must exceed twice the max thickness {self.thickness[1]}")
        if not errors and self.span_needed() > self.height - 2:
            errors.append(f"walls need {self.span_needed()} rows but the image has {self.height}")
        for name in ("dark_prob", "gap_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                errors.append(f"{name} must lie in [0, 1]")
        if self.speckle < 0:
            errors.append("speckle must be >= 0")
        if not 0 <= self.seed < 2**64:
            errors.append("seed must be an unsigned 64-bit integer")
        if errors:
            raise ValueError("invalid SynthConfig: " + "; ".join(errors))

    def span_needed(self) -> float:
        """Rows covered by both walls in the worst case."""
        return self.separation[1] + self.thickness[1] + 2.25 * self.wave_amplitude[1] + 2

    def to_lines(self) -> list[str]:
        return configio.to_lines(self)

    @classmethod
    def from_mapping(cls, kv: dict[str, str]) -> SynthConfig:
        return configio.from_mapping(cls, kv)

    def digest(self) -> str:
        return configio.config_hash(self)


SYNTH_PRESETS: dict[str, dict] = {
    "default": {},
    "toy": dict(
        height=64,
        width=64,
        thickness=(3, 6),
        separation=(14, 30),
        dark_length=(8, 28),
        gap_length=(4, 12),
        wave_amplitude=(0.5, 3.0),
        wave_length=(32.0, 96.0),
    ),
}


def synth_preset(name: str, **overrides) -> SynthConfig:
    if name not in SYNTH_PRESETS:
        raise ValueError(f"unknown data preset {name!r}; choose from {sorted(SYNTH_PRESETS)}")
    return SynthConfig(**{**SYNTH_PRESETS[name], **overrides})


@dataclass
class Sample:
    image: np.ndarray  # H x W float64 in [0, 1]
    mask: np.ndarray  # H x W uint8 in {0, 1}
    id: str


@dataclass
class WallLayout:
    """Per-column first row and thickness of each wall (for oracles and tests)."""

    top: np.ndarray  # 2 x W int
    thickness: tuple[int, int]


def _interval(rng: np.random.Generator, width: int, length_range: tuple[int, int]) -> slice:
    length = int(rng.integers(length_range[0], length_range[1] + 1))
    length = min(length, width)
    start = int(rng.integers(0, width - length + 1))
    return slice(start, start + length)


def sample_id(index: int) -> str:
    return f"s{index:05d}"


def generate_one(cfg: SynthConfig, index: int) -> tuple[Sample, WallLayout]:
    rng = np.random.default_rng([cfg.seed, index])
    h, w = cfg.height, cfg.width
    t = (int(rng.integers(cfg.thickness[0], cfg.thickness[1] + 1)), int(rng.integers(cfg.thickness[0], cfg.thickness[1] + 1)))
    sep = float(rng.uniform(*cfg.separation))
    amp = float(rng.uniform(*cfg.wave_amplitude))
    lam = float(rng.uniform(*cfg.wave_length))
    phase = rng.uniform(0, 2 * np.pi, 2)
    # second wall follows the first with a gentle independent wobble
    wobble = 0.25 * amp
    lo = amp + t[0] / 2 + 1
    hi = h - 1 - (sep + amp + wobble + t[1] / 2)
    centre = float(rng.uniform(lo, max(lo, hi)))
    x = np.arange(w) + 0.5
    y1 = centre + amp * np.sin(2 * np.pi * x / lam + phase[0])
    y2 = y1 + sep + wobble * np.sin(2 * np.pi * x / lam + phase[1])
    top = np.stack([np.floor(y1 - t[0] / 2 + 0.5), np.floor(y2 - t[1] / 2 + 0.5)]).astype(np.int64)
    top[0] = np.clip(top[0], 0, h - t[0])
    top[1] = np.clip(top[1], top[0] + t[0] + 1, h - t[1])

    rows = np.arange(h)[:, None]
    wall = [(rows >= top[k]) & (rows < top[k] + t[k]) for k in range(2)]
    lumen = (rows >= top[0] + t[0]) & (rows < top[1])
    mask = (wall[0] | wall[1]).astype(np.uint8)

    bg = rng.uniform(*cfg.background_intensity)
    # smooth vertical drift inside the background range
    lo_b, hi_b = cfg.background_intensity
    drift = 0.5 * min(bg - lo_b, hi_b - bg) * np.cos(np.pi * rows / h + rng.uniform(0, np.pi))
    image = np.broadcast_to(bg + drift, (h, w)).copy()
    image[lumen] = rng.uniform(*cfg.lumen_intensity)
    wall_level = [rng.uniform(*cfg.wall_intensity) for _ in range(2)]
    for k in range(2):
        image[wall[k]] = wall_level[k]

    for k in range(2):
        if rng.random() < cfg.dark_prob:
            cols = _interval(rng, w, cfg.dark_length)
            factor = rng.uniform(*cfg.dark_attenuation)
            region = np.zeros((h, w), dtype=bool)
            region[:, cols] = True
            image[wall[k] & region] *= factor
        if rng.random() < cfg.gap_prob:
            cols = _interval(rng, w, cfg.gap_length)
            region = np.zeros((h, w), dtype=bool)
            region[:, cols] = True
            sel = wall[k] & region
            image[sel] = (bg + drift * np.ones((1, w)))[sel]

    if cfg.speckle > 0:
        image = image * (1.0 + cfg.speckle * rng.standard_normal((h, w)))
    image = np.clip(image, 0.0, 1.0)
    return Sample(image, mask, sample_id(index)), WallLayout(top, t)


def generate(cfg: SynthConfig, count: int, start: int = 0) -> list[Sample]:
    """``count`` samples; sample i depends only on (cfg, i)."""
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    return [generate_one(cfg, start + i)[0] for i in range(count)]


def wall_fraction_bounds(cfg: SynthConfig) -> tuple[float, float]:
    """Closed-form range of the per-image wall pixel fraction (two walls, exact per-column thickness)."""
    return 2 * cfg.thickness[0] / cfg.height, 2 * cfg.thickness[1] / cfg.height
