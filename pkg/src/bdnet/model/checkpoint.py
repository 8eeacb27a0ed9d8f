"""Binary checkpoint format.

Layout (little-endian): magic ``BDN1``, u16 version, u32 config length, UTF-8
``key = value`` config lines, u32 tensor count, then per tensor: u16 name
length, name, u8 rank, u32 extents, float32 data.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

from .config import ModelConfig
from .network import BDNet

MAGIC = b"BDN1"
VERSION = 1


class CheckpointError(ValueError):
    pass


def encode_config(config: ModelConfig, extra: dict[str, str] | None = None) -> str:
    lines = ["[model]", *config.to_lines()]
    if extra:
        lines.append("[meta]")
        lines += [f"{k} = {v}" for k, v in sorted(extra.items())]
    return "\n".join(lines) + "\n"


def decode_config(text: str) -> tuple[ModelConfig, dict[str, str]]:
    sections: dict[str, dict[str, str]] = {}
    current = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            current = sections.setdefault(line[1:-1], {})
            continue
        if current is None or "=" not in line:
            raise CheckpointError(f"config block line {lineno}: expected 'key = value' inside a section, got {raw!r}")
        key, value = line.split("=", 1)
        current[key.strip()] = value.strip()
    if "model" not in sections:
        raise CheckpointError("config block has no [model] section")
    try:
        config = ModelConfig.from_mapping(sections["model"])
    except ValueError as exc:
        raise CheckpointError(str(exc)) from exc
    return config, sections.get("meta", {})


def dumps(config: ModelConfig, state: dict[str, np.ndarray], extra: dict[str, str] | None = None) -> bytes:
    buf = io.BytesIO()
    cfg = encode_config(config, extra).encode("utf-8")
    buf.write(MAGIC)
    buf.write(struct.pack("<HI", VERSION, len(cfg)))
    buf.write(cfg)
    buf.write(struct.pack("<I", len(state)))
    for name, arr in state.items():
        key = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f4")
        buf.write(struct.pack("<H", len(key)))
        buf.write(key)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


def loads(blob: bytes) -> tuple[ModelConfig, dict[str, np.ndarray], dict[str, str]]:
    view = memoryview(blob)
    pos = 0

    def take(n: int, what: str) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError(f"truncated checkpoint while reading {what} at byte {pos}")
        out = view[pos : pos + n]
        pos += n
        return out

    if bytes(take(4, "magic")) != MAGIC:
        raise CheckpointError("not a checkpoint: bad magic bytes")
    version, cfg_len = struct.unpack("<HI", take(6, "header"))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    try:
        text = bytes(take(cfg_len, "config block")).decode("utf-8")
    except UnicodeDecodeError as exc:
        raise CheckpointError(f"config block is not UTF-8: {exc}") from exc
    config, meta = decode_config(text)
    (count,) = struct.unpack("<I", take(4, "tensor count"))
    state: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2, "name length"))
        name = bytes(take(nlen, "tensor name")).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1, f"rank of {name}"))
        shape = struct.unpack(f"<{rank}I", take(4 * rank, f"extents of {name}"))
        n = int(np.prod(shape, dtype=np.int64))
        state[name] = np.frombuffer(take(4 * n, f"data of {name}"), dtype="<f4").reshape(shape).astype(np.float32)
    if pos != len(view):
        raise CheckpointError(f"{len(view) - pos} trailing bytes after the last tensor")
    return config, state, meta


def save(path, model: BDNet, extra: dict[str, str] | None = None) -> bytes:
    blob = dumps(model.config, model.state_dict(), extra)
    Path(path).write_bytes(blob)
    return blob


def load(path) -> tuple[BDNet, dict[str, str]]:
    """Rebuild the network recorded in a checkpoint file."""
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    config, state, meta = loads(blob)
    model = BDNet(config, seed=0)
    try:
        model.load_state_dict(state)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"checkpoint tensors do not match its config: {exc}") from exc
    return model, meta
