"""On-disk corpus: ``images/<id>.pgm``, ``masks/<id>.pgm`` and ``manifest.tsv``."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import pgm
from .synth import Sample, SynthConfig

MANIFEST = "manifest.tsv"
MANIFEST_HEADER = ["id", "split", "config_hash"]


class CorpusError(ValueError):
    pass


def split(ids: list[str], ratio: tuple[int, int] = (4, 1), seed: int = 0, fold: int | None = None) -> tuple[list[str], list[str]]:
    """Deterministic shuffled train/val partition.

    With ``fold`` set, the shuffled ids are cut into ``sum(ratio)//ratio[1]``
    folds and fold ``k`` becomes the validation part (cross-validation).
    """
    if not ids:
        raise ValueError("cannot split an empty dataset")
    a, b = ratio
    if a < 0 or b < 1:
        raise ValueError(f"invalid split ratio {a}:{b}")
    order = [ids[i] for i in np.random.default_rng(seed).permutation(len(ids))]
    if fold is None:
        n_train = int(round(len(ids) * a / (a + b)))
        return sorted(order[:n_train]), sorted(order[n_train:])
    folds = (a + b) // b
    if not 0 <= fold < folds:
        raise ValueError(f"fold {fold} out of range for {folds} folds")
    bounds = [round(len(ids) * k / folds) for k in range(folds + 1)]
    val = order[bounds[fold] : bounds[fold + 1]]
    val_set = set(val)
    return sorted(i for i in order if i not in val_set), sorted(val)


@dataclass
class ManifestEntry:
    id: str
    split: str
    config_hash: str


def write_corpus(root, samples: list[Sample], splits: dict[str, str], cfg: SynthConfig) -> Path:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    digest = cfg.digest()
    lines = ["\t".join(MANIFEST_HEADER)]
    for s in samples:
        pgm.write_image(root / "images" / f"{s.id}.pgm", s.image)
        pgm.write_mask(root / "masks" / f"{s.id}.pgm", s.mask)
        lines.append(f"{s.id}\t{splits[s.id]}\t{digest}")
    (root / "config.txt").write_text("[data]\n" + "\n".join(cfg.to_lines()) + "\n", encoding="utf-8")
    manifest = root / MANIFEST
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")
    return manifest


def read_manifest(root) -> list[ManifestEntry]:
    path = Path(root) / MANIFEST
    if not path.is_file():
        raise CorpusError(f"no corpus manifest at {path}")
    rows = path.read_text(encoding="utf-8").splitlines()
    if not rows or rows[0].split("\t") != MANIFEST_HEADER:
        raise CorpusError(f"{path}: bad manifest header, expected columns {MANIFEST_HEADER}")
    out = []
    for lineno, row in enumerate(rows[1:], 2):
        parts = row.split("\t")
        if len(parts) != 3:
            raise CorpusError(f"{path}:{lineno}: expected 3 tab-separated fields")
        out.append(ManifestEntry(*parts))
    return out


def manifest_digest(root) -> str:
    return hashlib.sha256((Path(root) / MANIFEST).read_bytes()).hexdigest()


@dataclass
class Corpus:
    root: Path
    ids: list[str]
    images: np.ndarray  # N x H x W float64 in [0, 1]
    masks: np.ndarray  # N x H x W uint8

    def __len__(self) -> int:
        return len(self.ids)


def load_split(root, split_name: str) -> Corpus:
    root = Path(root)
    entries = [e for e in read_manifest(root) if e.split == split_name]
    if not entries:
        raise CorpusError(f"split {split_name!r} is empty or missing in {root / MANIFEST}")
    images, masks = [], []
    try:
        for e in entries:
            images.append(pgm.read_image(root / "images" / f"{e.id}.pgm"))
            masks.append(pgm.read_mask(root / "masks" / f"{e.id}.pgm"))
    except (OSError, pgm.PGMError) as exc:
        raise CorpusError(str(exc)) from exc
    shapes = {im.shape for im in images} | {m.shape for m in masks}
    if len(shapes) != 1:
        raise CorpusError(f"corpus images have mixed extents {sorted(shapes)}")
    return Corpus(root, [e.id for e in entries], np.stack(images), np.stack(masks))
