"""Two-stage SGD training and split evaluation."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import configio
from .data.augment import AugmentConfig, augment_seeded, normalize
from .data.corpus import Corpus, load_split
from .losses import LossConfig, combined_loss
from .metrics import MetricAccumulator, MetricReport
from .model import checkpoint
from .model.config import ModelConfig
from .model.counting import count_model
from .model.network import BDNet
from .tensor import Tensor, no_grad, thread_limit
from .tensor.threads import resolve_threads

SCHEDULES = ("staged", "pce", "ce")


@dataclass
class TrainConfig:
    lr: float = 0.01
    momentum: float = 0.9
    poly_power: float = 0.9
    weight_decay: float = 0.0
    stage1_epochs: int = 20
    stage2_epochs: int = 10
    batch_size: int = 4
    seed: int = 0
    threads: int = 1
    schedule: str = "staged"
    augment: bool = True
    eval_every: int = 1

    def __post_init__(self):
        errors = []
        if self.stage1_epochs < 0 or self.stage2_epochs < 0:
            errors.append("stage epochs must be >= 0")
        if self.batch_size < 2:
            errors.append("batch_size must be >= 2 (train-mode batch norm)")
        if not self.lr > 0:
            errors.append("lr must be > 0")
        if not 0 <= self.momentum < 1:
            errors.append("momentum must lie in [0, 1)")
        if self.poly_power < 0:
            errors.append("poly_power must be >= 0")
        if self.schedule not in SCHEDULES:
            errors.append(f"schedule must be one of {SCHEDULES}")
        if self.eval_every < 0:
            errors.append("eval_every must be >= 0")
        if errors:
            raise ValueError("invalid TrainConfig: " + "; ".join(errors))

    @property
    def total_epochs(self) -> int:
        return self.stage1_epochs + self.stage2_epochs


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def to_text(self) -> str:
        parts = []
        for name in ("model", "loss", "train", "augment"):
            parts.append(f"[{name}]")
            parts += configio.to_lines(getattr(self, name))
        return "\n".join(parts) + "\n"


def stage_plan(cfg: TrainConfig) -> list[tuple[int, int, LossConfig | None]]:
    """(epoch, stage, alpha-or-None) per epoch; None means plain cross entropy."""
    plan = []
    for e in range(cfg.total_epochs):
        stage = 1 if e < cfg.stage1_epochs else 2
        if cfg.schedule == "staged":
            alpha = 1 if stage == 1 else 0
        elif cfg.schedule == "pce":
            alpha = 1
        else:
            alpha = None
        plan.append((e + 1, stage, alpha))
    return plan


def poly_lr(base: float, it: int, max_iter: int, power: float) -> float:
    return base * (1.0 - it / max_iter) ** power if max_iter > 0 else base


class SGD:
    """Momentum SGD (heavy-ball form ``v = m v + g; p -= lr v``)."""

    def __init__(self, params: list[Tensor], momentum: float, weight_decay: float = 0.0):
        self.params = params
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for p in params]

    def step(self, lr: float) -> None:
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            g = p.grad.astype(p.dtype)
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            v *= self.momentum
            v += g
            p.data -= lr * v


def loss_config_for(base: LossConfig, alpha: int | None, use_refine: bool) -> LossConfig:
    if alpha is None:
        return LossConfig(alpha=1, class_averaging=base.class_averaging, ignore_label=base.ignore_label, point_loss=False)
    return LossConfig(alpha=alpha, class_averaging=base.class_averaging, ignore_label=base.ignore_label, point_loss=use_refine and alpha == 1)


def batch_arrays(images: np.ndarray, masks: np.ndarray) -> tuple[Tensor, np.ndarray]:
    return Tensor(normalize(images)[:, None]), masks.astype(np.int64)


def evaluate(model: BDNet, corpus: Corpus, batch_size: int = 16, oracle: bool = False, dump_dir=None) -> MetricReport:
    """Eval-mode metrics over a split (global confusion + per-image BIoU)."""
    acc = MetricAccumulator(num_classes=model.config.num_classes)
    was_training = model.training
    model.eval()
    try:
        for start in range(0, len(corpus), batch_size):
            sl = slice(start, start + batch_size)
            if oracle:
                preds = corpus.masks[sl]
            else:
                with no_grad():
                    preds = model(Tensor(normalize(corpus.images[sl])[:, None])).mask()
            for img_id, pred, gt in zip(corpus.ids[sl], preds, corpus.masks[sl]):
                if dump_dir is not None:
                    from .data import pgm

                    pgm.write_mask(Path(dump_dir) / f"{img_id}.pgm", pred)
                acc.add(img_id, pred, gt)
    finally:
        model.train(was_training)
    counts = count_model(model.config, model=model)
    return acc.report("", params=counts.params, flops=counts.flops)


def probe_loss(model: BDNet, images: np.ndarray, masks: np.ndarray, loss_cfg: LossConfig) -> float:
    """Eval-mode loss on a fixed batch; recomputable from any checkpoint."""
    was_training = model.training
    model.eval()
    try:
        with no_grad():
            x, y = batch_arrays(images, masks)
            return combined_loss(model(x, labels=y), y, loss_cfg).total.item()
    finally:
        model.train(was_training)


@dataclass
class TrainResult:
    model: BDNet
    log: list[dict]
    checkpoints: dict[str, Path]


def train(
    run: RunConfig,
    train_set: Corpus,
    val_set: Corpus | None,
    out_dir,
    progress: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Run the configured schedule and write checkpoints, the train log and a timing sidecar.

    Everything except ``timing.jsonl`` is a pure function of the config, the
    data and the seed when run with one thread.
    """
    cfg = run.train
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    h, w = train_set.images.shape[1:]
    if (h, w) != (run.model.height, run.model.width):
        run.model = run.model.replace(height=h, width=w)
        run.model.validate()
    (out / "run_config.txt").write_text(run.to_text(), encoding="utf-8")
    threads = resolve_threads(cfg.threads)
    with thread_limit(threads):
        return _train(run, train_set, val_set, out, progress)


def _train(run: RunConfig, train_set: Corpus, val_set: Corpus | None, out: Path, progress) -> TrainResult:
    cfg = run.train
    model = BDNet(run.model, seed=cfg.seed)
    opt = SGD(model.parameters(), cfg.momentum, cfg.weight_decay)
    n = len(train_set)
    steps_per_epoch = n // cfg.batch_size
    if cfg.total_epochs and steps_per_epoch < 1:
        raise ValueError(f"training split has {n} samples, fewer than one batch of {cfg.batch_size}")
    max_iter = steps_per_epoch * cfg.total_epochs
    probe_idx = np.arange(min(cfg.batch_size, n))
    aug_cfg = run.augment
    log: list[dict] = []
    ckpts: dict[str, Path] = {}
    log_path = out / "train_log.jsonl"
    timing_path = out / "timing.jsonl"
    log_path.write_text("", encoding="utf-8")
    timing_path.write_text("", encoding="utf-8")
    it = 0
    plan = stage_plan(cfg)
    for epoch, stage, alpha in plan:
        t0 = time.perf_counter()
        loss_cfg = loss_config_for(run.loss, alpha, run.model.use_refine)
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        sums: dict[str, float] = {"loss": 0.0, "ce": 0.0, "pce": 0.0, "ls": 0.0}
        lr = cfg.lr
        for b in range(steps_per_epoch):
            idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            if cfg.augment:
                pairs = [augment_seeded(train_set.images[i], train_set.masks[i], cfg.seed, epoch, int(i), aug_cfg) for i in idx]
                x = Tensor(np.stack([p[0] for p in pairs])[:, None])
                y = np.stack([p[1] for p in pairs]).astype(np.int64)
            else:
                x, y = batch_arrays(train_set.images[idx], train_set.masks[idx])
            rng = np.random.default_rng([cfg.seed, epoch, b, 7])
            model.zero_grad()
            terms = combined_loss(model(x, labels=y, rng=rng), y, loss_cfg)
            terms.total.backward()
            lr = poly_lr(cfg.lr, it, max_iter, cfg.poly_power)
            opt.step(lr)
            it += 1
            for k, v in terms.as_dict().items():
                if v is not None:
                    sums[k] += v
        record = {
            "epoch": epoch,
            "stage": stage,
            "alpha": alpha,
            "lr": lr,
            "loss": sums["loss"] / steps_per_epoch,
            "ce": sums["ce"] / steps_per_epoch,
            "pce": sums["pce"] / steps_per_epoch if loss_cfg.alpha == 1 and loss_cfg.point_loss else None,
            "ls": sums["ls"] / steps_per_epoch if loss_cfg.alpha == 0 else None,
            "probe_loss": probe_loss(model, train_set.images[probe_idx], train_set.masks[probe_idx], loss_cfg),
        }
        if val_set is not None and cfg.eval_every and (epoch % cfg.eval_every == 0 or epoch == len(plan)):
            rep = evaluate(model, val_set)
            record.update(val_dice=rep.dice, val_miou=rep.miou, val_biou=rep.biou)
        log.append(record)
        with log_path.open("a", encoding="utf-8", newline="\n") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
        last_of_stage = epoch == len(plan) or plan[epoch][1] != stage
        if last_of_stage:
            ckpts[f"stage{stage}"] = out / f"stage{stage}.bdn"
            checkpoint.save(ckpts[f"stage{stage}"], model, {"epoch": str(epoch), "stage": str(stage)})
        with timing_path.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps({"epoch": epoch, "seconds": round(time.perf_counter() - t0, 3)}) + "\n")
        if progress:
            progress(record)
    ckpts["final"] = out / "final.bdn"
    checkpoint.save(ckpts["final"], model, {"epoch": str(len(plan)), "stage": str(plan[-1][1] if plan else 0)})
    return TrainResult(model, log, ckpts)


def load_corpus_splits(root) -> tuple[Corpus, Corpus | None]:
    train_set = load_split(root, "train")
    try:
        val_set = load_split(root, "val")
    except ValueError:
        val_set = None
    return train_set, val_set


def smoothed(values: list[float], window: int = 5) -> list[float]:
    """Trailing moving average over full windows."""
    v = np.asarray(values, dtype=np.float64)
    if len(v) < window:
        return [float(v.mean())] if len(v) else []
    c = np.cumsum(np.concatenate([[0.0], v]))
    return list((c[window:] - c[:-window]) / window)


def config_sections(run: RunConfig) -> dict[str, object]:
    return {"model": run.model, "loss": run.loss, "train": run.train, "augment": run.augment}


def section_keys() -> dict[str, list[str]]:
    return {
        "model": [f.name for f in fields(ModelConfig)],
        "loss": [f.name for f in fields(LossConfig)],
        "train": [f.name for f in fields(TrainConfig)],
        "augment": [f.name for f in fields(AugmentConfig)],
    }
