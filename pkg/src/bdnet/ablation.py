"""Module and loss-schedule ablations over several seeds."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .data.corpus import Corpus
from .training import RunConfig, evaluate, train

VARIANTS = {
    "d": dict(use_multiscale=False, use_psp=False, use_refine=False),
    "d+m": dict(use_multiscale=True, use_psp=False, use_refine=False),
    "d+m+psp": dict(use_multiscale=True, use_psp=True, use_refine=False),
    "full": dict(use_multiscale=True, use_psp=True, use_refine=True),
}


@dataclass
class AblationRow:
    variant: str
    schedule: str
    seed: int
    dice: float
    miou: float
    biou: float
    params: int
    flops: int
    checkpoint: str


@dataclass
class AblationResult:
    rows: list[AblationRow] = field(default_factory=list)

    def median(self, variant: str, schedule: str, metric: str) -> float:
        vals = [getattr(r, metric) for r in self.rows if r.variant == variant and r.schedule == schedule]
        return float(np.median(vals)) if vals else float("nan")

    def groups(self) -> list[tuple[str, str]]:
        seen: list[tuple[str, str]] = []
        for r in self.rows:
            if (r.variant, r.schedule) not in seen:
                seen.append((r.variant, r.schedule))
        return seen

    def table(self) -> str:
        lines = [f"{'variant':<10}{'schedule':<10}{'seeds':>6}{'Dice':>9}{'mIoU':>9}{'BIoU':>9}{'Params':>10}{'FLOPs':>14}"]
        for v, s in self.groups():
            grp = [r for r in self.rows if r.variant == v and r.schedule == s]
            lines.append(
                f"{v:<10}{s:<10}{len(grp):>6}{100 * self.median(v, s, 'dice'):>9.2f}{100 * self.median(v, s, 'miou'):>9.2f}"
                f"{100 * self.median(v, s, 'biou'):>9.2f}{grp[0].params:>10d}{grp[0].flops:>14d}"
            )
        lines.append("(medians over seeds, in %; FLOPs = 2 x multiply-accumulates)")
        return "\n".join(lines)

    def write(self, out: Path) -> None:
        with open(out / "ablation.jsonl", "w", encoding="utf-8", newline="\n") as fh:
            for r in self.rows:
                fh.write(json.dumps(r.__dict__, sort_keys=True) + "\n")
        with open(out / "ablation.csv", "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["variant", "schedule", "seed", "dice", "miou", "biou", "params", "flops"])
            for r in self.rows:
                w.writerow([r.variant, r.schedule, r.seed, repr(r.dice), repr(r.miou), repr(r.biou), r.params, r.flops])
        (out / "ablation.txt").write_text(self.table() + "\n", encoding="utf-8")


def run_ablation(
    base: RunConfig,
    train_set: Corpus,
    val_set: Corpus,
    out: Path,
    variants: list[str],
    schedules: list[str],
    seeds: list[int],
    verbose: bool = False,
) -> AblationResult:
    """Train every (schedule, variant, seed) with shared data order and evaluate on ``val_set``."""
    out.mkdir(parents=True, exist_ok=True)
    result = AblationResult()
    for schedule in schedules:
        for variant in variants:
            for seed in seeds:
                run = RunConfig(
                    model=base.model.replace(**VARIANTS[variant]),
                    loss=base.loss,
                    train=replace(base.train, seed=seed, schedule=schedule, eval_every=0),
                    augment=base.augment,
                )
                run_dir = out / f"{schedule}_{variant}_seed{seed}"
                res = train(run, train_set, val_set, run_dir)
                rep = evaluate(res.model, val_set)
                row = AblationRow(variant, schedule, seed, rep.dice, rep.miou, rep.biou, rep.params, rep.flops, str(res.checkpoints["final"]))
                result.rows.append(row)
                if verbose:
                    print(f"{schedule:<8} {variant:<8} seed {seed}: dice {rep.dice:.4f} miou {rep.miou:.4f} biou {rep.biou:.4f}", flush=True)
    result.write(out)
    return result
