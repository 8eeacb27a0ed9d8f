"""``bdnet`` command-line entry point."""

from __future__ import annotations

import argparse
import configparser
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from .. import configio
from ..data import pgm
from ..data.augment import AugmentConfig, normalize
from ..data.corpus import CorpusError, load_split, manifest_digest, split, write_corpus
from ..data.synth import SYNTH_PRESETS, SynthConfig, generate, synth_preset
from ..losses import LossConfig
from ..model import checkpoint
from ..model.checkpoint import CheckpointError
from ..model.config import PRESETS, ModelConfig, preset
from ..model.counting import compare_twins, count_model
from ..model.points import select_points
from ..tensor import Tensor, no_grad, set_num_threads
from ..tensor.threads import resolve_threads
from ..training import RunConfig, TrainConfig, evaluate, load_corpus_splits, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CHECKPOINT = 0, 2, 3, 4


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


# -- configuration -------------------------------------------------------------------


def parse_overrides(tokens: list[str]) -> dict[str, str]:
    """``--key value`` / ``--key=value`` / ``--section.key value`` pairs left over by argparse."""
    out: dict[str, str] = {}
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--"):
            raise UsageError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(tokens):
                raise UsageError(f"override {tok} needs a value")
            value = tokens[i + 1]
            i += 2
        out[key.replace("-", "_")] = value
    return out


def read_config_file(path) -> dict[str, dict[str, str]]:
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from exc
    except configparser.Error as exc:
        raise UsageError(f"malformed config file {path}: {exc}") from exc
    return {s: dict(parser[s]) for s in parser.sections()}


SECTION_TYPES = {"model": ModelConfig, "loss": LossConfig, "train": TrainConfig, "augment": AugmentConfig, "data": SynthConfig}


def build_section(cls, base, values: dict[str, str]):
    try:
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(values) - set(known))
        if unknown:
            raise ValueError(f"unknown {cls.__name__} keys: {', '.join(unknown)}")
        parsed = {k: configio.parse_typed(known[k].type, v) for k, v in values.items()}
        return base.replace(**parsed) if isinstance(base, ModelConfig) else replace(base, **parsed)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc


def route_overrides(overrides: dict[str, str], sections: tuple[str, ...]) -> dict[str, dict[str, str]]:
    routed: dict[str, dict[str, str]] = {s: {} for s in sections}
    for key, value in overrides.items():
        if "." in key:
            sec, name = key.split(".", 1)
            if sec not in routed:
                raise UsageError(f"unknown config section {sec!r} in --{key}")
            routed[sec][name] = value
            continue
        owners = [s for s in sections if key in {f.name for f in fields(SECTION_TYPES[s])}]
        if not owners:
            raise UsageError(f"unknown option --{key}")
        if len(owners) > 1:
            raise UsageError(f"--{key} is ambiguous; use one of " + ", ".join(f"--{s}.{key}" for s in owners))
        routed[owners[0]][key] = value
    return routed


def resolve_run_config(args, overrides: dict[str, str], fallback: str = "toy") -> RunConfig:
    file_sections = read_config_file(args.config) if args.config else {}
    sections = ("model", "loss", "train", "augment")
    extra = sorted(set(file_sections) - set(sections) - {"data"})
    if extra:
        raise UsageError(f"unknown config section(s): {', '.join(extra)}")
    routed = route_overrides(overrides, sections)
    model_preset = args.model_preset or file_sections.get("model", {}).pop("preset", None) or fallback
    if model_preset not in PRESETS:
        raise UsageError(f"unknown model preset {model_preset!r}")
    try:
        base = RunConfig(model=preset(model_preset))
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    out = {}
    for name in sections:
        values = {**file_sections.get(name, {}), **routed[name]}
        out[name] = build_section(SECTION_TYPES[name], getattr(base, name), values)
    return RunConfig(**out)


def resolve_synth_config(args, overrides: dict[str, str]) -> SynthConfig:
    file_sections = read_config_file(args.config) if args.config else {}
    routed = route_overrides(overrides, ("data",))
    try:
        base = synth_preset(args.preset, seed=args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    values = {**file_sections.get("data", {}), **routed["data"]}
    if args.seed_given:
        values["seed"] = str(args.seed)
    return build_section(SynthConfig, base, values)


def apply_threads(requested: int | None) -> int:
    try:
        n = resolve_threads(requested)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    set_num_threads(n)
    return n


def load_checkpoint(path):
    try:
        return checkpoint.load(path)
    except CheckpointError:
        raise
    except (OSError, ValueError) as exc:
        raise CheckpointError(str(exc)) from exc


def read_input_image(path) -> np.ndarray:
    try:
        return pgm.read_image(path)
    except (OSError, pgm.PGMError) as exc:
        raise DataError(str(exc)) from exc


# -- commands ------------------------------------------------------------------------


def cmd_gen_data(args, overrides) -> int:
    if args.count < 1:
        raise UsageError(f"--count must be >= 1, got {args.count}")
    cfg = resolve_synth_config(args, overrides)
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise DataError(f"output directory {out} is not empty (use --force to overwrite)")
    try:
        a, b = (int(x) for x in args.ratio.split(":"))
    except ValueError as exc:
        raise UsageError(f"--ratio must look like 4:1, got {args.ratio!r}") from exc
    samples = generate(cfg, args.count)
    try:
        train_ids, val_ids = split([s.id for s in samples], (a, b), cfg.seed, args.fold)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    assignment = {**{i: "train" for i in train_ids}, **{i: "val" for i in val_ids}}
    write_corpus(out, samples, assignment, cfg)
    fraction = float(np.mean([s.mask.mean() for s in samples]))
    print(f"wrote {len(samples)} samples to {out} ({len(train_ids)} train / {len(val_ids)} val)")
    print(f"extents {cfg.height}x{cfg.width}, mean wall fraction {fraction:.4f}")
    print(f"config hash {cfg.digest()}  manifest sha256 {manifest_digest(out)}")
    return EXIT_OK


def cmd_train(args, overrides) -> int:
    run = resolve_run_config(args, overrides)
    if args.threads is not None:
        run.train = replace(run.train, threads=args.threads)
    if args.seed is not None:
        run.train = replace(run.train, seed=args.seed)
    run.train = replace(run.train, threads=apply_threads(run.train.threads))
    try:
        train_set, val_set = load_corpus_splits(args.data)
    except CorpusError as exc:
        raise DataError(str(exc)) from exc
    try:
        run.model = run.model.replace(height=train_set.images.shape[1], width=train_set.images.shape[2])
    except ValueError as exc:
        raise UsageError(f"corpus extents do not fit the model: {exc}") from exc

    def report(rec):
        if not args.quiet:
            parts = [f"epoch {rec['epoch']:3d} stage {rec['stage']} loss {rec['loss']:.4f}"]
            if "val_dice" in rec:
                parts.append(f"val dice {rec['val_dice']:.4f} miou {rec['val_miou']:.4f} biou {rec['val_biou']:.4f}")
            print("  ".join(parts), flush=True)

    result = train(run, train_set, val_set, args.out, progress=report)
    print(f"checkpoint {result.checkpoints['final']}")
    if val_set is not None:
        rep = evaluate(result.model, val_set)
        rep.split = "val"
        rep.write(Path(args.out) / "report.jsonl", Path(args.out) / "report.csv")
        print(f"val dice {rep.dice:.4f} miou {rep.miou:.4f} biou {rep.biou:.4f}")
    return EXIT_OK


def cmd_eval(args, overrides) -> int:
    if overrides:
        raise UsageError(f"eval takes no config overrides, got {sorted(overrides)}")
    apply_threads(args.threads)
    model, _ = load_checkpoint(args.checkpoint)
    try:
        corpus = load_split(args.data, args.split)
    except CorpusError as exc:
        raise DataError(str(exc)) from exc
    if args.dump_masks:
        Path(args.dump_masks).mkdir(parents=True, exist_ok=True)
    rep = evaluate(model, corpus, oracle=args.oracle, dump_dir=args.dump_masks)
    rep.split = args.split
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rep.write(out / f"{args.split}.jsonl", out / f"{args.split}.csv")
    counts = count_model(model.config, model=model)
    print(f"{args.split}: dice {rep.dice:.4f}  miou {rep.miou:.4f}  biou {rep.biou:.4f}  per-class IoU {[round(v, 4) for v in rep.per_class_iou]}")
    print(f"params {counts.params}  FLOPs {counts.flops} at {counts.height}x{counts.width} (2 FLOPs per multiply-accumulate)")
    return EXIT_OK


def _predict_image(model, image: np.ndarray):
    h, w = image.shape
    if h % 32 or w % 32:
        raise DataError(f"image extents {h}x{w} must be multiples of 32")
    model.eval()
    with no_grad():
        return model(Tensor(normalize(image)[None, None]))


def overlay(image: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """u8 image with wall pixels brightened halfway to white."""
    u8 = pgm.quantize(image)
    out = u8.copy()
    sel = mask.astype(bool)
    out[sel] = ((u8[sel].astype(np.uint16) + 256) // 2).astype(np.uint8)
    return out


def cmd_predict(args, overrides) -> int:
    if overrides:
        raise UsageError(f"predict takes no config overrides, got {sorted(overrides)}")
    apply_threads(args.threads)
    model, _ = load_checkpoint(args.checkpoint)
    image = read_input_image(args.image)
    mask = _predict_image(model, image).mask()[0].astype(np.uint8)
    pgm.write_mask(args.out, mask)
    if args.overlay:
        pgm.write_pgm(args.overlay, overlay(image, mask))
    print(f"wrote {args.out} ({int(mask.sum())} wall pixels)")
    return EXIT_OK


def cmd_points(args, overrides) -> int:
    if overrides:
        raise UsageError(f"points takes no config overrides, got {sorted(overrides)}")
    apply_threads(args.threads)
    model, _ = load_checkpoint(args.checkpoint)
    image = read_input_image(args.image)
    h, w = image.shape
    if not 1 <= args.num_points <= h * w:
        raise UsageError(f"--num-points must lie in [1, {h * w}]")
    pred = _predict_image(model, image)
    pts = select_points(pred.upsampled_logits.data, args.num_points)
    row, col = pts.pixel_indices(h, w)
    marked = pgm.quantize(image * 0.5)
    marked[row[0], col[0]] = 255
    pgm.write_pgm(args.out, marked)
    dump = Path(args.dump) if args.dump else Path(args.out).with_suffix(".tsv")
    lines = ["x\ty\tmargin"] + [f"{c}\t{r}\t{m!r}" for r, c, m in zip(row[0].tolist(), col[0].tolist(), pts.margins[0].astype(float).tolist())]
    dump.write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"marked {args.num_points} points in {args.out}; coordinates in {dump}")
    return EXIT_OK


def format_count_table(cfg: ModelConfig) -> str:
    c = count_model(cfg)
    lines = [f"input {c.height}x{c.width}; FLOPs = 2 x multiply-accumulates", ""]
    lines.append(f"{'module':<22}{'params':>12}{'share':>9}{'FLOPs':>16}")
    for name, m in c.modules.items():
        lines.append(f"{name:<22}{m.params:>12d}{100 * c.proportion(name):>8.1f}%{m.flops:>16d}")
    lines.append(f"{'total':<22}{c.params:>12d}{100.0:>8.1f}%{c.flops:>16d}")
    twin = compare_twins(cfg)
    twin_total = count_model(cfg.replace(conv_twin=True))
    lines += ["", "downsampling twin comparison (P_d = downsampling share of total params)"]
    lines.append(f"{'variant':<22}{'down params':>12}{'P_d':>9}{'total params':>16}")
    lines.append(f"{'dsconv':<22}{twin.dsconv_params:>12d}{100 * c.proportion('downsampling'):>8.1f}%{c.params:>16d}")
    lines.append(f"{'conv':<22}{twin.conv_params:>12d}{100 * twin_total.proportion('downsampling'):>8.1f}%{twin_total.params:>16d}")
    lines.append(f"ratio dsconv/conv {twin.ratio:.4f}  (per-layer 1/Co + 1/K^2 prediction {twin.predicted_ratio:.4f}, gap {100 * twin.relative_gap:.1f}%)")
    return "\n".join(lines)


def cmd_count(args, overrides) -> int:
    run = resolve_run_config(args, overrides, fallback="default")
    cfg = run.model
    if args.height or args.width:
        try:
            cfg = cfg.replace(height=args.height or cfg.height, width=args.width or cfg.width)
            cfg.validate()
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
    print(format_count_table(cfg))
    return EXIT_OK


def cmd_ablate(args, overrides) -> int:
    run = resolve_run_config(args, overrides)
    run.train = replace(run.train, threads=apply_threads(args.threads if args.threads is not None else run.train.threads))
    variants = [v for v in args.variants.split(",") if v]
    schedules = [s for s in args.schedules.split(",") if s]
    seeds = [int(s) for s in args.seeds.split(",") if s]
    from ..ablation import VARIANTS, run_ablation

    bad = [v for v in variants if v not in VARIANTS]
    if bad:
        raise UsageError(f"unknown variant(s) {bad}; choose from {sorted(VARIANTS)}")
    try:
        train_set, val_set = load_corpus_splits(args.data)
    except CorpusError as exc:
        raise DataError(str(exc)) from exc
    if val_set is None:
        raise DataError("ablation needs a val split")
    rows = run_ablation(run, train_set, val_set, Path(args.out), variants, schedules, seeds, verbose=not args.quiet)
    print(rows.table())
    return EXIT_OK


# -- parser ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bdnet", description="Boundary-refined vessel-wall segmentation toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="config file with [model]/[loss]/[train]/[augment]/[data] sections")
        sp.add_argument("--threads", type=int, default=None, help=f"thread count (env {'BDNET_THREADS'} wins)")

    g = sub.add_parser("gen-data", help="generate a synthetic vessel corpus")
    common(g)
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, default=200)
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--preset", default="toy", choices=sorted(SYNTH_PRESETS))
    g.add_argument("--ratio", default="4:1")
    g.add_argument("--fold", type=int, default=None, help="cross-validation fold used as val split")
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="two-stage training")
    common(t)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--model-preset", choices=sorted(PRESETS))
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    common(e, config=False)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="val")
    e.add_argument("--out", required=True)
    e.add_argument("--oracle", action="store_true", help="score the ground truth against itself")
    e.add_argument("--dump-masks", help="directory for predicted masks")
    e.set_defaults(func=cmd_eval)

    pr = sub.add_parser("predict", help="predict a mask for one PGM image")
    common(pr, config=False)
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--image", required=True)
    pr.add_argument("--out", required=True)
    pr.add_argument("--overlay")
    pr.set_defaults(func=cmd_predict)

    pt = sub.add_parser("points", help="mark the most uncertain points of a prediction")
    common(pt, config=False)
    pt.add_argument("--checkpoint", required=True)
    pt.add_argument("--image", required=True)
    pt.add_argument("--num-points", type=int, default=640)
    pt.add_argument("--out", required=True)
    pt.add_argument("--dump")
    pt.set_defaults(func=cmd_points)

    c = sub.add_parser("count", help="parameter and FLOPs table")
    common(c)
    c.add_argument("--model-preset", choices=sorted(PRESETS))
    c.add_argument("--height", type=int)
    c.add_argument("--width", type=int)
    c.set_defaults(func=cmd_count)

    a = sub.add_parser("ablate", help="train and compare module/loss variants")
    common(a)
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--model-preset", choices=sorted(PRESETS))
    a.add_argument("--variants", default="d,d+m,d+m+psp,full")
    a.add_argument("--schedules", default="staged")
    a.add_argument("--seeds", default="0")
    a.add_argument("--quiet", action="store_true")
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args, rest = parser.parse_known_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else EXIT_OK
    if args.command == "gen-data":
        args.seed_given = args.seed is not None
        args.seed = 0 if args.seed is None else args.seed
    try:
        overrides = parse_overrides(rest)
        return args.func(args, overrides)
    except UsageError as exc:
        print(f"bdnet {args.command}: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CorpusError, pgm.PGMError) as exc:
        print(f"bdnet {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except CheckpointError as exc:
        print(f"bdnet {args.command}: checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT


if __name__ == "__main__":
    sys.exit(main())
