import hashlib
import json

import numpy as np
import pytest

from bdnet.cli.main import EXIT_CHECKPOINT, EXIT_DATA, EXIT_OK, EXIT_USAGE, main, parse_overrides
from bdnet.data import pgm

TRAIN_FLAGS = ["--stage1_epochs", "1", "--stage2_epochs", "1", "--quiet"]


def digest(path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-data", "--out", str(root / "data"), "--count", "10", "--seed", "7"]) == EXIT_OK
    assert main(["train", "--data", str(root / "data"), "--out", str(root / "run"), *TRAIN_FLAGS]) == EXIT_OK
    return root


# ---------------------------------------------------------------- overrides


@pytest.mark.parametrize(
    "tokens, expected",
    [
        (["--lr", "0.1"], {"lr": "0.1"}),
        (["--lr=0.1"], {"lr": "0.1"}),
        (["--train.seed", "4", "--stage1-epochs", "2"], {"train.seed": "4", "stage1_epochs": "2"}),
        ([], {}),
    ],
)
def test_parse_overrides(tokens, expected):
    assert parse_overrides(tokens) == expected


# ---------------------------------------------------------------- gen-data


def test_gen_data_contract(workspace):
    data = workspace / "data"
    rows = (data / "manifest.tsv").read_text().splitlines()
    assert rows[0] == "id\tsplit\tconfig_hash" and len(rows) == 11
    assert sorted(p.name for p in (data / "images").iterdir()) == [f"s{i:05d}.pgm" for i in range(10)]
    assert [r.split("\t")[1] for r in rows[1:]].count("val") == 2


def test_gen_data_is_deterministic(workspace, tmp_path):
    assert main(["gen-data", "--out", str(tmp_path / "again"), "--count", "10", "--seed", "7"]) == EXIT_OK
    assert digest(tmp_path / "again" / "manifest.tsv") == digest(workspace / "data" / "manifest.tsv")
    for name in ("s00000.pgm", "s00009.pgm"):
        assert digest(tmp_path / "again" / "images" / name) == digest(workspace / "data" / "images" / name)


@pytest.mark.parametrize(
    "argv, code",
    [
        (["--count", "0"], EXIT_USAGE),
        (["--ratio", "four"], EXIT_USAGE),
        (["--thickness", "0,3"], EXIT_USAGE),
        (["--nonsense", "1"], EXIT_USAGE),
    ],
)
def test_gen_data_rejects(argv, code, tmp_path):
    assert main(["gen-data", "--out", str(tmp_path / "x"), *argv]) == code


def test_gen_data_refuses_nonempty_dir(workspace):
    assert main(["gen-data", "--out", str(workspace / "data"), "--count", "2"]) == EXIT_DATA


def test_gen_data_config_file(tmp_path):
    cfg = tmp_path / "c.ini"
    cfg.write_text("[data]\nspeckle = 0.0\n")
    assert main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "d"), "--count", "2"]) == EXIT_OK
    assert "speckle = 0.0" in (tmp_path / "d" / "config.txt").read_text()


# ---------------------------------------------------------------- train


def test_train_outputs(workspace):
    run = workspace / "run"
    for name in ("stage1.bdn", "stage2.bdn", "final.bdn", "train_log.jsonl", "timing.jsonl", "report.jsonl", "report.csv", "run_config.txt"):
        assert (run / name).is_file(), name
    records = [json.loads(line) for line in (run / "report.jsonl").read_text().splitlines()]
    assert records[-1]["split"] == "val" and "flops_convention" in records[-1]


def test_train_is_deterministic(workspace, tmp_path):
    assert main(["train", "--data", str(workspace / "data"), "--out", str(tmp_path / "r"), "--threads", "1", *TRAIN_FLAGS]) == EXIT_OK
    for name in ("final.bdn", "train_log.jsonl", "report.jsonl", "report.csv"):
        assert digest(tmp_path / "r" / name) == digest(workspace / "run" / name), name


@pytest.mark.parametrize(
    "argv, code",
    [
        (["--data", "/nonexistent"], EXIT_DATA),
        (["--lr", "-1"], EXIT_USAGE),
        (["--seed_bogus", "1"], EXIT_USAGE),
        (["--seed", "x"], EXIT_USAGE),
        (["--alpha", "0.5", "--model.width", "48"], EXIT_USAGE),
    ],
)
def test_train_rejects_before_training(workspace, argv, code, tmp_path):
    args = ["train", "--data", str(workspace / "data"), "--out", str(tmp_path / "r"), *argv]
    assert main(args) == code
    assert not (tmp_path / "r" / "final.bdn").exists()


def test_threads_env_is_validated(workspace, tmp_path, monkeypatch):
    monkeypatch.setenv("BDNET_THREADS", "zero")
    assert main(["train", "--data", str(workspace / "data"), "--out", str(tmp_path / "r"), *TRAIN_FLAGS]) == EXIT_USAGE


# ---------------------------------------------------------------- eval


def test_eval_oracle_is_perfect(workspace, tmp_path):
    args = ["eval", "--checkpoint", str(workspace / "run" / "final.bdn"), "--data", str(workspace / "data"), "--out", str(tmp_path), "--oracle"]
    assert main(args) == EXIT_OK
    agg = json.loads((tmp_path / "val.jsonl").read_text().splitlines()[-1])
    assert agg["dice"] == agg["miou"] == agg["biou"] == 1.0


def test_eval_recompute_from_dumped_masks(workspace, tmp_path):
    from bdnet.data.corpus import load_split
    from bdnet.metrics import MetricAccumulator

    args = ["eval", "--checkpoint", str(workspace / "run" / "final.bdn"), "--data", str(workspace / "data"), "--out", str(tmp_path), "--dump-masks", str(tmp_path / "m")]
    assert main(args) == EXIT_OK
    agg = json.loads((tmp_path / "val.jsonl").read_text().splitlines()[-1])
    val = load_split(workspace / "data", "val")
    acc = MetricAccumulator()
    for sid, gt in zip(val.ids, val.masks):
        acc.add(sid, pgm.read_mask(tmp_path / "m" / f"{sid}.pgm"), gt)
    rep = acc.report("val")
    assert (agg["dice"], agg["miou"], agg["biou"]) == (rep.dice, rep.miou, rep.biou)


def test_eval_errors(workspace, tmp_path):
    data = str(workspace / "data")
    bad = tmp_path / "bad.bdn"
    bad.write_bytes(b"nope")
    assert main(["eval", "--checkpoint", str(bad), "--data", data, "--out", str(tmp_path)]) == EXIT_CHECKPOINT
    assert main(["eval", "--checkpoint", str(tmp_path / "missing.bdn"), "--data", data, "--out", str(tmp_path)]) == EXIT_CHECKPOINT
    blob = bytearray((workspace / "run" / "final.bdn").read_bytes())
    blob[4] = 99
    bad.write_bytes(bytes(blob))
    assert main(["eval", "--checkpoint", str(bad), "--data", data, "--out", str(tmp_path)]) == EXIT_CHECKPOINT
    ckpt = str(workspace / "run" / "final.bdn")
    assert main(["eval", "--checkpoint", ckpt, "--data", data, "--split", "test", "--out", str(tmp_path)]) == EXIT_DATA


# ---------------------------------------------------------------- predict / points


def test_predict_constant_image(workspace, tmp_path):
    img = tmp_path / "flat.pgm"
    pgm.write_pgm(img, np.full((64, 64), 128, dtype=np.uint8))
    out = tmp_path / "mask.pgm"
    assert main(["predict", "--checkpoint", str(workspace / "run" / "final.bdn"), "--image", str(img), "--out", str(out)]) == EXIT_OK
    assert set(np.unique(pgm.read_mask(out))) <= {0, 1}


def test_predict_overlay_support_and_determinism(workspace, tmp_path):
    ckpt = str(workspace / "run" / "final.bdn")
    img = workspace / "data" / "images" / "s00003.pgm"
    outs = []
    for k in range(2):
        m, o = tmp_path / f"m{k}.pgm", tmp_path / f"o{k}.pgm"
        assert main(["predict", "--checkpoint", ckpt, "--image", str(img), "--out", str(m), "--overlay", str(o)]) == EXIT_OK
        outs.append((m.read_bytes(), o.read_bytes()))
    assert outs[0] == outs[1]
    mask = pgm.read_mask(tmp_path / "m0.pgm")
    base = pgm.read_pgm(img)
    ov = pgm.read_pgm(tmp_path / "o0.pgm")
    assert np.array_equal(ov[mask == 0], base[mask == 0])
    assert (ov[mask == 1] >= base[mask == 1]).all()


def test_predict_rejects_bad_images(workspace, tmp_path):
    ckpt = str(workspace / "run" / "final.bdn")
    junk = tmp_path / "junk.pgm"
    junk.write_bytes(b"P5\n2 2\n65535\n\x00\x00")
    assert main(["predict", "--checkpoint", ckpt, "--image", str(junk), "--out", str(tmp_path / "o.pgm")]) == EXIT_DATA
    odd = tmp_path / "odd.pgm"
    pgm.write_pgm(odd, np.zeros((40, 64), dtype=np.uint8))
    assert main(["predict", "--checkpoint", ckpt, "--image", str(odd), "--out", str(tmp_path / "o.pgm")]) == EXIT_DATA


def _points(workspace, tmp_path, p):
    out = tmp_path / f"pts{p}.pgm"
    img = workspace / "data" / "images" / "s00001.pgm"
    code = main(["points", "--checkpoint", str(workspace / "run" / "final.bdn"), "--image", str(img), "--num-points", str(p), "--out", str(out)])
    return code, out


def test_points_single(workspace, tmp_path):
    code, out = _points(workspace, tmp_path, 1)
    assert code == EXIT_OK
    assert int((pgm.read_pgm(out) == 255).sum()) == 1
    rows = out.with_suffix(".tsv").read_text().splitlines()
    assert rows[0] == "x\ty\tmargin" and len(rows) == 2


def test_points_dump_sorted(workspace, tmp_path):
    code, out = _points(workspace, tmp_path, 200)
    assert code == EXIT_OK
    rows = [r.split("\t") for r in out.with_suffix(".tsv").read_text().splitlines()[1:]]
    margins = [float(r[2]) for r in rows]
    assert len(rows) == 200 and all(b >= a for a, b in zip(margins, margins[1:]))
    marked = pgm.read_pgm(out) == 255
    assert all(marked[int(y), int(x)] for x, y, _ in rows)
    assert int(marked.sum()) == 200


@pytest.mark.parametrize("p", [0, 64 * 64 + 1])
def test_points_range(workspace, tmp_path, p):
    assert _points(workspace, tmp_path, p)[0] == EXIT_USAGE


# ---------------------------------------------------------------- count / ablate


def test_count_table(capsys):
    assert main(["count"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "input 256x256" in out
    table = out.split("\n\n")[1].splitlines()[1:-1]
    shares = [float(line.split()[-2].rstrip("%")) for line in table]
    assert len(shares) == 3 and abs(sum(shares) - 100.0) <= 0.2
    twin = {line.split()[0]: int(line.split()[1]) for line in out.splitlines() if line.split()[:1] in (["dsconv"], ["conv"])}
    assert twin["conv"] > 5 * twin["dsconv"]


def test_count_reports_requested_extent(capsys):
    assert main(["count", "--height", "128", "--width", "96"]) == EXIT_OK
    assert "input 128x96" in capsys.readouterr().out


def test_ablate_emits_four_rows(workspace, tmp_path, capsys):
    out = tmp_path / "ab"
    args = ["ablate", "--data", str(workspace / "data"), "--out", str(out), "--stage1_epochs", "1", "--stage2_epochs", "0", "--quiet"]
    assert main(args) == EXIT_OK
    rows = [json.loads(line) for line in (out / "ablation.jsonl").read_text().splitlines()]
    assert [r["variant"] for r in rows] == ["d", "d+m", "d+m+psp", "full"]
    table = capsys.readouterr().out.splitlines()
    assert sum(1 for line in table if line.split()[:1] and line.split()[0] in {"d", "d+m", "d+m+psp", "full"}) == 4


def test_ablate_replay_from_checkpoints(workspace, tmp_path):
    from bdnet.data.corpus import load_split
    from bdnet.model import checkpoint
    from bdnet.training import evaluate

    out = tmp_path / "ab"
    args = ["ablate", "--data", str(workspace / "data"), "--out", str(out), "--variants", "d,full", "--stage1_epochs", "1", "--stage2_epochs", "0", "--quiet"]
    assert main(args) == EXIT_OK
    val = load_split(workspace / "data", "val")
    rows = [json.loads(line) for line in (out / "ablation.jsonl").read_text().splitlines()]
    for r in rows:
        model, _ = checkpoint.load(r["checkpoint"])
        rep = evaluate(model, val)
        assert (rep.dice, rep.miou, rep.biou) == (r["dice"], r["miou"], r["biou"])
    full = [r for r in rows if r["variant"] == "full"][0]
    d = [r for r in rows if r["variant"] == "d"][0]
    assert full["params"] > d["params"]


def test_ablate_rejects_unknown_variant(workspace, tmp_path):
    assert main(["ablate", "--data", str(workspace / "data"), "--out", str(tmp_path), "--variants", "d,zz"]) == EXIT_USAGE


def test_unknown_command_is_usage_error():
    assert main(["frobnicate"]) == EXIT_USAGE
