import json
import os

import numpy as np
import pytest

from attncap import cli
from attncap import io_formats as io


def run(argv, capsys=None):
    code = cli.main(argv)
    if capsys is not None:
        captured = capsys.readouterr()
        return code, captured.out, captured.err
    return code


def gen_args(out, n=6, seed=1, extra=()):
    return ["gen-data", "--n", str(n), "--seed", str(seed), "--out", str(out),
            "--h", "3", "--w", "3", "--f", "6"] + list(extra)


def test_gen_data_writes_layout(tmp_path):
    out = tmp_path / "data"
    assert run(gen_args(out)) == 0
    assert (out / "annotations.jsonl").exists()
    assert (out / "masks.json").exists()
    assert (out / "vocab.txt").exists()
    assert (out / "meta.json").exists()
    feats = sorted(os.listdir(out / "features"))
    assert feats == [f"scene_{i:05d}.feat" for i in range(6)]
    io.read_feature_file(out / "features" / feats[0])


def test_gen_data_byte_identical_reruns(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    run(gen_args(a))
    run(gen_args(b))
    for rel in ["annotations.jsonl", "masks.json", "features/scene_00003.feat"]:
        assert (a / rel).read_bytes() == (b / rel).read_bytes()


def test_gen_data_rejects_equal_test_seed(tmp_path, capsys):
    out = tmp_path / "data"
    code, _, err = run(
        gen_args(out, extra=["--test-out", str(tmp_path / "t"), "--test-seed", "1"]),
        capsys,
    )
    assert code == 1
    assert "DisjointSeedViolation" in err


def test_gen_data_train_test_pair(tmp_path):
    code = run(gen_args(tmp_path / "tr", extra=[
        "--test-out", str(tmp_path / "te"), "--test-n", "3", "--test-seed", "2"]))
    assert code == 0
    assert len(os.listdir(tmp_path / "te" / "features")) == 3


@pytest.fixture()
def trained(tmp_path):
    data = tmp_path / "data"
    run(gen_args(data, n=8, seed=3))
    ckpt = tmp_path / "model.ckpt"
    code = run([
        "train", "--data", str(data), "--out", str(ckpt),
        "--epochs", "2", "--d", "8", "--seed", "0", "--quiet",
    ])
    assert code == 0
    return data, ckpt


def test_train_writes_checkpoint_and_report(trained):
    data, ckpt = trained
    assert ckpt.exists()
    params = io.load_checkpoint(ckpt)
    assert params.cfg.d == 8
    with open(str(ckpt) + ".report.json") as fh:
        report = json.load(fh)
    assert len(report["epoch_loss"]) == 2
    assert "wall_clock_seconds" not in report  # deterministic artifact


def test_eval_prints_headline_matching_json(trained, tmp_path, capsys):
    data, ckpt = trained
    report_path = tmp_path / "metrics.json"
    code, out, _ = run([
        "eval", "--ckpt", str(ckpt), "--data", str(data), "--report", str(report_path)
    ], capsys)
    assert code == 0
    printed = dict(line.split(" ", 1) for line in out.strip().splitlines())
    stored = json.loads(report_path.read_text())
    assert set(printed) == {"avg_bleu", "reasons_f1_all", "reasons_mf1", "actions_f1_all", "actions_mf1"}
    for key, text in printed.items():
        assert json.loads(text) == stored[key]


def test_infer_prints_sentence_and_actions(trained, tmp_path, capsys):
    data, ckpt = trained
    feature = data / "features" / "scene_00000.feat"
    trace_path = tmp_path / "trace.json"
    render_dir = tmp_path / "maps"
    code, out, _ = run([
        "infer", "--ckpt", str(ckpt), "--feature", str(feature),
        "--trace-out", str(trace_path), "--render-dir", str(render_dir), "--scale", "2",
    ], capsys)
    assert code == 0
    lines = out.strip().splitlines()
    assert lines[0].startswith("sentence:")
    assert lines[1].startswith("reasons:")
    assert lines[2].startswith("actions:")
    assert trace_path.exists()
    assert (render_dir / "manifest.json").exists()


def test_render_from_trace_file(trained, tmp_path):
    data, ckpt = trained
    feature = data / "features" / "scene_00001.feat"
    trace_path = tmp_path / "trace.json"
    run(["infer", "--ckpt", str(ckpt), "--feature", str(feature), "--trace-out", str(trace_path)])
    out_dir = tmp_path / "rendered"
    code = run(["render", "--trace", str(trace_path), "--out", str(out_dir), "--scale", "2"])
    assert code == 0
    manifest = json.loads((out_dir / "manifest.json").read_text())
    assert len(manifest["entries"]) >= 1
    io.read_pgm(out_dir / manifest["entries"][0]["file"])


def test_unknown_subcommand_exits_2():
    with pytest.raises(SystemExit) as exc:
        cli.main(["frobnicate"])
    assert exc.value.code == 2


def test_missing_input_reports_category(tmp_path, capsys):
    code, _, err = run(["eval", "--ckpt", str(tmp_path / "nope.ckpt"), "--data", str(tmp_path)], capsys)
    assert code == 1
    assert err.startswith("error: FileNotFoundError")


def test_bad_checkpoint_reports_category(tmp_path, capsys):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"garbage bytes")
    code, _, err = run(["eval", "--ckpt", str(bad), "--data", str(tmp_path)], capsys)
    assert code == 1
    assert err.startswith("error: BadMagic")


def test_env_var_default_out_dir(tmp_path, monkeypatch):
    out = tmp_path / "via_env"
    monkeypatch.setenv(cli.OUT_DIR_ENV, str(out))
    code = cli.main(["gen-data", "--n", "2", "--seed", "4", "--h", "3", "--w", "3", "--f", "6"])
    assert code == 0
    assert (out / "annotations.jsonl").exists()


def test_config_file_and_flag_precedence(tmp_path):
    config = tmp_path / "train.cfg"
    config.write_text("epochs=3\nlearning_rate=0.01\nbatch_size=2  # inline comment\n")
    values = cli.build_train_config(str(config), {"epochs": 5, "seed": None}, {"h": 3, "w": 3, "f": 6})
    assert values.epochs == 5  # flag wins
    assert values.learning_rate == 0.01
    assert values.batch_size == 2
    assert (values.h, values.w, values.f) == (3, 3, 6)


def test_config_file_rejects_unknown_keys(tmp_path):
    config = tmp_path / "train.cfg"
    config.write_text("warp_factor=9\n")
    with pytest.raises(ValueError):
        cli.build_train_config(str(config), {}, {})
