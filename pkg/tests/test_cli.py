import json
import re

import numpy as np
import pytest

from rrkd import checkpoint, ops
from rrkd.cli import EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_OK, main

TINY = """\
dataset = synthetic
synthetic_classes = 3
image_size = 8
n_train_per_class = 6
n_test_per_class = 4
teacher_widths = 8, 16, 32
teacher_blocks = 1
batch_size = 6
total_iters = 5
lr_decay_iters = 3
eval_every = 2
log_every = 1
recurs = 1
"""


@pytest.fixture
def tiny_cfg(tmp_path):
    path = tmp_path / "tiny.txt"
    path.write_text(TINY)
    return str(path)


def test_schedule_timelines(capsys):
    outputs = {}
    for variant, n in [(1, 2), (3, 1), (2, 2), (3, 3)]:
        assert main(["schedule", "--variant", str(variant), "--recurs", str(n)]) == EXIT_OK
        outputs[variant, n] = capsys.readouterr().out.strip()
    assert outputs == {(1, 2): "A B A B A", (3, 1): "A", (2, 2): "A A B B", (3, 3): "A A A"}


def test_schedule_table(capsys):
    main(["schedule", "--variant", "1", "--recurs", "1", "--table"])
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "A B A" and lines[-1].startswith("t=3") and "bn bank 1" in lines[-1]


def _total(text):
    return int(re.search(r"total[^:]*:\s*(\d+)", text).group(1))


def test_params_totals(capsys):
    main(["params", "--variant", "3", "--recurs", "3"])
    out = capsys.readouterr().out
    assert "ReResNet-3 n=3" in out and 72_000 <= _total(out.splitlines()[-1]) <= 74_000
    main(["params", "--role", "teacher"])
    assert _total(capsys.readouterr().out.splitlines()[-1]) == 1_084_202


def test_params_markdown_sums(capsys):
    main(["params", "--variant", "1", "--recurs", "6", "--markdown"])
    rows = [l.split("|")[1:-1] for l in capsys.readouterr().out.splitlines()[2:]]
    counts = [int(r[2]) for r in rows[:-1]]
    total = int(rows[-1][2].strip(" *"))
    assert sum(counts) == total and 122_500 <= total <= 125_500


def test_gradcheck_passes(capsys):
    assert main(["gradcheck", "--seed", "1"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "conv2d" in out and "FAIL" not in out
    lines = out.splitlines()
    assert lines[-1] == "30/30 checks passed"
    assert all(re.search(r"max_rel_err=\S+ +tol=", l) for l in lines[:-1])


def test_gradcheck_catches_corrupted_conv_backward(monkeypatch, capsys):
    real = ops._conv2d_backward

    def corrupted(*args, **kwargs):
        gx, gw = real(*args, **kwargs)
        return gx, (None if gw is None else gw * 1.01)

    monkeypatch.setattr(ops, "_conv2d_backward", corrupted)
    assert main(["gradcheck"]) == EXIT_NUMERIC
    failing = [l for l in capsys.readouterr().out.splitlines() if "FAIL" in l]
    assert any("conv2d" in l for l in failing)


def test_distill_without_teacher_is_usage_error(tiny_cfg, tmp_path, capsys):
    assert main(["distill", "--config", tiny_cfg, "--out", str(tmp_path / "s")]) == EXIT_CONFIG
    assert "teacher" in capsys.readouterr().err


def test_config_error_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.txt"
    bad.write_text("seed = 1\nwidth = 3\n")
    assert main(["params", "--config", str(bad)]) == EXIT_CONFIG
    assert "bad.txt:2" in capsys.readouterr().err


def test_missing_data_exit_code(tmp_path):
    cfg = tmp_path / "c.txt"
    cfg.write_text(f"data_dir = {tmp_path / 'missing'}\ntotal_iters = 1\n")
    assert main(["train-teacher", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_DATA


def test_pipeline_train_distill_eval(tiny_cfg, tmp_path, capsys):
    tdir, sdir = tmp_path / "t", tmp_path / "s"
    assert main(["train-teacher", "--config", tiny_cfg, "--out", str(tdir), "--seed", "2"]) == EXIT_OK
    assert (tdir / "config.txt").read_text().count("seed = 2") == 1
    teacher_ckpt = tdir / "teacher.ckpt"
    teacher_bytes = teacher_ckpt.read_bytes()
    capsys.readouterr()

    assert main(["eval", "--checkpoint", str(teacher_ckpt)]) == EXIT_OK
    printed = float(capsys.readouterr().out.split()[1])
    logged = [json.loads(l) for l in (tdir / "metrics.jsonl").read_text().splitlines()]
    assert printed == pytest.approx(logged[-1]["test_acc"], abs=5e-5)

    assert main(["distill", "--config", tiny_cfg, "--out", str(sdir), "--teacher", str(teacher_ckpt),
                 "--variant", "2", "--lambda", "10"]) == EXIT_OK
    assert teacher_ckpt.read_bytes() == teacher_bytes
    state = checkpoint.load(sdir / "student.ckpt")
    assert any(k.startswith("group1.B.") for k in state)
    rows = [json.loads(l) for l in (sdir / "metrics.jsonl").read_text().splitlines()]
    assert [r["iter"] for r in rows] == [0, 1, 2, 3, 4]
    assert all(np.isfinite(r["loss_ts"]) for r in rows)
    capsys.readouterr()
    assert main(["eval", "--checkpoint", str(sdir / "student.ckpt")]) == EXIT_OK
    assert float(capsys.readouterr().out.split()[1]) == pytest.approx(rows[-1]["test_acc"], abs=5e-5)


def test_eval_rejects_mismatched_checkpoint(tiny_cfg, tmp_path):
    checkpoint.save(str(tmp_path / "junk.ckpt"), {"stem.kernel": np.zeros((1, 1, 1, 1), np.float32)})
    assert main(["eval", "--config", tiny_cfg, "--checkpoint", str(tmp_path / "junk.ckpt")]) != EXIT_OK
