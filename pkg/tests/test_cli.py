"""Command line interface (tiny runs throughout)."""

import os

import numpy as np
import pytest

from lkmseg.cli import main
from lkmseg.pgm import read_pgm

TINY = """
size = 16
classes = 3
radius_min = 2
radius_max = 3
blobs_min = 1
blobs_max = 1
stages = 1
stem_channels = 4
kernel_schedule = 2
state_dim = 2
epochs = 1
batch_size = 4
train_count = 4
val_count = 2
"""


@pytest.fixture
def cfg_path(tmp_path):
    p = tmp_path / "tiny.cfg"
    p.write_text(TINY)
    return str(p)


def test_train_subcommand(tmp_path, cfg_path, capsys):
    out = str(tmp_path / "run")
    rc = main(["train", "--config", cfg_path, "--out", out, "--fixed-timing"])
    assert rc == 0
    assert os.path.exists(os.path.join(out, "metrics.csv"))
    assert os.path.exists(os.path.join(out, "best.ckpt"))
    text = capsys.readouterr().out
    assert "final:" in text and "best checkpoint:" in text


def test_train_epochs_override(tmp_path, cfg_path):
    out = str(tmp_path / "run0")
    assert main(["train", "--config", cfg_path, "--out", out,
                 "--epochs", "0"]) == 0
    with open(os.path.join(out, "metrics.csv")) as fh:
        assert len(fh.read().strip().split("\n")) == 2


def test_eval_subcommand(tmp_path, cfg_path, capsys):
    run = str(tmp_path / "run")
    main(["train", "--config", cfg_path, "--out", run])
    out = str(tmp_path / "eval")
    rc = main(["eval", "--config", cfg_path, "--out", out,
               "--checkpoint", os.path.join(run, "best.ckpt"), "--dump", "1"])
    assert rc == 0
    assert os.path.exists(os.path.join(out, "report.md"))
    assert read_pgm(os.path.join(out, "pred_000.pgm")).shape == (16, 16)
    assert "dsc" in capsys.readouterr().out


def test_eval_digest_mismatch_exits_nonzero(tmp_path, cfg_path, capsys):
    run = str(tmp_path / "run")
    main(["train", "--config", cfg_path, "--out", run])
    rc = main(["eval", "--config", cfg_path, "--out", str(tmp_path / "e"),
               "--checkpoint", os.path.join(run, "best.ckpt"),
               "--kernel-schedule", "4"])
    assert rc == 1
    assert "error:" in capsys.readouterr().err


def test_ablate_subcommand(tmp_path, cfg_path, capsys):
    out = str(tmp_path / "abl")
    rc = main(["ablate", "--config", cfg_path, "--out", out])
    assert rc == 0
    assert os.path.exists(os.path.join(out, "report.md"))
    text = capsys.readouterr().out
    for name in ("baseline", "pim+pam+bim"):
        assert name in text


def test_kernels_subcommand(tmp_path, cfg_path, capsys):
    out = str(tmp_path / "ks")
    rc = main(["kernels", "--config", cfg_path, "--out", out,
               "--schedules", "2;4"])
    assert rc == 0
    assert os.path.exists(os.path.join(out, "report.md"))


def test_erf_subcommand(tmp_path, cfg_path):
    run = str(tmp_path / "run")
    main(["train", "--config", cfg_path, "--out", run])
    out = str(tmp_path / "erf.pgm")
    rc = main(["erf", "--config", cfg_path, "--out", out,
               "--checkpoint", os.path.join(run, "best.ckpt"),
               "--target", "center", "--average", "2"])
    assert rc == 0
    assert read_pgm(out).shape == (16, 16)


def test_erf_explicit_target(tmp_path, cfg_path):
    run = str(tmp_path / "run")
    main(["train", "--config", cfg_path, "--out", run])
    out = str(tmp_path / "erf2.pgm")
    assert main(["erf", "--config", cfg_path, "--out", out,
                 "--checkpoint", os.path.join(run, "best.ckpt"),
                 "--target", "3,4"]) == 0
    assert os.path.exists(out)


def test_gen_data_subcommand(tmp_path, cfg_path):
    out = str(tmp_path / "data")
    rc = main(["gen-data", "--config", cfg_path, "--out", out, "--count", "3"])
    assert rc == 0
    imgs = sorted(f for f in os.listdir(out) if f.startswith("img_"))
    masks = sorted(f for f in os.listdir(out) if f.startswith("mask_"))
    assert len(imgs) == 3 and len(masks) == 3
    assert read_pgm(os.path.join(out, imgs[0])).shape == (16, 16)


def test_bad_config_key_exits_nonzero(tmp_path, capsys):
    p = tmp_path / "bad.cfg"
    p.write_text("momentum = 0.9\n")
    rc = main(["train", "--config", str(p), "--out", str(tmp_path / "x")])
    assert rc == 1
    assert "unknown key" in capsys.readouterr().err


def test_flag_overrides(tmp_path, cfg_path):
    out = str(tmp_path / "ov")
    rc = main(["train", "--config", cfg_path, "--out", out, "--seed", "3",
               "--no-pim", "--no-pam", "--no-bim", "--epochs", "1"])
    assert rc == 0
    with open(os.path.join(out, "metrics.csv")) as fh:
        rows = fh.read().strip().split("\n")
    assert rows[1].split(",")[5] == "3"   # seed column


def test_precision_flag(tmp_path, cfg_path):
    from lkmseg import tensor as T
    out = str(tmp_path / "f32")
    try:
        rc = main(["train", "--config", cfg_path, "--out", out,
                   "--precision", "f32"])
        assert rc == 0
    finally:
        T.set_default_dtype(np.float64)
