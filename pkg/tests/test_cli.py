import numpy as np
import pytest

from refvsr.cli import main
from refvsr.data import read_frames

TINY = """\
width=small
num_blocks=1
clips=2
frames=4
height=128
width_px=192
seq_len=2
batch_size=1
pretrain_lr_size=32
adapt_lr_size=8
jitter=4
pretrain_steps=2
adapt_steps=1
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.cfg"
    cfg.write_text(TINY + f"data_dir={root / 'data'}\n")
    assert main(["gen-data", "--config", str(cfg), "--seed", "3"]) == 0
    assert main(["pretrain", "--config", str(cfg), "--out", str(root / "run")]) == 0
    return root, cfg


def test_gen_data_writes_clips(workspace, capsys):
    root, cfg = workspace
    assert sorted(p.name for p in (root / "data").iterdir()) == ["clip_000", "clip_001"]
    assert main(["gen-data", "--config", str(cfg), "--clips", "1", "--frames", "2", "--size", "32x48",
                 "--out", str(root / "small")]) == 0
    assert "1 clips of 2 frames (32x48)" in capsys.readouterr().out


def test_pretrain_and_adapt_write_checkpoints(workspace):
    root, cfg = workspace
    assert (root / "run" / "pretrain.npz").exists()
    assert (root / "run" / "config.txt").exists()
    rc = main(["adapt", "--config", str(cfg), "--checkpoint", str(root / "run" / "pretrain.npz"),
               "--out", str(root / "run")])
    assert rc == 0 and (root / "run" / "adapt.npz").exists()


def test_adapt_requires_a_checkpoint(workspace):
    _, cfg = workspace
    with pytest.raises(SystemExit, match="--checkpoint"):
        main(["adapt", "--config", str(cfg)])


@pytest.mark.parametrize("scale,size", [("native", (512, 768)), ("pretrain", (128, 192))])
def test_infer_writes_frames_at_the_right_scale(workspace, scale, size):
    root, _ = workspace
    out = root / f"sr_{scale}"
    rc = main(["infer", "--checkpoint", str(root / "run" / "pretrain.npz"),
               "--clip", str(root / "data" / "clip_000"), "--out", str(out), "--scale", scale, "--save-raw"])
    assert rc == 0
    frames = read_frames(out)
    assert frames.shape == (4, 3) + size
    assert np.load(out / "sr.npy").shape == (4, 3) + size


def test_eval_prints_and_writes_report(workspace, capsys):
    root, _ = workspace
    main(["infer", "--checkpoint", str(root / "run" / "pretrain.npz"),
          "--clip", str(root / "data" / "clip_000"), "--out", str(root / "sr_eval"), "--scale", "pretrain"])
    capsys.readouterr()
    rc = main(["eval", "--sr", str(root / "sr_eval"), "--gt", str(root / "data" / "clip_000" / "uw"),
               "--bands", "0:0.5,0.5:1", "--out", str(root / "report")])
    assert rc == 0
    text = capsys.readouterr().out
    assert "0%-50%" in text and "50%-100%" in text
    for name in ("report.txt", "report.kv", "report.png"):
        assert (root / "report" / name).exists()


def test_unknown_config_key_exits_with_usage_error(workspace, capsys):
    _, cfg = workspace
    assert main(["pretrain", "--config", str(cfg), "--set", "bogus=1"]) == 2
    assert "unknown key" in capsys.readouterr().err


def test_missing_checkpoint_is_reported(tmp_path, capsys):
    rc = main(["infer", "--checkpoint", str(tmp_path / "none.npz"), "--clip", str(tmp_path),
               "--out", str(tmp_path / "o")])
    assert rc == 2
    assert "does not exist" in capsys.readouterr().err


def test_selftest_passes_and_detects_injected_fault(capsys):
    assert main(["selftest"]) == 0
    assert main(["selftest", "--fault", "tie-rule"]) == 1
    out = capsys.readouterr().out
    assert "all suites passed" in out and "FAILED" in out
