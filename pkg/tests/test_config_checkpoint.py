import json

import numpy as np
import pytest

from refvsr.checkpoint import FORMAT_VERSION, load_checkpoint, save_checkpoint
from refvsr.config import RunConfig, load_config, parse_pairs
from refvsr.optim import RAdam, clip_grad_norm, cosine_lr
from refvsr.tensor import Tensor


# ------------------------------------------------------------ configuration

def test_defaults_validate_and_round_trip(tmp_path):
    cfg = RunConfig()
    path = tmp_path / "c.txt"
    path.write_text(cfg.to_text())
    assert load_config(path) == cfg


def test_file_comments_and_overrides(tmp_path):
    path = tmp_path / "c.txt"
    path.write_text("# comment\nwidth = small\nrectify=false  # trailing\n\nlr=1e-3\n")
    cfg = load_config(path, ["lr=5e-4", "window-k=3"])
    assert cfg.width == "small" and cfg.rectify is False
    assert cfg.lr == 5e-4 and cfg.window_k == 3


@pytest.mark.parametrize("line,msg", [("bogus=1", "unknown key"), ("lr", "key=value"),
                                      ("clips=many", "expected int"), ("rectify=maybe", "boolean")])
def test_malformed_pairs_rejected(line, msg):
    with pytest.raises(ValueError, match=msg):
        parse_pairs([line])


@pytest.mark.parametrize("kw", [{"width": "huge"}, {"zoom": 3}, {"window_k": 2}, {"holdout": 8},
                                {"seq_len": 9}, {"height": 250}, {"lr_min": 1.0},
                                {"confidence_source": "x"}, {"gate_activation": "tanh"},
                                {"grad_clip": -1.0}])
def test_invalid_values_rejected_before_compute(kw):
    with pytest.raises(ValueError):
        RunConfig(**kw)


def test_missing_config_file(tmp_path):
    with pytest.raises(ValueError, match="does not exist"):
        load_config(tmp_path / "nope.txt")


def test_model_and_loss_configs_follow_run_config():
    cfg = RunConfig(width="small", simplified_fusion=True, window_k=1, gate_activation="sigmoid")
    assert cfg.model_config().channels == 16
    assert cfg.model_config().simplified_fusion
    assert cfg.model_config().gate_activation == "sigmoid"
    assert cfg.loss_config().window_k == 1


# ------------------------------------------------------------ checkpoints

def test_checkpoint_round_trip(tmp_path, rng):
    model = {"a.weight": rng.random((2, 3)).astype(np.float32), "b": np.arange(4)}
    optim = {"t": np.array(7), "m.0": rng.random(3)}
    meta = {"stage": "pretrain", "step": 7, "config": RunConfig().to_dict()}
    path = save_checkpoint(tmp_path / "sub" / "x.npz", model, meta, optim)
    m2, o2, meta2 = load_checkpoint(path)
    assert set(m2) == set(model) and all(np.array_equal(m2[k], model[k]) for k in model)
    assert m2["a.weight"].dtype == np.float32
    assert int(o2["t"]) == 7
    assert meta2["step"] == 7 and meta2["version"] == FORMAT_VERSION
    assert RunConfig(**meta2["config"]) == RunConfig()
    assert not list((tmp_path / "sub").glob("*.tmp"))


def test_checkpoint_errors(tmp_path):
    with pytest.raises(ValueError, match="does not exist"):
        load_checkpoint(tmp_path / "none.npz")
    (tmp_path / "junk.npz").write_bytes(b"garbage")
    with pytest.raises(ValueError, match="unreadable"):
        load_checkpoint(tmp_path / "junk.npz")
    np.savez(tmp_path / "nometa.npz", x=np.zeros(2))
    with pytest.raises(ValueError, match="metadata"):
        load_checkpoint(tmp_path / "nometa.npz")
    block = np.frombuffer(json.dumps({"version": 99}).encode(), np.uint8)
    np.savez(tmp_path / "future.npz", __meta__=block)
    with pytest.raises(ValueError, match="version"):
        load_checkpoint(tmp_path / "future.npz")


# ------------------------------------------------------------ optimizer

def test_cosine_schedule_endpoints():
    assert cosine_lr(0, 100) == pytest.approx(2e-4)
    assert cosine_lr(100, 100) == pytest.approx(1e-6)
    assert cosine_lr(50, 100) == pytest.approx(1e-6 + 0.5 * (2e-4 - 1e-6))
    assert all(cosine_lr(s, 100) >= cosine_lr(s + 1, 100) for s in range(100))


def test_radam_first_step_is_plain_gradient_step():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    p.grad = np.array([0.5, -4.0])
    RAdam([p], lr=0.1).step()
    assert np.allclose(p.data, [1.0 - 0.05, -2.0 + 0.4])


def test_adam_first_step_is_sign_step():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    p.grad = np.array([0.5, -4.0])
    RAdam([p], lr=0.1, rectify=False).step()
    assert np.allclose(p.data, [0.9, -1.9], atol=1e-6)


@pytest.mark.parametrize("rectify", [True, False])
def test_optimizer_minimizes_quadratic(rectify):
    p = Tensor(np.array([3.0, -2.0]), requires_grad=True)
    opt = RAdam([p], lr=0.05, rectify=rectify)
    for _ in range(500):
        p.grad = 2 * p.data
        opt.step()
    assert np.abs(p.data).max() < 0.05


def test_optimizer_state_round_trip():
    p = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    a = RAdam([p])
    for _ in range(3):
        p.grad = np.array([0.1, -0.2])
        a.step()
    q = Tensor(p.data.copy(), requires_grad=True)
    b = RAdam([q])
    b.load_state_dict(a.state_dict())
    p.grad = q.grad = np.array([0.3, 0.3])
    a.step()
    b.step()
    assert np.array_equal(p.data, q.data)


def test_clip_grad_norm_scales_jointly():
    a = Tensor(np.zeros(2), requires_grad=True)
    b = Tensor(np.zeros(1), requires_grad=True)
    a.grad, b.grad = np.array([3.0, 0.0]), np.array([4.0])
    assert clip_grad_norm([a, b], 1.0) == pytest.approx(5.0)
    assert np.allclose(a.grad, [0.6, 0.0]) and np.allclose(b.grad, [0.8])
    assert clip_grad_norm([a, b], 10.0) == pytest.approx(1.0)
    assert np.allclose(b.grad, [0.8])
