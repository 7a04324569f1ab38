import math

import pytest
import torch

from gaitssl.data import Window, WindowSet
from gaitssl.errors import ConfigError, NumericError
from gaitssl.model import EncoderConfig
from gaitssl.objectives import LossWeights
from gaitssl.training import (
    TrainConfig,
    build_model,
    clip_gradients,
    fit,
    lr_at,
    make_optimizer,
    train_step,
)


def test_lr_schedule():
    cfg = TrainConfig(learning_rate=1e-4, max_epochs=201)
    assert lr_at(0, cfg) == 1e-4
    assert lr_at(200, cfg) == pytest.approx(0.0, abs=1e-20)
    assert lr_at(100, cfg) == pytest.approx(0.5e-4)
    with pytest.raises(ValueError):
        lr_at(201, cfg)


def test_lr_schedule_with_floor():
    cfg = TrainConfig(learning_rate=1.0, eta_min=0.2, max_epochs=3)
    assert [lr_at(e, cfg) for e in range(3)] == pytest.approx([1.0, 0.6, 0.2])


def grads_of(*arrays):
    ps = []
    for a in arrays:
        p = torch.nn.Parameter(torch.zeros(len(a), dtype=torch.float64))
        p.grad = torch.tensor(a, dtype=torch.float64)
        ps.append(p)
    return ps


def test_clip_below_threshold_unchanged():
    ps = grads_of([0.3], [0.4])
    assert clip_gradients(ps, 1.0) == pytest.approx(0.5)
    assert ps[0].grad.item() == 0.3 and ps[1].grad.item() == 0.4


def test_clip_scales_to_threshold():
    ps = grads_of([0.0, 4.0])
    assert clip_gradients(ps, 1.0) == 4.0
    assert ps[0].grad.tolist() == [0.0, 1.0]


def test_clip_zero_gradients():
    ps = grads_of([0.0, 0.0])
    assert clip_gradients(ps, 1.0) == 0.0


def test_post_clip_norm_bounded():
    g = torch.Generator().manual_seed(0)
    for _ in range(20):
        ps = grads_of(*(torch.randn(5, generator=g).mul(10).tolist() for _ in range(3)))
        clip_gradients(ps, 1.0)
        post = math.sqrt(sum(float(p.grad.pow(2).sum()) for p in ps))
        assert post <= 1.0 * (1 + 1e-6)


def test_clip_non_finite():
    with pytest.raises(NumericError):
        clip_gradients(grads_of([float("nan")]), 1.0)


def _zero_grad_step(lr, wd):
    m = torch.nn.Linear(3, 2)
    before = [p.detach().clone() for p in m.parameters()]
    opt = make_optimizer(m, TrainConfig(learning_rate=1.0, weight_decay=wd))
    for group in opt.param_groups:
        group["lr"] = lr
    for p in m.parameters():
        p.grad = torch.zeros_like(p)
    opt.step()
    return before, [p.detach() for p in m.parameters()]


def test_adamw_no_update_at_lr_zero():
    before, after = _zero_grad_step(0.0, 0.1)
    assert all(torch.equal(a, b) for a, b in zip(before, after))


def test_adamw_decay_is_decoupled():
    lr, wd = 0.01, 0.5
    before, after = _zero_grad_step(lr, wd)
    for a, b in zip(before, after):
        assert torch.allclose(b, a * (1 - lr * wd), rtol=1e-6, atol=0)


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(learning_rate=0)
    with pytest.raises(ConfigError):
        TrainConfig(patience=0)
    with pytest.raises(ConfigError):
        TrainConfig(clip_norm=0)
    with pytest.raises(ConfigError):
        TrainConfig(use_lc=False, use_tc=False, use_uicd=False)


def tiny_setup(input_dim=7, **kw):
    enc = EncoderConfig(input_dim=input_dim, embed_dim=16, depth=1, heads=2, dropout=0.0)
    cfg = dict(learning_rate=3e-3, max_epochs=6, past_len=20, future_len=20,
               subjects_per_batch=2, windows_per_subject=2, seed=0)
    cfg.update(kw)
    return enc, TrainConfig(**cfg)


def _fit(prep, **kw):
    enc, cfg = tiny_setup(len(prep.input_channels), **kw)
    model = build_model(enc, cfg.seed)
    return fit(model, prep.splits["train"], prep.splits["validation"], cfg, prep.input_channels)


def test_ablation_step_reports_absent_uicd(small_prepared):
    enc, cfg = tiny_setup(use_uicd=False)
    model = build_model(enc, 0)
    ws = small_prepared.splits["train"]
    windows = [Window(ws.values[i][:, small_prepared.input_channels].astype("float32"),
                      ws.subject_ids[i], ws.trial_ids[i], ws.starts[i]) for i in range(4)]
    rep = train_step(model, make_optimizer(model, cfg), windows, cfg, 0, 1e-3)
    assert rep.uicd is None
    assert rep.joint == pytest.approx(rep.lc + rep.tc, rel=1e-6)


def test_loss_decreases_and_is_deterministic(small_prepared):
    a = _fit(small_prepared)
    b = _fit(small_prepared)
    assert a.log == b.log
    assert a.log[5]["joint"] < a.log[0]["joint"]
    for x, y in zip(a.best.model_state.values(), b.best.model_state.values()):
        assert torch.equal(x, y)


def test_early_stopping_semantics(small_prepared):
    res = _fit(small_prepared, max_epochs=12, patience=2, learning_rate=0.05)
    vals = [r["val_joint"] for r in res.log]
    assert res.best.best_val_loss == min(vals[: res.best_epoch + 1])
    assert res.best.best_val_loss <= min(vals) + 1e-6
    assert res.stopped_epoch in (res.best_epoch + 2, 11)
    assert len(res.log) == res.stopped_epoch + 1


def test_best_tracks_validation_minimum(small_prepared):
    res = _fit(small_prepared, max_epochs=4, patience=10)
    vals = [r["val_joint"] for r in res.log]
    assert res.best_epoch == min(range(len(vals)), key=vals.__getitem__)
    assert res.best.best_val_loss == vals[res.best_epoch]
    assert res.stopped_epoch == 3 and res.last.epoch == 3


def test_empty_validation_rejected(small_prepared):
    enc, cfg = tiny_setup()
    empty = WindowSet.from_windows([], small_prepared.features)
    with pytest.raises(ConfigError):
        fit(build_model(enc, 0), small_prepared.splits["train"], empty, cfg)


def test_loss_weights_zero_skips_term(small_prepared):
    res = _fit(small_prepared, max_epochs=1, weights=LossWeights(1, 0, 0))
    assert res.log[0]["tc"] is None and res.log[0]["uicd"] is None
