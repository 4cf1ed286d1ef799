import json
import math

import numpy as np
import pytest
import torch

from fieldflow.datagen import GenSpec, generate
from fieldflow.denoiser import FlowOperator, ModelConfig, flow_path
from fieldflow.train import (
    NumericDivergence, OptimizerState, TrainConfig, WindowSet, adamw_step, apply_cond_dropout,
    clip_grads, draw_noise, global_norm, lr_at, make_mixed_batches, sample_time, train,
    training_step_loss, v_loss, warmup_steps,
)


@pytest.fixture(scope="module")
def advection_set():
    c = generate(GenSpec("advection", n=8, grid=(64,), steps=24, seed=3))
    return WindowSet(c.data, c.var_names, 1, stride=2, name="adv")


def test_sample_time_distribution():
    rng = np.random.default_rng(0)
    t = sample_time(rng, TrainConfig(), 100_000)
    assert 0.09 <= np.mean(t == 0) <= 0.11
    nz = t[t > 0]
    assert abs(np.median(nz) - 1 / (1 + math.exp(0.8))) < 0.02
    assert nz.min() >= 1e-4 and nz.max() <= 1.0
    assert np.all(sample_time(rng, TrainConfig(p_t0=1.0), 100) == 0)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(T_min=0.0)
    with pytest.raises(ValueError):
        TrainConfig(T_min=0.5, T_max=0.4)
    with pytest.raises(ValueError):
        TrainConfig(cond_dropout=1.5)


def test_v_loss_examples():
    x = torch.randn(3, 5, 7, dtype=torch.float64)
    z = torch.randn_like(x)
    assert v_loss(x, x, z, 0.4) < 1e-10
    xh = torch.randn_like(x)
    assert v_loss(xh, x, z, 0.0, eps_stab=0.0) == ((xh - x) ** 2).mean()
    # scalar toy: x=2, eps=1, t=0.5, x_hat=0
    x1, e1 = torch.tensor([2.0], dtype=torch.float64), torch.tensor([1.0], dtype=torch.float64)
    z1 = flow_path(x1, e1, 0.5)
    assert z1.item() == 1.5
    assert v_loss(torch.zeros(1, dtype=torch.float64), x1, z1, 0.5, eps_stab=0.0).item() == 16.0


def test_v_loss_masked_entries_inert():
    rng = np.random.default_rng(1)
    x = torch.from_numpy(rng.standard_normal((2, 4, 6)))
    z = torch.from_numpy(rng.standard_normal((2, 4, 6)))
    mask = (rng.random((4, 6)) < 0.5).astype(np.float64)
    xh = torch.from_numpy(rng.standard_normal((2, 4, 6)))
    t = torch.tensor([0.2, 0.7], dtype=torch.float64)
    base = v_loss(xh * torch.from_numpy(mask), x * torch.from_numpy(mask), z, t, mask)
    junk = xh * torch.from_numpy(mask) + torch.from_numpy(rng.standard_normal((2, 4, 6)) * 1e3 * (1 - mask))
    assert v_loss(junk, x * torch.from_numpy(mask), z, t, mask).item() == base.item()
    junk.requires_grad_(True)
    v_loss(junk, x, z, t, mask).backward()
    assert not junk.grad[:, torch.from_numpy(mask) == 0].any()
    # t=0, eps_stab=0 equals masked MSE
    m = torch.from_numpy(mask).bool().expand(2, 4, 6)
    ref = ((xh - x)[m] ** 2).mean()
    torch.testing.assert_close(v_loss(xh, x, z, 0.0, mask, eps_stab=0.0), ref, rtol=1e-15, atol=0)


def test_cond_dropout_rates():
    model = FlowOperator(ModelConfig(d_model=16, encoder_depth=1, encoder_heads=2, depth=1, n_heads=2,
                                     time_embed_dim=16, history=4, horizon=2))
    from fieldflow.encoder import ConditionBundle
    B = 10_000
    bundle = ConditionBundle(torch.ones(B, 1, 16), np.zeros((1, 4), dtype=int), torch.ones(B, 16),
                             torch.zeros(B, dtype=torch.bool))
    rng = np.random.default_rng(0)
    assert apply_cond_dropout(model, bundle, rng, 0.0) is bundle
    out = apply_cond_dropout(model, bundle, rng, 1.0)
    assert bool(out.is_null.all())
    assert torch.equal(out.c_tok, model.null_token.expand(B, 1, 16))
    rate = apply_cond_dropout(model, bundle, rng, 0.1).is_null.float().mean().item()
    assert 0.08 <= rate <= 0.12


def test_lr_schedule():
    cfg = TrainConfig()
    total = 1000
    warm = warmup_steps(total, cfg)
    assert warm == 50
    assert lr_at(0, total, cfg) == 0
    assert lr_at(warm, total, cfg) == 1e-4
    assert lr_at(total, total, cfg) == 1e-6
    assert lr_at(warm - 1, total, cfg) == pytest.approx(1e-4 * 49 / 50)
    # continuity at the junction
    left, right = lr_at(warm - 1e-9, total, cfg), lr_at(warm + 1e-9, total, cfg)
    assert abs(left - right) < 1e-12
    lrs = [lr_at(s, total, cfg) for s in range(warm, total + 1)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def test_adamw_examples():
    cfg = TrainConfig(weight_decay=0.0)
    p = {"w": torch.randn(5, dtype=torch.float64)}
    before = p["w"].clone()
    st = OptimizerState.zeros(p)
    adamw_step(p, {"w": torch.zeros(5, dtype=torch.float64)}, st, 1e-2, cfg)
    assert torch.equal(p["w"], before)

    p = {"w": torch.tensor([0.0], dtype=torch.float64)}
    st = OptimizerState.zeros(p)
    for _ in range(500):
        adamw_step(p, {"w": 2 * (p["w"] - 1.0)}, st, 1e-2, cfg)
    assert abs(p["w"].item() - 1.0) < 1e-4

    cfg = TrainConfig(weight_decay=0.1)
    p = {"w": torch.tensor([2.0], dtype=torch.float64)}
    st = OptimizerState.zeros(p)
    for k in range(1, 6):
        adamw_step(p, {"w": torch.zeros(1, dtype=torch.float64)}, st, 1e-2, cfg)
        assert p["w"].item() == pytest.approx(2.0 * (1 - 1e-3) ** k, rel=1e-12)


def test_adamw_matches_torch_reference():
    cfg = TrainConfig(weight_decay=0.05)
    w0 = torch.randn(6, dtype=torch.float64)
    ours = {"w": w0.clone()}
    ref = w0.clone().requires_grad_(True)
    opt = torch.optim.AdamW([ref], lr=3e-3, betas=cfg.betas, eps=cfg.adam_eps, weight_decay=0.05)
    st = OptimizerState.zeros(ours)
    for k in range(50):
        opt.zero_grad()
        (ref ** 4).sum().backward()
        opt.step()
        adamw_step(ours, {"w": 4 * ours["w"] ** 3}, st, 3e-3, cfg)
    torch.testing.assert_close(ours["w"], ref.detach(), rtol=1e-10, atol=1e-12)


def test_adamw_rejects_nonfinite(caplog):
    p = {"w": torch.ones(3)}
    st = OptimizerState.zeros(p)
    ok = adamw_step(p, {"w": torch.tensor([1.0, float("nan"), 0.0])}, st, 1e-2, TrainConfig())
    assert not ok and st.step == 1 and st.rejected == 1 and st.applied == 0
    assert torch.equal(p["w"], torch.ones(3))
    assert "rejected" in caplog.text


def test_clip_contract():
    rng = np.random.default_rng(0)
    for scale in (1e-3, 0.5, 1.0, 3.0, 1e4):
        g = {f"g{i}": torch.from_numpy(rng.standard_normal(7) * scale) for i in range(4)}
        pre = global_norm(g)
        assert clip_grads(g, 1.0) == pre
        assert global_norm(g) <= 1.0 + 1e-6
        if pre <= 1.0:
            assert global_norm(g) == pre


def test_mixed_batches(advection_set):
    cfg = TrainConfig()
    rng = np.random.default_rng(0)
    stream = make_mixed_batches([advection_set], cfg, rng)
    for _ in range(20):
        k, idx = next(stream)
        assert k == 0 and len(idx) == 16

    d2 = np.zeros((4, 20, 8, 8, 1, 1), dtype=np.float32)
    d3 = np.zeros((4, 20, 8, 8, 8, 1), dtype=np.float32)
    sets = [WindowSet(d2, ["p"], 2), WindowSet(d3, ["p"], 3)]
    stream = make_mixed_batches(sets, cfg, np.random.default_rng(1))
    draws = [next(stream) for _ in range(10_000)]
    frac3 = np.mean([k == 1 for k, _ in draws])
    assert abs(frac3 - 5 / 6) < 0.03
    assert all(len(i) == (8, 4)[k] for k, i in draws)
    again = make_mixed_batches(sets, cfg, np.random.default_rng(1))
    assert all(k == k2 and np.array_equal(i, i2) for (k, i), (k2, i2) in zip(draws[:200], again))
    with pytest.raises(ValueError):
        next(make_mixed_batches([], cfg, rng))


def test_window_extraction():
    data = np.arange(2 * 25 * 4, dtype=np.float32).reshape(2, 25, 4, 1, 1, 1)
    ws = WindowSet(data, ["p"], 1, patch=None)
    assert len(ws) == 2 * 6
    h, f = ws.raw([7])
    assert h.shape == (1, 10, 4, 1, 1, 1) and f.shape == (1, 10, 4, 1, 1, 1)
    np.testing.assert_array_equal(f[0, 0], data[1, 11])
    with pytest.raises(ValueError):
        WindowSet(data[:, :15], ["p"], 1)


def test_smoke_training_halves_loss(advection_set):
    model = FlowOperator(ModelConfig.preset("tiny"), seed=0)
    cfg = TrainConfig(steps=200, base_lr=1e-3, min_lr=1e-5)
    r = train(model, [advection_set], cfg)
    first, last = np.mean(r.losses[:10]), np.mean(r.losses[-10:])
    assert last < 0.5 * first, (first, last)
    assert r.state.applied == 200


def test_training_is_deterministic(advection_set, tmp_path):
    cfg = TrainConfig(steps=15, base_lr=1e-3, val_every=10, val_windows=2, val_sample_steps=2)
    runs = []
    for k in range(2):
        model = FlowOperator(ModelConfig.preset("tiny"), seed=0)
        runs.append(train(model, [advection_set], cfg, val_sets=[advection_set], out_dir=tmp_path / str(k)))
    assert runs[0].losses == runs[1].losses
    assert runs[0].val == runs[1].val
    lines = (tmp_path / "0" / "metrics.jsonl").read_text().splitlines()
    rec = [json.loads(l) for l in lines]
    assert len(rec) == 15 and {"step", "lr", "loss", "wall"} <= set(rec[0])
    assert "val_loss" in rec[9] and "val_nrmse" in rec[14]


def test_forced_t0_loss_matches_masked_mse():
    c = generate(GenSpec("advection", n=4, grid=(60,), steps=20, seed=4))  # 60 pads to 64
    ws = WindowSet(c.data, c.var_names, 1)
    model = FlowOperator(ModelConfig.preset("tiny"), seed=0)
    with torch.no_grad():
        model.denoiser.head.weight.normal_(0, 0.02)
        model.denoiser.head.bias.normal_(0, 0.02)
    batch = ws.prepare(np.arange(4))
    assert batch.fut_layout.validity is not None
    rng = np.random.default_rng(0)
    t = sample_time(rng, TrainConfig(p_t0=1.0), 4)
    eps = draw_noise(rng, batch)
    keep = np.zeros(4, dtype=bool)
    with torch.no_grad():
        loss = training_step_loss(model, batch, t, eps, keep, eps_stab=0.0)
        bundle = model.encode(batch.hist, batch.hist_layout, batch.grid)
        x_hat = model(eps, torch.zeros(4), bundle, batch.fut_layout)
    valid = torch.from_numpy(batch.fut_layout.validity).bool().expand_as(x_hat)
    ref = ((x_hat - batch.fut)[valid] ** 2).double().mean()
    assert abs(loss.item() - ref.item()) < 1e-6


def test_nan_loss_aborts_with_dump(advection_set, tmp_path):
    model = FlowOperator(ModelConfig.preset("tiny"), seed=0)
    with torch.no_grad():
        model.denoiser.head.bias.fill_(float("nan"))
    with pytest.raises(NumericDivergence) as err:
        train(model, [advection_set], TrainConfig(steps=5), out_dir=tmp_path)
    assert err.value.step == 0
    dump = json.loads(open(err.value.dump).read())
    assert dump["step"] == 0 and dump["set"] == "adv"
