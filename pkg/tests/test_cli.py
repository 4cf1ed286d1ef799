import json

import numpy as np
import pytest
import torch

from fieldflow.bench import bench, format_table
from fieldflow.checkpoint import (
    CheckpointError, ChecksumError, SchemaError, load_checkpoint, restore_model, restore_optimizer,
    resume_state, save_checkpoint,
)
from fieldflow.cli import main
from fieldflow.config import (
    ConfigError, RunConfig, config_hash, from_dict, parse_config, serialize_config, to_dict,
)
from fieldflow.datagen import GenSpec, generate
from fieldflow.denoiser import FlowOperator, ModelConfig
from fieldflow.train import TrainConfig, WindowSet, train


# --- config -----------------------------------------------------------------------

def test_config_defaults_and_roundtrip():
    cfg = RunConfig()
    t = cfg.train
    assert (t.base_lr, t.min_lr, t.weight_decay, t.warmup_frac, t.grad_clip_norm) == (1e-4, 1e-6, 1e-4, 0.05, 1.0)
    assert (t.P_mean, t.P_std, t.p_t0, t.cond_dropout) == (-0.8, 0.8, 0.1, 0.1)
    assert t.batch_sizes == (16, 8, 4) and t.dim_weights == (1.0, 1.0, 5.0)
    assert cfg.sample.steps == 40 and cfg.sample.cfg_scale == 2.0
    assert parse_config(serialize_config(cfg)) == cfg
    custom = parse_config(json.dumps({"model": {"preset": "S"}, "train": {"steps": 7, "betas": [0.8, 0.9]},
                                      "sample": {"solver": "heun"}, "seed": 3}))
    assert custom.model.to_model_config().d_model == 256
    assert custom.train.betas == (0.8, 0.9)
    assert parse_config(serialize_config(custom)) == custom
    assert config_hash(custom) != config_hash(cfg)


@pytest.mark.parametrize("doc", [
    {"bogus": 1},
    {"train": {"base_lr": "fast"}},
    {"train": {"batch_sizes": [1, 2]}},
    {"sample": {"steps": 0}},
    {"model": {"history": 9}},
    {"deterministic": 1},
])
def test_config_rejects_bad_documents(doc):
    with pytest.raises(ConfigError):
        cfg = parse_config(json.dumps(doc))
        cfg.model.to_model_config()


def test_config_seed_override():
    cfg = RunConfig().with_seed(9)
    assert cfg.seed == cfg.train.seed == cfg.sample.seed == 9


# --- checkpoints --------------------------------------------------------------------

@pytest.fixture(scope="module")
def adv_set():
    c = generate(GenSpec("advection", n=4, grid=(64,), steps=24, seed=0))
    return WindowSet(c.data, c.var_names, 1, stride=2, name="adv")


def test_checkpoint_roundtrip_bytes(tmp_path, adv_set):
    model = FlowOperator(ModelConfig.preset("tiny"), seed=0)
    r = train(model, [adv_set], TrainConfig(steps=3, base_lr=1e-3))
    a = save_checkpoint(tmp_path / "a.ffck", model, to_dict(RunConfig()), 3, r.state, r.rng_state, {"x": 1.0})
    ck = load_checkpoint(a)
    other = FlowOperator(ModelConfig.preset("tiny"), seed=5)
    restore_model(ck, other)
    for (n, p), (_, q) in zip(model.state_dict().items(), other.state_dict().items()):
        assert torch.equal(p, q), n
    st = restore_optimizer(ck, other)
    assert st.applied == 3 and all(torch.equal(st.m[n], r.state.m[n]) for n in st.m)
    b = save_checkpoint(tmp_path / "b.ffck", other, ck.config, ck.step, st, ck.header["rng_state"], {"x": 1.0})
    assert a.read_bytes() == b.read_bytes()


def test_checkpoint_faults(tmp_path):
    model = FlowOperator(ModelConfig.preset("tiny"), seed=0)
    path = save_checkpoint(tmp_path / "c.ffck", model, {}, 0)
    raw = bytearray(path.read_bytes())
    raw[-5] ^= 0xFF
    (tmp_path / "bad.ffck").write_bytes(bytes(raw))
    with pytest.raises(ChecksumError):
        load_checkpoint(tmp_path / "bad.ffck")

    raw = path.read_bytes()
    n = int.from_bytes(raw[:8], "little")
    header = json.loads(raw[8:8 + n])
    header["schema"] = 2
    hb = json.dumps(header).encode()
    (tmp_path / "v2.ffck").write_bytes(len(hb).to_bytes(8, "little") + hb + raw[8 + n:])
    with pytest.raises(SchemaError):
        load_checkpoint(tmp_path / "v2.ffck")

    small = FlowOperator(ModelConfig(d_model=32, encoder_heads=4, n_heads=4), seed=0)
    with pytest.raises(CheckpointError):
        restore_model(load_checkpoint(path), small)
    with pytest.raises(CheckpointError):
        resume_state(load_checkpoint(path), model)


def test_resume_reproduces_uninterrupted_run(tmp_path, adv_set):
    cfg = TrainConfig(steps=12, base_lr=1e-3, ckpt_every=5)
    full = train(FlowOperator(ModelConfig.preset("tiny"), seed=0), [adv_set], cfg)

    model = FlowOperator(ModelConfig.preset("tiny"), seed=0)
    saved = {}

    def on_ckpt(step, state, rng_state):
        if step == 5:
            saved["path"] = save_checkpoint(tmp_path / "s5.ffck", model, {}, step, state, rng_state)

    first = train(model, [adv_set], cfg, stop_after=7, on_checkpoint=on_ckpt)
    fresh = FlowOperator(ModelConfig.preset("tiny"), seed=3)
    resume = resume_state(load_checkpoint(saved["path"]), fresh)
    rest = train(fresh, [adv_set], cfg, resume=resume)
    assert first.losses[:5] + rest.losses == full.losses
    final = FlowOperator(ModelConfig.preset("tiny"), seed=0)
    train(final, [adv_set], cfg)
    for (n, p), (_, q) in zip(final.state_dict().items(), fresh.state_dict().items()):
        assert torch.equal(p, q), n


# --- bench --------------------------------------------------------------------------

def test_bench_table_structure():
    rows = bench(["tiny"], runs=10, grid=64)
    assert [r.steps for r in rows] == [1, 5, 40] and all(r.runs == 10 for r in rows)
    assert rows[0].mean < rows[2].mean
    table = format_table(rows).splitlines()
    assert table[0].split("\t") == ["preset", "params", "1 step", "5 steps", "40 steps"]
    assert table[1].startswith("tiny\t") and table[1].count("±") == 3


@pytest.mark.slow
def test_bench_larger_preset_is_slower():
    rows = bench(["tiny", "S"], steps=(5,), runs=3, grid=64)
    assert rows[0].mean < rows[1].mean


# --- command line -------------------------------------------------------------------

def test_usage_errors(capsys):
    assert main(["frobnicate"]) == 1
    assert "usage" in capsys.readouterr().err
    assert main([]) == 1
    assert main(["sample"]) == 1


def test_config_and_data_exit_codes(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text('{"train": {"nope": 1}}')
    assert main(["bench", "--config", str(bad)]) == 2
    assert main(["eval", "--checkpoint", str(tmp_path / "none.ffck"), "--data", str(tmp_path / "x.ffds"),
                 "--out", str(tmp_path)]) == 3
    junk = tmp_path / "junk.ffds"
    junk.write_bytes(b"\x05\0\0\0\0\0\0\0{{{{{")
    assert main(["diagnose", "--data", str(junk), "--out", str(tmp_path)]) == 3


def test_divergence_exit_code(tmp_path, monkeypatch):
    assert main(["generate-data", "--family", "advection", "--n", "2", "--grid", "32", "--steps", "22",
                 "--out", str(tmp_path)]) == 0
    import fieldflow.train as tr
    real = tr.training_step_loss
    monkeypatch.setattr(tr, "training_step_loss", lambda *a, **k: real(*a, **k) * float("nan"))
    code = main(["train", "--data", str(tmp_path / "advection.ffds"), "--steps", "2", "--out", str(tmp_path / "r")])
    assert code == 4


def test_diagnose_trio_report(tmp_path):
    assert main(["diagnose", "--n", "600", "--out", str(tmp_path)]) == 0
    lines = (tmp_path / "effdim_table.tsv").read_text().splitlines()
    assert len(lines) == 1 + 9
    assert [l.split("\t")[1] for l in lines[1:]] == ["48"] * 3 + ["512"] * 3 + ["5120"] * 3


def test_train_sample_eval_pipeline(tmp_path, capsys):
    d = tmp_path / "data"
    assert main(["generate-data", "--family", "advection", "--n", "6", "--grid", "64", "--steps", "24",
                 "--split", "--out", str(d)]) == 0
    run = tmp_path / "run"
    assert main(["train", "--data", str(d / "advection_train.ffds"), "--steps", "6", "--out", str(run)]) == 0
    assert (run / "manifest.json").exists() and (run / "metrics.jsonl").exists()
    manifest = json.loads((run / "manifest.json").read_text())
    assert {"config_hash", "seed", "versions"} <= set(manifest)
    ckpt = str(run / "ckpt_final.ffck")
    assert main(["sample", "--checkpoint", ckpt, "--data", str(d / "advection_test.ffds"), "--steps", "2",
                 "--max-windows", "2", "--out", str(tmp_path / "s")]) == 0
    assert np.load(tmp_path / "s" / "samples.npy").shape == (2, 10, 64, 1, 1, 1)
    assert main(["eval", "--checkpoint", ckpt, "--data", str(d / "advection_test.ffds"), "--steps", "2",
                 "--max-windows", "2", "--out", str(tmp_path / "e")]) == 0
    rows = [json.loads(l) for l in (tmp_path / "e" / "eval.jsonl").read_text().splitlines()]
    assert [r["model"] for r in rows] == ["model", "persistence"] and rows[0]["value"] > 0
    em = json.loads((tmp_path / "e" / "manifest.json").read_text())
    assert em["command"] == "eval" and em["argv"][0] == "eval" and "config_hash" in em
    assert main(["eval-multires", "--checkpoint", ckpt, "--data", str(d / "advection_test.ffds"),
                 "--steps", "1", "--max-windows", "1", "--resolutions", "32", "64",
                 "--out", str(tmp_path / "m")]) == 0
    assert main(["finetune", "--checkpoint", ckpt, "--data", str(d / "advection_train.ffds"), "--steps", "2",
                 "--out", str(tmp_path / "ft")]) == 0
    assert load_checkpoint(tmp_path / "ft" / "ckpt_final.ffck").step == 2


def test_deterministic_cli_reruns_are_identical(tmp_path):
    d = tmp_path / "data"
    main(["generate-data", "--family", "advection", "--n", "3", "--grid", "32", "--steps", "22", "--out", str(d)])
    outs = []
    for k in range(2):
        assert main(["train", "--deterministic", "--data", str(d / "advection.ffds"), "--steps", "4",
                     "--out", str(tmp_path / f"r{k}")]) == 0
        outs.append(load_checkpoint(tmp_path / f"r{k}" / "ckpt_final.ffck").tensors)
    assert all(np.array_equal(outs[0][n], outs[1][n]) for n in outs[0])


def test_cli_resume_flag(tmp_path):
    d = tmp_path / "data"
    main(["generate-data", "--family", "advection", "--n", "3", "--grid", "32", "--steps", "22", "--out", str(d)])
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"train": {"steps": 6, "ckpt_every": 3, "base_lr": 1e-3}}))
    assert main(["train", "--config", str(cfg), "--data", str(d / "advection.ffds"), "--out", str(tmp_path / "a")]) == 0
    assert main(["train", "--config", str(cfg), "--data", str(d / "advection.ffds"),
                 "--resume", str(tmp_path / "a" / "ckpt_step3.ffck"), "--out", str(tmp_path / "b")]) == 0
    a = load_checkpoint(tmp_path / "a" / "ckpt_final.ffck").tensors
    b = load_checkpoint(tmp_path / "b" / "ckpt_final.ffck").tensors
    assert all(np.array_equal(a[n], b[n]) for n in a)


def test_ablate_command(tmp_path):
    d = tmp_path / "data"
    assert main(["generate-data", "--family", "diffusion2d", "--n", "3", "--grid", "16", "16", "--steps", "20",
                 "--split", "--out", str(d)]) == 0
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"model": {"d_model": 16, "encoder_depth": 1, "depth": 1, "encoder_heads": 2,
                                         "n_heads": 2, "time_embed_dim": 16},
                               "train": {"val_windows": 1, "val_sample_steps": 1},
                               "sample": {"steps": 2}}))
    assert main(["ablate", "--config", str(cfg), "--data", str(d / "diffusion2d_train.ffds"),
                 "--test", str(d / "diffusion2d_test.ffds"), "--steps", "2", "--max-windows", "1",
                 "--out", str(tmp_path / "ab")]) == 0
    rows = [json.loads(l) for l in (tmp_path / "ab" / "ablation.jsonl").read_text().splitlines()]
    assert [r["model"] for r in rows] == ["x-pred", "v-pred", "eps-pred"]
