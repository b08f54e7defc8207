import json
from collections import Counter

import numpy as np
import pytest
import torch

from pwdmocap.dataio import prepare
from pwdmocap.edm import NoiseConfig
from pwdmocap.errors import InvalidInputError, NumericError
from pwdmocap.model import ModelConfig, WiPModel, is_stage2_trainable, load_checkpoint
from pwdmocap.skeleton import human_skeleton
from pwdmocap.synth import generate_synthetic
from pwdmocap.training import (
    TrainConfig,
    build_dataset,
    lr_at,
    teacher_forcing_batcher,
    train_stage1,
    train_stage2,
)

torch.set_num_threads(1)
SPEC = human_skeleton()
TINY = ModelConfig(num_blocks=2, channels=8, heads=2, stj_heads=2, dropout=0.0, window=8)


@pytest.fixture(scope="module")
def clip():
    return prepare(generate_synthetic("arm_swing", 2.0, 30, seed=0), SPEC)


@pytest.fixture(scope="module")
def clean_data(clip):
    return build_dataset([clip], SPEC, TINY, NoiseConfig(0.0, 1))


def fresh(seed=0, cfg=TINY):
    torch.manual_seed(seed)
    return WiPModel(ModelConfig(**vars(cfg)))


def quick(**kw):
    base = dict(stage=1, warmup_steps=5, total_steps=20, learning_rate=1e-3, batch_size=8, log_every=5)
    base.update(kw)
    return TrainConfig(**base)


# schedule and batching


def test_warmup_schedule():
    cfg = TrainConfig(warmup_steps=500, learning_rate=1e-4)
    assert lr_at(1, cfg) == pytest.approx(1e-4 / 500)
    assert lr_at(250, cfg) == pytest.approx(5e-5)
    assert lr_at(500, cfg) == pytest.approx(1e-4)
    assert lr_at(5000, cfg) == pytest.approx(1e-4)


def test_defaults():
    cfg = TrainConfig()
    assert (cfg.learning_rate, cfg.weight_decay, cfg.warmup_steps) == (1e-4, 1e-3, 500)
    assert (cfg.noise.sigma, cfg.noise.window) == (0.15, 5)


def test_batcher_same_seed_same_order():
    a = teacher_forcing_batcher(50, 8, seed=3, epochs=2)
    b = teacher_forcing_batcher(50, 8, seed=3, epochs=2)
    assert all(np.array_equal(x[1], y[1]) and x[0] == y[0] for x, y in zip(a, b))


def test_batcher_epoch_is_a_partition():
    batches = [idx for epoch, idx in teacher_forcing_batcher(50, 8, seed=0, epochs=1)]
    assert Counter(np.concatenate(batches).tolist()) == Counter(range(50))
    assert [len(b) for b in batches] == [8] * 6 + [2]


def test_batcher_batch_larger_than_dataset():
    batches = list(teacher_forcing_batcher(5, 64, seed=0, epochs=3))
    assert [(e, len(i)) for e, i in batches] == [(0, 5), (1, 5), (2, 5)]


def test_batcher_rejects_empty():
    with pytest.raises(InvalidInputError):
        next(teacher_forcing_batcher(0, 4, seed=0))


# datasets


def test_dataset_shapes(clean_data, clip):
    n = len(clip) - TINY.window
    assert len(clean_data) == n
    assert clean_data.past.shape == (n, TINY.window, 9, 9)
    assert clean_data.target_pose.shape == (n, 27, 3)
    assert clean_data.prev_index[0] == -1 and clean_data.prev_index[1] == 0


def test_dataset_variants(clip):
    si = build_dataset([clip], SPEC, ModelConfig(**{**vars(TINY), "variant": "WiP-SI"}), NoiseConfig(0, 1))
    assert si.target_pose.shape[1:] == (9, 3)
    geo = build_dataset([clip], SPEC, ModelConfig(**{**vars(TINY), "variant": "WiP-Geo"}), NoiseConfig(0, 1))
    assert geo.past.shape[2:] == (27, 3)


def test_noisy_realizations_differ(clip):
    data = build_dataset([clip], SPEC, TINY, NoiseConfig(0.15, 5), realizations=2)
    half = len(data) // 2
    assert not torch.equal(data.current[:half], data.current[half:])
    torch.testing.assert_close(data.target_pose[:half], data.target_pose[half:])


# stage 1


def test_zero_steps_checkpoint_equals_init(tmp_path, clean_data):
    model = fresh()
    init = {k: v.clone() for k, v in model.state_dict().items()}
    result = train_stage1(model, clean_data, quick(total_steps=0), SPEC, out_dir=tmp_path)
    back, payload = load_checkpoint(result.checkpoint)
    assert payload["stage"] == "stage1"
    for k, v in back.state_dict().items():
        assert torch.equal(v, init[k])


def test_reproducible_loss_curve(clean_data):
    a = train_stage1(fresh(), clean_data, quick(), SPEC).log
    b = train_stage1(fresh(), clean_data, quick(), SPEC).log
    assert a == b


def test_loss_log_written(tmp_path, clean_data):
    train_stage1(fresh(), clean_data, quick(), SPEC, out_dir=tmp_path)
    lines = (tmp_path / "stage1_loss.csv").read_text().splitlines()
    assert lines[0].startswith("step,epoch,lr,pd,dd")
    assert len(lines) == 1 + 5


def test_stage1_rejects_stj_model(clean_data):
    model = fresh()
    model.add_stj_sa()
    with pytest.raises(InvalidInputError):
        train_stage1(model, clean_data, quick(), SPEC)


def test_overfit_tiny_pd_drops(clean_data):
    cfg = quick(total_steps=2000, warmup_steps=100, batch_size=16, log_every=100)
    log = train_stage1(fresh(), clean_data, cfg, SPEC).log
    assert log[-1]["pd"] < 0.01 * log[0]["pd"]


@pytest.mark.parametrize("variant", ["WiP-SI", "WiP-Geo"])
def test_variants_train(variant, clip):
    cfg = ModelConfig(**{**vars(TINY), "variant": variant})
    data = build_dataset([clip], SPEC, cfg, NoiseConfig(0, 1))
    log = train_stage1(fresh(cfg=cfg), data, quick(total_steps=200, batch_size=16, log_every=50), SPEC).log
    assert log[-1]["total"] < log[0]["total"]


def test_nan_aborts_with_last_good(tmp_path, clean_data):
    model = fresh()
    cfg = quick(total_steps=30)

    def poison(row):
        if row["step"] == 10:
            with torch.no_grad():
                model.pose_head.bias.fill_(float("nan"))

    with pytest.raises(NumericError) as err:
        train_stage1(model, clean_data, cfg, SPEC, out_dir=tmp_path, callback=poison)
    assert err.value.checkpoint.exists()
    back, _ = load_checkpoint(err.value.checkpoint)
    assert all(torch.isfinite(p).all() for p in back.parameters())


def test_config_from_file(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"stage": 2, "total_steps": 7, "noise": {"sigma": 0.1, "window": 3}}))
    cfg = TrainConfig.from_file(path)
    assert cfg.total_steps == 7 and cfg.noise == NoiseConfig(0.1, 3)
    with pytest.raises(InvalidInputError):
        TrainConfig(stage=3)


# stage 2


@pytest.fixture(scope="module")
def stage1_model(clean_data):
    model = fresh(1)
    train_stage1(model, clean_data, quick(total_steps=100, batch_size=16, log_every=50), SPEC)
    return model


def test_stage2_freeze_and_audit(tmp_path, stage1_model, clip):
    data = build_dataset([clip], SPEC, TINY, NoiseConfig(0.15, 5), realizations=1)
    before = {n: p.detach().clone() for n, p in stage1_model.named_parameters()}
    result = train_stage2(stage1_model, data, quick(stage=2, total_steps=20), SPEC, out_dir=tmp_path)
    after = dict(result.model.named_parameters())
    for name, value in before.items():
        if not is_stage2_trainable(name):
            assert torch.equal(value, after[name]), name
    assert any(not torch.equal(v, after[n]) for n, v in before.items() if is_stage2_trainable(n))
    assert result.audit.changed == []
    assert "trainable" in result.audit.line()
    # the input model is untouched
    for n, p in stage1_model.named_parameters():
        assert torch.equal(p, before[n])
    assert not stage1_model.cfg.stj_sa
    assert result.model.cfg.stj_sa
    assert (tmp_path / "stage2.pt").exists()
    assert float(result.log[0]["velo"]) > 0


def test_stage2_step0_matches_stage1(stage1_model, clip):
    data = build_dataset([clip], SPEC, TINY, NoiseConfig(0.15, 5))
    result = train_stage2(stage1_model, data, quick(stage=2, total_steps=0), SPEC)
    past, cur = data.past[:16], data.current[:16]
    with torch.no_grad():
        a, _ = stage1_model.eval()(past, cur)
        b, _ = result.model.eval()(past, cur)
    assert (a - b).abs().max() < 1e-3


def test_stage2_from_checkpoint_path(tmp_path, stage1_model, clean_data, clip):
    from pwdmocap.model import save_checkpoint

    path = tmp_path / "s1.pt"
    save_checkpoint(stage1_model, path, "stage1")
    data = build_dataset([clip], SPEC, TINY, NoiseConfig(0.15, 5))
    result = train_stage2(path, data, quick(stage=2, total_steps=2), SPEC)
    assert result.model.cfg.stj_sa
    save_checkpoint(result.model, tmp_path / "s2.pt", "stage2")
    with pytest.raises(InvalidInputError):
        train_stage2(tmp_path / "s2.pt", data, quick(stage=2, total_steps=2), SPEC)


def test_callback_can_stop_early(clean_data):
    log = train_stage1(fresh(), clean_data, quick(total_steps=50), SPEC, callback=lambda row: row["step"] >= 10).log
    assert log[-1]["step"] == 10


def test_time_budget_stops_training(clean_data):
    log = train_stage1(fresh(), clean_data, quick(total_steps=100000, max_seconds=0.5), SPEC).log
    assert log[-1]["step"] < 100000


def test_missing_out_dir_is_created(tmp_path, clean_data):
    out = tmp_path / "a" / "b"
    result = train_stage1(fresh(), clean_data, quick(total_steps=2), SPEC, out_dir=out)
    assert result.checkpoint.exists() and (out / "stage1_loss.csv").exists()
