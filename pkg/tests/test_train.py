import importlib
import json
import logging

import numpy as np
import pytest
import torch

train_module = importlib.import_module("liversearch.selfsup.train")
from liversearch.augment import AugmentConfig
from liversearch.errors import TrainingDivergedError
from liversearch.imaging.manifest import DatasetManifest, SliceRecord
from liversearch.selfsup.checkpoint import load_checkpoint
from liversearch.selfsup.models import EncoderSpec, HeadSpec, SiameseModel
from liversearch.selfsup.train import (
    StepStats,
    TrainConfig,
    make_optimizer,
    train,
    train_step,
)

SPEC = EncoderSpec(kind="tiny_conv", out_dim=8, width=2)
AUG = AugmentConfig(out_size=(16, 16))


def _toy_manifest(n=8, split="train"):
    records = [
        SliceRecord(
            slice_id=f"v:{i:04d}",
            volume_id="v",
            slice_index=i,
            liver_label=bool(i % 2),
            split=split,
            volume_path="v.json",
        )
        for i in range(n)
    ]
    return DatasetManifest(records=records, seed=0, skipped_volumes=[])


def _hu_of(record):
    rng = np.random.default_rng(record.slice_index)
    return rng.integers(-200, 300, size=(16, 16)).astype(np.int16)


def test_config_validation():
    for kwargs in (
        {"batch_size": 1},
        {"epochs": -1},
        {"momentum": 1.0},
        {"momentum": -0.1},
        {"weight_decay": -1e-4},
        {"base_lr": -0.01},
        {"checkpoint_every": -1},
    ):
        with pytest.raises(ValueError):
            TrainConfig(**kwargs)
    TrainConfig(base_lr=0.0)  # zero lr stays legal


def test_lr_scaling_rule():
    assert TrainConfig().resolved_lr == pytest.approx(0.05 * 32 / 256)
    assert TrainConfig(batch_size=256).resolved_lr == pytest.approx(0.05)
    assert TrainConfig(batch_size=64).resolved_lr == pytest.approx(0.0125)
    assert TrainConfig(base_lr=0.123).resolved_lr == 0.123


def test_config_json_round_trip():
    cfg = TrainConfig(batch_size=8, epochs=3, seed=5)
    obj = cfg.to_json()
    assert obj["base_lr"] == pytest.approx(cfg.resolved_lr)
    restored = TrainConfig.from_json(obj)
    assert restored.batch_size == 8
    assert restored.resolved_lr == pytest.approx(cfg.resolved_lr)
    with pytest.raises(ValueError):
        TrainConfig.from_json({"batch_size": 8, "learning_rate": 0.1})


def _fresh(seed):
    torch.manual_seed(seed)
    model = SiameseModel(SPEC, HeadSpec())
    return model


def test_train_step_contract():
    model = _fresh(0)
    cfg = TrainConfig(batch_size=4, epochs=1)
    optimizer = make_optimizer(model, cfg)
    before = [p.detach().clone() for p in model.parameters()]
    batch = [_hu_of(r) for r in _toy_manifest(4).records]
    stats = train_step(model, optimizer, batch, AUG, np.random.default_rng(0))
    assert -1.0 <= stats.loss <= 1.0
    assert stats.batch_size == 4
    assert stats.z_rows.shape == (8, 8)
    np.testing.assert_allclose(np.linalg.norm(stats.z_rows, axis=1), 1.0, atol=1e-5)
    after = list(model.parameters())
    assert any(not torch.equal(b, a) for b, a in zip(before, after))


def test_train_step_rejects_empty_batch():
    model = _fresh(0)
    optimizer = make_optimizer(model, TrainConfig())
    with pytest.raises(ValueError):
        train_step(model, optimizer, [], AUG, np.random.default_rng(0))


def test_train_step_divergence_diagnostics():
    model = _fresh(0)
    with torch.no_grad():
        model.predictor.net[-1].weight.fill_(float("nan"))
    optimizer = make_optimizer(model, TrainConfig())
    batch = [_hu_of(r) for r in _toy_manifest(4).records]
    with pytest.raises(TrainingDivergedError) as info:
        train_step(model, optimizer, batch, AUG, np.random.default_rng(0))
    diag = info.value.diagnostics
    assert set(diag) >= {"loss", "lr", "embedding_std"}
    assert not np.isfinite(diag["loss"])


def test_train_deterministic_across_runs():
    manifest = _toy_manifest(8)
    cfg = TrainConfig(batch_size=4, epochs=2, seed=7)
    a = train(manifest, SPEC, HeadSpec(), cfg, AUG, hu_of=_hu_of)
    b = train(manifest, SPEC, HeadSpec(), cfg, AUG, hu_of=_hu_of)
    assert a.losses == b.losses
    assert a.embedding_stds == b.embedding_stds
    sa, sb = a.model.state_dict(), b.model.state_dict()
    for name in sa:
        torch.testing.assert_close(sa[name], sb[name], rtol=0, atol=0)


def test_train_seed_changes_trajectory():
    manifest = _toy_manifest(8)
    a = train(manifest, SPEC, HeadSpec(), TrainConfig(batch_size=4, epochs=1, seed=0), AUG, hu_of=_hu_of)
    b = train(manifest, SPEC, HeadSpec(), TrainConfig(batch_size=4, epochs=1, seed=1), AUG, hu_of=_hu_of)
    assert a.losses != b.losses


def test_train_loss_trend():
    manifest = _toy_manifest(8)
    cfg = TrainConfig(batch_size=4, epochs=5, seed=3)
    result = train(manifest, SPEC, HeadSpec(), cfg, AUG, hu_of=_hu_of)
    assert len(result.losses) == 5
    assert all(-1.0 <= v <= 1.0 for v in result.losses)
    assert result.losses[-1] < result.losses[0]
    assert not result.collapsed


def test_zero_lr_leaves_weights_at_init():
    manifest = _toy_manifest(8)
    cfg = TrainConfig(batch_size=4, epochs=2, seed=11, base_lr=0.0)
    result = train(manifest, SPEC, HeadSpec(), cfg, AUG, hu_of=_hu_of)
    torch.manual_seed(11)
    fresh = SiameseModel(SPEC, HeadSpec())
    got, want = result.model.state_dict(), fresh.state_dict()
    assert set(got) == set(want)
    for name in want:
        torch.testing.assert_close(got[name], want[name], rtol=0, atol=0)


def test_zero_epochs_returns_init_and_checkpoint(tmp_path):
    manifest = _toy_manifest(4)
    cfg = TrainConfig(batch_size=4, epochs=0, seed=2)
    result = train(manifest, SPEC, HeadSpec(), cfg, AUG, hu_of=_hu_of, out_dir=tmp_path)
    assert result.losses == []
    assert result.checkpoint_path == tmp_path / "checkpoint_final.ckpt"
    assert result.checkpoint_path.exists()
    bundle = load_checkpoint(result.checkpoint_path)
    assert bundle.fingerprint == result.fingerprint


def test_train_outputs_on_disk(tmp_path):
    manifest = _toy_manifest(8)
    cfg = TrainConfig(batch_size=4, epochs=3, seed=1, checkpoint_every=2)
    result = train(manifest, SPEC, HeadSpec(), cfg, AUG, hu_of=_hu_of, out_dir=tmp_path)

    lines = (tmp_path / "metrics.jsonl").read_text().splitlines()
    assert len(lines) == 3
    for epoch, line in enumerate(lines):
        entry = json.loads(line)
        assert entry["epoch"] == epoch
        assert set(entry) == {"epoch", "loss", "embedding_std", "lr", "wall_time"}
        assert entry["lr"] == pytest.approx(cfg.resolved_lr)
        assert entry["loss"] == pytest.approx(result.losses[epoch])

    assert (tmp_path / "checkpoint_epoch0002.ckpt").exists()
    assert not (tmp_path / "checkpoint_epoch0003.ckpt").exists()
    bundle = load_checkpoint(tmp_path / "checkpoint_final.ckpt")
    assert bundle.train_config["epochs"] == 3
    assert bundle.augment_config["out_size"] == [16, 16]
    # final checkpoint reproduces the trained weights exactly
    got = bundle.model.state_dict()
    want = result.model.state_dict()
    for name in want:
        torch.testing.assert_close(got[name], want[name], rtol=0, atol=0)


def test_lone_tail_sample_is_skipped():
    manifest = _toy_manifest(5)
    fetched = []

    def counting_hu(record):
        fetched.append(record.slice_id)
        return _hu_of(record)

    cfg = TrainConfig(batch_size=4, epochs=2, seed=0)
    train(manifest, SPEC, HeadSpec(), cfg, AUG, hu_of=counting_hu)
    assert len(fetched) == 2 * 4


def test_single_clip_changes_training():
    manifest = _toy_manifest(8)
    cfg = TrainConfig(batch_size=4, epochs=1, seed=5)
    dual = train(manifest, SPEC, HeadSpec(), cfg, AUG, hu_of=_hu_of)
    base = train(manifest, SPEC, HeadSpec(), cfg, AUG, hu_of=_hu_of, single_clip=True)
    assert dual.losses != base.losses


def test_collapse_warning(monkeypatch, caplog):
    manifest = _toy_manifest(4)

    def flat_step(model, optimizer, hu_batch, augment_cfg, rng, *, single_clip=False, dtype=torch.float32):
        rows = np.full((2 * len(hu_batch), 4), 0.5, dtype=np.float32)
        return StepStats(loss=-1.0, z_rows=rows, batch_size=len(hu_batch))

    monkeypatch.setattr(train_module, "train_step", flat_step)
    cfg = TrainConfig(batch_size=4, epochs=4, seed=0)
    with caplog.at_level(logging.WARNING, logger="liversearch.selfsup.train"):
        result = train(manifest, SPEC, HeadSpec(), cfg, AUG, hu_of=_hu_of)
    assert result.collapsed
    assert result.embedding_stds == [0.0] * 4
    warnings = [r for r in caplog.records if "collapse" in r.message]
    assert len(warnings) == 1


def test_healthy_run_not_flagged_collapsed():
    manifest = _toy_manifest(8)
    cfg = TrainConfig(batch_size=4, epochs=3, seed=0)
    result = train(manifest, SPEC, HeadSpec(), cfg, AUG, hu_of=_hu_of)
    assert not result.collapsed
    assert all(s > 1e-4 for s in result.embedding_stds)


def test_train_requires_split_and_source():
    with pytest.raises(ValueError):
        train(_toy_manifest(4, split="test"), SPEC, HeadSpec(), TrainConfig(epochs=1), AUG, hu_of=_hu_of)
    with pytest.raises(ValueError):
        train(_toy_manifest(4), SPEC, HeadSpec(), TrainConfig(epochs=1), AUG)
