import csv
import math

import numpy as np
import pytest
import torch

from isgan.config import RunConfig
from isgan.pipeline import build_plans, build_trainer
from isgan.trainer import (
    CheckpointError,
    ScheduleSpec,
    TrainingDiverged,
    build_default_plan,
    component_hashes,
    load_checkpoint,
    lr_at,
)

import oracles


def tiny_config(seed=0, epochs=(1, 2, 1)) -> RunConfig:
    cfg = RunConfig(seed=seed)
    cfg.dataset.n_train_ids, cfg.dataset.n_test_ids, cfg.dataset.imgs_per_id = 6, 3, 4
    cfg.train.P, cfg.train.K, cfg.train.batches_per_epoch = 2, 2, 2
    cfg.train.epochs = list(epochs)
    cfg.train.eval_each_epoch = True
    return cfg


def test_default_plans():
    full = build_default_plan("DC", "short_term", "full")
    assert [(p.epochs, p.lr) for p in full] == [(300, 2e-4), (200, 2e-4), (200, 2e-5)]
    assert [p.epochs for p in build_default_plan("DC", "long_term", "full")] == [50, 200, 50]
    assert [p.epochs for p in build_default_plan("DC", "short_term", "toy")] == [6, 4, 4]
    assert full[0].frozen == {"E_U", "G", "D_D", "D_C"}
    assert full[1].frozen == {"backbone", "E_R", "classifier"}
    assert full[2].frozen == frozenset()
    kl = build_default_plan("KL", "short_term", "full")
    assert [p.lambda_U for p in kl] == [None, 1e-3, 1e-2]
    assert full[1].optimizers["D_D"] == "sgd" and full[1].optimizers["G"] == "adam"


def test_lr_schedule():
    s = ScheduleSpec(total_epochs=20, warmup_epochs=5)
    assert lr_at(s, 0, 1e-3) == pytest.approx(1e-5, abs=1e-18)
    assert lr_at(s, 5, 1e-3) == pytest.approx(1e-3, abs=1e-18)
    assert abs(lr_at(s, 19, 1e-3) - 1e-5) <= 1e-12
    for e in range(20):
        np.testing.assert_allclose(lr_at(s, e, 1e-3), oracles.cosine_lr(e, 20, 5, 1e-3), rtol=1e-12)
    with pytest.raises(ValueError):
        ScheduleSpec(3, 3)


def _changed(before, after):
    return {k for k in before if before[k] != after[k]}


def test_freeze_contract_and_finite_losses(tmp_path):
    cfg = tiny_config()
    trainer = build_trainer(cfg, run_dir=tmp_path)
    plans = build_plans(cfg)
    h0 = component_hashes(trainer.model)
    trainer.run_stage(plans[0])
    h1 = component_hashes(trainer.model)
    assert _changed(h0, h1) == {"backbone", "E_R", "classifier"}
    trainer.run_stage(plans[1])
    h2 = component_hashes(trainer.model)
    assert _changed(h1, h2) == {"E_U", "G", "D_D", "D_C"}
    stage2 = [m for m in trainer.metrics if m["stage"] == 2]
    assert len({(m["rank1"], m["map"]) for m in stage2}) == 1
    assert (stage2[0]["rank1"], stage2[0]["map"]) == (trainer.metrics[0]["rank1"], trainer.metrics[0]["map"])
    trainer.run_stage(plans[2])
    assert _changed(h2, component_hashes(trainer.model)) == set(h0)
    with open(tmp_path / "log.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert {r["component"] for r in rows if r["stage"] == "2"} >= {"S", "PS", "U", "D", "C", "disc_objective"}
    assert all(math.isfinite(float(r["value"])) for r in rows)


def _final_values(trainer):
    return {k: v.clone() for k, v in trainer.model.state_dict().items()}


def test_resume_is_bit_exact(tmp_path):
    cfg = tiny_config(epochs=(1, 4, 1))
    full = build_trainer(cfg, run_dir=tmp_path / "full")
    full.fit(build_plans(cfg))

    part = build_trainer(cfg, run_dir=tmp_path / "part")
    part.fit(build_plans(cfg), stop_after=(2, 1))
    ckpt = tmp_path / "part" / "stage2" / "epoch1.ckpt"
    resumed = build_trainer(cfg, run_dir=tmp_path / "resumed")
    resumed.fit(build_plans(cfg), resume_from=ckpt)

    a, b = _final_values(full), _final_values(resumed)
    assert all(torch.equal(a[k], b[k]) for k in a)
    assert full.metrics == resumed.metrics


def test_replay_gives_identical_logs(tmp_path):
    cfg = tiny_config(epochs=(1, 1, 1))
    for name in ("a", "b"):
        build_trainer(cfg, run_dir=tmp_path / name).fit(build_plans(cfg))
    assert (tmp_path / "a" / "log.csv").read_text() == (tmp_path / "b" / "log.csv").read_text()


def test_divergence_guard(tmp_path):
    cfg = tiny_config(epochs=(1, 1, 1))
    trainer = build_trainer(cfg, run_dir=tmp_path)
    with torch.no_grad():
        trainer.model.classifier.fill_(float("nan"))
    with pytest.raises(TrainingDiverged):
        trainer.fit(build_plans(cfg))
    assert load_checkpoint(tmp_path / "diverged.ckpt")["format"] == "isgan-checkpoint"


def test_corrupt_checkpoint(tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        load_checkpoint(bad)
    torch.save({"format": "other"}, tmp_path / "other.ckpt")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "other.ckpt")
