"""Wiring from a RunConfig to records, model, stage plans and trainer."""

from __future__ import annotations

import logging
from pathlib import Path

import torch

from . import losses as L
from .config import ConfigKeyError, RunConfig
from .dataset import (
    AugmentPolicy,
    DatasetError,
    ImageRecord,
    by_split,
    channel_mean,
    load_celeb_layout,
    load_market_layout,
    load_synthetic_dir,
    num_identities,
    synth_benchmark,
)
from .model import ISGAN, ModelConfig, PartLayout
from .trainer import CheckpointError, ScheduleSpec, StagePlan, TrainConfig, Trainer, build_default_plan, load_checkpoint, load_model_state

log = logging.getLogger(__name__)


def build_records(cfg: RunConfig) -> list[ImageRecord]:
    ds = cfg.dataset
    if ds.kind == "synth":
        seed = cfg.seed if ds.seed is None else ds.seed
        try:
            return synth_benchmark(seed, ds.n_train_ids, ds.n_test_ids, ds.imgs_per_id,
                                   tuple(cfg.model.resolution), ds.queries_per_id)
        except ValueError as exc:
            raise ConfigKeyError(f"dataset: {exc}") from exc
    if not ds.path or not Path(ds.path).exists():
        raise DatasetError(f"dataset path {ds.path!r} does not exist")
    if ds.kind == "synth_dir":
        return load_synthetic_dir(ds.path)
    if ds.kind == "market":
        return load_market_layout(ds.path)
    return load_celeb_layout(ds.path)


def model_config(cfg: RunConfig, n_classes: int) -> ModelConfig:
    m = cfg.model
    return ModelConfig(
        resolution=tuple(m.resolution),
        n_classes=n_classes,
        layout=PartLayout(tuple(m.branches), m.p),
        variant=cfg.variant,
        backbone_channels=tuple(m.backbone_channels),
        backbone_strides=tuple(m.backbone_strides),
        map_height=m.map_height,
        head_channels=m.head_channels,
        noise_dim=m.noise_dim,
        gen_base=tuple(m.gen_base),
        gen_width=m.gen_width,
        gen_dropout=m.gen_dropout,
        disc_width=m.disc_width,
    )


def build_model(cfg: RunConfig, n_classes: int) -> ISGAN:
    torch.manual_seed(cfg.seed)
    return ISGAN(model_config(cfg, n_classes))


def loss_weights(cfg: RunConfig) -> L.LossWeights:
    w = cfg.resolved_weights()
    return L.LossWeights(w.R, w.U, w.S, w.PS, w.D, w.C, {int(k): v for k, v in w.U_schedule.items()})


def build_plans(cfg: RunConfig) -> list[StagePlan]:
    t = cfg.train
    plans = build_default_plan(cfg.variant, cfg.mode, t.scale, t.toy_factor, t.warmup, t.label_smoothing)
    for n, plan in enumerate(plans):
        if t.epochs is not None:
            plan.epochs = int(t.epochs[n])
        if t.lr is not None:
            plan.lr = float(t.lr[n])
        warm = min(plan.schedule.warmup_epochs, plan.epochs - 1)
        plan.schedule = ScheduleSpec(plan.epochs, warm, label_smoothing=t.label_smoothing)
    return [p for p in plans if p.stage in t.stages]


def train_config(cfg: RunConfig, records: list[ImageRecord]) -> TrainConfig:
    t = cfg.train
    train = by_split(records, "train")
    policy = AugmentPolicy(
        size=tuple(cfg.model.resolution),
        flip_p=t.augment.flip_p,
        crop=t.augment.crop,
        erase_p=t.augment.erase_p,
        fill=channel_mean(train),
    )
    return TrainConfig(
        seed=cfg.seed, P=t.P, K=t.K, batches_per_epoch=t.batches_per_epoch, augment=policy,
        mode=cfg.mode, weights=loss_weights(cfg), label_smoothing=t.label_smoothing,
        momentum_stats=t.momentum_stats, decorrelation_abs=t.decorrelation_abs,
        clip_norm=t.clip_norm, disc_lr_mult=t.disc_lr_mult, eval_each_epoch=t.eval_each_epoch,
        eval_filter=cfg.eval.filter,
    )


def build_trainer(cfg: RunConfig, records: list[ImageRecord] | None = None,
                  run_dir: str | Path | None = None) -> Trainer:
    records = build_records(cfg) if records is None else records
    train = by_split(records, "train")
    if not train:
        raise DatasetError("empty split: train")
    model = build_model(cfg, num_identities(train))
    return Trainer(model, train_config(cfg, records), train, by_split(records, "query"),
                   by_split(records, "gallery"), run_dir=run_dir, config_echo=cfg.to_dict())


def train_run(cfg: RunConfig, run_dir: str | Path | None = None, records=None, **fit_kwargs) -> Trainer:
    trainer = build_trainer(cfg, records, run_dir)
    trainer.fit(build_plans(cfg), **fit_kwargs)
    return trainer


def load_trained(cfg: RunConfig, checkpoint, records: list[ImageRecord]) -> ISGAN:
    payload = load_checkpoint(checkpoint)
    model = build_model(cfg, num_identities(by_split(records, "train")))
    try:
        load_model_state(model, payload["components"])
    except (KeyError, RuntimeError) as exc:
        raise CheckpointError(f"checkpoint {checkpoint} does not match the configured model: {exc}") from exc
    model.eval()
    return model
