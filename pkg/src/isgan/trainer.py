"""Three-stage optimization schedule, checkpoints and resume."""

from __future__ import annotations

import csv
import hashlib
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import losses as L
from .dataset import AugmentPolicy, ImageRecord, augment, batch_rng, pk_sample
from .disentangle import compose, part_shuffle, sample_mask
from .model import COMPONENTS, ISGAN, one_hot, to_tensor

log = logging.getLogger(__name__)

CKPT_FORMAT = "isgan-checkpoint"
CKPT_VERSION = 1
STORED_COMPONENTS = ("backbone", "E_R", "classifier", "E_U", "G", "D")
DISCRIMINATORS = ("D_D", "D_C")

FULL_EPOCHS = {"short_term": (300, 200, 200), "long_term": (50, 200, 50)}
FULL_LR = (2e-4, 2e-4, 2e-5)
FROZEN = {
    1: frozenset({"E_U", "G", "D_D", "D_C"}),
    2: frozenset({"backbone", "E_R", "classifier"}),
    3: frozenset(),
}


class TrainingDiverged(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


@dataclass
class ScheduleSpec:
    total_epochs: int
    warmup_epochs: int
    min_lr_ratio: float = 0.01
    label_smoothing: float = 0.1

    def __post_init__(self):
        if not 0 <= self.warmup_epochs < self.total_epochs:
            raise ValueError("warmup must be shorter than the stage")


@dataclass
class StagePlan:
    stage: int
    epochs: int
    lr: float
    frozen: frozenset[str]
    active_losses: tuple[str, ...]
    schedule: ScheduleSpec
    lambda_U: float | None = None
    optimizers: dict[str, str] = field(default_factory=dict)


def lr_at(schedule: ScheduleSpec, epoch: int, base_lr: float) -> float:
    """Linear warmup from base/100, then cosine annealing to base * min_lr_ratio."""
    lr_min = base_lr * schedule.min_lr_ratio
    w, last = schedule.warmup_epochs, schedule.total_epochs - 1
    if epoch < w:
        return lr_min + (base_lr - lr_min) * epoch / w
    if last == w:
        return base_lr
    t = min(1.0, (epoch - w) / (last - w))
    return lr_min + (base_lr - lr_min) * 0.5 * (1.0 + math.cos(math.pi * t))


def build_default_plan(variant: str = "DC", mode: str = "short_term", scale: str = "full",
                       toy_factor: int = 50, warmup: int | None = None,
                       label_smoothing: float = 0.1) -> list[StagePlan]:
    if mode not in FULL_EPOCHS:
        raise ValueError(f"unknown mode {mode!r}")
    epochs = FULL_EPOCHS[mode]
    if scale == "toy":
        epochs = tuple(max(3, e // toy_factor) for e in epochs)
        warmup = 1 if warmup is None else warmup
    elif scale == "full":
        warmup = 10 if warmup is None else warmup
    else:
        raise ValueError(f"unknown scale {scale!r}")
    lam_u = (None, 1e-3, 1e-2) if variant == "KL" else (None, 1.0, 1.0)
    plans = []
    for s in (1, 2, 3):
        e = epochs[s - 1]
        active = L.STAGE_COMPONENTS[s]
        opt = {c: ("sgd" if c in DISCRIMINATORS else "adam") for c in COMPONENTS if c not in FROZEN[s]}
        plans.append(
            StagePlan(s, e, FULL_LR[s - 1], FROZEN[s], active,
                      ScheduleSpec(e, min(warmup, e - 1), label_smoothing=label_smoothing),
                      lam_u[s - 1], opt)
        )
    return plans


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def model_state(model: ISGAN) -> dict:
    out = {}
    for name in STORED_COMPONENTS:
        if name == "classifier":
            out[name] = model.classifier.detach().clone()
        else:
            out[name] = {k: v.detach().clone() for k, v in getattr(model, name).state_dict().items()}
    return out


def load_model_state(model: ISGAN, state: dict) -> None:
    with torch.no_grad():
        model.classifier.copy_(state["classifier"])
    for name in STORED_COMPONENTS:
        if name != "classifier":
            getattr(model, name).load_state_dict(state[name])


def component_hashes(model: ISGAN) -> dict[str, str]:
    """SHA-256 over parameters and buffers of each named component."""
    out = {}
    for name in COMPONENTS:
        h = hashlib.sha256()
        for m in model.component_modules(name):
            tensors = [m] if isinstance(m, torch.nn.Parameter) else list(m.state_dict().values())
            for t in tensors:
                h.update(t.detach().cpu().contiguous().numpy().tobytes())
        out[name] = h.hexdigest()
    return out


def save_checkpoint(path, model: ISGAN, *, config: dict | None = None, optimizers: dict | None = None,
                    moving_stats: L.MovingStats | None = None, stage: int = 0, epoch: int = -1,
                    extra: dict | None = None) -> Path:
    """Atomic write of a versioned checkpoint container."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CKPT_FORMAT,
        "version": CKPT_VERSION,
        "config": config or {},
        "components": model_state(model),
        "optimizers": {k: o.state_dict() for k, o in (optimizers or {}).items()},
        "moving_stats": moving_stats.state_dict() if moving_stats else None,
        "stage": stage,
        "epoch": epoch,
        "extra": extra or {},
    }
    tmp = path.with_name(path.name + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)
    return path


def load_checkpoint(path) -> dict:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except FileNotFoundError:
        raise
    except Exception as exc:  # torch raises assorted errors for truncated files
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != CKPT_FORMAT:
        raise CheckpointError(f"{path} is not an {CKPT_FORMAT} file")
    if payload.get("version") != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {payload.get('version')}")
    return payload


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    seed: int = 0
    P: int = 4
    K: int = 4
    batches_per_epoch: int | None = None
    augment: AugmentPolicy | None = None
    mode: str = "short_term"
    weights: L.LossWeights = field(default_factory=L.LossWeights)
    label_smoothing: float = 0.1
    momentum_stats: float = 0.1
    decorrelation_abs: bool = True
    clip_norm: float | None = 10.0
    disc_lr_mult: float = 1.0
    eval_each_epoch: bool = True
    eval_filter: bool = True
    checkpoint_each_epoch: bool = True


def _scalar(t) -> float:
    return float(t.detach()) if torch.is_tensor(t) else float(t)


def _seed_for(*path: int) -> int:
    return int(np.random.SeedSequence(list(path)).generate_state(1)[0])


class Trainer:
    """Owns one model for the duration of a run and trains it stage by stage."""

    def __init__(self, model: ISGAN, cfg: TrainConfig, train_records: Sequence[ImageRecord],
                 query: Sequence[ImageRecord] = (), gallery: Sequence[ImageRecord] = (),
                 run_dir: str | os.PathLike | None = None, config_echo: dict | None = None):
        self.model = model
        self.cfg = cfg
        self.train_records = list(train_records)
        self.query = list(query)
        self.gallery = list(gallery)
        self.run_dir = Path(run_dir) if run_dir else None
        self.config_echo = config_echo or {}
        self.stats = L.MovingStats(cfg.momentum_stats)
        self.step = 0
        self.metrics: list[dict] = []
        self.optimizers: dict[str, torch.optim.Optimizer] = {}
        self.n_classes = model.cfg.n_classes
        self.policy = cfg.augment or AugmentPolicy.identity(model.cfg.resolution)
        if self.run_dir:
            self.run_dir.mkdir(parents=True, exist_ok=True)

    # -- setup ------------------------------------------------------------

    def _trainable(self, plan: StagePlan) -> tuple[list, list]:
        gen_side, disc_side = [], []
        seen = set()
        for name in COMPONENTS:
            if name in plan.frozen:
                continue
            for p in self.model.component_parameters(name):
                if id(p) in seen:
                    continue
                seen.add(id(p))
                (disc_side if name in DISCRIMINATORS else gen_side).append(p)
        return gen_side, disc_side

    def _prepare(self, plan: StagePlan) -> None:
        model = self.model
        for p in model.parameters():
            p.requires_grad_(False)
        gen_side, disc_side = self._trainable(plan)
        for p in gen_side + disc_side:
            p.requires_grad_(True)
        self.optimizers = {}
        if gen_side:
            self.optimizers["gen"] = torch.optim.Adam(gen_side, lr=plan.lr, betas=(0.9, 0.999))
        if disc_side and plan.stage > 1:
            self.optimizers["disc"] = torch.optim.SGD(disc_side, lr=plan.lr * self.cfg.disc_lr_mult, momentum=0.9)
        self._set_modes(plan)

    def _set_modes(self, plan: StagePlan) -> None:
        self.model.train()
        for name in plan.frozen:
            for m in self.model.component_modules(name):
                if isinstance(m, torch.nn.Module):
                    m.eval()

    def _set_lr(self, plan: StagePlan, epoch: int) -> float:
        lr = lr_at(plan.schedule, epoch, plan.lr)
        for key, opt in self.optimizers.items():
            for g in opt.param_groups:
                g["lr"] = lr * (self.cfg.disc_lr_mult if key == "disc" else 1.0)
        return lr

    # -- one step ---------------------------------------------------------

    def _batch(self, stage: int, epoch: int, b: int):
        rng = batch_rng(self.cfg.seed, stage, epoch, b)
        transform = lambda rec, r: augment(rec, r, self.policy)  # noqa: E731
        batch = pk_sample(self.train_records, self.cfg.P, self.cfg.K, rng, transform)
        dtype = next(self.model.parameters()).dtype
        return batch, to_tensor(batch.images, dtype), torch.as_tensor(batch.labels), rng

    def _identity_step(self, plan, x, labels) -> dict[str, float]:
        logits = self.model.part_logits(self.model.encode_related(x))
        l_r = L.identity_loss(logits, labels, self.cfg.label_smoothing)
        total, breakdown = L.total_loss({"R": l_r}, self._weights(plan), plan.stage)
        self._guard(total, breakdown)
        opt = self.optimizers["gen"]
        opt.zero_grad(set_to_none=True)
        total.backward()
        opt.step()
        return {**{f"w{k}": v for k, v in breakdown.items()}, "R": _scalar(l_r), "total": _scalar(total)}

    def _weights(self, plan: StagePlan) -> L.LossWeights:
        w = self.cfg.weights
        if plan.lambda_U is not None and plan.stage not in w.U_schedule and self.model.variant == "KL":
            return L.LossWeights(w.R, w.U, w.S, w.PS, w.D, w.C, {**w.U_schedule, plan.stage: plan.lambda_U})
        return w

    def generate_terms(self, enc, pair_index, labels, rng):
        """The four reconstructions and two part-shuffled generations per pair."""
        model = self.model
        a, p = torch.as_tensor(pair_index[:, 0]), torch.as_tensor(pair_index[:, 1])
        R = {"a": enc.phi_R[a], "p": enc.phi_R[p]}
        U = {"a": enc.phi_U[a], "p": enc.phi_U[p]}
        B = len(a)
        masks = {k: sample_mask(rng, model.layout, self.cfg.mode, batch=B) for k in L.CROSS_KEYS}
        feats = [compose(R[j], U[i]) for i, j in L.PAIR_KEYS]
        feats += [compose(part_shuffle(R[i], R[j], masks[(i, j)]), U[i]) for i, j in L.CROSS_KEYS]
        z = torch.cat(feats)
        y = labels[a]
        onehot = one_hot(y.repeat(len(feats)), self.n_classes, z.dtype)
        out = model.generate(z, onehot).split(B)
        recon = dict(zip(L.PAIR_KEYS, out[:4]))
        shuffled = dict(zip(L.CROSS_KEYS, out[4:]))
        return recon, shuffled, y

    def _gan_step(self, plan, x, labels, pairs, rng) -> dict[str, float]:
        model = self.model
        weights = self._weights(plan)
        stage = plan.stage
        if all(weights.at(n, stage) == 0 for n in ("U", "S", "PS", "D", "C")):
            # identity-loss-only ablation: nothing generative to train
            return self._identity_step(plan, x, labels) if stage == 3 else {}
        enc = model.encode(x)
        images = {"a": x[torch.as_tensor(pairs[:, 0])], "p": x[torch.as_tensor(pairs[:, 1])]}
        recon, shuffled, y = self.generate_terms(enc, pairs, labels, rng)
        fakes = [recon[k] for k in L.PAIR_KEYS] + [shuffled[k] for k in L.CROSS_KEYS]
        reals = [images["a"], images["p"]]
        eps = self.cfg.label_smoothing

        # discriminator side: maximize the domain objective, minimize the class loss
        out: dict[str, float] = {}
        if "disc" in self.optimizers:
            batch = torch.cat(reals + [f.detach() for f in fakes])
            dom = model.discriminate_domain(batch).split(len(y))
            cls = model.discriminate_class(batch).split(len(y))
            obj, _ = L.domain_loss(dom[:2], dom[2:6], dom[6:])
            l_c = L.class_loss(cls[:2], cls[2:6], cls[6:], y, eps)
            d_loss = weights.D * (-obj) + weights.C * l_c
            self._guard(d_loss, {"disc": _scalar(d_loss)})
            opt = self.optimizers["disc"]
            opt.zero_grad(set_to_none=True)
            d_loss.backward()
            if self.cfg.clip_norm:
                torch.nn.utils.clip_grad_norm_(self._params(opt), self.cfg.clip_norm)
            opt.step()
            out.update({"disc_objective": _scalar(obj), "disc_loss": _scalar(d_loss)})

        # generator side
        comp = {}
        comp["S"] = L.shuffle_recon_loss(images, recon)
        comp["PS"] = L.part_shuffle_loss(images, shuffled)
        if model.variant == "KL":
            comp["U"] = L.kl_unrelated_loss(*enc.kl_params)
        else:
            comp["U"] = L.decorrelation_step(enc.phi_R, enc.phi_U, self.stats, self.cfg.decorrelation_abs)
        batch = torch.cat(reals + fakes)
        dom = model.discriminate_domain(batch).split(len(y))
        cls = model.discriminate_class(batch).split(len(y))
        _, comp["D"] = L.domain_loss(dom[:2], dom[2:6], dom[6:])
        comp["C"] = L.class_loss(cls[:2], cls[2:6], cls[6:], y, eps)
        if stage == 3:
            comp["R"] = L.identity_loss(enc.logits, labels, eps)
        total, breakdown = L.total_loss(comp, weights, stage)
        self._guard(total, breakdown)
        opt = self.optimizers["gen"]
        opt.zero_grad(set_to_none=True)
        total.backward()
        if self.cfg.clip_norm:
            torch.nn.utils.clip_grad_norm_(self._params(opt), self.cfg.clip_norm)
        opt.step()
        out.update({k: _scalar(v) for k, v in comp.items()})
        out.update({f"w{k}": v for k, v in breakdown.items()})
        out["total"] = _scalar(total)
        return out

    @staticmethod
    def _params(opt):
        return [p for g in opt.param_groups for p in g["params"]]

    def _guard(self, value: torch.Tensor, breakdown: dict) -> None:
        if not torch.isfinite(value).all():
            if self.run_dir:
                save_checkpoint(self.run_dir / "diverged.ckpt", self.model, config=self.config_echo,
                                moving_stats=self.stats, extra={"breakdown": breakdown, "step": self.step})
            raise TrainingDiverged(f"non-finite loss at step {self.step}: {breakdown}")

    # -- loops ------------------------------------------------------------

    def n_batches(self) -> int:
        if self.cfg.batches_per_epoch:
            return self.cfg.batches_per_epoch
        return max(1, len(self.train_records) // (self.cfg.P * self.cfg.K))

    def evaluate(self) -> dict | None:
        if not (self.query and self.gallery):
            return None
        from .evaluator import evaluate_retrieval

        return evaluate_retrieval(self.model, self.query, self.gallery, self.cfg.eval_filter).report()

    def run_stage(self, plan: StagePlan, start_epoch: int = 0, end_epoch: int | None = None,
                  fresh: bool = True) -> list[dict]:
        """Train epochs ``[start_epoch, end_epoch)`` of a stage; returns per-epoch metrics.

        ``fresh`` builds new optimizers; resume passes False to keep restored ones.
        """
        if fresh:
            self._prepare(plan)
        end_epoch = plan.epochs if end_epoch is None else min(end_epoch, plan.epochs)
        epoch_metrics = []
        for epoch in range(start_epoch, end_epoch):
            torch.manual_seed(_seed_for(self.cfg.seed, plan.stage, epoch))
            self._set_modes(plan)
            lr = self._set_lr(plan, epoch)
            for b in range(self.n_batches()):
                batch, x, labels, rng = self._batch(plan.stage, epoch, b)
                if plan.stage == 1:
                    values = self._identity_step(plan, x, labels)
                else:
                    values = self._gan_step(plan, x, labels, batch.pair_index, rng)
                self._log(plan.stage, epoch, values)
                self.step += 1
            row = {"stage": plan.stage, "epoch": epoch, "lr": lr, "step": self.step}
            ev = self.evaluate() if self.cfg.eval_each_epoch else None
            if ev:
                row.update(ev)
            self.metrics.append(row)
            epoch_metrics.append(row)
            self._write_metrics_row(row)
            if self.run_dir and self.cfg.checkpoint_each_epoch:
                self.checkpoint(plan.stage, epoch)
        return epoch_metrics

    def checkpoint(self, stage: int, epoch: int) -> Path:
        return save_checkpoint(
            self.run_dir / f"stage{stage}" / f"epoch{epoch}.ckpt", self.model,
            config=self.config_echo, optimizers=self.optimizers, moving_stats=self.stats,
            stage=stage, epoch=epoch, extra={"step": self.step, "metrics": self.metrics},
        )

    def resume(self, payload: dict, plans: Sequence[StagePlan]) -> tuple[int, int]:
        """Restore state from a checkpoint payload; returns (stage, next epoch)."""
        load_model_state(self.model, payload["components"])
        if payload.get("moving_stats"):
            self.stats.load_state_dict(payload["moving_stats"])
        self.step = payload["extra"].get("step", 0)
        self.metrics = list(payload["extra"].get("metrics", []))
        stage, epoch = payload["stage"], payload["epoch"]
        plan = next(p for p in plans if p.stage == stage)
        if epoch + 1 >= plan.epochs:
            return stage + 1, 0
        self._prepare(plan)
        for k, s in payload["optimizers"].items():
            self.optimizers[k].load_state_dict(s)
        return stage, epoch + 1

    def fit(self, plans: Sequence[StagePlan], resume_from=None,
            stop_after: tuple[int, int] | None = None) -> list[dict]:
        """Run the plans in order, optionally resuming from a checkpoint (path or
        payload) and/or stopping once epoch ``stop_after[1]`` of stage
        ``stop_after[0]`` has completed."""
        start_stage, start_epoch, fresh = plans[0].stage, 0, True
        if resume_from is not None:
            payload = resume_from if isinstance(resume_from, dict) else load_checkpoint(resume_from)
            start_stage, start_epoch = self.resume(payload, plans)
            fresh = start_epoch == 0
        for plan in plans:
            if plan.stage < start_stage:
                continue
            first = start_epoch if plan.stage == start_stage else 0
            stop_here = stop_after is not None and stop_after[0] == plan.stage
            end = stop_after[1] + 1 if stop_here else None
            self.run_stage(plan, first, end, fresh=fresh or first == 0)
            fresh = True
            if stop_here:
                break
        return self.metrics

    # -- logging ----------------------------------------------------------

    def _log(self, stage: int, epoch: int, values: dict[str, float]) -> None:
        if not self.run_dir:
            return
        path = self.run_dir / "log.csv"
        new = not path.exists()
        with open(path, "a", newline="") as fh:
            w = csv.writer(fh)
            if new:
                w.writerow(["step", "stage", "epoch", "component", "value"])
            for name, v in values.items():
                w.writerow([self.step, stage, epoch, name, repr(float(v))])

    def _write_metrics_row(self, row: dict) -> None:
        if not self.run_dir:
            return
        path = self.run_dir / "metrics.csv"
        keys = ["stage", "epoch", "step", "lr", "rank1", "rank5", "rank10", "map", "n_query", "n_dropped"]
        new = not path.exists()
        with open(path, "a", newline="") as fh:
            w = csv.writer(fh)
            if new:
                w.writerow(keys)
            w.writerow([row.get(k, "") for k in keys])
