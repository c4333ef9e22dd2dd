"""Command-line entry point: ``isgan <command> [--config FILE] [--out DIR] [--a.b VALUE ...]``.

Any ``--section.key value`` pair not claimed by a named flag is applied to the
configuration as a dotted-path override (values parsed as JSON when possible).
Failures print one JSON line to stderr and exit with a code per error kind.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import ConfigKeyError, RunConfig, load_config, write_resolved
from .dataset import DatasetError, binary_attribute, by_split, write_synthetic_dir
from .model import ConfigError
from .trainer import CheckpointError, TrainingDiverged, save_checkpoint

log = logging.getLogger("isgan")

EXIT_OTHER = 1
EXIT_CONFIG = 2
EXIT_DATASET = 3
EXIT_CHECKPOINT = 4
EXIT_DIVERGED = 5

COMMANDS = ("synth", "train", "eval", "probe", "generate", "export-embeddings")


class CliError(Exception):
    def __init__(self, kind: str, code: int, message: str):
        super().__init__(message)
        self.kind, self.code = kind, code


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="isgan", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", help="JSON config file")
    ap.add_argument("--out", help="output directory (config key 'out')")
    ap.add_argument("--checkpoint", help="checkpoint to load (config key 'eval.checkpoint')")
    ap.add_argument("--resume", help="train: continue from this checkpoint")
    ap.add_argument("--attribute", help="probe: binary factor name (config key 'eval.attribute')")
    ap.add_argument("--grid-mode", help="generate: recon, R_only, U_only, interp_R, interp_U or part_swap")
    ap.add_argument("--ids", help="generate: comma-separated record indices, taken in pairs")
    ap.add_argument("--alphas", help="generate: comma-separated interpolation weights")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def _dotted_overrides(extra: list[str]) -> dict[str, str]:
    out: dict[str, str] = {}
    n = 0
    while n < len(extra):
        tok = extra[n]
        if not tok.startswith("--"):
            raise CliError("config", EXIT_CONFIG, f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            n += 1
        elif n + 1 < len(extra):
            value = extra[n + 1]
            n += 2
        else:
            raise CliError("config", EXIT_CONFIG, f"override {tok!r} needs a value")
        out[key] = value
    return out


def _config(args, extra) -> RunConfig:
    overrides = _dotted_overrides(extra)
    if args.out:
        overrides["out"] = args.out
    if args.checkpoint:
        overrides["eval.checkpoint"] = args.checkpoint
    if args.attribute:
        overrides["eval.attribute"] = args.attribute
    if args.grid_mode:
        overrides["eval.grid_mode"] = args.grid_mode
    if args.ids:
        overrides["eval.grid_ids"] = "[" + args.ids + "]"
    if args.alphas:
        overrides["eval.alphas"] = "[" + args.alphas + "]"
    if args.config and not Path(args.config).is_file():
        raise CliError("config", EXIT_CONFIG, f"config file {args.config} not found")
    try:
        return load_config(args.config, overrides)
    except json.JSONDecodeError as exc:
        raise CliError("config", EXIT_CONFIG, f"config is not valid JSON: {exc}") from exc
    except TypeError as exc:
        raise CliError("config", EXIT_CONFIG, str(exc)) from exc


def _checkpoint_path(cfg: RunConfig) -> Path:
    ckpt = cfg.eval.checkpoint
    if not ckpt:
        raise CliError("checkpoint", EXIT_CHECKPOINT, "no checkpoint given (use --checkpoint)")
    if not Path(ckpt).is_file():
        raise CliError("checkpoint", EXIT_CHECKPOINT, f"checkpoint {ckpt} does not exist")
    return Path(ckpt)


def _write_json(path: Path, data) -> None:
    path.write_text(json.dumps(data, indent=1, sort_keys=True) + "\n")


def cmd_synth(cfg: RunConfig, out: Path, args) -> dict:
    from .pipeline import build_records

    if cfg.dataset.kind != "synth":
        raise CliError("config", EXIT_CONFIG, "synth requires dataset.kind = 'synth'")
    records = build_records(cfg)
    write_synthetic_dir(records, out)
    return {"records": len(records), "path": str(out)}


def cmd_train(cfg: RunConfig, out: Path, args) -> dict:
    from .pipeline import build_plans, build_records, build_trainer

    records = build_records(cfg)
    if args.resume is None:
        for stale in ("log.csv", "metrics.csv"):
            (out / stale).unlink(missing_ok=True)
    elif not Path(args.resume).is_file():
        raise CliError("checkpoint", EXIT_CHECKPOINT, f"checkpoint {args.resume} does not exist")
    trainer = build_trainer(cfg, records, out)
    plans = build_plans(cfg)
    history = trainer.fit(plans, resume_from=args.resume)
    last = plans[-1]
    save_checkpoint(out / "final.ckpt", trainer.model, config=cfg.to_dict(), optimizers=trainer.optimizers,
                    moving_stats=trainer.stats, stage=last.stage, epoch=last.epochs - 1,
                    extra={"step": trainer.step, "metrics": trainer.metrics})
    final = trainer.evaluate()
    metrics = {"final": final, "history": history, "steps": trainer.step}
    _write_json(out / "metrics.json", metrics)
    return {"checkpoint": str(out / "final.ckpt"), "final": final}


def _trained(cfg: RunConfig):
    from .pipeline import build_records, load_trained

    records = build_records(cfg)
    model = load_trained(cfg, _checkpoint_path(cfg), records)
    return model, records


def cmd_eval(cfg: RunConfig, out: Path, args) -> dict:
    from .evaluator import evaluate_retrieval, write_metrics

    model, records = _trained(cfg)
    query, gallery = by_split(records, "query"), by_split(records, "gallery")
    if not query or not gallery:
        raise DatasetError("empty split: query/gallery")
    return write_metrics(evaluate_retrieval(model, query, gallery, cfg.eval.filter), out / "metrics.json")


def cmd_probe(cfg: RunConfig, out: Path, args) -> dict:
    from .evaluator import probe_report, write_probe

    model, records = _trained(cfg)
    subset = by_split(records, cfg.eval.probe_split)
    if not subset:
        raise DatasetError(f"empty split: {cfg.eval.probe_split}")
    try:
        labels = binary_attribute(subset, cfg.eval.attribute)
    except KeyError as exc:
        raise CliError("config", EXIT_CONFIG, f"unknown attribute {cfg.eval.attribute!r}") from exc
    report = probe_report(model, subset, labels, cfg.eval.attribute, cfg.eval.probe_seed)
    return write_probe(report, out / f"probe_{cfg.eval.attribute}.json")


def cmd_generate(cfg: RunConfig, out: Path, args) -> dict:
    from .evaluator import GRID_MODES, generation_grid

    if cfg.eval.grid_mode not in GRID_MODES:
        raise CliError("config", EXIT_CONFIG, f"eval.grid_mode must be one of {GRID_MODES}")
    ids = list(cfg.eval.grid_ids)
    if not ids or len(ids) % 2:
        raise CliError("config", EXIT_CONFIG, "eval.grid_ids needs an even number of record indices")
    model, records = _trained(cfg)
    subset = by_split(records, cfg.eval.probe_split)
    if max(ids) >= len(subset) or min(ids) < 0:
        raise CliError("config", EXIT_CONFIG, f"grid id out of range for {len(subset)} records")
    pairs = [(subset[a].pixels(), subset[b].pixels()) for a, b in zip(ids[::2], ids[1::2])]
    path = out / f"grid_{cfg.eval.grid_mode}.png"
    generation_grid(model, pairs, cfg.eval.grid_mode, path, alphas=cfg.eval.alphas, shuffle_mode=cfg.mode)
    return {"grid": str(path)}


def cmd_export_embeddings(cfg: RunConfig, out: Path, args) -> dict:
    from .evaluator import export_embeddings, extract_features

    model, records = _trained(cfg)
    written = {}
    for split in ("query", "gallery"):
        subset = by_split(records, split)
        if not subset:
            continue
        feats = extract_features(model, subset, cfg.eval.features)
        path = out / f"embeddings_{cfg.eval.features}_{split}.csv"
        export_embeddings(feats.reshape(len(subset), -1), [r.identity for r in subset], path,
                          [r.camera_id for r in subset])
        written[split] = str(path)
    return written


HANDLERS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "probe": cmd_probe,
    "generate": cmd_generate,
    "export-embeddings": cmd_export_embeddings,
}


def _fail(kind: str, code: int, message: str) -> int:
    sys.stderr.write(json.dumps({"error": kind, "exit_code": code, "message": " ".join(message.split())}) + "\n")
    return code


def main(argv: list[str] | None = None) -> int:
    args, extra = _parser().parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args, extra)
        out = Path(cfg.out)
        write_resolved(cfg, out)
        result = HANDLERS[args.command](cfg, out, args)
        print(json.dumps({"command": args.command, "ok": True, **(result or {})}, sort_keys=True))
        return 0
    except CliError as exc:
        return _fail(exc.kind, exc.code, str(exc))
    except (ConfigKeyError, ConfigError) as exc:
        return _fail("config", EXIT_CONFIG, str(exc))
    except DatasetError as exc:
        return _fail("dataset", EXIT_DATASET, str(exc))
    except CheckpointError as exc:
        return _fail("checkpoint", EXIT_CHECKPOINT, str(exc))
    except TrainingDiverged as exc:
        return _fail("diverged", EXIT_DIVERGED, str(exc))
    except Exception as exc:  # noqa: BLE001 - last-resort machine-readable error
        log.debug("unhandled error", exc_info=True)
        return _fail(type(exc).__name__, EXIT_OTHER, str(exc))


if __name__ == "__main__":
    raise SystemExit(main())
