"""Command-line interface.

Commands:
    gen-synthetic      write a synthetic dataset (feature-file triples + manifest)
    train              train on a dataset directory, logging losses/metrics
    eval               score a dataset with a checkpoint
    inspect-attention  dump one sample's attention weights and centers as CSV

Any failure exits nonzero and leaves a `.failed` marker in the output
directory so partially written runs are recognisable.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
import traceback
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from . import losses as L
from . import training as tr
from .autodiff import RngState, Tensor, no_grad
from .config import (
    ConfigError,
    RunConfig,
    load_config_file,
    load_synthetic_spec,
    parse_override_value,
    resolve_config,
)
from .data import Dataset, generate, load_dataset, read_sample, write_dataset
from .model import Model
from .scoring import breakdown_export

MODEL_RNG_STREAM = 1
TRAIN_RNG_STREAM = 2

LABEL_NORM_KEYS = ("norm.label_lo", "norm.label_hi")


def main(argv=None) -> int:
    parser = _build_parser()
    args, extra = parser.parse_known_args(argv)
    try:
        overrides = _parse_dotted_overrides(extra)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    out_dir = Path(args.out)
    try:
        args.handler(args, overrides, out_dir)
        return 0
    except Exception as exc:  # noqa: BLE001 - single reporting point for the CLI
        _mark_failed(out_dir, exc)
        print(f"error: {exc}", file=sys.stderr)
        return 1


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lmacnet",
        description="Multimodal action-quality assessment at desk scale.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-synthetic", help="generate a synthetic dataset")
    g.add_argument("--spec", help="JSON file with SyntheticSpec fields (defaults apply)")
    g.add_argument("--out", required=True, help="output dataset directory")
    g.set_defaults(handler=cmd_gen_synthetic)

    t = sub.add_parser("train", help="train a model on a dataset directory")
    t.add_argument("--config", help="run-config JSON (sections data/model/losses/optim/output)")
    t.add_argument("--data", required=True, help="dataset directory (manifest.json + .lmfv files)")
    t.add_argument("--out", required=True, help="run output directory")
    t.add_argument("--log-out", help="JSON-lines metrics stream (default {out}/log.jsonl)")
    t.add_argument("--ckpt-dir", help="checkpoint directory (default {out}/checkpoints)")
    t.add_argument("--modalities", help="comma list, e.g. rgb,flow (alias for --model.modalities)")
    t.set_defaults(handler=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    e.add_argument("--ckpt", required=True, help="checkpoint file (.lmac)")
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--config", help="run config; defaults to config.resolved.json near the checkpoint")
    e.add_argument("--breakdown-out", help="per-sample score breakdowns (default {out}/breakdowns.jsonl)")
    e.set_defaults(handler=cmd_eval)

    i = sub.add_parser("inspect-attention", help="export one sample's attention weights")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--sample", required=True, help="sample stem, e.g. sample00007")
    i.add_argument("--data", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--config", help="run config; defaults to config.resolved.json near the checkpoint")
    i.set_defaults(handler=cmd_inspect_attention)
    return parser


def _parse_dotted_overrides(extra: list[str]) -> dict:
    overrides = {}
    i = 0
    while i < len(extra):
        token = extra[i]
        if not token.startswith("--") or "." not in token:
            raise ConfigError(f"unrecognised argument {token!r}")
        key = token[2:]
        if "=" in key:
            key, raw = key.split("=", 1)
        else:
            i += 1
            if i >= len(extra):
                raise ConfigError(f"override {token!r} is missing a value")
            raw = extra[i]
        overrides[key] = parse_override_value(raw)
        i += 1
    return overrides


def _mark_failed(out_dir: Path, exc: Exception) -> None:
    try:
        if out_dir.exists():
            (out_dir / ".failed").write_text(
                f"{type(exc).__name__}: {exc}\n{traceback.format_exc()}"
            )
    except OSError:
        pass  # reporting the original error matters more


def _clear_failed(out_dir: Path) -> None:
    marker = out_dir / ".failed"
    if marker.exists():
        marker.unlink()


# ---------------------------------------------------------------------------
# commands

def cmd_gen_synthetic(args, overrides, out_dir: Path) -> None:
    if overrides:
        raise ConfigError("gen-synthetic takes no dotted overrides; edit the spec file")
    spec = load_synthetic_spec(args.spec)
    out_dir.mkdir(parents=True, exist_ok=True)
    _clear_failed(out_dir)
    dataset = generate(spec)
    write_dataset(dataset, out_dir)
    (out_dir / "spec.resolved.json").write_text(
        json.dumps(dataclasses.asdict(spec), indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(dataset.samples)} samples "
          f"({len(dataset.train)} train / {len(dataset.test)} test) to {out_dir}")


def _resolve_run_config(config_path, overrides) -> RunConfig:
    document = load_config_file(config_path) if config_path else {}
    return resolve_config(document, overrides)


def _check_dataset_against_config(dataset: Dataset, cfg: RunConfig) -> None:
    if not dataset.samples:
        raise ConfigError("dataset is empty")
    sample = dataset.samples[0]
    for m in cfg.model.modalities:
        if m not in sample.features:
            raise ConfigError(f"dataset lacks modality {m!r} required by the model")
        d_data = sample.features[m].shape[1]
        if d_data != cfg.model.dims[m]:
            raise ConfigError(
                f"model.dims[{m!r}] = {cfg.model.dims[m]} but dataset features have dim {d_data}")


def _save_model(path: Path, model: Model, transform) -> None:
    arrays = model.state_arrays()
    if transform is not None:
        arrays[LABEL_NORM_KEYS[0]] = np.array([transform.lo], dtype=np.float32)
        arrays[LABEL_NORM_KEYS[1]] = np.array([transform.hi], dtype=np.float32)
    ckpt_io.save_checkpoint(path, arrays)


def _load_model(ckpt_path: Path, cfg: RunConfig):
    arrays = ckpt_io.load_checkpoint(ckpt_path)
    transform = None
    if all(k in arrays for k in LABEL_NORM_KEYS):
        from .data import LabelTransform
        transform = LabelTransform(float(arrays.pop(LABEL_NORM_KEYS[0])[0]),
                                   float(arrays.pop(LABEL_NORM_KEYS[1])[0]))
    model = Model.build(cfg.model, RngState(cfg.optim.seed, MODEL_RNG_STREAM))
    model.load_state(arrays)
    return model, transform


def cmd_train(args, overrides, out_dir: Path) -> None:
    if args.modalities:
        overrides = {**overrides, "model.modalities": parse_override_value(args.modalities)}
    cfg = _resolve_run_config(args.config, overrides)

    dataset = load_dataset(args.data, modalities=cfg.model.modalities)
    _check_dataset_against_config(dataset, cfg)

    out_dir.mkdir(parents=True, exist_ok=True)
    _clear_failed(out_dir)
    cfg.echo(out_dir)
    log_path = Path(args.log_out) if args.log_out else (
        Path(cfg.output.log_out) if cfg.output.log_out else out_dir / "log.jsonl")
    ckpt_dir = Path(args.ckpt_dir) if args.ckpt_dir else (
        Path(cfg.output.ckpt_dir) if cfg.output.ckpt_dir else out_dir / "checkpoints")
    ckpt_dir.mkdir(parents=True, exist_ok=True)

    model = Model.build(cfg.model, RngState(cfg.optim.seed, MODEL_RNG_STREAM))

    def on_epoch(mdl, epoch, record):
        _save_model(ckpt_dir / f"epoch{epoch}.lmac", mdl, record.label_transform)

    record = tr.train(
        model, dataset, cfg.optim, cfg.losses,
        RngState(cfg.optim.seed, TRAIN_RNG_STREAM),
        n_tracked=cfg.output.n_tracked_samples,
        on_epoch=on_epoch,
    )

    with log_path.open("w") as fh:
        for step in record.steps:
            line = {k: step[k] for k in ("step", "score", "rank", "sparsity", "consistency", "total")}
            fh.write(json.dumps(line) + "\n")
        for epoch in record.epochs:
            fh.write(json.dumps({"epoch": epoch["epoch"], "spearman": epoch["spearman"]}) + "\n")

    with (out_dir / "attention_centers.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "sample", "modality", "query", "center"])
        for snap in record.snapshots:
            for modality, centers in snap.centers.items():
                for q, center in enumerate(centers):
                    writer.writerow([snap.epoch, snap.stem, modality, q, repr(float(center))])

    with (out_dir / "alignment.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "sample", "pair", "center_distance", "cosine"])
        for row in tr.alignment_metrics(record.snapshots):
            writer.writerow([row["epoch"], row["sample"], row["pair"],
                             repr(row["center_distance"]), repr(row["cosine"])])

    _save_model(out_dir / "model.lmac", model, record.label_transform)
    (out_dir / "metrics.json").write_text(json.dumps({
        "final_test_spearman": record.final_spearman(),
        "epochs": cfg.optim.epochs,
        "tracked_samples": record.tracked_stems,
    }, indent=2) + "\n")
    print(f"trained {cfg.optim.epochs} epochs; final test spearman "
          f"{record.final_spearman():.4f}; outputs in {out_dir}")


def cmd_eval(args, overrides, out_dir: Path) -> None:
    cfg = _resolve_run_config(args.config or _find_config_near(args.ckpt), overrides)
    dataset = load_dataset(args.data, modalities=cfg.model.modalities)
    _check_dataset_against_config(dataset, cfg)
    model, transform = _load_model(Path(args.ckpt), cfg)

    out_dir.mkdir(parents=True, exist_ok=True)
    _clear_failed(out_dir)
    breakdown_path = Path(args.breakdown_out) if args.breakdown_out else (
        Path(cfg.output.breakdown_out) if cfg.output.breakdown_out else out_dir / "breakdowns.jsonl")

    samples = dataset.samples
    preds = tr.predict_scores(model, samples)
    denorm = transform.invert(preds) if transform is not None else preds

    with (out_dir / "predictions.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["stem", "split", "label", "pred", "pred_denormalized"])
        for s, p, praw in zip(samples, preds, denorm):
            writer.writerow([s.stem, s.split, repr(s.label), repr(float(p)), repr(float(praw))])

    with breakdown_path.open("w") as fh:
        with no_grad():
            for s in samples:
                out = model.forward({m: Tensor(s.features[m]) for m in model.config.modalities})
                rec = {"stem": s.stem}
                if out.breakdown is not None:
                    rec.update(breakdown_export(out.breakdown))
                else:
                    rec["final"] = out.score.item()
                fh.write(json.dumps(rec) + "\n")

    metrics = {}
    for split in ("train", "test"):
        rows = [(p, s.label) for s, p in zip(samples, preds) if s.split == split]
        if len(rows) >= 2:
            metrics[split] = tr.spearman([r[0] for r in rows], [r[1] for r in rows])
    if len(samples) >= 2:
        metrics["all"] = tr.spearman(preds, [s.label for s in samples])
    (out_dir / "metrics.json").write_text(json.dumps({"spearman": metrics}, indent=2) + "\n")
    print(f"evaluated {len(samples)} samples; spearman: "
          + ", ".join(f"{k}={v:.4f}" for k, v in metrics.items()))


def cmd_inspect_attention(args, overrides, out_dir: Path) -> None:
    cfg = _resolve_run_config(args.config or _find_config_near(args.ckpt), overrides)
    model, _ = _load_model(Path(args.ckpt), cfg)
    sample = read_sample(args.data, args.sample, modalities=cfg.model.modalities)

    out_dir.mkdir(parents=True, exist_ok=True)
    _clear_failed(out_dir)
    with no_grad():
        fwd = model.forward({m: Tensor(sample.features[m]) for m in model.config.modalities})
        centers = L.attention_centers({m: b.attention for m, b in fwd.branches.items()},
                                      agg=cfg.losses.center_agg)

    with (out_dir / f"attention_{sample.stem}.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["modality", "layer", "query", "t", "weight"])
        for modality, branch in fwd.branches.items():
            for layer_idx, attn in enumerate(branch.attention):
                weights = attn.data
                for q in range(weights.shape[0]):
                    for t in range(weights.shape[1]):
                        writer.writerow([modality, layer_idx, q, t + 1, repr(float(weights[q, t]))])

    with (out_dir / f"centers_{sample.stem}.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["modality", "query", "center"])
        for modality, values in centers.center_values().items():
            for q, center in enumerate(values):
                writer.writerow([modality, q, repr(float(center))])
    print(f"wrote attention export for {sample.stem} to {out_dir}")


def _find_config_near(ckpt_path) -> Path:
    ckpt_path = Path(ckpt_path)
    for candidate in (ckpt_path.parent / "config.resolved.json",
                      ckpt_path.parent.parent / "config.resolved.json"):
        if candidate.exists():
            return candidate
    raise ConfigError(
        f"no --config given and no config.resolved.json found near {ckpt_path}")


if __name__ == "__main__":
    sys.exit(main())
