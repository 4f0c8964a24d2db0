"""Command-line pipeline: synthesize data, train, score, evaluate, sample.

Every command reads one sectioned config file, applies the --out/--seed/
--threads overrides, writes the fully-resolved config next to its
outputs, and exits 0 on success — or nonzero with a one-line diagnostic
on stderr (2 for configuration problems, 1 for runtime failures).
"""
from __future__ import annotations

import argparse
import csv
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import COMMANDS, ConfigError, ResolvedConfig, parse_command_config
from .data import (
    LABELS,
    LesionProfile,
    ManifestError,
    PgmError,
    SynthConfig,
    generate_synthetic,
    load_image,
    load_split,
    read_manifest,
    save_image,
)
from .evaluate import auc, metrics_json, summarize, wavelet_magnitude_score
from .flows import FlowModel, build_glow, flow_log_likelihood, flow_sample
from .train import AugmentConfig, TrainConfig, train
from .waveletflow import WaveletFlowModel, build_waveletflow, score_image, wf_sample

__all__ = ["main"]


def _parse_args(argv):
    parser = argparse.ArgumentParser(
        prog="waveflow",
        description="Wavelet-pyramid flow toolkit for likelihood-based anomaly detection on grayscale images.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    descriptions = {
        "synth": "generate a synthetic lesion-analog dataset",
        "train": "fit a flow on a dataset's train split",
        "score": "per-image likelihood scores for a split, from a checkpoint",
        "eval": "detection metrics (AUC, ROC, histograms) from a score file",
        "baseline": "training-free wavelet-magnitude scores and metrics",
        "sample": "draw images from a trained model",
    }
    for command in COMMANDS:
        p = sub.add_parser(command, help=descriptions[command])
        p.add_argument("--config", required=True, help="path to the run config file")
        p.add_argument("--out", help="output directory (overrides [run] out)")
        p.add_argument("--seed", type=int, help="override the command's seed")
        p.add_argument("--threads", type=int, help="worker cap (overrides [run] threads)")
    return parser.parse_args(argv)


def _profile(cfg: ResolvedConfig, section: str) -> LesionProfile:
    return LesionProfile(
        radius=cfg.get(section, "radius"),
        contrast=cfg.get(section, "contrast"),
        edge_width=cfg.get(section, "edge_width"),
        shading=cfg.get(section, "shading"),
        border_irregularity=cfg.get(section, "border_irregularity"),
        texture=cfg.get(section, "texture"),
        hair_strokes=cfg.get(section, "hair_strokes"),
    )


def cmd_synth(cfg: ResolvedConfig, out_dir: Path) -> None:
    synth = SynthConfig(
        image_size=cfg.get("synth", "image_size"),
        train_in_dist=cfg.get("synth", "train_in_dist"),
        test_in_dist=cfg.get("synth", "test_in_dist"),
        test_ood=cfg.get("synth", "test_ood"),
        in_dist=_profile(cfg, "synth.in_dist"),
        ood=_profile(cfg, "synth.ood"),
        brightness=cfg.get("synth", "brightness"),
        background_gradient=cfg.get("synth", "background_gradient"),
        seed=cfg.get("synth", "seed"),
    )
    generate_synthetic(synth, out_dir, threads=cfg.get("run", "threads"))


def cmd_train(cfg: ResolvedConfig, out_dir: Path) -> None:
    dataset = Path(cfg.get("train", "dataset"))
    manifest = read_manifest(dataset / "manifest.csv")
    images, _ = load_split(manifest, "train")
    size = images.shape[-1]
    seed = cfg.get("training", "seed")
    family = cfg.get("train", "family")
    if family == "waveletflow":
        model: FlowModel | WaveletFlowModel = build_waveletflow(
            size,
            steps_per_level=cfg.get("train", "K"),
            mask_strategy=cfg.get("train", "mask_strategy"),
            hidden=cfg.get("train", "hidden"),
            seed=seed,
        )
    else:
        model = build_glow(
            K=cfg.get("train", "K"),
            L=cfg.get("train", "L"),
            in_channels=1,
            image_size=size,
            mask_strategy=cfg.get("train", "mask_strategy"),
            hidden=cfg.get("train", "hidden"),
            seed=seed,
        )
    augment = None
    if cfg.get("training", "augment"):
        augment = AugmentConfig(
            rotation=cfg.get("training", "rotation"),
            translation=cfg.get("training", "translation"),
            scaling=cfg.get("training", "scaling"),
            shear=cfg.get("training", "shear"),
        )
    train_config = TrainConfig(
        learning_rate=cfg.get("training", "learning_rate"),
        batch_size=cfg.get("training", "batch_size"),
        max_epochs=cfg.get("training", "max_epochs"),
        patience=cfg.get("training", "patience"),
        augment=augment,
        dequantize=cfg.get("training", "dequantize"),
        seed=seed,
    )
    histories = train(model, images, train_config)
    save_checkpoint(model, out_dir / "checkpoint.json")
    with open(out_dir / "history.csv", "w", encoding="ascii", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["component", "epoch", "nll", "bpd", "seconds"])
        for component in sorted(histories):
            for rec in histories[component].records:
                writer.writerow([component, rec.epoch, rec.nll, rec.bpd, rec.seconds])
    summary = {
        component: {
            "best_epoch": h.best_epoch,
            "aborted": h.aborted,
            "best_bpd": min(r.bpd for r in h.records),
            "initial_bpd": h.records[0].bpd,
        }
        for component, h in histories.items()
    }
    (out_dir / "training.json").write_text(metrics_json(summary), encoding="ascii")


def _write_scores(path: Path, rows: list[dict]) -> None:
    level_cols = sorted(
        {k for row in rows for k in row if k.startswith("level_")},
        key=lambda c: int(c.split("_", 1)[1]),
    )
    with open(path, "w", encoding="ascii", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["path", "label", "score", *level_cols])
        for row in rows:
            writer.writerow([row["path"], row["label"], row["score"], *(row[c] for c in level_cols)])


def _read_scores(path: Path) -> list[dict]:
    try:
        with open(path, encoding="ascii", newline="") as fh:
            reader = csv.DictReader(fh)
            raw_rows = list(reader)
            fields = reader.fieldnames
    except OSError as exc:
        raise ValueError(f"cannot read score file {path}: {exc}") from exc
    if not fields or not {"path", "label", "score"} <= set(fields):
        raise ValueError(f"no scores in {path}: expected a path,label,score header")
    if not raw_rows:
        raise ValueError(f"no scores in {path}")
    rows = []
    for raw in raw_rows:
        if raw["label"] not in LABELS:
            raise ValueError(f"no scores usable in {path}: unknown label {raw['label']!r}")
        row = {"path": raw["path"], "label": raw["label"], "score": float(raw["score"])}
        for key, value in raw.items():
            if key.startswith("level_"):
                row[key] = float(value)
        rows.append(row)
    return rows


def _evaluate_rows(rows: list[dict], bins: int, out_dir: Path) -> None:
    nominal = [r["score"] for r in rows if r["label"] == "in_dist"]
    anomalous = [r["score"] for r in rows if r["label"] == "ood"]
    if not nominal or not anomalous:
        raise ValueError(
            f"no scores for both classes (in_dist: {len(nominal)}, ood: {len(anomalous)})"
        )
    payload = summarize(nominal, anomalous, histogram_bins=bins)
    level_cols = sorted(
        {k for row in rows for k in row if k.startswith("level_")},
        key=lambda c: int(c.split("_", 1)[1]),
    )
    if level_cols:
        payload["per_level_auc"] = {
            col: auc(
                [r[col] for r in rows if r["label"] == "in_dist"],
                [r[col] for r in rows if r["label"] == "ood"],
            )
            for col in level_cols
        }
    (out_dir / "metrics.json").write_text(metrics_json(payload), encoding="ascii")


def _scoring_pool(records, worker, threads: int) -> list[dict]:
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(worker, records))
    return [worker(rec) for rec in records]


def cmd_score(cfg: ResolvedConfig, out_dir: Path) -> None:
    model = load_checkpoint(cfg.get("score", "checkpoint"))
    manifest = read_manifest(Path(cfg.get("score", "dataset")) / "manifest.csv")
    split = cfg.get("score", "split")
    records = manifest.select(split=split)
    if not records:
        raise ManifestError(f"no records in split {split!r}")

    def worker(rec):
        image = load_image(manifest.image_path(rec))
        if isinstance(model, WaveletFlowModel):
            report = score_image(model, image)
            row = {"path": rec.path, "label": rec.label, "score": report.score}
            for level, bpd in sorted(report.per_level_bpd.items()):
                row[f"level_{level}"] = bpd
            return row
        density = flow_log_likelihood(model, image)
        return {"path": rec.path, "label": rec.label, "score": density.bits_per_dim}

    rows = _scoring_pool(records, worker, cfg.get("run", "threads"))
    _write_scores(out_dir / "scores.csv", rows)


def cmd_eval(cfg: ResolvedConfig, out_dir: Path) -> None:
    rows = _read_scores(Path(cfg.get("eval", "scores")))
    _evaluate_rows(rows, cfg.get("eval", "bins"), out_dir)


def cmd_baseline(cfg: ResolvedConfig, out_dir: Path) -> None:
    manifest = read_manifest(Path(cfg.get("baseline", "dataset")) / "manifest.csv")
    split = cfg.get("baseline", "split")
    records = manifest.select(split=split)
    if not records:
        raise ManifestError(f"no records in split {split!r}")
    levels = list(cfg.get("baseline", "levels")) or None

    def worker(rec):
        report = wavelet_magnitude_score(load_image(manifest.image_path(rec)), levels=levels)
        row = {"path": rec.path, "label": rec.label, "score": report.score}
        for level, magnitude in sorted(report.per_level_magnitude.items()):
            row[f"level_{level}"] = magnitude
        return row

    rows = _scoring_pool(records, worker, cfg.get("run", "threads"))
    _write_scores(out_dir / "scores.csv", rows)
    _evaluate_rows(rows, cfg.get("baseline", "bins"), out_dir)


def cmd_sample(cfg: ResolvedConfig, out_dir: Path) -> None:
    model = load_checkpoint(cfg.get("sample", "checkpoint"))
    rng = np.random.default_rng(cfg.get("sample", "seed"))
    temperature = cfg.get("sample", "temperature")
    for index in range(cfg.get("sample", "count")):
        if isinstance(model, WaveletFlowModel):
            image = wf_sample(model, rng, temperature=temperature)
        else:
            image = flow_sample(model, rng, temperature=temperature)
        save_image(np.clip(image, 0.0, 1.0), out_dir / f"sample_{index:03d}.pgm")


_DISPATCH = {
    "synth": cmd_synth,
    "train": cmd_train,
    "score": cmd_score,
    "eval": cmd_eval,
    "baseline": cmd_baseline,
    "sample": cmd_sample,
}


def main(argv=None) -> int:
    args = _parse_args(argv)
    try:
        cfg = parse_command_config(
            args.command, args.config, out=args.out, seed=args.seed, threads=args.threads
        )
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    try:
        out_dir = Path(cfg.get("run", "out"))
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "config.resolved.ini").write_text(cfg.text(), encoding="utf-8")
        _DISPATCH[args.command](cfg, out_dir)
    except (
        ManifestError,
        PgmError,
        CheckpointError,
        ad.ShapeError,
        ValueError,
        ArithmeticError,
        OSError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
