#!/usr/bin/env python3
"""CLI for the place-recognition pipeline: data, training, extraction, indexing, evaluation."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

REPO_ROOT = Path(__file__).resolve().parents[1]
if str(REPO_ROOT) not in sys.path:  # pragma: no cover - path hack for CLI usage
    sys.path.insert(0, str(REPO_ROOT))

import numpy as np
import torch

from config.settings import OptimizerConfig, resolve_model_preset
from core.analysis import comparison_table, to_markdown, write_comparison
from core.errors import DataError, VprError
from core.metrics import recall_at_n, write_report
from core.model import PlaceModel, build_student, build_teacher
from core.numerics import ensure_finite, seed_everything
from core.pca import PcaModel, pca_apply, pca_fit
from core.retrieval import (
    GroundTruthMode,
    PlaceRecord,
    build_index,
    read_manifest,
    search_topk,
    split_records,
    write_manifest,
)
from core.run_config import RunConfig, load_run_config
from core.synth import SynthConfig, synth_dataset_gen
from core.tensor_io import load_into, read_checkpoint, read_tensor, write_checkpoint, write_tensor
from core.training import TeacherOracle, distill_stage, finetune_stage, write_loss_curve

logger = logging.getLogger("run_vpr")

COMMANDS = (
    "gen-data",
    "train-distill",
    "train-finetune",
    "extract",
    "pca-fit",
    "pca-apply",
    "index-build",
    "eval",
    "analyze",
)


def parse_args(argv: list[str] | None = None) -> argparse.Namespace:
    parser = argparse.ArgumentParser(description="Run one stage of the place-recognition pipeline.")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", type=str, default=None, help="YAML or JSON run configuration.")
    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="SECTION.KEY=VALUE",
        help="Override one configuration value (repeatable).",
    )
    parser.add_argument("--seed", type=int, default=None, help="Shortcut for --set seed=N.")
    parser.add_argument("--workdir", type=str, default=None, help="Shortcut for --set workdir=PATH.")
    parser.add_argument(
        "--checkpoint", type=str, default=None, help="Checkpoint to load (extract, train-finetune)."
    )
    parser.add_argument(
        "--descriptors",
        type=str,
        default="descriptors",
        help="Descriptor directory under the workdir (pca-fit, pca-apply, index-build, eval).",
    )
    parser.add_argument(
        "--from-scratch", action="store_true", help="train-finetune without a distilled start."
    )
    parser.add_argument(
        "--preset", type=str, default=None, help="analyze: model preset (defaults to config)."
    )
    parser.add_argument(
        "--plot", action="store_true", help="Also write loss-curve PNGs when matplotlib is available."
    )
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    return parser.parse_args(argv)


def _resolve_config(args: argparse.Namespace) -> RunConfig:
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.workdir is not None:
        overrides.append(f"workdir={args.workdir}")
    return load_run_config(args.config, overrides)


def _model_config(cfg: RunConfig):
    return resolve_model_preset(cfg.model.preset, use_drm=cfg.model.use_drm)


def _load_images(workdir: Path, records: list[PlaceRecord]) -> torch.Tensor:
    arrays = []
    for record in records:
        if not record.tensor:
            raise DataError(f"manifest record {record.id} has no tensor path")
        arrays.append(read_tensor(workdir / record.tensor))
    return torch.from_numpy(np.stack(arrays).astype(np.float32))


def _records(workdir: Path) -> list[PlaceRecord]:
    return read_manifest(workdir / "manifest.jsonl")


def _student(cfg: RunConfig, checkpoint: Path | None) -> PlaceModel:
    model = build_student(_model_config(cfg), seed=cfg.seed, aggregator_mode=cfg.model.aggregator_mode)
    if checkpoint is not None:
        load_into(model, read_checkpoint(checkpoint), source=str(checkpoint))
        logger.info("Loaded student weights from %s", checkpoint)
    return model


def cmd_gen_data(cfg: RunConfig, args: argparse.Namespace) -> int:
    workdir = Path(cfg.workdir)
    model_cfg = _model_config(cfg)
    synth = SynthConfig(
        num_places=cfg.data.num_places,
        images_per_place=cfg.data.images_per_place,
        image_size=model_cfg.student.image_size,
        shift_px=cfg.data.shift_px,
        brightness=cfg.data.brightness,
        noise_std=cfg.data.noise_std,
        seed=cfg.seed,
    )
    dataset = synth_dataset_gen(synth)
    for image, record in zip(dataset.images, dataset.records):
        write_tensor(workdir / record.tensor, image)
    write_manifest(dataset.records, workdir / "manifest.jsonl")
    print(f"Wrote {len(dataset.records)} images and manifest to {workdir}")
    return 0


def cmd_train_distill(cfg: RunConfig, args: argparse.Namespace) -> int:
    workdir = Path(cfg.workdir)
    records = split_records(_records(workdir), "train")
    images = _load_images(workdir, records)
    model_cfg = _model_config(cfg)
    student = _student(cfg, Path(args.checkpoint) if args.checkpoint else None)
    teacher = TeacherOracle.in_process(build_teacher(model_cfg, seed=cfg.seed + 1))
    result = distill_stage(
        student,
        teacher,
        images,
        epochs=cfg.distill.epochs,
        batch_size=cfg.distill.batch_size,
        optimizer=OptimizerConfig(kind="adam", lr=cfg.distill.lr),
        target=cfg.distill.target,
        seed=cfg.seed,
    )
    write_checkpoint(workdir / "checkpoints" / "distill.dckp", result.state)
    write_loss_curve(result.curve, workdir / "checkpoints" / "distill_loss.csv", plot=args.plot)
    print(f"Distillation loss {result.initial_loss:.6f} -> {result.final_loss:.6f}")
    return 0


def cmd_train_finetune(cfg: RunConfig, args: argparse.Namespace) -> int:
    workdir = Path(cfg.workdir)
    records = split_records(_records(workdir), "train")
    images = _load_images(workdir, records)
    checkpoint = None
    if not args.from_scratch:
        checkpoint = Path(args.checkpoint) if args.checkpoint else workdir / "checkpoints" / "distill.dckp"
    student = _student(cfg, checkpoint)
    stage = "baseline" if args.from_scratch else "finetune"
    result = finetune_stage(
        student,
        images,
        [r.place_id for r in records],
        epochs=cfg.finetune.epochs,
        places_per_batch=cfg.finetune.places_per_batch,
        optimizer=OptimizerConfig(kind="adamw", lr=cfg.finetune.lr, weight_decay=cfg.finetune.weight_decay),
        freeze_fraction=cfg.finetune.freeze_fraction,
        use_encoder=cfg.finetune.use_encoder,
        seed=cfg.seed,
        stage=stage,
    )
    write_checkpoint(workdir / "checkpoints" / f"{stage}.dckp", result.state)
    write_loss_curve(result.curve, workdir / "checkpoints" / f"{stage}_loss.csv", plot=args.plot)
    print(f"Fine-tuning loss {result.initial_loss:.6f} -> {result.final_loss:.6f}")
    return 0


@torch.no_grad()
def cmd_extract(cfg: RunConfig, args: argparse.Namespace) -> int:
    workdir = Path(cfg.workdir)
    checkpoint = Path(args.checkpoint) if args.checkpoint else workdir / "checkpoints" / "finetune.dckp"
    student = _student(cfg, checkpoint)
    student.eval()
    out_dir = workdir / args.descriptors
    records = _records(workdir)
    batch = cfg.eval.batch_size
    count = 0
    for split in ("database", "query"):
        subset = split_records(records, split)
        for start in range(0, len(subset), batch):
            chunk = subset[start : start + batch]
            vectors = student.describe(_load_images(workdir, chunk), use_encoder=cfg.eval.use_encoder).vector
            ensure_finite(vectors, f"descriptors for {chunk[0].id}..{chunk[-1].id}")
            for record, vector in zip(chunk, vectors):
                write_tensor(out_dir / f"{record.id}.dtns", vector)
                count += 1
    print(f"Wrote {count} descriptors to {out_dir} (batch={batch}, encoder={cfg.eval.use_encoder})")
    return 0


def _read_descriptors(directory: Path, records: list[PlaceRecord]) -> np.ndarray:
    return np.stack([read_tensor(directory / f"{r.id}.dtns") for r in records]).astype(np.float64)


def cmd_pca_fit(cfg: RunConfig, args: argparse.Namespace) -> int:
    workdir = Path(cfg.workdir)
    database = split_records(_records(workdir), "database")
    descriptors = _read_descriptors(workdir / args.descriptors, database)
    model = pca_fit(descriptors, cfg.eval.pca_dim, whiten=cfg.eval.whiten)
    write_checkpoint(
        workdir / "pca.dckp",
        {
            "mean": model.mean,
            "components": model.components,
            "explained_variance": model.explained_variance,
            "whiten": np.array([float(model.whiten)]),
        },
    )
    print(f"PCA {model.in_dim} -> {model.out_dim} (whiten={model.whiten})")
    return 0


def cmd_pca_apply(cfg: RunConfig, args: argparse.Namespace) -> int:
    workdir = Path(cfg.workdir)
    tensors = read_checkpoint(workdir / "pca.dckp")
    model = PcaModel(
        mean=tensors["mean"],
        components=tensors["components"],
        explained_variance=tensors["explained_variance"],
        whiten=bool(tensors["whiten"][0]),
    )
    records = split_records(_records(workdir), "database") + split_records(_records(workdir), "query")
    reduced = pca_apply(model, _read_descriptors(workdir / args.descriptors, records))
    out_dir = workdir / f"{args.descriptors}_pca"
    for record, vector in zip(records, reduced):
        write_tensor(out_dir / f"{record.id}.dtns", vector.astype(np.float32))
    print(f"Wrote {len(records)} reduced descriptors to {out_dir}")
    return 0


def cmd_index_build(cfg: RunConfig, args: argparse.Namespace) -> int:
    workdir = Path(cfg.workdir)
    database = split_records(_records(workdir), "database")
    matrix = _read_descriptors(workdir / args.descriptors, database)
    build_index([r.id for r in database], matrix)
    write_checkpoint(workdir / "index.dckp", {r.id: row for r, row in zip(database, matrix)})
    print(f"Indexed {len(database)} database descriptors of width {matrix.shape[1]}")
    return 0


def _ground_truth(cfg: RunConfig) -> GroundTruthMode:
    if cfg.eval.ground_truth == "frame":
        return GroundTruthMode.frame(cfg.eval.frames)
    if cfg.eval.ground_truth == "unique":
        return GroundTruthMode.unique()
    return GroundTruthMode.geo(cfg.eval.dist_m, cfg.eval.heading_deg)


def cmd_eval(cfg: RunConfig, args: argparse.Namespace) -> int:
    workdir = Path(cfg.workdir)
    records = _records(workdir)
    database = split_records(records, "database")
    queries = split_records(records, "query")
    stored = read_checkpoint(workdir / "index.dckp")
    missing = [r.id for r in database if r.id not in stored]
    if missing:
        raise DataError(f"{workdir / 'index.dckp'}: no entry for database record '{missing[0]}'")
    index = build_index([r.id for r in database], np.stack([stored[r.id] for r in database]))
    query_vectors = _read_descriptors(workdir / args.descriptors, queries)
    results = search_topk(index, query_vectors, max(cfg.eval.recall_ns))
    by_id = {r.id: r for r in database}
    ranked_db = [by_id[i] for i in index.ids]
    report = recall_at_n(results, queries, ranked_db, _ground_truth(cfg), cfg.eval.recall_ns)
    reports = workdir / "reports"
    reports.mkdir(parents=True, exist_ok=True)
    write_report(report, reports / "recall.json", reports / "recall.csv")
    print(report.summary())
    return 0


def cmd_analyze(cfg: RunConfig, args: argparse.Namespace) -> int:
    model_cfg = resolve_model_preset(args.preset or cfg.model.preset)
    table = comparison_table(model_cfg)
    write_comparison(table, Path(cfg.workdir) / "reports")
    print(to_markdown(table), end="")
    return 0


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train-distill": cmd_train_distill,
    "train-finetune": cmd_train_finetune,
    "extract": cmd_extract,
    "pca-fit": cmd_pca_fit,
    "pca-apply": cmd_pca_apply,
    "index-build": cmd_index_build,
    "eval": cmd_eval,
    "analyze": cmd_analyze,
}


def main(argv: list[str] | None = None) -> int:
    args = parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, args.log_level),
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
    )
    try:
        cfg = _resolve_config(args)
        seed_everything(cfg.seed)
        return HANDLERS[args.command](cfg, args)
    except VprError as exc:
        print(f"[!] {args.command} failed: {exc}")
        return exc.exit_code


if __name__ == "__main__":
    raise SystemExit(main())
