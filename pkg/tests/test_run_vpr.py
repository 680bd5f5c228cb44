"""End-to-end tests for the run_vpr command line."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from core.errors import ConfigurationError, DataError, NumericFailure, TensorFormatError
from core.tensor_io import read_checkpoint, read_tensor, write_checkpoint, write_tensor
from scripts.run_vpr import main

SMALL = [
    "--set",
    "data.num_places=6",
    "--set",
    "data.images_per_place=4",
    "--set",
    "distill.epochs=1",
    "--set",
    "finetune.epochs=1",
    "--set",
    "finetune.places_per_batch=3",
]


def _run(workdir: Path, *args: str) -> int:
    return main([*args, "--workdir", str(workdir), "--seed", "0", *SMALL, "--log-level", "WARNING"])


def test_exit_codes_follow_error_kind() -> None:
    assert ConfigurationError("x").exit_code == 2
    assert DataError("x").exit_code == 3
    assert TensorFormatError("x").exit_code == 3
    assert NumericFailure("x").exit_code == 4


def test_toy_pipeline_end_to_end(tmp_path: Path) -> None:
    for command in ("gen-data", "train-distill", "train-finetune", "extract", "index-build", "eval"):
        assert _run(tmp_path, command) == 0, command

    assert (tmp_path / "manifest.jsonl").exists()
    assert (tmp_path / "checkpoints" / "distill_loss.csv").exists()
    assert "backbone.blocks.0.fc1.weight" in read_checkpoint(tmp_path / "checkpoints" / "finetune.dckp")
    descriptor = read_tensor(tmp_path / "descriptors" / "p0000_i00.dtns")
    assert descriptor.shape == (14 * 32,)
    assert abs(np.linalg.norm(descriptor) - 1.0) < 1e-5

    report = json.loads((tmp_path / "reports" / "recall.json").read_text(encoding="utf-8"))
    recalls = [report["recall"][f"R@{n}"] for n in (1, 5, 10)]
    assert recalls == sorted(recalls)
    assert report["evaluated"] == 6


def test_pca_and_baseline_commands(tmp_path: Path) -> None:
    for command in ("gen-data", "train-distill"):
        assert _run(tmp_path, command) == 0
    assert _run(tmp_path, "train-finetune", "--from-scratch") == 0
    assert (tmp_path / "checkpoints" / "baseline.dckp").exists()
    checkpoint = str(tmp_path / "checkpoints" / "baseline.dckp")
    assert _run(tmp_path, "extract", "--checkpoint", checkpoint) == 0
    assert _run(tmp_path, "pca-fit", "--set", "eval.pca_dim=4") == 0
    assert _run(tmp_path, "pca-apply") == 0
    reduced = read_tensor(tmp_path / "descriptors_pca" / "p0001_i01.dtns")
    assert reduced.shape == (4,)
    assert _run(tmp_path, "index-build", "--descriptors", "descriptors_pca") == 0
    assert _run(tmp_path, "eval", "--descriptors", "descriptors_pca") == 0


def test_encoder_off_recall_independent_of_batch(tmp_path: Path) -> None:
    for command in ("gen-data", "train-distill", "train-finetune"):
        assert _run(tmp_path, command) == 0
    recalls = []
    for batch in (1, 8):
        opts = ["--set", "eval.use_encoder=false", "--set", f"eval.batch_size={batch}", "--descriptors", f"d{batch}"]
        for command in ("extract", "index-build", "eval"):
            assert _run(tmp_path, command, *opts) == 0
        recalls.append(json.loads((tmp_path / "reports" / "recall.json").read_text(encoding="utf-8"))["recall"])
    assert recalls[0] == recalls[1]
    a = read_tensor(tmp_path / "d1" / "p0002_i01.dtns")
    b = read_tensor(tmp_path / "d8" / "p0002_i01.dtns")
    assert np.allclose(a, b, atol=1e-5)


def test_analyze_paper_preset(tmp_path: Path, capsys) -> None:
    assert _run(tmp_path, "analyze", "--preset", "paper") == 0
    out = capsys.readouterr().out
    assert "| drm | 1,180,416 |" in out
    assert (tmp_path / "reports" / "analysis.csv").exists()


def test_missing_manifest_is_a_data_error(tmp_path: Path, capsys) -> None:
    assert _run(tmp_path, "train-distill") == 3
    assert "manifest not found" in capsys.readouterr().out


def test_corrupted_checkpoint_is_a_data_error(tmp_path: Path) -> None:
    assert _run(tmp_path, "gen-data") == 0
    bad = tmp_path / "bad.dckp"
    bad.write_bytes(b"DCKP\x01\x00\x00\x00\x00garbage")
    assert _run(tmp_path, "extract", "--checkpoint", str(bad)) == 3


def test_bad_config_exits_with_two(tmp_path: Path, capsys) -> None:
    assert _run(tmp_path, "gen-data", "--set", "data.colour=red") == 2
    assert "data.colour" in capsys.readouterr().out
    config = tmp_path / "run.yaml"
    config.write_text("model:\n  preset: enormous\n", encoding="utf-8")
    assert _run(tmp_path, "gen-data", "--config", str(config)) == 2


def test_same_seed_pipelines_are_byte_identical(tmp_path: Path) -> None:
    runs = [tmp_path / "a", tmp_path / "b"]
    for workdir in runs:
        for command in ("gen-data", "train-distill", "train-finetune", "extract", "index-build", "eval"):
            assert _run(workdir, command) == 0, command
    produced = sorted(p.relative_to(runs[0]) for p in runs[0].rglob("*") if p.is_file())
    assert any(p.suffix == ".dckp" for p in produced)
    assert Path("reports/recall.json") in produced
    for rel in produced:
        assert (runs[0] / rel).read_bytes() == (runs[1] / rel).read_bytes(), rel


def test_non_finite_descriptors_exit_with_four(tmp_path: Path, capsys) -> None:
    for command in ("gen-data", "train-distill"):
        assert _run(tmp_path, command) == 0
    state = read_checkpoint(tmp_path / "checkpoints" / "distill.dckp")
    state["backbone.patch_embed.pos_embed"] = np.full_like(state["backbone.patch_embed.pos_embed"], np.nan)
    poisoned = write_checkpoint(tmp_path / "nan.dckp", state)
    assert _run(tmp_path, "extract", "--checkpoint", str(poisoned)) == 4
    assert "non-finite" in capsys.readouterr().out

    checkpoint = str(tmp_path / "checkpoints" / "distill.dckp")
    assert _run(tmp_path, "extract", "--checkpoint", checkpoint) == 0
    target = tmp_path / "descriptors" / "p0000_i00.dtns"
    write_tensor(target, np.full_like(read_tensor(target), np.nan))
    assert _run(tmp_path, "index-build") == 4
