#!/usr/bin/env python3
"""Run the full toy pipeline end to end: data, both training stages, extraction, index, eval."""

from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
from pathlib import Path

REPO_ROOT = Path(__file__).resolve().parents[1]
if str(REPO_ROOT) not in sys.path:
    sys.path.insert(0, str(REPO_ROOT))

DEFAULT_CONFIG = REPO_ROOT / "config" / "presets" / "toy.yaml"


def parse_args() -> argparse.Namespace:
    parser = argparse.ArgumentParser(description="Chain every run_vpr stage on the toy preset.")
    parser.add_argument("--config", type=Path, default=DEFAULT_CONFIG)
    parser.add_argument("--workdir", type=Path, default=Path("runs/toy"))
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--pca-dim", type=int, default=0, help="Reduce descriptors with PCA when > 0.")
    parser.add_argument(
        "--no-encoder", action="store_true", help="Extract descriptors without the cross-image encoder."
    )
    return parser.parse_args()


def stages(args: argparse.Namespace) -> list[list[str]]:
    common = ["--config", str(args.config), "--workdir", str(args.workdir), "--seed", str(args.seed)]
    if args.no_encoder:
        common += ["--set", "eval.use_encoder=false"]
    plan = [
        ["gen-data"],
        ["train-distill"],
        ["train-finetune"],
        ["extract"],
    ]
    descriptors = "descriptors"
    if args.pca_dim > 0:
        common += ["--set", f"eval.pca_dim={args.pca_dim}"]
        plan += [["pca-fit"], ["pca-apply"]]
        descriptors = "descriptors_pca"
    plan += [["index-build", "--descriptors", descriptors], ["eval", "--descriptors", descriptors]]
    return [[sys.executable, str(REPO_ROOT / "scripts" / "run_vpr.py"), *step, *common] for step in plan]


def main() -> int:
    args = parse_args()
    env = os.environ.copy()
    env.setdefault("PYTHONHASHSEED", str(args.seed))
    for cmd in stages(args):
        result = subprocess.run(cmd, env=env)
        if result.returncode != 0:
            print(f"[!] Stage '{cmd[2]}' exited with code {result.returncode}")
            return result.returncode
    report_path = args.workdir / "reports" / "recall.json"
    report = json.loads(report_path.read_text(encoding="utf-8"))
    recalls = list(report["recall"].values())
    print(json.dumps(report["recall"], indent=2))
    if recalls != sorted(recalls):
        print("[!] Recall is not monotone in N")
        return 4
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
