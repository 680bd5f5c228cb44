"""Analytic parameter counts and FLOPs estimates, compared against published figures.

All counts come from configuration arithmetic; ``live_breakdown`` repeats the
grouping on an instantiated model so the two can be cross-checked.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import pandas as pd
from torch import nn

from config.settings import (
    NUM_REGIONS,
    PAPER_REFERENCE,
    BackboneConfig,
    EncoderConfig,
    ModelConfig,
    PaperReference,
)
from core.errors import ConfigurationError

logger = logging.getLogger(__name__)

COMPONENTS = ("adapter", "backbone", "drm", "aggregator", "encoder")
FLOP_CONVENTIONS = ("profiler", "strict")
# strict convention: cost per softmax / layer-norm element
NORM_FLOPS_PER_ELEMENT = 5


@dataclass(frozen=True)
class ComponentBreakdown:
    counts: dict[str, int]

    def __post_init__(self) -> None:
        unknown = set(self.counts) - set(COMPONENTS)
        if unknown:
            raise ConfigurationError(f"unknown component(s) {sorted(unknown)}")

    @property
    def total_no_encoder(self) -> int:
        return sum(v for k, v in self.counts.items() if k != "encoder")

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def rows(self) -> dict[str, int]:
        return {**self.counts, "total_no_encoder": self.total_no_encoder, "total": self.total}


def _linear(in_dim: int, out_dim: int) -> int:
    return in_dim * out_dim + out_dim


def _block_params(dim: int, hidden: int) -> int:
    return 4 * dim + _linear(dim, 3 * dim) + _linear(dim, dim) + _linear(dim, hidden) + _linear(hidden, dim)


def backbone_params(cfg: BackboneConfig) -> int:
    stem = _linear(cfg.patch_dim, cfg.embed_dim) + cfg.embed_dim + cfg.num_tokens * cfg.embed_dim
    return stem + cfg.depth * _block_params(cfg.embed_dim, cfg.mlp_hidden)


def adapter_params(cfg: BackboneConfig) -> int:
    if not cfg.adapter_enabled:
        return 0
    return cfg.depth * (_linear(cfg.embed_dim, cfg.adapter_rank) + _linear(cfg.adapter_rank, cfg.embed_dim))


def encoder_params(cfg: EncoderConfig) -> int:
    return cfg.layers * _block_params(cfg.model_dim, cfg.ff_dim)


def count_params(cfg: ModelConfig) -> ComponentBreakdown:
    dim = cfg.feature_dim
    agg = cfg.aggregator
    student = cfg.student
    drm_in = student.stages * student.embed_dim if cfg.use_drm else student.embed_dim
    channels = agg.generator_channels
    generator = (2 * dim * channels + channels) + (channels * 4 * 9 + 4)
    fusion = 2 * _linear(dim, dim)
    pos_embed = sum(_linear(4 * g * g, dim) for g in agg.grid_sizes)
    return ComponentBreakdown(
        counts={
            "adapter": adapter_params(student),
            "backbone": backbone_params(student),
            "drm": _linear(drm_in, dim),
            "aggregator": generator + 3 + fusion + pos_embed,
            "encoder": encoder_params(cfg.encoder),
        }
    )


def live_breakdown(model: nn.Module) -> ComponentBreakdown:
    """Group the parameters of an instantiated student the same way ``count_params`` does."""
    counts = dict.fromkeys(COMPONENTS, 0)
    for name, param in model.named_parameters():
        if name.startswith("backbone."):
            key = "adapter" if ".adapter." in name else "backbone"
        elif name.startswith("drm."):
            key = "drm"
        elif name.startswith("aggregator."):
            key = "aggregator"
        elif name.startswith("encoder."):
            key = "encoder"
        else:
            raise ConfigurationError(f"parameter '{name}' belongs to no known component")
        counts[key] += param.numel()
    return ComponentBreakdown(counts=counts)


@dataclass(frozen=True)
class FlopsReport:
    macs: dict[str, int]
    norm_elements: int
    batch: int
    convention: str = "profiler"
    elementwise: dict[str, int] = field(default_factory=dict)

    @property
    def total_macs(self) -> int:
        return sum(self.macs.values())

    @property
    def flops(self) -> int:
        if self.convention == "profiler":
            return self.total_macs
        elementwise = sum(self.elementwise.values())
        return 2 * self.total_macs + NORM_FLOPS_PER_ELEMENT * self.norm_elements + elementwise

    @property
    def flops_per_image(self) -> float:
        return self.flops / self.batch


def _transformer_macs(tokens: int, dim: int, hidden: int, seq_len: int) -> int:
    """Projections over ``tokens`` rows plus attention within sequences of ``seq_len``."""
    projections = tokens * (3 * dim * dim + dim * dim + 2 * dim * hidden)
    attention = 2 * tokens * seq_len * dim
    return projections + attention


def estimate_flops(
    cfg: ModelConfig,
    *,
    image_size: int | None = None,
    with_encoder: bool = False,
    batch: int = 1,
    convention: str = "profiler",
) -> FlopsReport:
    """Closed-form cost of one forward pass over ``batch`` images.

    ``profiler`` reports multiply-accumulates as FLOPs and ignores elementwise
    work. ``strict`` counts 2 FLOPs per MAC, 5 per softmax or layer-norm
    element, and 4 per bilinear sample per channel.
    """
    if convention not in FLOP_CONVENTIONS:
        raise ConfigurationError(f"FLOP convention must be one of {FLOP_CONVENTIONS}, got '{convention}'")
    if batch < 1:
        raise ConfigurationError(f"batch must be positive, got {batch}")
    student = cfg.student
    size = image_size or student.image_size
    if size % student.patch_size != 0:
        raise ConfigurationError(f"image_size {size} is not divisible by patch_size {student.patch_size}")
    grid = size // student.patch_size
    patches = grid * grid
    tokens = patches + 1
    d, dim = student.embed_dim, cfg.feature_dim
    agg = cfg.aggregator

    macs = {
        "patch_embed": batch * patches * student.patch_dim * d,
        "backbone": batch * student.depth * _transformer_macs(tokens, d, student.mlp_hidden, tokens),
        "adapter": (
            batch * student.depth * tokens * 2 * d * student.adapter_rank if student.adapter_enabled else 0
        ),
        "drm": batch * tokens * (student.stages * d if cfg.use_drm else d) * dim,
        "generator": batch * patches * (2 * dim * agg.generator_channels + agg.generator_channels * 4 * 9),
        "fusion": batch * 5 * dim * dim,
        "pos_embed": batch * sum(n * 4 * g * g * dim for n, g in zip((1, 4, 9), agg.grid_sizes)),
    }
    norm_elements = batch * student.depth * (2 * tokens * d + student.heads * tokens * tokens)
    samples = sum(n * g * g for n, g in zip((1, 4, 9), agg.grid_sizes))
    elementwise = {"grid_sample": batch * samples * (4 * dim + 4 * 4)}
    if with_encoder and cfg.encoder.enabled:
        enc = cfg.encoder
        slots = NUM_REGIONS * batch
        macs["encoder"] = enc.layers * _transformer_macs(slots, enc.model_dim, enc.ff_dim, batch)
        norm_elements += enc.layers * NUM_REGIONS * (2 * batch * enc.model_dim + enc.heads * batch * batch)
    return FlopsReport(
        macs=macs, norm_elements=norm_elements, batch=batch, convention=convention, elementwise=elementwise
    )


def comparison_table(
    cfg: ModelConfig,
    reference: PaperReference = PAPER_REFERENCE,
    *,
    image_size: int = 224,
    convention: str = "profiler",
) -> pd.DataFrame:
    """Rows: component, count, published value, relative error (NaN where nothing is published)."""
    rows = []
    for name, count in count_params(cfg).rows().items():
        paper = reference.params.get(name)
        rows.append({"component": name, "count": float(count), "paper": paper})
    for key, with_encoder in (("no_encoder", False), ("encoder", True)):
        report = estimate_flops(cfg, image_size=image_size, with_encoder=with_encoder, convention=convention)
        rows.append(
            {"component": f"flops_{key}", "count": report.flops_per_image, "paper": reference.flops.get(key)}
        )
    table = pd.DataFrame(rows)
    table["rel_error"] = (table["count"] - table["paper"]).abs() / table["paper"]
    return table


def to_markdown(table: pd.DataFrame) -> str:
    header = "| component | count | paper | rel. error |"
    lines = [header, "|---|---:|---:|---:|"]
    for row in table.itertuples(index=False):
        paper = "-" if pd.isna(row.paper) else f"{row.paper:,.0f}"
        err = "-" if pd.isna(row.rel_error) else f"{100 * row.rel_error:.2f}%"
        lines.append(f"| {row.component} | {row.count:,.0f} | {paper} | {err} |")
    return "\n".join(lines) + "\n"


def write_comparison(table: pd.DataFrame, out_dir: str | Path) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path, md_path = out / "analysis.csv", out / "analysis.md"
    table.to_csv(csv_path, index=False)
    md_path.write_text(to_markdown(table), encoding="utf-8")
    logger.info("Wrote analysis table to %s and %s", csv_path, md_path)
    return csv_path, md_path


__all__ = [
    "COMPONENTS",
    "ComponentBreakdown",
    "FLOP_CONVENTIONS",
    "FlopsReport",
    "comparison_table",
    "count_params",
    "estimate_flops",
    "live_breakdown",
    "to_markdown",
    "write_comparison",
]
