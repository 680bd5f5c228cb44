"""Staged ViT feature extractor (student at D/2, teacher at D)."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import torch
from torch import nn

from config.settings import BackboneConfig
from core.errors import ConfigurationError, DimensionError
from core.layers import INIT_STD, Adapter, Linear, TransformerBlock

logger = logging.getLogger(__name__)

FREEZE_FRACTIONS = (0.0, 0.75, 1.0)


@dataclass(frozen=True)
class StageOutputs:
    """Token sequences [B, 1+P, dim] after each of the four stages; class token at 0."""

    stages: tuple[torch.Tensor, ...]

    def __post_init__(self) -> None:
        shapes = {tuple(t.shape) for t in self.stages}
        if len(shapes) != 1:
            raise DimensionError(f"stage outputs disagree in shape: {sorted(shapes)}")

    @property
    def final(self) -> torch.Tensor:
        return self.stages[-1]

    def __getitem__(self, index: int) -> torch.Tensor:
        return self.stages[index]

    def __len__(self) -> int:
        return len(self.stages)


class PatchEmbed(nn.Module):
    def __init__(self, cfg: BackboneConfig) -> None:
        super().__init__()
        self.cfg = cfg
        self.proj = Linear(cfg.patch_dim, cfg.embed_dim)
        self.cls_token = nn.Parameter(torch.empty(cfg.embed_dim))
        self.pos_embed = nn.Parameter(torch.empty(cfg.num_tokens, cfg.embed_dim))
        nn.init.trunc_normal_(self.cls_token, std=INIT_STD)
        nn.init.trunc_normal_(self.pos_embed, std=INIT_STD)

    def patchify(self, image: torch.Tensor) -> torch.Tensor:
        """[B, 3, H, W] -> [B, P, 3*p*p], patches in row-major grid order."""
        size, patch = self.cfg.image_size, self.cfg.patch_size
        if image.dim() != 4 or image.shape[1] != 3 or image.shape[-2:] != (size, size):
            raise ConfigurationError(
                f"expected images of shape [B,3,{size},{size}], got {tuple(image.shape)}"
            )
        grid = size // patch
        patches = image.unfold(2, patch, patch).unfold(3, patch, patch)
        patches = patches.permute(0, 2, 3, 1, 4, 5)
        return patches.reshape(image.shape[0], grid * grid, self.cfg.patch_dim)

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        tokens = self.proj(self.patchify(image))
        cls = self.cls_token.expand(tokens.shape[0], 1, -1)
        return torch.cat([cls, tokens], dim=1) + self.pos_embed


class Backbone(nn.Module):
    def __init__(self, cfg: BackboneConfig) -> None:
        super().__init__()
        self.cfg = cfg
        self.patch_embed = PatchEmbed(cfg)
        self.blocks = nn.ModuleList(
            TransformerBlock(cfg.embed_dim, cfg.heads, cfg.mlp_hidden, eps=cfg.ln_eps)
            for _ in range(cfg.depth)
        )
        if cfg.adapter_enabled:
            insert_adapters(self, cfg.adapter_rank)

    def run_stages(self, tokens: torch.Tensor, *, depth: int | None = None) -> StageOutputs:
        """Apply the blocks and record the sequence at every stage boundary.

        ``depth`` truncates the run; stages past the truncation repeat the
        last computed sequence.
        """
        limit = self.cfg.depth if depth is None else depth
        per_stage = self.cfg.blocks_per_stage
        recorded: list[torch.Tensor] = []
        x = tokens
        for index, block in enumerate(self.blocks[:limit], start=1):
            x = block(x)
            if index % per_stage == 0:
                recorded.append(x)
        while len(recorded) < self.cfg.stages:
            recorded.append(x)
        return StageOutputs(tuple(recorded))

    def forward(self, image: torch.Tensor) -> StageOutputs:
        return self.run_stages(self.patch_embed(image))

    def zero_residual_branches(self) -> Backbone:
        for block in self.blocks:
            block.zero_residual_branches()
        return self


def insert_adapters(backbone: Backbone, rank: int) -> Backbone:
    """Attach one zero-initialized bottleneck adapter after every block's MLP."""
    if rank <= 0:
        raise ConfigurationError(f"adapter rank must be positive, got {rank}")
    for block in backbone.blocks:
        block.adapter = Adapter(backbone.cfg.embed_dim, rank)
    logger.debug("Inserted %d adapters of rank %d", len(backbone.blocks), rank)
    return backbone


def freeze_prefix(backbone: Backbone, fraction: float) -> dict[str, bool]:
    """Freeze the patch stem and the first ``fraction * depth`` blocks.

    Adapters inside frozen blocks stay trainable. Returns a name -> trainable
    mask over every backbone parameter.
    """
    if not any(abs(fraction - allowed) < 1e-9 for allowed in FREEZE_FRACTIONS):
        raise ConfigurationError(f"freeze fraction must be one of {FREEZE_FRACTIONS}, got {fraction}")
    frozen_blocks = round(fraction * backbone.cfg.depth)
    mask: dict[str, bool] = {}
    for name, param in backbone.named_parameters():
        trainable = True
        if name.startswith("patch_embed.") and frozen_blocks > 0:
            trainable = False
        elif name.startswith("blocks."):
            block_index = int(name.split(".")[1])
            if block_index < frozen_blocks and ".adapter." not in name:
                trainable = False
        param.requires_grad_(trainable)
        mask[name] = trainable
    logger.info(
        "Froze stem and %d/%d backbone blocks (%d tensors trainable)",
        frozen_blocks,
        backbone.cfg.depth,
        sum(mask.values()),
    )
    return mask


__all__ = [
    "Backbone",
    "FREEZE_FRACTIONS",
    "PatchEmbed",
    "StageOutputs",
    "freeze_prefix",
    "insert_adapters",
]
