"""Cross-image encoder and final descriptor assembly."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from config.settings import NUM_REGIONS, EncoderConfig
from core import numerics
from core.errors import ConfigurationError, DimensionError
from core.layers import TransformerBlock
from core.tdda import RegionDescriptorSet


@dataclass(frozen=True)
class Descriptor:
    vector: torch.Tensor  # [B, 14*D], unit rows
    image_ids: tuple[str, ...] = ()
    pca_reduced: bool = False
    pca_dim: int | None = None

    @property
    def dim(self) -> int:
        return int(self.vector.shape[-1])


class CrossImageEncoder(nn.Module):
    """Pre-norm transformer layers attending across the images of a batch, per region slot."""

    def __init__(self, cfg: EncoderConfig) -> None:
        super().__init__()
        self.cfg = cfg
        self.layers = nn.ModuleList(
            TransformerBlock(cfg.model_dim, cfg.heads, cfg.ff_dim, eps=cfg.ln_eps)
            for _ in range(cfg.layers)
        )

    def forward(self, regions: RegionDescriptorSet) -> RegionDescriptorSet:
        return cross_image_encode(regions, self)


def cross_image_encode(regions: RegionDescriptorSet, encoder: CrossImageEncoder) -> RegionDescriptorSet:
    desc = regions.descriptors
    if desc.shape[-1] != encoder.cfg.model_dim:
        raise ConfigurationError(
            f"encoder width {encoder.cfg.model_dim} does not match region descriptors {tuple(desc.shape)}"
        )
    # [B, 14, D] -> [14, B, D]: each slot is a sequence over the batch.
    x = desc.transpose(0, 1)
    for layer in encoder.layers:
        x = layer(x)
    return regions.with_descriptors(x.transpose(0, 1))


def assemble_descriptor(
    regions: RegionDescriptorSet,
    encoder: CrossImageEncoder | None = None,
    *,
    use_encoder: bool = True,
    image_ids: tuple[str, ...] = (),
) -> Descriptor:
    """Optionally encode, flatten the 14 slots in canonical order and L2-normalize."""
    if use_encoder and encoder is not None and encoder.cfg.enabled:
        regions = cross_image_encode(regions, encoder)
    desc = regions.descriptors
    if desc.shape[1] != NUM_REGIONS:
        raise DimensionError(f"expected {NUM_REGIONS} region slots, got {desc.shape[1]}")
    vector = numerics.l2_normalize(desc.flatten(1))
    return Descriptor(vector=vector, image_ids=tuple(image_ids))


__all__ = ["CrossImageEncoder", "Descriptor", "assemble_descriptor", "cross_image_encode"]
