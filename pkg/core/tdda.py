"""Class-token-conditioned deformable region aggregation.

Map coordinates are continuous over ``[0, W] x [0, H]`` (pixel ``c`` covers
``[c, c + 1]`` with its center at ``c + 0.5``). Sampling converts them to the
align-corners normalized space of :func:`core.numerics.grid_sample_bilinear`.

Regions are kept in canonical order: global, the 2x2 medium regions
row-major, then the 3x3 small regions row-major.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import torch
from torch import nn

from config.settings import NUM_REGIONS, AggregatorConfig
from core import numerics
from core.drm import AlignedFeatures
from core.errors import ConfigurationError, DimensionError
from core.layers import Conv2d, Linear

logger = logging.getLogger(__name__)

LEVELS = ("global", "medium", "small")
LEVEL_SPLITS = {"global": 1, "medium": 2, "small": 3}
MODES = ("deformable", "identity")
MEDIUM_SLICE = slice(1, 5)
SMALL_SLICE = slice(5, 14)


@dataclass(frozen=True)
class RoiSpec:
    level: str
    index: int
    x1: float
    y1: float
    x2: float
    y2: float
    grid: int

    def __post_init__(self) -> None:
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise ConfigurationError(f"degenerate ROI bounds {self.bounds}")

    @property
    def bounds(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    @property
    def center(self) -> tuple[float, float]:
        return ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)

    @property
    def size(self) -> tuple[float, float]:
        return (self.x2 - self.x1, self.y2 - self.y1)

    @property
    def level_index(self) -> int:
        return LEVELS.index(self.level)

    def contains(self, x: float, y: float, tol: float = 0.0) -> bool:
        return self.x1 - tol <= x <= self.x2 + tol and self.y1 - tol <= y <= self.y2 + tol


def build_pyramid_rois(
    map_h: int, map_w: int, grid_sizes: tuple[int, int, int] = (8, 4, 3)
) -> list[RoiSpec]:
    """The 14 pyramid regions, split evenly in continuous map coordinates."""
    if map_h < 3 or map_w < 3:
        raise ConfigurationError(f"feature map {map_h}x{map_w} is smaller than 3x3")
    rois: list[RoiSpec] = []
    for level, grid in zip(LEVELS, grid_sizes):
        splits = LEVEL_SPLITS[level]
        step_x, step_y = map_w / splits, map_h / splits
        for row in range(splits):
            for col in range(splits):
                rois.append(
                    RoiSpec(
                        level=level,
                        index=len(rois),
                        x1=col * step_x,
                        y1=row * step_y,
                        x2=map_w if col == splits - 1 else (col + 1) * step_x,
                        y2=map_h if row == splits - 1 else (row + 1) * step_y,
                        grid=grid,
                    )
                )
    return rois


def base_grid(roi: RoiSpec, *, dtype: torch.dtype = numerics.DEFAULT_DTYPE) -> torch.Tensor:
    """Relative coordinates ``(x_rel, y_rel)`` in [-1, 1], endpoints included: [H', W', 2]."""
    steps = torch.linspace(-1.0, 1.0, roi.grid, dtype=dtype)
    ys, xs = torch.meshgrid(steps, steps, indexing="ij")
    return torch.stack([xs, ys], dim=-1)


def map_to_normalized(coords: torch.Tensor, map_h: int, map_w: int) -> torch.Tensor:
    x = (coords[..., 0] - 0.5) / (map_w - 1) * 2.0 - 1.0
    y = (coords[..., 1] - 0.5) / (map_h - 1) * 2.0 - 1.0
    return torch.stack([x, y], dim=-1)


def fuse_class_token(feature_map: torch.Tensor, class_token: torch.Tensor) -> torch.Tensor:
    """Broadcast the class token over the map and concatenate along channels."""
    batch, dim, height, width = feature_map.shape
    if class_token.shape != (batch, dim):
        raise DimensionError(
            f"class token {tuple(class_token.shape)} does not match feature map {tuple(feature_map.shape)}"
        )
    expanded = class_token[:, :, None, None].expand(batch, dim, height, width)
    return torch.cat([feature_map, expanded], dim=1)


class DeformableGenerator(nn.Module):
    """1x1 conv + GELU + zero-initialized 3x3 conv producing (dx, dy, s_w, s_h)."""

    def __init__(self, dim: int, channels: int) -> None:
        super().__init__()
        self.conv1 = Conv2d(2 * dim, channels, 1)
        self.conv2 = Conv2d(channels, 4, 3, zero_init=True)

    def forward(self, fused: torch.Tensor) -> torch.Tensor:
        return self.conv2(numerics.gelu(self.conv1(fused)))


def deformable_generator(fused: torch.Tensor, generator: DeformableGenerator) -> torch.Tensor:
    return generator(fused)


def _roi_points(roi: RoiSpec, rel: torch.Tensor) -> torch.Tensor:
    cx, cy = roi.center
    w, h = roi.size
    return torch.stack([cx + rel[..., 0] * w / 2.0, cy + rel[..., 1] * h / 2.0], dim=-1)


def sample_roi_params(
    raw_field: torch.Tensor,
    roi: RoiSpec,
    *,
    offset_bound: float = 0.5,
    scale_bound: float = 0.5,
) -> torch.Tensor:
    """Bilinearly sample the raw field on the ROI base grid, then bound it.

    Returns [B, H', W', 4] holding ``(dx, dy, s_w, s_h)`` with
    ``d = offset_bound * tanh(raw)`` and ``s = 1 + scale_bound * tanh(raw)``.
    """
    batch, channels, map_h, map_w = raw_field.shape
    if channels != 4:
        raise DimensionError(f"deformation field must have 4 channels, got {channels}")
    points = _roi_points(roi, base_grid(roi, dtype=raw_field.dtype))
    grid = map_to_normalized(points, map_h, map_w).expand(batch, -1, -1, -1)
    raw = numerics.grid_sample_bilinear(raw_field, grid).permute(0, 2, 3, 1)
    offsets = offset_bound * torch.tanh(raw[..., :2])
    scales = 1.0 + scale_bound * torch.tanh(raw[..., 2:])
    return torch.cat([offsets, scales], dim=-1)


def identity_params(batch: int, roi: RoiSpec, *, dtype: torch.dtype = numerics.DEFAULT_DTYPE) -> torch.Tensor:
    params = torch.zeros(batch, roi.grid, roi.grid, 4, dtype=dtype)
    params[..., 2:] = 1.0
    return params


@dataclass(frozen=True)
class RegionDeformation:
    roi: RoiSpec
    base: torch.Tensor  # [H', W', 2] relative coordinates
    params: torch.Tensor  # [B, H', W', 4]
    grid_map: torch.Tensor  # [B, H', W', 2] map coordinates
    grid: torch.Tensor  # [B, H', W', 2] normalized sampling coordinates

    @property
    def center(self) -> torch.Tensor:
        return self.grid_map.mean(dim=(1, 2))

    @property
    def extent(self) -> torch.Tensor:
        flat = self.grid_map.flatten(1, 2)
        return flat.amax(dim=1) - flat.amin(dim=1)


def deform_grid(params: torch.Tensor, roi: RoiSpec, map_h: int, map_w: int) -> RegionDeformation:
    """``x = x_c + (x_rel * s_w + dx) * w / 2`` and likewise for ``y``."""
    rel = base_grid(roi, dtype=params.dtype)
    cx, cy = roi.center
    w, h = roi.size
    x = cx + (rel[..., 0] * params[..., 2] + params[..., 0]) * w / 2.0
    y = cy + (rel[..., 1] * params[..., 3] + params[..., 1]) * h / 2.0
    grid_map = torch.stack([x, y], dim=-1)
    return RegionDeformation(
        roi=roi,
        base=rel,
        params=params,
        grid_map=grid_map,
        grid=map_to_normalized(grid_map, map_h, map_w),
    )


def pool_region(
    feature_map: torch.Tensor, deformation: RegionDeformation, p: torch.Tensor, eps: float = 1e-6
) -> torch.Tensor:
    return numerics.gem_pool(numerics.grid_sample_bilinear(feature_map, deformation.grid), p, eps)


@dataclass(frozen=True)
class RegionDescriptorSet:
    descriptors: torch.Tensor  # [B, 14, D] in canonical order
    gem_p: tuple[float, float, float]
    deformations: tuple[RegionDeformation, ...]

    def __post_init__(self) -> None:
        if self.descriptors.dim() != 3 or self.descriptors.shape[1] != NUM_REGIONS:
            raise DimensionError(
                f"expected [B, {NUM_REGIONS}, D] region descriptors, got {tuple(self.descriptors.shape)}"
            )

    def region(self, index: int) -> torch.Tensor:
        return self.descriptors[:, index, :]

    def with_descriptors(self, descriptors: torch.Tensor) -> RegionDescriptorSet:
        return RegionDescriptorSet(descriptors, self.gem_p, self.deformations)


def assign_small_to_medium(
    small_centers: torch.Tensor, medium_rois: list[RoiSpec], *, tol: float = 1e-6
) -> torch.Tensor:
    """Medium index per small region: [B, 9] -> values in 0..3.

    A small region goes to the medium ROI whose original bounds contain its
    deformed center; several containing ROIs (shared borders) or none fall
    back to the nearest original medium center, lowest index first.
    """
    bounds = torch.tensor([roi.bounds for roi in medium_rois], dtype=small_centers.dtype)
    centers = torch.tensor([roi.center for roi in medium_rois], dtype=small_centers.dtype)
    x = small_centers[..., 0:1]
    y = small_centers[..., 1:2]
    inside = (
        (x >= bounds[:, 0] - tol)
        & (x <= bounds[:, 2] + tol)
        & (y >= bounds[:, 1] - tol)
        & (y <= bounds[:, 3] + tol)
    )
    distance = torch.linalg.vector_norm(small_centers[..., None, :] - centers, dim=-1)
    any_inside = inside.any(dim=-1, keepdim=True)
    candidates = torch.where(any_inside, inside, torch.ones_like(inside))
    distance = torch.where(candidates, distance, torch.full_like(distance, float("inf")))
    nearest = distance.min(dim=-1, keepdim=True).values
    tied = distance <= nearest + tol
    order = torch.arange(len(medium_rois)).expand_as(tied)
    return torch.where(tied, order, torch.full_like(order, len(medium_rois))).min(dim=-1).values


class DownTopFusion(nn.Module):
    def __init__(self, dim: int) -> None:
        super().__init__()
        self.medium_proj = Linear(dim, dim)
        self.global_proj = Linear(dim, dim)

    def forward(self, regions: RegionDescriptorSet) -> RegionDescriptorSet:
        return downtop_fuse(regions, self.medium_proj, self.global_proj)


def downtop_fuse(
    regions: RegionDescriptorSet, medium_proj: nn.Module, global_proj: nn.Module
) -> RegionDescriptorSet:
    """Small -> medium, then (fused) medium -> global, each by residual ``Linear(mean)``."""
    desc = regions.descriptors
    medium_rois = [d.roi for d in regions.deformations[MEDIUM_SLICE]]
    small_centers = torch.stack([d.center for d in regions.deformations[SMALL_SLICE]], dim=1)
    assignment = assign_small_to_medium(small_centers.detach(), medium_rois)
    members = nn.functional.one_hot(assignment, num_classes=4).transpose(1, 2).to(desc.dtype)
    counts = members.sum(dim=-1, keepdim=True)
    small_mean = torch.matmul(members, desc[:, SMALL_SLICE, :]) / counts.clamp(min=1.0)
    medium = desc[:, MEDIUM_SLICE, :] + medium_proj(small_mean) * (counts > 0).to(desc.dtype)
    glob = desc[:, 0, :] + global_proj(medium.mean(dim=1))
    fused = torch.cat([glob[:, None, :], medium, desc[:, SMALL_SLICE, :]], dim=1)
    return regions.with_descriptors(fused)


class DeformPosEmbed(nn.Module):
    """One linear per level from the flattened ``(dx, dy, s_w, s_h)`` grid to D."""

    def __init__(self, dim: int, grid_sizes: tuple[int, int, int]) -> None:
        super().__init__()
        self.grid_sizes = tuple(grid_sizes)
        self.levels = nn.ModuleList(Linear(4 * g * g, dim) for g in grid_sizes)

    def forward(self, regions: RegionDescriptorSet) -> RegionDescriptorSet:
        return deform_pos_embed(regions, self.levels)


def deform_pos_embed(regions: RegionDescriptorSet, level_projs: nn.ModuleList) -> RegionDescriptorSet:
    embeddings = []
    for deformation in regions.deformations:
        proj = level_projs[deformation.roi.level_index]
        flat = deformation.params.flatten(1)
        if flat.shape[-1] != proj.in_dim:
            raise ConfigurationError(
                f"{deformation.roi.level} grid gives {flat.shape[-1]} values "
                f"but the embedding expects {proj.in_dim}"
            )
        embeddings.append(proj(flat))
    return regions.with_descriptors(regions.descriptors + torch.stack(embeddings, dim=1))


class DeformableAggregator(nn.Module):
    def __init__(self, cfg: AggregatorConfig) -> None:
        super().__init__()
        self.cfg = cfg
        self.generator = DeformableGenerator(cfg.dim, cfg.generator_channels)
        self.gem_p = nn.Parameter(torch.full((len(LEVELS),), float(cfg.gem_p_init)))
        self.fusion = DownTopFusion(cfg.dim)
        self.pos_embed = DeformPosEmbed(cfg.dim, cfg.grid_sizes)

    def forward(self, aligned: AlignedFeatures, mode: str = "deformable") -> RegionDescriptorSet:
        return aggregate(aligned, self, mode)


def aggregate(
    aligned: AlignedFeatures, aggregator: DeformableAggregator, mode: str = "deformable"
) -> RegionDescriptorSet:
    """Pyramid ROIs -> deformation -> GeM -> down-top fusion -> position embedding."""
    if mode not in MODES:
        raise ConfigurationError(f"aggregation mode must be one of {MODES}, got '{mode}'")
    cfg = aggregator.cfg
    feature_map = aligned.feature_map
    batch, dim, map_h, map_w = feature_map.shape
    if dim != cfg.dim:
        raise DimensionError(
            f"aggregator width {cfg.dim} does not match feature map {tuple(feature_map.shape)}"
        )
    rois = build_pyramid_rois(map_h, map_w, cfg.grid_sizes)

    raw_field = None
    if mode == "deformable":
        raw_field = aggregator.generator(fuse_class_token(feature_map, aligned.class_token))

    deformations: list[RegionDeformation] = []
    pooled: list[torch.Tensor] = []
    for roi in rois:
        if raw_field is None:
            params = identity_params(batch, roi, dtype=feature_map.dtype)
        else:
            params = sample_roi_params(
                raw_field, roi, offset_bound=cfg.offset_bound, scale_bound=cfg.scale_bound
            )
        deformation = deform_grid(params, roi, map_h, map_w)
        deformations.append(deformation)
        p = aggregator.gem_p[roi.level_index : roi.level_index + 1]
        pooled.append(pool_region(feature_map, deformation, p, cfg.gem_eps))

    regions = RegionDescriptorSet(
        descriptors=torch.stack(pooled, dim=1),
        gem_p=tuple(float(v) for v in aggregator.gem_p.detach()),
        deformations=tuple(deformations),
    )
    regions = aggregator.fusion(regions)
    return aggregator.pos_embed(regions)


__all__ = [
    "DeformPosEmbed",
    "DeformableAggregator",
    "DeformableGenerator",
    "DownTopFusion",
    "LEVELS",
    "MODES",
    "RegionDeformation",
    "RegionDescriptorSet",
    "RoiSpec",
    "aggregate",
    "assign_small_to_medium",
    "base_grid",
    "build_pyramid_rois",
    "deform_grid",
    "deform_pos_embed",
    "deformable_generator",
    "downtop_fuse",
    "fuse_class_token",
    "identity_params",
    "map_to_normalized",
    "pool_region",
    "sample_roi_params",
]
