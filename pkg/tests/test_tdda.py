from __future__ import annotations

import math

import numpy as np
import pytest
import torch

from config.settings import AggregatorConfig
from core import numerics
from core.drm import AlignedFeatures, tokens_to_map
from core.errors import ConfigurationError, DimensionError
from core.tdda import (
    DeformableAggregator,
    DeformableGenerator,
    RegionDescriptorSet,
    RoiSpec,
    aggregate,
    assign_small_to_medium,
    base_grid,
    build_pyramid_rois,
    deform_grid,
    fuse_class_token,
    identity_params,
    pool_region,
    sample_roi_params,
)


def _aligned(batch=2, dim=8, side=4, seed=0, dtype=torch.float32, positive=False) -> AlignedFeatures:
    g = torch.Generator().manual_seed(seed)
    tokens = torch.randn(batch, 1 + side * side, dim, generator=g, dtype=dtype)
    if positive:
        tokens = tokens.abs() + 0.5
    return tokens_to_map(tokens)


def _bilinear_at_map_point(plane, x, y):
    """Scalar bilinear read of a [H, W] plane at continuous map coordinates (pixel centers at +0.5)."""
    height, width = plane.shape
    px = min(max(x - 0.5, 0.0), width - 1.0)
    py = min(max(y - 0.5, 0.0), height - 1.0)
    x0, y0 = int(math.floor(px)), int(math.floor(py))
    x1, y1 = min(x0 + 1, width - 1), min(y0 + 1, height - 1)
    fx, fy = px - x0, py - y0
    top = plane[y0, x0] * (1 - fx) + plane[y0, x1] * fx
    bottom = plane[y1, x0] * (1 - fx) + plane[y1, x1] * fx
    return float(top * (1 - fy) + bottom * fy)


def test_pyramid_has_fourteen_rois_covering_map() -> None:
    rois = build_pyramid_rois(16, 16)
    assert len(rois) == 14
    assert rois[0].bounds == (0.0, 0.0, 16.0, 16.0)
    assert [r.level for r in rois] == ["global"] + ["medium"] * 4 + ["small"] * 9
    assert all(r.size == (8.0, 8.0) for r in rois[1:5])
    assert all(r.size == pytest.approx((16 / 3, 16 / 3)) for r in rois[5:])
    assert [r.grid for r in (rois[0], rois[1], rois[5])] == [8, 4, 3]


def test_fifteen_map_small_rois_are_five_wide() -> None:
    rois = build_pyramid_rois(15, 15)
    assert all(r.size == (5.0, 5.0) for r in rois[5:])
    assert rois[6].bounds == (5.0, 0.0, 10.0, 5.0)


def test_pyramid_rejects_small_maps() -> None:
    with pytest.raises(ConfigurationError):
        build_pyramid_rois(2, 5)


def test_fuse_class_token_broadcast() -> None:
    aligned = _aligned()
    fused = fuse_class_token(aligned.feature_map, torch.zeros_like(aligned.class_token))
    assert fused.shape == (2, 16, 4, 4)
    assert torch.equal(fused[:, :8], aligned.feature_map)
    assert torch.equal(fused[:, 8:], torch.zeros(2, 8, 4, 4))
    fused = fuse_class_token(aligned.feature_map, aligned.class_token)
    assert torch.equal(fused[:, 8:, 0, 0], fused[:, 8:, 3, 2])


def test_fuse_class_token_dim_mismatch() -> None:
    aligned = _aligned()
    with pytest.raises(DimensionError):
        fuse_class_token(aligned.feature_map, torch.zeros(2, 5))


def test_generator_is_zero_at_init() -> None:
    torch.manual_seed(0)
    generator = DeformableGenerator(8, 4)
    out = generator(torch.randn(2, 16, 4, 4))
    assert out.shape == (2, 4, 4, 4)
    assert torch.equal(out, torch.zeros_like(out))


def test_paper_generator_parameter_count() -> None:
    generator = DeformableGenerator(768, 64)
    assert sum(p.numel() for p in generator.parameters()) == 1536 * 64 + 64 + 9 * 64 * 4 + 4


def test_zero_field_gives_identity_params() -> None:
    roi = build_pyramid_rois(4, 4)[3]
    params = sample_roi_params(torch.zeros(2, 4, 4, 4), roi)
    assert torch.equal(params, identity_params(2, roi))


def test_constant_field_gives_constant_params() -> None:
    roi = build_pyramid_rois(6, 6)[7]
    field = torch.tensor([0.3, -0.2, 1.0, -4.0]).view(1, 4, 1, 1).expand(1, 4, 6, 6)
    params = sample_roi_params(field, roi)
    expected = torch.tensor([0.5 * math.tanh(0.3), 0.5 * math.tanh(-0.2), 1 + 0.5 * math.tanh(1.0), 1 + 0.5 * math.tanh(-4.0)])
    assert torch.allclose(params, expected.expand_as(params), atol=1e-6)


def test_sampled_params_match_interpolation_oracle() -> None:
    field = torch.randn(1, 4, 5, 5, generator=torch.Generator().manual_seed(3), dtype=torch.float64)
    for roi in build_pyramid_rois(5, 5):
        params = sample_roi_params(field, roi)
        rel = base_grid(roi, dtype=torch.float64)
        cx, cy = roi.center
        w, h = roi.size
        for i in range(roi.grid):
            for j in range(roi.grid):
                x = cx + float(rel[i, j, 0]) * w / 2
                y = cy + float(rel[i, j, 1]) * h / 2
                raw = [_bilinear_at_map_point(field[0, c], x, y) for c in range(4)]
                expected = [0.5 * math.tanh(raw[0]), 0.5 * math.tanh(raw[1]), 1 + 0.5 * math.tanh(raw[2]), 1 + 0.5 * math.tanh(raw[3])]
                assert params[0, i, j].tolist() == pytest.approx(expected, abs=1e-6)


def test_params_stay_bounded_for_extreme_fields() -> None:
    field = 100.0 * torch.randn(2, 4, 4, 4)
    for roi in build_pyramid_rois(4, 4):
        params = sample_roi_params(field, roi)
        assert params[..., :2].abs().max() <= 0.5
        assert params[..., 2:].min() >= 0.5 and params[..., 2:].max() <= 1.5
        assert torch.isfinite(deform_grid(params, roi, 4, 4).grid).all()


def test_deform_grid_identity_point() -> None:
    roi = RoiSpec(level="medium", index=1, x1=-1.0, y1=-1.0, x2=1.0, y2=1.0, grid=5)
    deformation = deform_grid(identity_params(1, roi), roi, 8, 8)
    assert deformation.grid_map[0, 0, 3, 0].item() == pytest.approx(0.5)
    assert torch.allclose(deformation.grid_map[0], base_grid(roi))


def test_deform_grid_scale_and_offset() -> None:
    roi = RoiSpec(level="medium", index=1, x1=-1.0, y1=-1.0, x2=1.0, y2=1.0, grid=5)
    base = deform_grid(identity_params(1, roi), roi, 8, 8).grid_map
    shrink = identity_params(1, roi)
    shrink[..., 2] = 0.5
    assert torch.allclose(deform_grid(shrink, roi, 8, 8).grid_map[..., 0], 0.5 * base[..., 0])
    shift = identity_params(1, roi)
    shift[..., 0] = 0.5
    moved = deform_grid(shift, roi, 8, 8).grid_map
    assert torch.allclose(moved[..., 0] - base[..., 0], torch.full_like(base[..., 0], 0.5))
    assert torch.allclose(moved[..., 1], base[..., 1])


def test_pool_region_identity_p_one_is_mean_of_samples() -> None:
    aligned = _aligned(positive=True, dtype=torch.float64)
    roi = build_pyramid_rois(4, 4)[0]
    deformation = deform_grid(identity_params(2, roi, dtype=torch.float64), roi, 4, 4)
    samples = numerics.grid_sample_bilinear(aligned.feature_map, deformation.grid)
    pooled = pool_region(aligned.feature_map, deformation, torch.tensor([1.0], dtype=torch.float64))
    assert torch.allclose(pooled, samples.mean(dim=(-2, -1)))


def test_pool_region_matches_composed_oracle() -> None:
    aligned = _aligned(batch=1, positive=True, dtype=torch.float64, seed=4)
    roi = build_pyramid_rois(4, 4)[6]
    params = identity_params(1, roi, dtype=torch.float64)
    params[..., 0] = 0.2
    params[..., 3] = 0.8
    deformation = deform_grid(params, roi, 4, 4)
    p = 2.5
    pooled = pool_region(aligned.feature_map, deformation, torch.tensor([p], dtype=torch.float64))
    for c in range(aligned.feature_map.shape[1]):
        values = [
            _bilinear_at_map_point(aligned.feature_map[0, c], float(pt[0]), float(pt[1]))
            for pt in deformation.grid_map[0].reshape(-1, 2)
        ]
        expected = (sum(v**p for v in values) / len(values)) ** (1 / p)
        assert pooled[0, c].item() == pytest.approx(expected, abs=1e-6)


def test_constant_map_pools_to_constant_for_any_deformation() -> None:
    feature_map = torch.full((1, 3, 4, 4), 0.8, dtype=torch.float64)
    field = torch.randn(1, 4, 4, 4, dtype=torch.float64)
    for roi in build_pyramid_rois(4, 4):
        deformation = deform_grid(sample_roi_params(field, roi), roi, 4, 4)
        pooled = pool_region(feature_map, deformation, torch.tensor([4.0], dtype=torch.float64))
        assert torch.allclose(pooled, torch.full((1, 3), 0.8, dtype=torch.float64))


def _oracle_assignment(center, mediums):
    inside = [m for m, roi in enumerate(mediums) if roi.contains(center[0], center[1], tol=1e-9)]
    candidates = inside or list(range(len(mediums)))
    best, best_d = None, float("inf")
    for m in candidates:
        cx, cy = mediums[m].center
        d = math.hypot(center[0] - cx, center[1] - cy)
        if d < best_d - 1e-9:
            best, best_d = m, d
    return best


def test_identity_assignment_matches_bruteforce_oracle() -> None:
    rois = build_pyramid_rois(6, 6)
    mediums = rois[1:5]
    centers = torch.tensor([[r.center for r in rois[5:]]])
    assigned = assign_small_to_medium(centers, mediums)[0].tolist()
    expected = [_oracle_assignment(c, mediums) for c in centers[0].tolist()]
    assert assigned == expected
    # Corners go to their own corner medium.
    assert [assigned[0], assigned[2], assigned[6], assigned[8]] == [0, 1, 2, 3]


def test_assignment_outside_every_medium_uses_nearest_center() -> None:
    mediums = build_pyramid_rois(4, 4)[1:5]
    centers = torch.tensor([[[-3.0, -3.0], [9.0, 1.0], [1.0, 9.0], [9.0, 9.0], [2.0, 2.0], [1.0, 1.0], [3.0, 1.0], [1.0, 3.0], [3.0, 3.0]]])
    assert assign_small_to_medium(centers, mediums)[0].tolist() == [0, 1, 2, 3, 0, 0, 1, 2, 3]


def _aggregator(dim=8, seed=0) -> DeformableAggregator:
    torch.manual_seed(seed)
    return DeformableAggregator(AggregatorConfig(dim=dim, generator_channels=4))


def test_identity_mode_equals_zero_generator_deformable() -> None:
    aggregator = _aggregator()
    rng = np.random.default_rng(5)
    for case in range(50):
        batch, side = int(rng.integers(1, 4)), int(rng.integers(3, 7))
        aligned = _aligned(batch=batch, side=side, seed=case)
        deformable = aggregate(aligned, aggregator, "deformable").descriptors
        identity = aggregate(aligned, aggregator, "identity").descriptors
        assert deformable.shape == (batch, 14, 8)
        assert (deformable - identity).abs().max().item() < 1e-6, (case, batch, side)


def test_aggregate_rejects_unknown_mode() -> None:
    with pytest.raises(ConfigurationError):
        aggregate(_aligned(), _aggregator(), "random")


def test_zero_fusion_and_pos_embed_leave_pooled_descriptors() -> None:
    aggregator = _aggregator()
    aggregator.fusion.medium_proj.zero_()
    aggregator.fusion.global_proj.zero_()
    for level in aggregator.pos_embed.levels:
        level.zero_()
    aligned = _aligned()
    out = aggregate(aligned, aggregator, "identity")
    for index, deformation in enumerate(out.deformations):
        p = aggregator.gem_p[deformation.roi.level_index : deformation.roi.level_index + 1]
        expected = pool_region(aligned.feature_map, deformation, p)
        assert torch.allclose(out.descriptors[:, index], expected)


def test_identity_pos_embed_constant_within_level() -> None:
    aggregator = _aggregator()
    aggregator.fusion.medium_proj.zero_()
    aggregator.fusion.global_proj.zero_()
    aligned = _aligned(positive=True)
    feature_map = torch.ones_like(aligned.feature_map)
    const = AlignedFeatures(aligned.tokens, feature_map, aligned.class_token)
    out = aggregate(const, aggregator, "identity").descriptors
    assert torch.allclose(out[:, 1], out[:, 4])
    assert torch.allclose(out[:, 5], out[:, 13])


def test_gradients_reach_generator() -> None:
    aggregator = _aggregator()
    aligned = _aligned(positive=True)
    aggregate(aligned, aggregator, "deformable").descriptors.sum().backward()
    assert aggregator.generator.conv2.weight.grad.abs().sum() > 0


def test_region_descriptor_set_rejects_wrong_count() -> None:
    with pytest.raises(DimensionError):
        RegionDescriptorSet(torch.zeros(2, 13, 4), (3.0, 3.0, 3.0), ())


def test_end_to_end_gradient_check_in_float64() -> None:
    aggregator = _aggregator(dim=4, seed=1).double()
    with torch.no_grad():
        aggregator.generator.conv2.weight.normal_(0.0, 0.01)
    aligned = _aligned(batch=1, dim=4, positive=True, dtype=torch.float64, seed=2)

    def run(feature_map, class_token):
        return aggregate(AlignedFeatures(aligned.tokens, feature_map, class_token), aggregator, "deformable").descriptors

    report = numerics.grad_check(run, [aligned.feature_map, aligned.class_token], names=["map", "cls"], tolerance=1e-4)
    assert report.passed, report.max_rel_error


def test_paper_aggregator_parameter_count() -> None:
    aggregator = DeformableAggregator(AggregatorConfig(dim=768))
    total = sum(p.numel() for p in aggregator.parameters())
    assert abs(total - 1.58e6) / 1.58e6 < 0.02
