"""Procedural geo-tagged place images for desk-scale training and evaluation."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace

import numpy as np

from core.errors import ConfigurationError
from core.numerics import RngState
from core.retrieval import PlaceRecord

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SynthConfig:
    num_places: int = 32
    images_per_place: int = 6
    image_size: int = 56
    pattern_cells: int = 8
    shift_px: int = 3
    brightness: float = 0.15
    noise_std: float = 0.05
    spacing_m: float = 150.0
    offset_m: float = 4.0
    heading_jitter_deg: float = 10.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.images_per_place < 2:
            raise ConfigurationError(
                f"images_per_place must be at least 2 (database + query), got {self.images_per_place}"
            )
        if self.num_places < 1:
            raise ConfigurationError(f"num_places must be positive, got {self.num_places}")
        if self.image_size % self.pattern_cells != 0:
            raise ConfigurationError(
                f"image_size {self.image_size} is not divisible by pattern_cells {self.pattern_cells}"
            )
        if self.spacing_m < 2 * self.offset_m + 100.0:
            raise ConfigurationError("places must stay at least 100 m apart after intra-place offsets")

    def noiseless(self) -> SynthConfig:
        return replace(self, shift_px=0, brightness=0.0, noise_std=0.0)


@dataclass(frozen=True)
class SynthDataset:
    images: np.ndarray  # [N, 3, H, W] float32
    records: list[PlaceRecord]

    def split_indices(self, split: str) -> list[int]:
        return [i for i, r in enumerate(self.records) if r.split == split]


def _split_for(k: int) -> str:
    if k == 0:
        return "database"
    if k == 1:
        return "query"
    return "train"


def synth_dataset_gen(cfg: SynthConfig = SynthConfig()) -> SynthDataset:
    """Per-place blocky pattern; each image adds a roll shift, brightness jitter and pixel noise.

    Places sit on a square grid ``spacing_m`` apart; images of one place lie
    within ``offset_m`` of the place center. Image 0 of every place goes to
    the database split, image 1 to queries and the rest to training.
    """
    rng = RngState(cfg.seed).numpy_generator()
    cell = cfg.image_size // cfg.pattern_cells
    side = math.ceil(math.sqrt(cfg.num_places))
    images = np.empty(
        (cfg.num_places * cfg.images_per_place, 3, cfg.image_size, cfg.image_size), dtype=np.float32
    )
    records: list[PlaceRecord] = []
    for place in range(cfg.num_places):
        pattern = rng.random((3, cfg.pattern_cells, cfg.pattern_cells))
        pattern = np.kron(pattern, np.ones((1, cell, cell)))
        center_e = (place % side) * cfg.spacing_m
        center_n = (place // side) * cfg.spacing_m
        base_heading = rng.uniform(0.0, 360.0)
        for k in range(cfg.images_per_place):
            dy, dx = rng.integers(-cfg.shift_px, cfg.shift_px + 1, size=2)
            gain = 1.0 + rng.uniform(-cfg.brightness, cfg.brightness)
            noise = rng.normal(0.0, cfg.noise_std, size=pattern.shape) if cfg.noise_std else 0.0
            image = np.roll(pattern, shift=(int(dy), int(dx)), axis=(1, 2)) * gain + noise
            index = place * cfg.images_per_place + k
            images[index] = image.astype(np.float32)

            radius = cfg.offset_m * math.sqrt(rng.random())
            angle = rng.uniform(0.0, 2.0 * math.pi)
            heading = (base_heading + rng.uniform(-cfg.heading_jitter_deg, cfg.heading_jitter_deg)) % 360.0
            image_id = f"p{place:04d}_i{k:02d}"
            records.append(
                PlaceRecord(
                    id=image_id,
                    tensor=f"images/{image_id}.dtns",
                    easting=center_e + radius * math.cos(angle),
                    northing=center_n + radius * math.sin(angle),
                    place_id=f"p{place:04d}",
                    split=_split_for(k),
                    heading=heading,
                    frame_index=place,
                )
            )
    logger.info(
        "Generated %d places x %d images at %dpx (seed=%d)",
        cfg.num_places,
        cfg.images_per_place,
        cfg.image_size,
        cfg.seed,
    )
    return SynthDataset(images=images, records=records)


__all__ = ["SynthConfig", "SynthDataset", "synth_dataset_gen"]
