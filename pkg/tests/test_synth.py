from __future__ import annotations

import numpy as np
import pytest
import torch

from core.errors import ConfigurationError
from core.metrics import recall_at_n
from core.model import build_student
from core.retrieval import GroundTruthMode, build_index, ground_truth_matrix, search_topk
from core.synth import SynthConfig, synth_dataset_gen


def _evaluate(data, vectors, mode=GroundTruthMode.geo(25.0)):
    db_idx, q_idx = data.split_indices("database"), data.split_indices("query")
    index = build_index([data.records[i].id for i in db_idx], vectors[db_idx])
    results = search_topk(index, vectors[q_idx], 10)
    return recall_at_n(
        results, [data.records[i] for i in q_idx], [data.records[i] for i in db_idx], mode
    )


def test_same_seed_same_bytes() -> None:
    cfg = SynthConfig(num_places=4, images_per_place=3, seed=7)
    a, b = synth_dataset_gen(cfg), synth_dataset_gen(cfg)
    assert a.images.tobytes() == b.images.tobytes()
    assert a.records == b.records
    assert synth_dataset_gen(SynthConfig(num_places=4, images_per_place=3, seed=8)).images.tobytes() != a.images.tobytes()


def test_layout_and_splits() -> None:
    data = synth_dataset_gen(SynthConfig(num_places=5, images_per_place=4))
    assert data.images.shape == (20, 3, 56, 56)
    assert data.images.dtype == np.float32
    assert len(data.split_indices("database")) == 5
    assert len(data.split_indices("query")) == 5
    assert len(data.split_indices("train")) == 10
    assert data.records[6].id == "p0001_i02"
    assert data.records[6].tensor == "images/p0001_i02.dtns"


def test_geometry_separates_places() -> None:
    data = synth_dataset_gen(SynthConfig(num_places=9, images_per_place=3))
    records = data.records
    truth = ground_truth_matrix(records, records, GroundTruthMode.geo(25.0))
    same_place = np.array([[a.place_id == b.place_id for b in records] for a in records])
    assert np.array_equal(truth, same_place)
    for a in records:
        for b in records:
            if a.place_id == b.place_id:
                assert np.hypot(a.easting - b.easting, a.northing - b.northing) <= 8.0
            else:
                assert np.hypot(a.easting - b.easting, a.northing - b.northing) >= 100.0 - 8.0


def test_config_validation() -> None:
    with pytest.raises(ConfigurationError):
        SynthConfig(images_per_place=1)
    with pytest.raises(ConfigurationError):
        SynthConfig(image_size=50)
    with pytest.raises(ConfigurationError):
        SynthConfig(spacing_m=60.0)


def test_noiseless_images_repeat_within_place() -> None:
    data = synth_dataset_gen(SynthConfig(num_places=4, images_per_place=3).noiseless())
    assert np.array_equal(data.images[0], data.images[1])
    assert not np.array_equal(data.images[0], data.images[3])


def test_noiseless_set_gives_full_recall_for_untrained_model(toy_model_cfg) -> None:
    data = synth_dataset_gen(SynthConfig(num_places=6, images_per_place=2).noiseless())
    model = build_student(toy_model_cfg, seed=0).eval()
    with torch.no_grad():
        vectors = model(torch.from_numpy(data.images), use_encoder=False).double().numpy()
    vectors /= np.linalg.norm(vectors, axis=1, keepdims=True)
    assert _evaluate(data, vectors).recalls[1] == 100.0


def test_pixel_nearest_neighbour_floor() -> None:
    data = synth_dataset_gen(SynthConfig())
    flat = data.images.reshape(len(data.images), -1).astype(np.float64)
    flat -= flat.mean(axis=1, keepdims=True)
    flat /= np.linalg.norm(flat, axis=1, keepdims=True)
    assert _evaluate(data, flat).recalls[1] > 80.0
