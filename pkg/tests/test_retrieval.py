from __future__ import annotations

import numpy as np
import pytest

from core.errors import ConfigurationError, DataError, DimensionError, NumericFailure
from core.retrieval import (
    GroundTruthMode,
    PlaceRecord,
    build_index,
    ground_truth_matrix,
    read_manifest,
    search_topk,
    split_records,
    write_manifest,
)


def _record(rid, east=0.0, north=0.0, place="p0", split="database", heading=None, frame=None):
    return PlaceRecord(
        id=rid,
        tensor=f"images/{rid}.dtns",
        easting=east,
        northing=north,
        place_id=place,
        split=split,
        heading=heading,
        frame_index=frame,
    )


def _unit_rows(n, d, seed=0):
    x = np.random.default_rng(seed).normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def test_record_validation() -> None:
    with pytest.raises(DataError):
        _record("a", east=float("nan"))
    with pytest.raises(DataError):
        _record("a", heading=360.0)
    with pytest.raises(DataError):
        _record("a", split="val")


def test_manifest_round_trip(tmp_path) -> None:
    records = [
        _record("q1", 10.5, -3.25, "p1", "query", heading=90.0, frame=4),
        _record("d1", 0.0, 0.0, "p1", "database"),
    ]
    path = write_manifest(records, tmp_path / "manifest.jsonl")
    assert read_manifest(path) == records
    assert split_records(read_manifest(path), "query") == records[:1]


def test_manifest_missing_file_and_field(tmp_path) -> None:
    with pytest.raises(DataError, match="manifest not found"):
        read_manifest(tmp_path / "absent.jsonl")
    broken = tmp_path / "broken.jsonl"
    broken.write_text('{"id": "a", "easting": 0.0, "northing": 0.0, "split": "query"}\n', encoding="utf-8")
    with pytest.raises(DataError, match="place_id"):
        read_manifest(broken)


def test_geo_ground_truth_with_heading() -> None:
    queries = [_record("q", 0.0, 0.0, heading=350.0, split="query")]
    database = [
        _record("near", 20.0, 0.0, heading=20.0),
        _record("turned", 10.0, 0.0, heading=170.0),
        _record("far", 30.0, 0.0, heading=350.0),
        _record("unknown", 5.0, 0.0),
    ]
    assert ground_truth_matrix(queries, database, GroundTruthMode.geo(25.0)).tolist() == [[True, True, False, True]]
    with_heading = ground_truth_matrix(queries, database, GroundTruthMode.geo(25.0, heading_deg=40.0))
    assert with_heading.tolist() == [[True, False, False, True]]


def test_places_far_apart_never_match() -> None:
    queries = [_record("q", 0.0, 0.0, split="query")]
    database = [_record("d", 100.0, 0.0, place="p1")]
    assert not ground_truth_matrix(queries, database, GroundTruthMode.geo(25.0)).any()


def test_frame_and_unique_ground_truth() -> None:
    queries = [_record("q", frame=20, place="a", split="query")]
    database = [_record("d0", frame=10, place="b"), _record("d1", frame=31, place="a"), _record("d2", place="c")]
    assert ground_truth_matrix(queries, database, GroundTruthMode.frame(10)).tolist() == [[True, False, False]]
    assert ground_truth_matrix(queries, database, GroundTruthMode.unique()).tolist() == [[False, True, False]]


def test_unique_mode_needs_exactly_one_counterpart() -> None:
    queries = [_record("q0", place="a", split="query"), _record("q1", place="b", split="query")]
    database = [_record("d0", place="b"), _record("d1", place="a")]
    assert ground_truth_matrix(queries, database, GroundTruthMode.unique()).tolist() == [
        [False, True],
        [True, False],
    ]
    with pytest.raises(DataError, match="q0"):
        ground_truth_matrix(queries[:1], [*database, _record("d2", place="a")], GroundTruthMode.unique())
    with pytest.raises(DataError, match="q1"):
        ground_truth_matrix(queries, database[1:], GroundTruthMode.unique())


def test_ground_truth_mode_validation() -> None:
    with pytest.raises(ConfigurationError):
        GroundTruthMode("radius")
    with pytest.raises(ConfigurationError):
        GroundTruthMode.geo(0.0)
    with pytest.raises(ConfigurationError):
        GroundTruthMode.frame(-1)
    assert GroundTruthMode.geo(25.0, 40.0).describe() == "geo(25m+40deg)"


def test_index_validation() -> None:
    with pytest.raises(DimensionError):
        build_index(["a"], _unit_rows(2, 4))
    with pytest.raises(DataError):
        build_index(["a", "a"], _unit_rows(2, 4))
    with pytest.raises(DataError, match="norm"):
        build_index(["a", "b"], 2 * _unit_rows(2, 4))
    index = build_index(["a", "b"], _unit_rows(2, 4))
    assert not index.descriptors.flags.writeable


def test_query_equal_to_entry_ranks_first() -> None:
    db = _unit_rows(6, 8)
    index = build_index([f"d{i}" for i in range(6)], db)
    result = search_topk(index, db[4], 3)
    assert result.ids[0][0] == "d4"
    assert result.similarities[0, 0] == pytest.approx(1.0)


def test_one_hot_database() -> None:
    index = build_index(["e0", "e1", "e2", "e3"], np.eye(4))
    result = search_topk(index, np.eye(4)[3], 4)
    assert result.ids[0][0] == "e3"
    # Remaining zero-similarity entries tie and fall back to id order.
    assert result.ids[0][1:] == ["e0", "e1", "e2"]


def test_ties_break_by_ascending_id() -> None:
    index = build_index(["zeta", "alpha", "mid"], np.tile(np.eye(3)[0], (3, 1)))
    assert search_topk(index, np.eye(3)[0], 3).ids[0] == ["alpha", "mid", "zeta"]


def test_k_larger_than_database_returns_full_ranking() -> None:
    index = build_index(["a", "b"], _unit_rows(2, 3))
    result = search_topk(index, _unit_rows(1, 3, seed=1), 10)
    assert result.k == 2
    assert sorted(result.ids[0]) == ["a", "b"]


def test_query_width_mismatch() -> None:
    index = build_index(["a"], _unit_rows(1, 3))
    with pytest.raises(DimensionError):
        search_topk(index, np.ones((1, 4)), 1)


def test_search_matches_brute_force_ranking() -> None:
    ids = [f"d{i:03d}" for i in range(40)]
    index = build_index(ids, _unit_rows(40, 12))
    queries = _unit_rows(100, 12, seed=1)
    result = search_topk(index, queries, 10)
    for row, query in enumerate(queries):
        scored = []
        for i, entry in enumerate(index.descriptors):
            scored.append((-float(np.dot(query, entry)), ids[i]))
        scored.sort()
        assert result.ids[row] == [rid for _, rid in scored[:10]]


def test_non_finite_descriptors_are_rejected() -> None:
    with pytest.raises(NumericFailure, match="'b'"):
        build_index(["a", "b"], np.array([[1.0, 0.0], [np.nan, np.nan]]))
    index = build_index(["a", "b"], np.eye(2))
    with pytest.raises(NumericFailure):
        search_topk(index, np.array([[1.0, 0.0], [np.inf, 0.0]]), 1)
