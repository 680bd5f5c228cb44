"""Place records, ground-truth modes, manifest I/O and exhaustive cosine search."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from config.settings import GEO_THRESHOLD_M, NORDLAND_FRAME_TOLERANCE
from core.errors import ConfigurationError, DataError, DimensionError, NumericFailure

logger = logging.getLogger(__name__)

SPLITS = ("database", "query", "train")
MANIFEST_FIELDS = ("id", "tensor", "easting", "northing", "heading", "frame_index", "place_id", "split")
UNIT_NORM_TOL = 1e-3


@dataclass(frozen=True)
class PlaceRecord:
    id: str
    tensor: str | None
    easting: float
    northing: float
    place_id: str
    split: str
    heading: float | None = None
    frame_index: int | None = None

    def __post_init__(self) -> None:
        if not (math.isfinite(self.easting) and math.isfinite(self.northing)):
            raise DataError(f"record {self.id}: coordinates must be finite")
        if self.heading is not None and not 0.0 <= self.heading < 360.0:
            raise DataError(f"record {self.id}: heading {self.heading} outside [0, 360)")
        if self.split not in SPLITS:
            raise DataError(f"record {self.id}: unknown split '{self.split}'")


@dataclass(frozen=True)
class GroundTruthMode:
    kind: str
    dist_m: float = GEO_THRESHOLD_M
    heading_deg: float | None = None
    frames: int = NORDLAND_FRAME_TOLERANCE

    def __post_init__(self) -> None:
        if self.kind not in {"geo", "frame", "unique"}:
            raise ConfigurationError(f"ground-truth mode must be geo, frame or unique, got '{self.kind}'")
        if self.dist_m <= 0:
            raise ConfigurationError(f"geo threshold must be positive, got {self.dist_m}")
        if self.frames < 0:
            raise ConfigurationError(f"frame tolerance must be non-negative, got {self.frames}")

    @classmethod
    def geo(cls, dist_m: float = GEO_THRESHOLD_M, heading_deg: float | None = None) -> GroundTruthMode:
        return cls("geo", dist_m=dist_m, heading_deg=heading_deg)

    @classmethod
    def frame(cls, k: int = NORDLAND_FRAME_TOLERANCE) -> GroundTruthMode:
        return cls("frame", frames=k)

    @classmethod
    def unique(cls) -> GroundTruthMode:
        return cls("unique")

    def describe(self) -> str:
        if self.kind == "geo":
            heading = f"+{self.heading_deg:g}deg" if self.heading_deg is not None else ""
            return f"geo({self.dist_m:g}m{heading})"
        if self.kind == "frame":
            return f"frame(+-{self.frames})"
        return "unique"


def _heading_gap(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = np.abs(a[:, None] - b[None, :]) % 360.0
    return np.minimum(diff, 360.0 - diff)


def ground_truth_matrix(
    queries: list[PlaceRecord], database: list[PlaceRecord], mode: GroundTruthMode
) -> np.ndarray:
    """Boolean [Q, M]: ``True`` where database record ``m`` is a true match for query ``q``."""
    if mode.kind == "geo":
        q = np.array([[r.easting, r.northing] for r in queries], dtype=np.float64).reshape(-1, 2)
        d = np.array([[r.easting, r.northing] for r in database], dtype=np.float64).reshape(-1, 2)
        dist = np.sqrt(((q[:, None, :] - d[None, :, :]) ** 2).sum(-1))
        matches = dist <= mode.dist_m
        if mode.heading_deg is not None:
            qh = np.array([np.nan if r.heading is None else r.heading for r in queries])
            dh = np.array([np.nan if r.heading is None else r.heading for r in database])
            gap = _heading_gap(qh, dh)
            # A missing heading on either side skips the check.
            matches &= np.isnan(gap) | (gap <= mode.heading_deg)
        return matches
    if mode.kind == "frame":
        qf = np.array([np.nan if r.frame_index is None else r.frame_index for r in queries], dtype=float)
        df = np.array([np.nan if r.frame_index is None else r.frame_index for r in database], dtype=float)
        gap = np.abs(qf[:, None] - df[None, :])
        return np.nan_to_num(gap, nan=np.inf) <= mode.frames
    qp = np.array([r.place_id for r in queries], dtype=object)
    dp = np.array([r.place_id for r in database], dtype=object)
    matches = qp[:, None] == dp[None, :]
    counts = matches.sum(axis=1)
    for query, count in zip(queries, counts):
        if count != 1:
            raise DataError(
                f"query '{query.id}' has {count} database counterparts for place '{query.place_id}'; "
                "unique mode needs exactly one"
            )
    return matches


def write_manifest(records: list[PlaceRecord], path: str | Path) -> Path:
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame([asdict(r) for r in records], columns=list(MANIFEST_FIELDS))
    frame["frame_index"] = frame["frame_index"].astype("Int64")
    frame.to_json(out, orient="records", lines=True)
    return out


def read_manifest(path: str | Path) -> list[PlaceRecord]:
    """Load a JSON-lines manifest; missing files or fields raise ``DataError`` naming them."""
    src = Path(path)
    if not src.exists():
        raise DataError(f"manifest not found: {src}")
    frame = pd.read_json(src, orient="records", lines=True, dtype={"id": str, "place_id": str})
    missing = [f for f in ("id", "easting", "northing", "place_id", "split") if f not in frame.columns]
    if missing:
        raise DataError(f"{src}: manifest is missing field(s) {missing}")
    records = []
    for row in frame.to_dict(orient="records"):
        heading = row.get("heading")
        frame_index = row.get("frame_index")
        tensor = row.get("tensor")
        records.append(
            PlaceRecord(
                id=str(row["id"]),
                tensor=None if pd.isna(tensor) else str(tensor),
                easting=float(row["easting"]),
                northing=float(row["northing"]),
                place_id=str(row["place_id"]),
                split=str(row["split"]),
                heading=None if pd.isna(heading) else float(heading),
                frame_index=None if pd.isna(frame_index) else int(frame_index),
            )
        )
    logger.info("Loaded %d records from %s", len(records), src)
    return records


def split_records(records: list[PlaceRecord], split: str) -> list[PlaceRecord]:
    return [r for r in records if r.split == split]


@dataclass(frozen=True)
class RetrievalIndex:
    ids: tuple[str, ...]
    descriptors: np.ndarray  # [M, d], unit rows, read-only

    @property
    def size(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return int(self.descriptors.shape[1])


def _require_finite(matrix: np.ndarray, ids: list[str], what: str) -> None:
    bad = np.flatnonzero(~np.isfinite(matrix).all(axis=1))
    if bad.size:
        raise NumericFailure(f"{what} descriptor '{ids[bad[0]]}' has non-finite values")


def build_index(ids: list[str], descriptors: np.ndarray) -> RetrievalIndex:
    matrix = np.array(descriptors, dtype=np.float64, copy=True)
    if matrix.ndim != 2 or matrix.shape[0] != len(ids):
        raise DimensionError(f"{len(ids)} ids for descriptor matrix of shape {matrix.shape}")
    if len(set(ids)) != len(ids):
        raise DataError("database ids must be unique")
    _require_finite(matrix, ids, "database")
    norms = np.linalg.norm(matrix, axis=1)
    bad = np.flatnonzero(np.abs(norms - 1.0) > UNIT_NORM_TOL)
    if bad.size:
        raise DataError(f"database descriptor '{ids[bad[0]]}' has norm {norms[bad[0]]:.6f}, expected 1")
    matrix.setflags(write=False)
    return RetrievalIndex(ids=tuple(ids), descriptors=matrix)


@dataclass(frozen=True)
class SearchResult:
    ids: list[list[str]]
    similarities: np.ndarray  # [Q, K]

    @property
    def k(self) -> int:
        return int(self.similarities.shape[1])


def search_topk(index: RetrievalIndex, queries: np.ndarray, k: int) -> SearchResult:
    """Exhaustive dot-product ranking, descending; equal similarities order by ascending id."""
    q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    if q.shape[1] != index.dim:
        raise DimensionError(f"query width {q.shape[1]} does not match index width {index.dim}")
    _require_finite(q, [f"#{row}" for row in range(q.shape[0])], "query")
    k = min(k, index.size)
    sims = q @ index.descriptors.T
    id_rank = np.argsort(np.argsort(np.array(index.ids, dtype=object), kind="stable"), kind="stable")
    ranked_ids, ranked_sims = [], np.empty((q.shape[0], k))
    for row in range(q.shape[0]):
        order = np.lexsort((id_rank, -sims[row]))[:k]
        ranked_ids.append([index.ids[i] for i in order])
        ranked_sims[row] = sims[row, order]
    return SearchResult(ids=ranked_ids, similarities=ranked_sims)


__all__ = [
    "GroundTruthMode",
    "PlaceRecord",
    "RetrievalIndex",
    "SPLITS",
    "SearchResult",
    "build_index",
    "ground_truth_matrix",
    "read_manifest",
    "search_topk",
    "split_records",
    "write_manifest",
]
