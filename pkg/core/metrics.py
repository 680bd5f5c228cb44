"""Recall@N evaluation"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from config.settings import RECALL_NS
from core.errors import DataError
from core.retrieval import GroundTruthMode, PlaceRecord, SearchResult, ground_truth_matrix

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RecallReport:
    recalls: dict[int, float]
    evaluated: int
    excluded: int
    mode: str
    excluded_ids: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "evaluated": self.evaluated,
            "excluded": self.excluded,
            "excluded_ids": list(self.excluded_ids),
            "recall": {f"R@{n}": value for n, value in self.recalls.items()},
        }

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "n": list(self.recalls),
                "recall": list(self.recalls.values()),
                "evaluated": self.evaluated,
                "excluded": self.excluded,
                "mode": self.mode,
            }
        )

    def summary(self) -> str:
        parts = [f"R@{n}={value:.2f}" for n, value in self.recalls.items()]
        return f"{' '.join(parts)} ({self.evaluated} queries, {self.excluded} excluded, {self.mode})"


def recall_at_n(
    results: SearchResult,
    queries: list[PlaceRecord],
    database: list[PlaceRecord],
    mode: GroundTruthMode,
    ns: tuple[int, ...] = RECALL_NS,
) -> RecallReport:
    """Percentage of queries with at least one true match among the top N.

    Queries without any possible match in the database are excluded and counted.
    """
    if len(results.ids) != len(queries):
        raise DataError(f"{len(results.ids)} result rows for {len(queries)} queries")
    truth = ground_truth_matrix(queries, database, mode)
    column = {record.id: i for i, record in enumerate(database)}
    possible = truth.any(axis=1)

    hits = {n: 0 for n in ns}
    for row, ranked in enumerate(results.ids):
        if not possible[row]:
            continue
        found = np.array([truth[row, column[db_id]] for db_id in ranked], dtype=bool)
        first = int(np.argmax(found)) if found.any() else None
        for n in ns:
            if first is not None and first < n:
                hits[n] += 1

    evaluated = int(possible.sum())
    excluded_ids = [q.id for q, ok in zip(queries, possible) if not ok]
    if evaluated == 0:
        raise DataError(f"no query has a true match under {mode.describe()}")
    if excluded_ids:
        logger.warning("Excluded %d queries with no possible match", len(excluded_ids))
    report = RecallReport(
        recalls={n: 100.0 * hits[n] / evaluated for n in ns},
        evaluated=evaluated,
        excluded=len(excluded_ids),
        mode=mode.describe(),
        excluded_ids=excluded_ids,
    )
    logger.info("Recall: %s", report.summary())
    return report


def write_report(report: RecallReport, json_path: str | Path, csv_path: str | Path | None = None) -> Path:
    out = Path(json_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True), encoding="utf-8")
    if csv_path is not None:
        report.to_frame().to_csv(csv_path, index=False)
    return out


__all__ = ["RecallReport", "recall_at_n", "write_report"]
