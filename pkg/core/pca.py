"""PCA reduction of global descriptors, optionally whitened, re-normalized to unit length."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from sklearn.decomposition import PCA
from sklearn.preprocessing import normalize

from core.errors import ConfigurationError, DimensionError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PcaModel:
    mean: np.ndarray  # [d]
    components: np.ndarray  # [k, d], orthonormal rows
    explained_variance: np.ndarray  # [k], non-increasing
    whiten: bool = False

    @property
    def in_dim(self) -> int:
        return int(self.components.shape[1])

    @property
    def out_dim(self) -> int:
        return int(self.components.shape[0])


def pca_fit(descriptors: np.ndarray, out_dim: int, *, whiten: bool = False) -> PcaModel:
    x = np.asarray(descriptors, dtype=np.float64)
    n, d = x.shape
    if out_dim <= 0 or out_dim > min(n - 1, d):
        raise ConfigurationError(
            f"PCA out_dim {out_dim} must lie in [1, min(N-1, d)] = [1, {min(n - 1, d)}] for {n}x{d} data"
        )
    pca = PCA(n_components=out_dim, whiten=whiten, svd_solver="full")
    pca.fit(x)
    logger.info(
        "Fitted PCA %d -> %d on %d descriptors (whiten=%s, kept variance %.4f)",
        d,
        out_dim,
        n,
        whiten,
        float(pca.explained_variance_ratio_.sum()),
    )
    return PcaModel(
        mean=pca.mean_.copy(),
        components=pca.components_.copy(),
        explained_variance=pca.explained_variance_.copy(),
        whiten=whiten,
    )


def pca_apply(model: PcaModel, descriptors: np.ndarray) -> np.ndarray:
    """Project, optionally whiten, then L2-normalize; rows projecting to zero stay zero."""
    x = np.atleast_2d(np.asarray(descriptors, dtype=np.float64))
    if x.shape[1] != model.in_dim:
        raise DimensionError(f"descriptor width {x.shape[1]} does not match PCA input {model.in_dim}")
    reduced = (x - model.mean) @ model.components.T
    if model.whiten:
        reduced = reduced / np.sqrt(np.maximum(model.explained_variance, np.finfo(np.float64).tiny))
    return normalize(reduced, norm="l2", axis=1)


__all__ = ["PcaModel", "pca_apply", "pca_fit"]
