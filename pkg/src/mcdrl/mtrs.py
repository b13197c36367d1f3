"""Multimodal target region selection.

Aligns grid features with class text embeddings, takes the per-cell maximum
over classes, keeps the top fraction of cells and gathers their feature rows.
Selection is a hard gate: the mask is computed outside the gradient tape and
gradients flow only through the gathered rows.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as nc
from .encoders import FeatureMap
from .tensor import DegenerateVectorError, DimensionError, Tensor


@dataclass
class SimilarityVolume:
    """Per-cell, per-class cosine similarities on the feature grid."""

    values: np.ndarray  # (grid_h, grid_w, n_classes) in [-1, 1]


@dataclass
class SelectionMask:
    mask: np.ndarray  # (grid_h, grid_w) booleans
    alpha: float
    n_selected: int


@dataclass
class RegionFeatures:
    """Selected feature rows plus their source grid coordinates."""

    rows: Tensor  # (n_selected, d)
    coords: np.ndarray  # (n_selected, 2) as (row, col), strictly increasing row-major


def _unit_rows(arr: np.ndarray, what: str) -> np.ndarray:
    norms = np.sqrt((arr * arr).sum(axis=1, keepdims=True))
    if (norms <= nc.NORM_EPS).any():
        raise DegenerateVectorError(f"similarity_volume: zero-norm {what} row")
    return arr / norms


def similarity_volume(fm: FeatureMap, class_embeds: Tensor) -> SimilarityVolume:
    """Cosine similarity of every grid cell against every class embedding."""
    feats = fm.features.data
    embeds = class_embeds.data
    if embeds.ndim != 2 or embeds.shape[1] != feats.shape[1]:
        raise DimensionError(
            f"similarity_volume: embeddings {embeds.shape} do not match features {feats.shape}")
    sims = _unit_rows(feats, "feature") @ _unit_rows(embeds, "embedding").T
    return SimilarityVolume(sims.reshape(fm.grid_h, fm.grid_w, embeds.shape[0]))


def unify(volume: SimilarityVolume) -> Tensor:
    """Per-cell maximum over class channels; ties go to the lowest class index."""
    if volume.values.shape[2] < 1:
        raise DimensionError("unify: no class channels")
    return Tensor(volume.values.max(axis=2))


def top_rows(scores: np.ndarray, alpha: float) -> np.ndarray:
    """Row-wise top-N cell indices for a (batch, n_cells) score matrix.

    N = max(1, floor(alpha * n_cells)). Ties break to the earlier row-major
    position. Returned indices are sorted ascending within each row.
    """
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"alpha must be in (0, 1], got {alpha}")
    n_cells = scores.shape[1]
    n_sel = max(1, math.floor(alpha * n_cells))
    order = np.argsort(-scores, axis=1, kind="stable")
    return np.sort(order[:, :n_sel], axis=1)


def select(score_map: Tensor, alpha: float) -> SelectionMask:
    """Binary mask keeping the top max(1, floor(alpha * cells)) scoring cells."""
    scores = score_map.data
    if scores.ndim != 2:
        raise DimensionError(f"select expects a 2-D score map, got shape {scores.shape}")
    idx = top_rows(scores.reshape(1, -1), alpha)[0]
    mask = np.zeros(scores.size, dtype=bool)
    mask[idx] = True
    return SelectionMask(mask.reshape(scores.shape), float(alpha), int(idx.size))


def extract(fm: FeatureMap, selection: SelectionMask) -> RegionFeatures:
    """Gather selected cells' features in row-major order, keeping coordinates."""
    if selection.mask.shape != (fm.grid_h, fm.grid_w):
        raise DimensionError(
            f"extract: mask {selection.mask.shape} does not match grid "
            f"{(fm.grid_h, fm.grid_w)}")
    flat = np.flatnonzero(selection.mask.reshape(-1))
    rows = nc.gather_rows(fm.features, flat)
    coords = np.stack(np.divmod(flat, fm.grid_w), axis=1)
    return RegionFeatures(rows=rows, coords=coords)
