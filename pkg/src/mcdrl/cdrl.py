"""Causal-driven representation learning.

A dictionary of 12 text-derived confounder embeddings with key/value
projections. The do-operation is a single-head cross-attention: selected
feature rows query the dictionary and are replaced by attention-weighted
mixtures of value-projected entries, then scattered back onto the grid and
decoded per cell.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as nc
from .encoders import FeatureMap, TextEncoder
from .mtrs import RegionFeatures
from .tensor import DimensionError, Tensor

DICTIONARY_SIZE = 12


@dataclass
class ConfounderDictionary:
    entries: Tensor  # (M, d) text embeddings
    key_w: Tensor  # (d, d)
    value_w: Tensor  # (d, d)
    entries_trainable: bool = False

    @property
    def n_entries(self) -> int:
        return self.entries.shape[0]

    @property
    def embed_dim(self) -> int:
        return self.entries.shape[1]

    def parameters(self) -> dict[str, Tensor]:
        params = {"dictionary.key_w": self.key_w, "dictionary.value_w": self.value_w}
        if self.entries_trainable:
            params["dictionary.entries"] = self.entries
        return params


@dataclass
class IntervenedFeatures:
    rows: Tensor  # (n, d)
    attention: Tensor  # (n, M), each row sums to one
    coords: np.ndarray  # carried from the selected regions


def init_dictionary(prompts: list[str], text_encoder: TextEncoder, seed: int = 0,
                    entries_trainable: bool = False) -> ConfounderDictionary:
    """Build the dictionary from exactly 12 distinct prompts.

    Entries are the encoded prompts; the key/value projections start at
    identity plus small seeded noise so early attention is near-uniform.
    """
    if len(prompts) != DICTIONARY_SIZE:
        raise ValueError(f"need exactly {DICTIONARY_SIZE} prompts, got {len(prompts)}")
    if len(set(prompts)) != DICTIONARY_SIZE:
        raise ValueError("dictionary prompts must be distinct")
    entries = text_encoder.encode_all(prompts)
    e = entries.data
    sims = e @ e.T
    np.fill_diagonal(sims, 0.0)
    if sims.max() >= 0.999:
        i, j = np.unravel_index(int(sims.argmax()), sims.shape)
        raise ValueError(
            f"dictionary entries nearly collinear: prompts {i} and {j} (cos {sims.max():.5f})")
    d = entries.shape[1]
    rng = np.random.default_rng(np.random.SeedSequence([0xd1c7, int(seed)]))
    eye = np.eye(d)
    dictionary = ConfounderDictionary(
        entries=Tensor(entries.data, requires_grad=entries_trainable),
        key_w=Tensor(eye + 0.01 * rng.standard_normal((d, d)), requires_grad=True),
        value_w=Tensor(eye + 0.01 * rng.standard_normal((d, d)), requires_grad=True),
        entries_trainable=entries_trainable,
    )
    return dictionary


def attend_rows(queries: Tensor, dictionary: ConfounderDictionary) -> tuple[Tensor, Tensor]:
    """Cross-attention of (n, d) query rows over the dictionary.

    Returns (output rows, attention weights); the attended output of each row
    equals the softmax-weighted sum of value-projected entries.
    """
    if queries.data.ndim != 2 or queries.shape[1] != dictionary.embed_dim:
        raise DimensionError(
            f"attend_rows: queries {queries.shape} do not match dictionary dim "
            f"{dictionary.embed_dim}")
    keys = nc.matmul(dictionary.entries, dictionary.key_w)
    values = nc.matmul(dictionary.entries, dictionary.value_w)
    scores = nc.scale(nc.matmul(queries, nc.transpose(keys)), dictionary.embed_dim ** -0.5)
    attn = nc.softmax_rows(scores)
    return nc.matmul(attn, values), attn


def intervene(regions: RegionFeatures, dictionary: ConfounderDictionary) -> IntervenedFeatures:
    """Replace each selected feature row by its dictionary attention mixture."""
    if regions.rows.shape[0] == 0:
        raise DimensionError("intervene: no selected regions")
    rows, attn = attend_rows(regions.rows, dictionary)
    return IntervenedFeatures(rows=rows, attention=attn, coords=regions.coords)


def scatter(intervened: IntervenedFeatures, grid_h: int, grid_w: int,
            fallback: FeatureMap) -> FeatureMap:
    """Write intervened rows back at their coordinates; other cells keep fallback."""
    if (fallback.grid_h, fallback.grid_w) != (grid_h, grid_w):
        raise DimensionError(
            f"scatter: fallback grid {(fallback.grid_h, fallback.grid_w)} != "
            f"{(grid_h, grid_w)}")
    coords = np.asarray(intervened.coords)
    if coords.size and (coords.min() < 0 or coords[:, 0].max() >= grid_h
                        or coords[:, 1].max() >= grid_w):
        raise DimensionError("scatter: coordinate out of range")
    flat = coords[:, 0] * grid_w + coords[:, 1]
    spliced = nc.row_splice(fallback.features, intervened.rows, flat)
    return FeatureMap(grid_h, grid_w, spliced)


@dataclass
class PredictionMap:
    """Per-cell class probabilities over background plus lesion channels."""

    grid_h: int
    grid_w: int
    probs: Tensor  # (n_cells, n_classes + 1), rows sum to one

    def pixel_probs(self, patch_size: int) -> Tensor:
        """Upsample to pixel resolution by nearest-patch replication."""
        idx = pixel_to_cell_index(self.grid_h, self.grid_w, patch_size)
        return nc.gather_rows(self.probs, idx)

    def pixel_labels(self, patch_size: int) -> np.ndarray:
        cell_labels = self.probs.data.argmax(axis=1).reshape(self.grid_h, self.grid_w)
        return np.repeat(np.repeat(cell_labels, patch_size, axis=0), patch_size, axis=1)


def pixel_to_cell_index(grid_h: int, grid_w: int, patch_size: int) -> np.ndarray:
    """Row-major pixel index -> cell index map for nearest-patch upsampling."""
    rows = np.repeat(np.arange(grid_h), patch_size)
    cols = np.repeat(np.arange(grid_w), patch_size)
    return (rows[:, None] * grid_w + cols[None, :]).reshape(-1)


class DecoderHead:
    """Per-cell linear classifier with a softmax over background + classes."""

    def __init__(self, embed_dim: int, n_channels: int, seed: int = 0):
        rng = np.random.default_rng(np.random.SeedSequence([0xdec0, int(seed)]))
        self.weight = Tensor(rng.normal(0.0, 0.3 * embed_dim ** -0.5, (embed_dim, n_channels)),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(n_channels), requires_grad=True)

    @property
    def n_channels(self) -> int:
        return self.weight.shape[1]

    def parameters(self) -> dict[str, Tensor]:
        return {"decoder.weight": self.weight, "decoder.bias": self.bias}

    def logits(self, features: Tensor) -> Tensor:
        return nc.add_bias(nc.matmul(features, self.weight), self.bias)

    def decode(self, fm: FeatureMap) -> PredictionMap:
        probs = nc.softmax_rows(self.logits(fm.features))
        return PredictionMap(fm.grid_h, fm.grid_w, probs)
