"""Deterministic stand-in encoders sharing one embedding space.

The vision encoder is a learned linear patch projection followed by one
pointwise nonlinear mixing layer, so a grid cell's receptive field is exactly
its own patch. The text encoder is a frozen seeded hash-embedding table; the
same string always maps to the same unit-norm vector, on any platform.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass

import numpy as np

from . import tensor as nc
from .tensor import DimensionError, Tensor


@dataclass
class FeatureMap:
    """Dense grid of d-dimensional features for one image."""

    grid_h: int
    grid_w: int
    features: Tensor  # (grid_h * grid_w, d), row-major cells

    @property
    def n_cells(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def embed_dim(self) -> int:
        return self.features.shape[1]


def extract_patches(image: np.ndarray, patch_size: int) -> np.ndarray:
    """Flatten an (H, W, 3) image into (n_cells, patch_size**2 * 3) patch rows."""
    h, w, c = image.shape
    p = patch_size
    gh, gw = h // p, w // p
    patches = image.reshape(gh, p, gw, p, c).transpose(0, 2, 1, 3, 4)
    return np.ascontiguousarray(patches.reshape(gh * gw, p * p * c))


class VisionEncoder:
    """Patch projection plus pointwise channel mixing, optionally trainable."""

    def __init__(self, patch_size: int = 4, embed_dim: int = 16, seed: int = 0,
                 trainable: bool = True):
        self.patch_size = patch_size
        self.embed_dim = embed_dim
        self.trainable = trainable
        patch_dim = patch_size * patch_size * 3
        rng = np.random.default_rng(np.random.SeedSequence([0x7601, int(seed)]))
        self.patch_w = Tensor(rng.normal(0.0, patch_dim ** -0.5, (patch_dim, embed_dim)),
                              requires_grad=trainable)
        # nonzero bias keeps all-dark patches away from zero-norm features
        self.patch_b = Tensor(np.full(embed_dim, 0.05), requires_grad=trainable)
        self.mix_w = Tensor(rng.normal(0.0, embed_dim ** -0.5, (embed_dim, embed_dim)),
                            requires_grad=trainable)
        self.mix_b = Tensor(np.zeros(embed_dim), requires_grad=trainable)

    def parameters(self) -> dict[str, Tensor]:
        return {
            "vision.patch_w": self.patch_w,
            "vision.patch_b": self.patch_b,
            "vision.mix_w": self.mix_w,
            "vision.mix_b": self.mix_b,
        }

    def encode_patch_rows(self, patches: Tensor) -> Tensor:
        """Project flattened patch rows (n, patch_dim) to features (n, d)."""
        h = nc.add_bias(nc.matmul(patches, self.patch_w), self.patch_b)
        return nc.add(h, nc.tanh(nc.add_bias(nc.matmul(h, self.mix_w), self.mix_b)))

    def encode_image(self, image: np.ndarray) -> FeatureMap:
        image = np.asarray(image, dtype=np.float64)
        if image.ndim != 3 or image.shape[2] != 3:
            raise DimensionError(f"encode_image expects (H, W, 3), got {image.shape}")
        h, w, _ = image.shape
        if h % self.patch_size or w % self.patch_size:
            raise DimensionError(
                f"image dims {h}x{w} not divisible by patch size {self.patch_size}")
        if image.min() < 0.0 or image.max() > 1.0:
            raise ValueError("encode_image expects pixel values in [0, 1]")
        patches = Tensor(extract_patches(image, self.patch_size))
        feats = self.encode_patch_rows(patches)
        return FeatureMap(h // self.patch_size, w // self.patch_size, feats)


def pool_image(fm: FeatureMap) -> Tensor:
    """Spatial mean of all grid features; identical to a mean-reduce over cells."""
    if fm.n_cells == 0:
        raise DimensionError("pool_image on an empty feature map")
    return nc.reduce(fm.features, "mean", axis=0)


_TOKEN_RE = re.compile(r"[a-z0-9]+")


class TextEncoder:
    """Frozen hash-based text embeddings; never participates in training."""

    def __init__(self, embed_dim: int = 16, seed: int = 0, vocab_size: int = 4096):
        self.embed_dim = embed_dim
        self.vocab_size = vocab_size
        self._key = int(seed).to_bytes(8, "little", signed=False)
        rng = np.random.default_rng(np.random.SeedSequence([0x7e87, int(seed)]))
        self._table = rng.standard_normal((vocab_size, embed_dim))

    def _token_index(self, token: str) -> int:
        digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8, key=self._key).digest()
        return int.from_bytes(digest, "little") % self.vocab_size

    def encode(self, prompt: str) -> Tensor:
        """Deterministic unit-norm embedding of a nonempty prompt string."""
        if not isinstance(prompt, str) or not prompt.strip():
            raise ValueError("encode: prompt must be a nonempty string")
        tokens = _TOKEN_RE.findall(prompt.lower())
        if not tokens:
            raise ValueError(f"encode: prompt {prompt!r} has no tokens")
        vec = self._table[[self._token_index(t) for t in tokens]].mean(axis=0)
        # a whole-string component keeps near-identical prompts apart
        vec = vec + 0.75 * self._table[self._token_index("\x00" + prompt.lower())]
        norm = float(np.sqrt(vec @ vec))
        if norm <= nc.NORM_EPS:
            raise nc.DegenerateVectorError(f"encode: degenerate embedding for {prompt!r}")
        return Tensor(vec / norm)

    def encode_all(self, prompts: list[str]) -> Tensor:
        """Stack embeddings for a list of prompts into a (len, d) matrix."""
        return Tensor(np.stack([self.encode(p).data for p in prompts]))


def encode_class_prompts(encoder: TextEncoder, class_names: tuple[str, ...] | list[str],
                         max_pairwise_cos: float = 0.95) -> Tensor:
    """Embed one prompt per class and verify the embeddings are distinct."""
    from .prompts import class_prompt

    embeds = encoder.encode_all([class_prompt(n) for n in class_names])
    e = embeds.data
    sims = e @ e.T
    k = len(class_names)
    for i in range(k):
        for j in range(i + 1, k):
            if sims[i, j] >= max_pairwise_cos:
                raise ValueError(
                    f"class embeddings too similar: {class_names[i]!r} vs {class_names[j]!r} "
                    f"(cos {sims[i, j]:.4f} >= {max_pairwise_cos})")
    return embeds
