"""Model assembly: encoders, class embeddings, dictionary, decoder.

Holds every learnable tensor under a stable name so the optimizer and
checkpoint code can treat parameters uniformly.
"""

from __future__ import annotations

import numpy as np

from .cdrl import ConfounderDictionary, DecoderHead, init_dictionary
from .encoders import TextEncoder, VisionEncoder, encode_class_prompts
from .objectives import ClassDomainTable
from .prompts import CLASS_NAMES, default_domain_descriptors, dictionary_prompts
from .tensor import Tensor


class SegmentationModel:
    """The full pipeline's parameters and frozen text-derived constants."""

    def __init__(self, *, embed_dim: int = 16, patch_size: int = 4, seed: int = 0,
                 entries_trainable: bool = False):
        self.embed_dim = embed_dim
        self.patch_size = patch_size
        self.n_classes = len(CLASS_NAMES)
        self.seed = int(seed)
        kids = np.random.SeedSequence(self.seed).generate_state(4)
        self.text = TextEncoder(embed_dim=embed_dim, seed=int(kids[0]))
        self.vision = VisionEncoder(patch_size=patch_size, embed_dim=embed_dim,
                                    seed=int(kids[1]), trainable=True)
        self.class_embeds = encode_class_prompts(self.text, CLASS_NAMES)
        descriptors = default_domain_descriptors()
        self.dictionary: ConfounderDictionary = init_dictionary(
            dictionary_prompts(descriptors), self.text, seed=int(kids[2]),
            entries_trainable=entries_trainable)
        self.class_domain_table = ClassDomainTable.build(self.text, CLASS_NAMES, descriptors)
        self.decoder = DecoderHead(embed_dim, self.n_classes + 1, seed=int(kids[3]))

    def named_parameters(self) -> dict[str, Tensor]:
        params: dict[str, Tensor] = {}
        params.update(self.vision.parameters())
        params.update(self.dictionary.parameters())
        params.update(self.decoder.parameters())
        return params

    def state(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.named_parameters().items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = set(params) - set(state)
        if missing:
            raise ValueError(f"state is missing parameters: {sorted(missing)}")
        for name, tensor in params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != tensor.shape:
                raise ValueError(
                    f"parameter {name}: shape {arr.shape} != expected {tensor.shape}")
            tensor.data = np.ascontiguousarray(arr)
            tensor.grad = None
