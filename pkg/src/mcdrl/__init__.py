"""Multimodal causal-driven representation learning at desk scale.

A self-contained segmentation pipeline: stub vision/text encoders sharing an
embedding space, text-guided target region selection, a confounder-dictionary
cross-attention intervention, a three-part training objective, a synthetic
multi-domain benchmark, and a leave-one-domain-out ablation harness.
"""

__version__ = "0.1.0"

from .tensor import Tensor, Tape, backward, grad_check  # noqa: F401
