"""Omni mixture-of-experts encoder for multi-subject brain signals.

The pieces, bottom up: :mod:`tensor` (float64 reverse-mode autodiff),
:mod:`moe` (split-then-lump Omni MoE plus dense and top-K baselines),
:mod:`encoder`, :mod:`contrastive`, :mod:`ecphory` (retrieval-enhanced
inference), :mod:`synth` (synthetic multi-subject world) and the
training / experiment harness in :mod:`train`, :mod:`experiments` and
:mod:`cli`.
"""

from .config import RunConfig
from .ecphory import EcphoryConfig, MemoryBank, cosine_topk, ecphory_infer, enhance
from .encoder import FmriEncoder, load_checkpoint, save_checkpoint
from .moe import OmniMoeLayer, count_costs, dense_moe_forward, omni_moe_forward, sparse_topk_forward
from .tensor import Tensor, backward, finite_difference_check

__all__ = [
    "EcphoryConfig",
    "FmriEncoder",
    "MemoryBank",
    "OmniMoeLayer",
    "RunConfig",
    "Tensor",
    "backward",
    "cosine_topk",
    "count_costs",
    "dense_moe_forward",
    "ecphory_infer",
    "enhance",
    "finite_difference_check",
    "load_checkpoint",
    "omni_moe_forward",
    "save_checkpoint",
    "sparse_topk_forward",
]
