"""One-shot magnitude pruning of the feature extractor."""
from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np
import torch

from .model import SparsityMask, SplitClassifier, apply_mask


@dataclass(frozen=True)
class MagnitudePruneConfig:
    sparsity: float = 0.5
    scope: str = "global"

    def __post_init__(self):
        if not 0.0 <= self.sparsity < 1.0:
            raise ValueError(f"sparsity must lie in [0, 1), got {self.sparsity}")
        if self.scope not in ("global", "per-layer"):
            raise ValueError(f"unknown scope {self.scope!r}")


def smallest_magnitude_keep(values: np.ndarray, sparsity: float) -> np.ndarray:
    """Keep-mask dropping the ``round(sparsity * n)`` smallest |values|.

    Ties are broken by position: the lower index is pruned first.
    """
    n = values.size
    k = int(round(sparsity * n))
    order = np.lexsort((np.arange(n), np.abs(values)))
    keep = np.ones(n, dtype=bool)
    keep[order[:k]] = False
    return keep


def one_shot_magnitude_prune(model: SplitClassifier, cfg: MagnitudePruneConfig):
    """Return ``(pruned copy, mask)``; the input model is left untouched."""
    model = copy.deepcopy(model)
    if cfg.scope == "global":
        w = model.prunable_vector().values.numpy()
        keep = smallest_magnitude_keep(w, cfg.sparsity)
    else:
        keep = np.concatenate([
            smallest_magnitude_keep(p.detach().reshape(-1).numpy(), cfg.sparsity)
            for _, p in model.prunable_parameters()
        ])
    mask = SparsityMask(torch.from_numpy(keep))
    apply_mask(model, mask)
    return model, mask
