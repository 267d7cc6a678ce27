"""Full-FC CosFace classifier head, the comparison baseline.

One weight column per training class, learned by SGD alongside the
extractor. Also supports the head-classes-only variant that drops every
class below an instance threshold before training.
"""

from __future__ import annotations

import numpy as np

from . import rng
from .errors import ConfigError
from .numerics import (
    LossDiagnostics,
    Tape,
    Tensor,
    affine,
    l2_normalize_rows,
    matmul,
    softmax_cross_entropy,
    subtract_at,
    transpose,
)

# CosFace defaults for the full-head baseline.
DEFAULT_SCALE = 64.0
DEFAULT_MARGIN = 0.35


class FcHead:
    """D×C class-weight matrix, randomly initialized, trained by SGD."""

    def __init__(self, embed_dim: int, n_classes: int, seed: int):
        if n_classes < 2:
            raise ConfigError(f"a classifier head needs >= 2 classes, got {n_classes}")
        gen = rng.stream(seed, rng.PARAM_INIT, 1 << 20)
        w = gen.standard_normal((embed_dim, n_classes)) / np.sqrt(embed_dim)
        self.W = Tensor(w, requires_grad=True)

    @property
    def n_classes(self) -> int:
        return self.W.shape[1]

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [("head.W", self.W)]


def fc_cosface_loss(
    f: Tensor,
    head: FcHead,
    y: np.ndarray,
    s: float,
    m: float,
    tape: Tape | None = None,
) -> tuple[Tensor, LossDiagnostics]:
    """Cosine logits against every head column, margin at the true class.

    Gradients flow to both the features and the head weights.
    """
    y = np.asarray(y, dtype=np.int64)
    if y.min(initial=0) < 0 or y.max(initial=-1) >= head.n_classes:
        raise IndexError(f"label out of range [0, {head.n_classes})")
    f_hat = l2_normalize_rows(f, tape=tape)
    w_hat = transpose(l2_normalize_rows(transpose(head.W, tape), tape=tape), tape)
    cos = matmul(f_hat, w_hat, tape)
    logits = affine(subtract_at(cos, y, m, tape), s, 0.0, tape)
    return softmax_cross_entropy(logits, y, tape)


def filter_head_classes(counts: np.ndarray, min_instances: int) -> tuple[np.ndarray, np.ndarray]:
    """Keep classes with at least ``min_instances``; remap labels densely.

    Returns (retained original class ids, remap array) where
    remap[original] is the dense new label, or −1 for dropped classes.
    """
    if min_instances < 1:
        raise ConfigError(f"min_instances must be >= 1, got {min_instances}")
    counts = np.asarray(counts, dtype=np.int64)
    retained = np.flatnonzero(counts >= min_instances)
    if retained.size == 0:
        raise ConfigError(f"no class has {min_instances} or more instances")
    remap = np.full(counts.size, -1, dtype=np.int64)
    remap[retained] = np.arange(retained.size)
    return retained, remap
