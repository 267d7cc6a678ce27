"""Verification/identification metrics, head-cost accounting and sweeps.

Wall-clock numbers are reported where available but never asserted;
only analytic byte and multiply-accumulate counts are contract-bearing.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .model import MlpParams, extract_features
from .numerics import Tensor
from .synthdata import EvalProtocol, IdentityUniverse, draw_instance

# Bucket edges straddle the <10-instances tail definition.
BUCKET_EDGES = (5, 10, 50)


def _normalize(rows: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    norms = np.linalg.norm(rows, axis=1, keepdims=True)
    return rows / np.maximum(norms, eps)


def embed(extractor: MlpParams, x: np.ndarray) -> np.ndarray:
    """Raw embeddings for a matrix of inputs (inference mode)."""
    return extract_features(extractor, Tensor(x), tape=None).data


def cosine_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per-row cosine distance 1 − cos between two embedding matrices."""
    return 1.0 - (_normalize(a) * _normalize(b)).sum(axis=1)


def verification_accuracy(
    emb_a: np.ndarray,
    emb_b: np.ndarray,
    genuine: np.ndarray,
) -> tuple[float, float]:
    """Best accuracy over thresholds at midpoints of sorted pair distances.

    A pair is called genuine when its cosine distance falls below the
    threshold. Ties in accuracy go to the smaller threshold.
    """
    if emb_a.shape[0] == 0:
        raise ConfigError("empty verification protocol")
    dists = cosine_distances(emb_a, emb_b)
    order = np.sort(dists)
    thresholds = (order[:-1] + order[1:]) / 2.0 if order.size > 1 else order
    best_acc, best_thr = -1.0, 0.0
    genuine = np.asarray(genuine, dtype=bool)
    for thr in thresholds:
        acc = float(((dists < thr) == genuine).mean())
        if acc > best_acc:
            best_acc, best_thr = acc, float(thr)
    return best_acc, best_thr


def identification_hits(
    probe_emb: np.ndarray,
    gallery_emb: np.ndarray,
    probe_labels: np.ndarray,
    gallery_labels: np.ndarray,
) -> np.ndarray:
    """Per-probe rank-1 hit flags; nearest gallery row by cosine similarity.

    Ties resolve to the lowest gallery index.
    """
    if gallery_emb.shape[0] == 0:
        raise ConfigError("empty gallery")
    sims = _normalize(probe_emb) @ _normalize(gallery_emb).T
    nearest = sims.argmax(axis=1)  # argmax returns the first (lowest) index on ties
    return np.asarray(gallery_labels)[nearest] == np.asarray(probe_labels)


def identification_rank1(
    probe_emb: np.ndarray,
    gallery_emb: np.ndarray,
    probe_labels: np.ndarray,
    gallery_labels: np.ndarray,
) -> float:
    return float(identification_hits(probe_emb, gallery_emb, probe_labels, gallery_labels).mean())


def evaluate_protocol(
    extractor: MlpParams,
    protocol: EvalProtocol,
    counts: np.ndarray | None = None,
    tail_threshold: int = 10,
) -> dict:
    """Verification accuracy and rank-1 rate, split by head/tail when counts given."""
    ver_acc, threshold = verification_accuracy(
        embed(extractor, protocol.pair_a),
        embed(extractor, protocol.pair_b),
        protocol.pair_genuine,
    )
    hits = identification_hits(
        embed(extractor, protocol.probe_x),
        embed(extractor, protocol.gallery_x),
        protocol.probe_labels,
        protocol.gallery_labels,
    )
    out = {
        "ver_acc": ver_acc,
        "ver_threshold": threshold,
        "id_rank1": float(hits.mean()),
    }
    if counts is not None:
        probe_counts = np.asarray(counts)[protocol.probe_labels]
        tail = probe_counts < tail_threshold
        out["tail_rank1"] = float(hits[tail].mean()) if tail.any() else None
        out["head_rank1"] = float(hits[~tail].mean()) if (~tail).any() else None
        out["tail_probes"] = int(tail.sum())
    return out


@dataclass
class CostReport:
    """Closed-form parameter bytes and per-batch MACs for the classifier head."""

    method: str
    class_count: int
    queue_size: int
    embed_dim: int
    batch_size: int
    bytes_per_float: int
    head_param_bytes: int
    head_macs_per_batch: int
    optimizer_state_bytes: int
    param_bytes_ratio: float  # this method's head bytes over the full-FC head's


def head_cost_report(
    method: str,
    C: int,
    K: int,
    D: int,
    B: int,
    bytes_per_float: int = 4,
    generator_layer_dims: list[int] | None = None,
) -> CostReport:
    """Memory and MAC accounting for a full-FC head versus the queue.

    The full head stores C·D floats plus the same again in optimizer
    momentum; the queue stores K·D floats and carries no optimizer state.
    The queue's MACs include one generator forward per batch when layer
    dims are supplied.
    """
    if min(C, K, D, B, bytes_per_float) <= 0:
        raise ConfigError("all cost dimensions must be positive")
    full_bytes = C * D * bytes_per_float
    if method == "full":
        return CostReport(
            method=method, class_count=C, queue_size=K, embed_dim=D, batch_size=B,
            bytes_per_float=bytes_per_float,
            head_param_bytes=full_bytes,
            head_macs_per_batch=B * D * C,
            optimizer_state_bytes=full_bytes,
            param_bytes_ratio=1.0,
        )
    if method == "dcq":
        gen_macs = 0
        if generator_layer_dims:
            dims = list(generator_layer_dims)
            gen_macs = B * sum(i * o for i, o in zip(dims[:-1], dims[1:]))
        return CostReport(
            method=method, class_count=C, queue_size=K, embed_dim=D, batch_size=B,
            bytes_per_float=bytes_per_float,
            head_param_bytes=K * D * bytes_per_float,
            head_macs_per_batch=B * D * (K + 1) + gen_macs,
            optimizer_state_bytes=0,
            param_bytes_ratio=K / C,
        )
    raise ConfigError(f"unknown method {method!r} for cost report")


@dataclass
class AlignmentReport:
    """Mean cosine between learned class weights and class mean embeddings,
    bucketed by instance count. Buckets with no classes are reported absent."""

    bucket_edges: tuple
    mean_cosine: dict = field(default_factory=dict)
    class_counts: dict = field(default_factory=dict)


def _bucket_name(count: int, edges=BUCKET_EDGES) -> str:
    lo = 0
    for edge in edges:
        if count < edge:
            return f"<{edge}" if lo == 0 else f"{lo}-{edge - 1}"
        lo = edge
    return f">={edges[-1]}"


def tail_alignment_diagnostic(
    head_w: np.ndarray,
    universe: IdentityUniverse,
    counts: np.ndarray,
    extractor: MlpParams,
    class_ids: np.ndarray | None = None,
) -> AlignmentReport:
    """Per-bucket cosine between FC columns and their class's mean embedding.

    ``head_w`` is the D×n matrix of learned columns; ``class_ids`` maps its
    columns to original identities (defaults to 0..n−1).
    """
    counts = np.asarray(counts, dtype=np.int64)
    if class_ids is None:
        class_ids = np.arange(head_w.shape[1])
    per_bucket: dict[str, list[float]] = {}
    for col, ident in enumerate(class_ids):
        n = int(counts[ident])
        if n == 0:
            continue
        inst = np.stack([draw_instance(universe, int(ident), k) for k in range(n)])
        mean_emb = _normalize(embed(extractor, inst)).mean(axis=0)
        w = head_w[:, col]
        cos = float(
            w @ mean_emb / max(np.linalg.norm(w) * np.linalg.norm(mean_emb), 1e-12)
        )
        per_bucket.setdefault(_bucket_name(n), []).append(cos)
    report = AlignmentReport(bucket_edges=BUCKET_EDGES)
    for name, values in per_bucket.items():
        report.mean_cosine[name] = float(np.mean(values))
        report.class_counts[name] = len(values)
    return report


GRID_AXES = ("K", "alpha", "sampling", "method")


def run_experiment_grid(base_config, axis: str, values) -> list[dict]:
    """Train one model per axis value with shared seed and data.

    Returns one result row per value, in the order given, with the final
    verification accuracy, rank-1 rate and the per-epoch metric curves.
    """
    from .trainer import run_training  # local import to avoid a cycle

    if axis not in GRID_AXES:
        raise ConfigError(f"grid axis must be one of {GRID_AXES}, got {axis!r}")
    rows = []
    for value in values:
        cfg = base_config.replace(**{axis: value})
        result = run_training(cfg)
        rows.append(
            {
                "axis": axis,
                "value": value,
                "ver_acc": result.final_eval["ver_acc"],
                "id_rank1": result.final_eval["id_rank1"],
                "tail_rank1": result.final_eval.get("tail_rank1"),
                "epochs": [dict(r) for r in result.metrics],
            }
        )
    return rows
