"""Deterministic synthetic long-tailed identity data.

Each identity is a unit-norm cluster center on the input sphere; instances
are the center plus Gaussian noise. Instance counts follow a clamped Zipf
profile over identity rank, so a handful of head identities own most of
the data and the bulk of identities sit in the tail.

Everything here is a pure function of (config, seed): instances are drawn
from counter-based streams keyed by (seed, stream, identity, index), so
regeneration is order-independent and bit-identical.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from . import rng
from .errors import ConfigError, ShapeError
from .numerics import Tensor

DATASET_MAGIC = b"DCQD"
DATASET_VERSION = 1

INSTANCE_QUERY = 0  # sub-stream of INSTANCE_NOISE used for stored instances
INSTANCE_HELDOUT = 1  # sub-stream for evaluation-only instances


@dataclass
class IdentityUniverse:
    """C unit-norm cluster centers in d_in dimensions plus a noise scale."""

    C: int
    d_in: int
    sigma: float
    seed: int
    centers: np.ndarray  # C × d_in, rows unit norm

    def __post_init__(self):
        if self.centers.shape != (self.C, self.d_in):
            raise ShapeError(f"centers shape {self.centers.shape} != ({self.C}, {self.d_in})")


@dataclass
class LongTailSpec:
    """Clamped Zipf profile: count(rank r) ∝ r^(−exponent), r starting at 1."""

    zipf_exponent: float
    min_count: int = 1
    max_count: int = 1000

    def __post_init__(self):
        if self.zipf_exponent < 0:
            raise ConfigError(f"zipf exponent must be >= 0, got {self.zipf_exponent}")
        if self.min_count < 1 or self.max_count < self.min_count:
            raise ConfigError(f"bad count bounds [{self.min_count}, {self.max_count}]")


@dataclass
class PairBatch:
    """One training batch: query inputs, same-identity reference inputs, labels."""

    x_t: Tensor  # B × d_in
    x_w: Tensor  # B × d_in
    y: np.ndarray  # (B,) int64


@dataclass
class EvalProtocol:
    """Verification pairs plus a probe/gallery identification split.

    Gallery rows 0..n_probe−1 are the enrolled mates of the probes (one per
    probe identity); the remaining rows are distractor identities disjoint
    from all training identities.
    """

    pair_a: np.ndarray
    pair_b: np.ndarray
    pair_label_a: np.ndarray
    pair_label_b: np.ndarray
    pair_genuine: np.ndarray  # bool
    probe_x: np.ndarray
    probe_labels: np.ndarray
    gallery_x: np.ndarray
    gallery_labels: np.ndarray
    distractor_labels: np.ndarray


def build_universe(C: int, d_in: int, sigma: float, seed: int) -> IdentityUniverse:
    """Centers drawn as normalized Gaussians from per-identity streams."""
    if C < 1:
        raise ConfigError(f"need at least one identity, got C={C}")
    if d_in < 2:
        raise ConfigError(f"input dimension must be >= 2, got {d_in}")
    centers = np.empty((C, d_in))
    for ident in range(C):
        v = rng.stream(seed, rng.CENTERS, ident).standard_normal(d_in)
        centers[ident] = v / np.linalg.norm(v)
    return IdentityUniverse(C=C, d_in=d_in, sigma=float(sigma), seed=int(seed), centers=centers)


def assign_longtail_counts(spec: LongTailSpec, C: int) -> np.ndarray:
    """Instance count per identity, non-increasing in rank (identity 0 is head)."""
    ranks = np.arange(1, C + 1, dtype=np.float64)
    raw = spec.max_count * ranks ** (-spec.zipf_exponent)
    counts = np.floor(raw + 0.5)  # round half up, deterministically
    return np.clip(counts, spec.min_count, spec.max_count).astype(np.int64)


def tail_summary(counts: np.ndarray, tail_threshold: int = 10) -> dict:
    """Counts histogram plus the fraction of identities below the tail threshold."""
    counts = np.asarray(counts)
    values, freq = np.unique(counts, return_counts=True)
    return {
        "identities": int(counts.size),
        "instances": int(counts.sum()),
        "mean_count": float(counts.mean()),
        "tail_threshold": int(tail_threshold),
        "tail_fraction": float((counts < tail_threshold).mean()),
        "histogram": {int(v): int(f) for v, f in zip(values, freq)},
    }


def _noise(universe: IdentityUniverse, substream: int, identity: int, index: int) -> np.ndarray:
    gen = rng.stream(universe.seed, rng.INSTANCE_NOISE, substream, identity, index)
    return universe.sigma * gen.standard_normal(universe.d_in)


def draw_instance(
    universe: IdentityUniverse,
    identity: int,
    instance_index: int,
    counts: np.ndarray | None = None,
) -> np.ndarray:
    """Center plus per-(identity, index) Gaussian noise; not re-normalized.

    When ``counts`` is supplied the instance index is validated against the
    identity's instance budget.
    """
    if not 0 <= identity < universe.C:
        raise IndexError(f"identity {identity} out of range [0, {universe.C})")
    if instance_index < 0:
        raise IndexError(f"negative instance index {instance_index}")
    if counts is not None and instance_index >= counts[identity]:
        raise IndexError(
            f"instance {instance_index} out of range for identity {identity} "
            f"with {counts[identity]} instances"
        )
    return universe.centers[identity] + _noise(universe, INSTANCE_QUERY, identity, instance_index)


def heldout_instance(universe: IdentityUniverse, identity: int, index: int) -> np.ndarray:
    """Evaluation-only draw from a stream disjoint from training instances."""
    if not 0 <= identity < universe.C:
        raise IndexError(f"identity {identity} out of range [0, {universe.C})")
    return universe.centers[identity] + _noise(universe, INSTANCE_HELDOUT, identity, index)


def make_pair_batch(
    universe: IdentityUniverse,
    counts: np.ndarray,
    batch_size: int,
    mode: str,
    gen: np.random.Generator,
) -> PairBatch:
    """Sample B (query, reference, label) triples.

    Instance mode picks identities with probability proportional to their
    instance count; class mode picks uniformly over identities with at
    least one instance. The reference comes from the same identity with a
    distinct instance index whenever the identity has two or more
    instances; single-instance identities get a reference drawn as the
    center plus fresh noise from the batch stream.
    """
    if mode not in ("instance", "class"):
        raise ConfigError(f"sampling mode must be 'instance' or 'class', got {mode!r}")
    counts = np.asarray(counts, dtype=np.int64)
    eligible = np.flatnonzero(counts > 0)
    if eligible.size == 0:
        raise ConfigError("no identity has a positive instance count")

    if mode == "instance":
        weights = counts[eligible] / counts[eligible].sum()
        idents = gen.choice(eligible, size=batch_size, p=weights)
    else:
        idents = gen.choice(eligible, size=batch_size)

    x_t = np.empty((batch_size, universe.d_in))
    x_w = np.empty((batch_size, universe.d_in))
    for i, ident in enumerate(idents):
        n = int(counts[ident])
        q = int(gen.integers(n))
        x_t[i] = draw_instance(universe, int(ident), q)
        if n >= 2:
            r = int(gen.integers(n - 1))
            if r >= q:
                r += 1
            x_w[i] = draw_instance(universe, int(ident), r)
        else:
            x_w[i] = universe.centers[ident] + universe.sigma * gen.standard_normal(universe.d_in)
    return PairBatch(x_t=Tensor(x_t), x_w=Tensor(x_w), y=idents.astype(np.int64))


def build_eval_protocol(
    universe: IdentityUniverse,
    counts: np.ndarray,
    n_pairs: int,
    n_probe: int,
    n_distractors: int,
    seed: int,
) -> EvalProtocol:
    """Balanced verification pairs plus probe/gallery sets with distractors.

    Training identities are 0..len(counts)−1; distractors come from the
    reserved range [len(counts), universe.C), which training never touches.
    All evaluation inputs are drawn from the held-out instance stream.
    """
    counts = np.asarray(counts, dtype=np.int64)
    n_train = int(counts.size)
    n_reserved = universe.C - n_train
    if n_pairs % 2 != 0:
        raise ConfigError(f"n_pairs must be even for a balanced protocol, got {n_pairs}")
    if n_distractors > n_reserved:
        raise ConfigError(f"{n_distractors} distractors requested, only {n_reserved} reserved")
    if n_probe > n_train:
        raise ConfigError(f"{n_probe} probes requested from {n_train} training identities")

    gen = rng.stream(seed, rng.PROTOCOL)
    half = n_pairs // 2
    d = universe.d_in

    pair_a = np.empty((n_pairs, d))
    pair_b = np.empty((n_pairs, d))
    label_a = np.empty(n_pairs, dtype=np.int64)
    label_b = np.empty(n_pairs, dtype=np.int64)
    genuine = np.zeros(n_pairs, dtype=bool)
    genuine[:half] = True
    for i in range(half):
        ident = int(gen.integers(n_train))
        label_a[i] = label_b[i] = ident
        pair_a[i] = heldout_instance(universe, ident, int(gen.integers(1 << 30)))
        pair_b[i] = heldout_instance(universe, ident, int(gen.integers(1 << 30)))
    for i in range(half, n_pairs):
        a = int(gen.integers(n_train))
        b = int(gen.integers(n_train - 1))
        if b >= a:
            b += 1
        label_a[i], label_b[i] = a, b
        pair_a[i] = heldout_instance(universe, a, int(gen.integers(1 << 30)))
        pair_b[i] = heldout_instance(universe, b, int(gen.integers(1 << 30)))

    probe_ids = gen.choice(n_train, size=n_probe, replace=False).astype(np.int64)
    probe_x = np.stack([heldout_instance(universe, int(c), 0) for c in probe_ids])
    mates_x = np.stack([heldout_instance(universe, int(c), 1) for c in probe_ids])
    distractor_ids = (n_train + np.arange(n_distractors)).astype(np.int64)
    if n_distractors:
        distract_x = np.stack([heldout_instance(universe, int(c), 0) for c in distractor_ids])
        gallery_x = np.vstack([mates_x, distract_x])
    else:
        gallery_x = mates_x
    gallery_labels = np.concatenate([probe_ids, distractor_ids])

    return EvalProtocol(
        pair_a=pair_a,
        pair_b=pair_b,
        pair_label_a=label_a,
        pair_label_b=label_b,
        pair_genuine=genuine,
        probe_x=probe_x,
        probe_labels=probe_ids,
        gallery_x=gallery_x,
        gallery_labels=gallery_labels,
        distractor_labels=distractor_ids,
    )


def write_dataset(path, universe: IdentityUniverse, counts: np.ndarray) -> dict:
    """Materialize every instance to a flat binary file; returns the summary.

    Layout: little-endian header (magic, version u32, C u32, d_in u32,
    total u32) followed by one record per instance: identity u32,
    instance u32, d_in float64 values. A JSON summary with the counts
    histogram and tail fraction is written next to the file.
    """
    counts = np.asarray(counts, dtype=np.int64)
    total = int(counts.sum())
    path = str(path)
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<IIII", DATASET_VERSION, counts.size, universe.d_in, total))
        for ident in range(counts.size):
            for k in range(int(counts[ident])):
                fh.write(struct.pack("<II", ident, k))
                fh.write(draw_instance(universe, ident, k).astype("<f8").tobytes())
    summary = tail_summary(counts)
    with open(path + ".json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    return summary


def read_dataset(path) -> tuple[dict, np.ndarray, np.ndarray, np.ndarray]:
    """Read a materialized dataset: (header, identities, instance ids, data)."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != DATASET_MAGIC:
            raise ConfigError(f"not a dataset file (magic {magic!r})")
        version, n_classes, d_in, total = struct.unpack("<IIII", fh.read(16))
        if version != DATASET_VERSION:
            raise ConfigError(f"unsupported dataset version {version}")
        idents = np.empty(total, dtype=np.int64)
        indices = np.empty(total, dtype=np.int64)
        data = np.empty((total, d_in))
        for row in range(total):
            ident, idx = struct.unpack("<II", fh.read(8))
            idents[row] = ident
            indices[row] = idx
            data[row] = np.frombuffer(fh.read(8 * d_in), dtype="<f8")
    header = {"version": version, "C": n_classes, "d_in": d_in, "total": total}
    return header, idents, indices, data
