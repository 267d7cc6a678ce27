"""SGD training loops for the queue method and the full-FC baselines.

One iteration of the queue method, in order: forward the query batch
through the extractor, generate class weights from the reference batch
with the EMA shadow (detached), build masked logits against the queue,
take the margin-softmax loss, backprop, SGD step on the extractor, EMA
update of the shadow, and finally enqueue the batch's weights. The
positive weight used at step t therefore enters the queue only at t+1.

Batches are a pure function of (seed, global step), so training is
deterministic and checkpoint resume is bit-exact.
"""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import baseline as fc
from . import class_queue as cq
from . import rng
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ConfigError, ShapeError, TrainingDiverged
from .evalbench import evaluate_protocol
from .model import MlpParams, extract_features, init_extractor
from .numerics import Tape
from .synthdata import (
    EvalProtocol,
    IdentityUniverse,
    LongTailSpec,
    assign_longtail_counts,
    build_eval_protocol,
    build_universe,
    make_pair_batch,
)

METHOD_DCQ = "dcq"
METHOD_FULL = "cosface-full"
METHOD_HEAD_ONLY = "cosface-head-only"
METHODS = (METHOD_DCQ, METHOD_FULL, METHOD_HEAD_ONLY)

METRICS_COLUMNS = ("epoch", "lr", "train_loss", "ver_acc", "id_rank1", "wall_seconds")


@dataclass(frozen=True)
class TrainConfig:
    """All knobs for one run. None fields resolve to method-specific defaults.

    Loss scale/margin default to 50/0.3 for the queue method and 64/0.35
    for the CosFace baselines; initial learning rates to 0.06 and 0.1.
    The desk-scale schedule keeps the 10x step-decay shape at reduced
    length.
    """

    method: str = METHOD_DCQ
    s: float | None = None
    m: float | None = None
    alpha: float = cq.DEFAULT_ALPHA
    K: int | None = None
    B: int = 32
    lr0: float | None = None
    decay_epochs: tuple[int, ...] = (15, 25, 28)
    decay_factor: float = 0.1
    epochs: int = 30
    sgd_momentum: float = 0.9
    weight_decay: float = 1e-4
    sampling: str = "instance"
    min_instances: int = 9
    seed: int = 1
    # synthetic data
    n_classes: int = 2000
    d_in: int = 32
    embed_dim: int = 32
    hidden_dims: tuple[int, ...] = (64, 64)
    sigma: float = 0.1
    zipf_exponent: float = 1.5
    min_count: int = 2
    max_count: int = 200
    n_reserved: int = 200
    # evaluation protocol
    eval_pairs: int = 400
    eval_probes: int = 200
    eval_distractors: int = 100
    checkpoint_every: int = 0

    def replace(self, **kwargs) -> "TrainConfig":
        for key in kwargs:
            if key not in self.__dataclass_fields__:
                raise ConfigError(f"unknown config field {key!r}")
        return dataclasses.replace(self, **kwargs)

    def resolve(self) -> "TrainConfig":
        """Fill method-dependent defaults and validate the result."""
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        is_dcq = self.method == METHOD_DCQ
        filled = self.replace(
            s=self.s if self.s is not None else (cq.DEFAULT_SCALE if is_dcq else fc.DEFAULT_SCALE),
            m=self.m if self.m is not None else (cq.DEFAULT_MARGIN if is_dcq else fc.DEFAULT_MARGIN),
            lr0=self.lr0 if self.lr0 is not None else (0.06 if is_dcq else 0.1),
            K=self.K if self.K is not None else max(self.B, round(0.1 * self.n_classes)),
            decay_epochs=tuple(int(e) for e in self.decay_epochs),
            hidden_dims=tuple(int(h) for h in self.hidden_dims),
        )
        filled.validate()
        return filled

    def validate(self) -> None:
        if self.sampling not in ("instance", "class"):
            raise ConfigError(f"sampling must be 'instance' or 'class', got {self.sampling!r}")
        if self.m is not None and not 0.0 <= self.m < 1.0:
            raise ConfigError(f"margin must lie in [0, 1), got {self.m}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.B < 1 or self.epochs < 1:
            raise ConfigError("batch size and epochs must be positive")
        if self.method == METHOD_DCQ and self.K is not None and self.K < self.B:
            raise ConfigError(f"queue size K={self.K} must be >= batch size B={self.B}")
        if not 0.0 < self.decay_factor <= 1.0:
            raise ConfigError(f"decay factor must lie in (0, 1], got {self.decay_factor}")

    @property
    def layer_dims(self) -> list[int]:
        return [self.d_in, *self.hidden_dims, self.embed_dim]

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["decay_epochs"] = list(self.decay_epochs)
        out["hidden_dims"] = list(self.hidden_dims)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        fields = set(cls.__dataclass_fields__)
        unknown = set(data) - fields
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        kwargs = dict(data)
        for key in ("decay_epochs", "hidden_dims"):
            if key in kwargs and kwargs[key] is not None:
                kwargs[key] = tuple(kwargs[key])
        return cls(**kwargs)


def lr_at_step(config: TrainConfig, epoch: int) -> float:
    """Step-decay schedule: lr0 times factor per decay epoch reached."""
    if not 0 <= epoch < config.epochs:
        raise ConfigError(f"epoch {epoch} outside [0, {config.epochs})")
    cfg = config.resolve()
    n_decays = sum(1 for d in cfg.decay_epochs if d <= epoch)
    return cfg.lr0 * cfg.decay_factor**n_decays


def create_optimizer_state(named_params) -> dict[str, np.ndarray]:
    """Zero velocity buffers mirroring each parameter's shape."""
    return {name: np.zeros_like(p.data) for name, p in named_params}


def sgd_momentum_step(
    named_params,
    grads: dict[str, np.ndarray],
    state: dict[str, np.ndarray],
    lr: float,
    momentum: float,
    weight_decay: float,
    exempt: frozenset[str] = frozenset(),
) -> None:
    """g' = g + wd·θ (unless exempt); v ← momentum·v + g'; θ ← θ − lr·v."""
    for name, p in named_params:
        g = grads[name]
        if g.shape != p.data.shape:
            raise ShapeError(f"gradient shape {g.shape} vs parameter {p.data.shape} at {name}")
        if weight_decay and name not in exempt:
            g = g + weight_decay * p.data
        v = state[name]
        v *= momentum
        v += g
        p.data -= lr * v


@dataclass
class TrainResult:
    config: TrainConfig
    universe: IdentityUniverse
    counts: np.ndarray
    protocol: EvalProtocol
    extractor: MlpParams
    generator: cq.EmaGenerator | None
    queue: cq.ClassQueue | None
    head: fc.FcHead | None
    retained_ids: np.ndarray | None
    label_map: np.ndarray | None
    metrics: list[dict] = field(default_factory=list)
    iter_losses: list[float] = field(default_factory=list)
    final_eval: dict = field(default_factory=dict)
    optimizer_state: dict = field(default_factory=dict)
    final_step: int = 0


def _weight_decay_exempt(named_params) -> frozenset[str]:
    # biases and PReLU slopes carry no decay
    return frozenset(
        name for name, _ in named_params if name.endswith(".bias") or name.endswith(".slope")
    )


def _checkpoint_payload(cfg, state, extractor, generator, queue, head, retained, opt_state):
    meta = {"config": cfg.to_dict(), "state": dict(state)}
    arrays: dict[str, np.ndarray] = {}
    for name, p in extractor.named_parameters():
        arrays[f"extractor.{name}"] = p.data
    if generator is not None:
        for name, p in generator.shadow.named_parameters():
            arrays[f"generator.{name}"] = p.data
    if queue is not None:
        arrays["queue.weights"] = queue.weights
        arrays["queue.labels"] = queue.labels.astype(np.float64)
        meta["state"]["queue_cursor"] = queue.cursor
    if head is not None:
        arrays["head.W"] = head.W.data
    if retained is not None:
        arrays["label_map.retained"] = retained.astype(np.float64)
    for name, v in opt_state.items():
        arrays[f"velocity.{name}"] = v
    return meta, arrays


def _restore_from_checkpoint(arrays, extractor, generator, queue, head, opt_state, meta):
    for name, p in extractor.named_parameters():
        p.data[...] = arrays[f"extractor.{name}"]
    if generator is not None:
        for name, p in generator.shadow.named_parameters():
            p.data[...] = arrays[f"generator.{name}"]
    if queue is not None:
        queue.weights[...] = arrays["queue.weights"]
        queue.labels[...] = arrays["queue.labels"].astype(np.int64)
        queue.cursor = int(meta["state"]["queue_cursor"])
    if head is not None:
        head.W.data[...] = arrays["head.W"]
    for name in opt_state:
        opt_state[name][...] = arrays[f"velocity.{name}"]


def run_training(
    config: TrainConfig,
    universe: IdentityUniverse | None = None,
    counts: np.ndarray | None = None,
    hooks: Callable[[dict], None] | None = None,
    resume_from=None,
    checkpoint_dir=None,
) -> TrainResult:
    """Train one model per the config; returns parameters and metric series.

    ``hooks`` receives a record per iteration (step, loss, labels and for
    the queue method the positive weights plus queue snapshots around the
    enqueue) for diagnostics. ``resume_from`` continues from a checkpoint
    written with the same config; only epochs after the checkpoint are run
    and reported.
    """
    cfg = config.resolve()
    if universe is None:
        universe = build_universe(cfg.n_classes + cfg.n_reserved, cfg.d_in, cfg.sigma, cfg.seed)
    if counts is None:
        spec = LongTailSpec(cfg.zipf_exponent, cfg.min_count, cfg.max_count)
        counts = assign_longtail_counts(spec, cfg.n_classes)
    protocol = build_eval_protocol(
        universe, counts, cfg.eval_pairs, cfg.eval_probes, cfg.eval_distractors, cfg.seed
    )

    extractor = init_extractor(cfg.layer_dims, cfg.seed)
    generator = queue = head = retained = label_map = None
    counts_eff = counts
    if cfg.method == METHOD_DCQ:
        generator = cq.EmaGenerator(extractor, cfg.alpha)
        queue = cq.ClassQueue(cfg.embed_dim, cfg.K)
    else:
        if cfg.method == METHOD_HEAD_ONLY:
            retained, label_map = fc.filter_head_classes(counts, cfg.min_instances)
            counts_eff = np.where(label_map >= 0, counts, 0)
            head = fc.FcHead(cfg.embed_dim, retained.size, cfg.seed)
        else:
            head = fc.FcHead(cfg.embed_dim, len(counts), cfg.seed)

    named_params = list(extractor.named_parameters())
    if head is not None:
        named_params += head.named_parameters()
    opt_state = create_optimizer_state(named_params)
    exempt = _weight_decay_exempt(named_params)

    start_epoch = 0
    global_step = 0
    if resume_from is not None:
        meta, arrays = load_checkpoint(resume_from)
        if meta["config"] != cfg.to_dict():
            raise ConfigError("checkpoint config does not match the requested config")
        _restore_from_checkpoint(arrays, extractor, generator, queue, head, opt_state, meta)
        start_epoch = int(meta["state"]["epoch_next"])
        global_step = int(meta["state"]["global_step"])

    steps_per_epoch = max(1, int(counts_eff.sum()) // cfg.B)
    result = TrainResult(
        config=cfg, universe=universe, counts=counts, protocol=protocol,
        extractor=extractor, generator=generator, queue=queue, head=head,
        retained_ids=retained, label_map=label_map, optimizer_state=opt_state,
    )

    for epoch in range(start_epoch, cfg.epochs):
        epoch_start = time.perf_counter()
        lr = lr_at_step(cfg, epoch)
        epoch_losses = []
        for _ in range(steps_per_epoch):
            batch = make_pair_batch(
                universe, counts_eff, cfg.B, cfg.sampling,
                rng.stream(cfg.seed, rng.BATCH, global_step),
            )
            tape = Tape()
            feats = extract_features(extractor, batch.x_t, tape)
            w_pos = None
            queue_before = None
            if cfg.method == METHOD_DCQ:
                w_pos = generator.generate(batch.x_w)
                l_pos, l_neg = cq.dcq_logits_with_mask(feats, w_pos, queue, batch.y, tape)
                loss, diag = cq.dcq_cosface_loss(l_pos, l_neg, cfg.s, cfg.m, tape)
            else:
                y_loss = batch.y if label_map is None else label_map[batch.y]
                loss, diag = fc.fc_cosface_loss(feats, head, y_loss, cfg.s, cfg.m, tape)

            loss_value = float(loss.data)
            if not np.isfinite(loss_value):
                raise TrainingDiverged(
                    f"non-finite loss {loss_value!r} at step {global_step} "
                    f"(epoch {epoch}, labels {batch.y.tolist()}, "
                    f"feature range [{feats.data.min():.3e}, {feats.data.max():.3e}])",
                    step=global_step, labels=batch.y, batch=batch,
                )

            tape.backward(loss)
            grads = {name: tape.grad(p) for name, p in named_params}
            sgd_momentum_step(
                named_params, grads, opt_state, lr, cfg.sgd_momentum, cfg.weight_decay, exempt
            )
            if cfg.method == METHOD_DCQ:
                if hooks is not None:
                    queue_before = queue.snapshot()
                generator.update(extractor)
                queue.update(w_pos, batch.y)

            if hooks is not None:
                hooks(
                    {
                        "step": global_step, "epoch": epoch, "loss": loss_value,
                        "labels": batch.y.copy(), "diagnostics": diag,
                        "w_pos": None if w_pos is None else w_pos.data.copy(),
                        "queue_before": queue_before,
                        "queue_after": queue.snapshot() if queue is not None else None,
                        # live references for read-only diagnostics
                        "extractor": extractor, "generator": generator,
                        "queue": queue, "head": head,
                    }
                )
            epoch_losses.append(loss_value)
            result.iter_losses.append(loss_value)
            global_step += 1

        scores = evaluate_protocol(extractor, protocol, counts)
        result.metrics.append(
            {
                "epoch": epoch,
                "lr": lr,
                "train_loss": float(np.mean(epoch_losses)),
                "ver_acc": scores["ver_acc"],
                "id_rank1": scores["id_rank1"],
                "wall_seconds": time.perf_counter() - epoch_start,
            }
        )
        if checkpoint_dir is not None and cfg.checkpoint_every > 0:
            if (epoch + 1) % cfg.checkpoint_every == 0 or epoch + 1 == cfg.epochs:
                state = {"epoch_next": epoch + 1, "global_step": global_step}
                meta, arrays = _checkpoint_payload(
                    cfg, state, extractor, generator, queue, head, retained, opt_state
                )
                save_checkpoint(f"{checkpoint_dir}/epoch_{epoch + 1:03d}.ckpt", meta, arrays)

    result.final_step = global_step
    result.final_eval = evaluate_protocol(extractor, protocol, counts)
    return result


def save_result_checkpoint(path, result: TrainResult) -> None:
    """Write a final checkpoint for a completed run."""
    cfg = result.config
    state = {"epoch_next": cfg.epochs, "global_step": result.final_step}
    meta, arrays = _checkpoint_payload(
        cfg, state, result.extractor, result.generator, result.queue,
        result.head, result.retained_ids, result.optimizer_state,
    )
    save_checkpoint(path, meta, arrays)


def load_result_checkpoint(path) -> TrainResult:
    """Rebuild model state (not metrics) from a checkpoint for evaluation."""
    meta, arrays = load_checkpoint(path)
    cfg = TrainConfig.from_dict(meta["config"])
    universe = build_universe(cfg.n_classes + cfg.n_reserved, cfg.d_in, cfg.sigma, cfg.seed)
    spec = LongTailSpec(cfg.zipf_exponent, cfg.min_count, cfg.max_count)
    counts = assign_longtail_counts(spec, cfg.n_classes)
    protocol = build_eval_protocol(
        universe, counts, cfg.eval_pairs, cfg.eval_probes, cfg.eval_distractors, cfg.seed
    )
    extractor = init_extractor(cfg.layer_dims, cfg.seed)
    generator = queue = head = retained = label_map = None
    if cfg.method == METHOD_DCQ:
        generator = cq.EmaGenerator(extractor, cfg.alpha)
        queue = cq.ClassQueue(cfg.embed_dim, cfg.K)
    elif cfg.method == METHOD_HEAD_ONLY:
        retained, label_map = fc.filter_head_classes(counts, cfg.min_instances)
        head = fc.FcHead(cfg.embed_dim, retained.size, cfg.seed)
    else:
        head = fc.FcHead(cfg.embed_dim, len(counts), cfg.seed)
    named_params = list(extractor.named_parameters())
    if head is not None:
        named_params += head.named_parameters()
    opt_state = create_optimizer_state(named_params)
    _restore_from_checkpoint(arrays, extractor, generator, queue, head, opt_state, meta)
    return TrainResult(
        config=cfg, universe=universe, counts=counts, protocol=protocol,
        extractor=extractor, generator=generator, queue=queue, head=head,
        retained_ids=retained, label_map=label_map, optimizer_state=opt_state,
    )
