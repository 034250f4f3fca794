"""Optimization loop: Adam updates, early stopping, and cost metering."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .data import PAD_ID, SplitDataset, child_rng, iterate_batches
from .errors import ConfigError
from .evaluation import full_rank_metrics
from .losses import LossSpec
from .metering import GLOBAL_METER
from .models import ParameterSet, SequenceModel
from .objective import batch_loss


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 256
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    patience: int = 10
    seed: int = 0
    grad_clip: float = 5.0
    strict_negatives: bool = False

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0 or self.patience < 1:
            raise ConfigError("epochs, batch_size, lr, and patience must be positive")


@dataclass
class OptimizerState:
    m: dict
    v: dict
    step: int = 0

    @staticmethod
    def for_params(params: ParameterSet) -> "OptimizerState":
        return OptimizerState(
            m={k: np.zeros_like(t.data) for k, t in params.items()},
            v={k: np.zeros_like(t.data) for k, t in params.items()},
        )


@dataclass
class TrainRecord:
    epoch: int
    loss: float
    val_hit10: float
    val_ndcg10: float
    seconds: float
    score_evals: int
    neg_samples: int


def adam_update(params: ParameterSet, state: OptimizerState, config: TrainConfig):
    """One bias-corrected Adam step; missing grads count as zero, the PAD
    embedding row never moves."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - config.beta1 ** t
    bc2 = 1.0 - config.beta2 ** t
    grads = {}
    sq_norm = 0.0
    for name, tensor in params.items():
        g = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
        if config.weight_decay > 0.0:
            g = g + config.weight_decay * tensor.data
        if name == "item_emb":
            g = g.copy() if g is tensor.grad else g
            g[PAD_ID] = 0.0
        grads[name] = g
        sq_norm += float(np.sum(np.asarray(g, dtype=np.float64) ** 2))
    if config.grad_clip > 0.0:
        norm = np.sqrt(sq_norm)
        if norm > config.grad_clip:
            scale = config.grad_clip / norm
            for name in grads:
                grads[name] = grads[name] * scale
    for name, tensor in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= config.beta1
        m += (1.0 - config.beta1) * g
        v *= config.beta2
        v += (1.0 - config.beta2) * (g * g)
        update = (config.lr / bc1) * m / (np.sqrt(v / bc2) + config.eps)
        tensor.data -= update.astype(tensor.data.dtype)
    params["item_emb"].data[PAD_ID] = 0.0


def check_compatible(model: SequenceModel, spec: LossSpec):
    """mlm needs bidirectional context; next-item losses must not see it."""
    bidirectional = model.arch == "transformer-bidirectional"
    if spec.kind == "mlm" and not bidirectional:
        raise ConfigError("mlm training requires the bidirectional model")
    if spec.kind != "mlm" and bidirectional:
        raise ConfigError(
            "the bidirectional model would leak future items into next-item "
            "losses; train it with mlm"
        )


def train_step(model, params, state, batch, spec, config, rng, exclude_sets=None, vocab=None):
    """Forward, backward, and one Adam update on a single batch."""
    check_compatible(model, spec)
    params.zero_grads()
    loss = batch_loss(
        model, params, batch, spec, rng,
        train=True, exclude_sets=exclude_sets, vocab=vocab,
    )
    loss.backward()
    emb_grad = params["item_emb"].grad
    if emb_grad is not None:
        emb_grad[PAD_ID] = 0.0
    adam_update(params, state, config)
    return float(loss.data)


@dataclass
class FitResult:
    params: ParameterSet
    records: list = field(default_factory=list)
    best_epoch: int = -1
    best_ndcg: float = float("-inf")


def fit(model: SequenceModel, split: SplitDataset, config: TrainConfig, spec: LossSpec) -> FitResult:
    """Train with per-epoch validation (full-rank NDCG@10) and early stop.

    Deterministic given (seed, configs, dataset): parameter init, epoch
    shuffles, negative draws, and dropout all run on streams derived from
    the seed.
    """
    check_compatible(model, spec)
    params = model.init_parameters(child_rng(config.seed, 0))
    state = OptimizerState.for_params(params)
    counters0 = GLOBAL_METER.snapshot()
    result = FitResult(params=params)
    stale = 0
    strict = config.strict_negatives
    exclude_cache = None
    if strict:
        exclude_cache = [frozenset(u.train) for u in split.users]
    for epoch in range(1, config.epochs + 1):
        start = time.monotonic()
        total, rows = 0.0, 0
        shuffle_rng = child_rng(config.seed, 1, epoch)
        for bi, batch in enumerate(iterate_batches(split, model.config.max_len, config.batch_size, shuffle_rng)):
            step_rng = child_rng(config.seed, 2, epoch, bi)
            excludes = None
            if strict:
                excludes = [exclude_cache[r] for r in batch.user_rows]
            value = train_step(
                model, params, state, batch, spec, config, step_rng,
                exclude_sets=excludes, vocab=split.vocab,
            )
            total += value * batch.size
            rows += batch.size
        seconds = time.monotonic() - start
        with GLOBAL_METER.paused():
            report = full_rank_metrics(model, params, split, "valid", ks=(10,))
        evals, negs = GLOBAL_METER.snapshot()
        record = TrainRecord(
            epoch=epoch,
            loss=total / max(rows, 1),
            val_hit10=report.hit[10],
            val_ndcg10=report.ndcg[10],
            seconds=seconds,
            score_evals=evals - counters0[0],
            neg_samples=negs - counters0[1],
        )
        result.records.append(record)
        if record.val_ndcg10 > result.best_ndcg:
            result.best_ndcg = record.val_ndcg10
            result.best_epoch = epoch
            result.params = params.copy()
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    return result


def write_train_log(path, records):
    """Tab-separated epoch log, one line per epoch."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("epoch\tloss\tval_hit10\tval_ndcg10\tseconds\tscore_evals\tneg_samples\n")
        for r in records:
            fh.write(
                f"{r.epoch}\t{r.loss:.6f}\t{r.val_hit10:.6f}\t{r.val_ndcg10:.6f}"
                f"\t{r.seconds:.3f}\t{r.score_evals}\t{r.neg_samples}\n"
            )
