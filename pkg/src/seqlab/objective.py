"""Build the training objective for one batch under a given loss spec.

This is where the three target layouts become concrete score requests:
last-position losses score the positive plus its negatives once per
sequence, all-position sampled losses score every valid slot, and the
full-softmax losses request complete catalog rows. Scores are requested
only where the layout needs them, so the global cost counters follow the
closed-form per-layout totals.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import losses as L
from .data import PAD_ID, TrainingBatch, sample_negatives
from .errors import ConfigError
from .metering import GLOBAL_METER
from .models import ParameterSet, SequenceModel, score_candidates, score_full


def _last_valid_index(mask: np.ndarray) -> np.ndarray:
    """Index of the rightmost True per row; rows must have one."""
    if not mask.any(axis=1).all():
        raise ValueError("every batch row needs at least one valid target")
    T = mask.shape[1]
    return T - 1 - np.argmax(mask[:, ::-1], axis=1)


def _sample_excluding_one(rng, n_items: int, exclude: np.ndarray, n: int) -> np.ndarray:
    """Uniform draws from [1, n_items] minus one excluded ID per slot."""
    if n_items < 2:
        raise ConfigError("need at least two items to sample negatives")
    draws = rng.integers(1, n_items, size=exclude.shape + (n,))
    return draws + (draws >= exclude[..., None])


def _negatives_for(rng, n_items, targets, n, exclude_sets=None, vocab=None):
    if exclude_sets is None:
        negs = _sample_excluding_one(rng, n_items, targets, n)
    else:
        if vocab is None:
            raise ConfigError("strict negative sampling needs the vocabulary")
        negs = np.empty(targets.shape + (n,), dtype=np.int64)
        flat_out = negs.reshape(-1, n)
        for i, excl in enumerate(exclude_sets):
            flat_out[i] = sample_negatives(rng, vocab, excl, n)
    GLOBAL_METER.add_neg_samples(int(np.prod(targets.shape)) * n)
    return negs


def batch_loss(
    model: SequenceModel,
    params: ParameterSet,
    batch: TrainingBatch,
    spec: L.LossSpec,
    rng,
    train: bool = False,
    exclude_sets=None,
    vocab=None,
):
    """Scalar loss tensor for one batch. ``rng`` drives negative sampling,
    masking, and (in training mode) dropout, in that draw order."""
    kind = spec.kind
    if kind == "mlm":
        return _mlm_loss(model, params, batch, spec, rng, train)

    hidden = model.forward(params, batch.inputs, train=train, rng=rng)
    h = hidden.states
    n_items = model.n_items

    if spec.layout == "last":
        last = _last_valid_index(batch.mask)
        rows = np.arange(batch.size)
        h_last = h[rows, last]                      # (B, d)
        targets = batch.targets[rows, last]         # (B,)
        if kind == "ce-last":
            scores = score_full(params, h_last)
            return L.ce_last_loss(L.FullScores(scores), targets)
        negs = _negatives_for(rng, n_items, targets, spec.negatives, exclude_sets, vocab)
        cands = np.concatenate([targets[:, None], negs], axis=1)
        scores = score_candidates(params, h_last, cands)
        c = L.CandidateScores(scores[:, 0], scores[:, 1:])
        return L.CANDIDATE_LOSSES[kind](c)

    # all-position layouts: gather the valid slots first
    b_idx, t_idx = np.nonzero(batch.mask)
    h_valid = h[b_idx, t_idx]                       # (n_valid, d)
    targets = batch.targets[b_idx, t_idx]           # (n_valid,)
    if kind == "ce-all":
        scores = score_full(params, h_valid)
        return L.enhanced_ce_loss(L.FullScores(scores), targets)
    if kind == "bce":
        row_excludes = None
        if exclude_sets is not None:
            row_excludes = [exclude_sets[b] for b in b_idx]
        negs = _negatives_for(rng, n_items, targets, spec.negatives, row_excludes, vocab)
        cands = np.concatenate([targets[:, None], negs], axis=1)
        scores = score_candidates(params, h_valid, cands)
        c = L.CandidateScores(scores[:, 0], scores[:, 1:])
        return L.bce_loss(c)
    raise ConfigError(f"no layout handler for loss kind {kind!r}")


def _mlm_loss(model, params, batch, spec, rng, train):
    """Mask real input positions, then predict the originals from context."""
    corrupted = batch.inputs.copy()
    coords_b, coords_t, originals = [], [], []
    for b in range(batch.size):
        real = np.flatnonzero(batch.inputs[b] != PAD_ID)
        masked = L.apply_mlm_masking(
            rng, batch.inputs[b, real].tolist(), spec.mask_prob, model.mask_id
        )
        for pos, orig in zip(masked.positions, masked.originals):
            coords_b.append(b)
            coords_t.append(int(real[pos]))
            originals.append(orig)
        corrupted[b, real] = masked.corrupted
    hidden = model.forward(params, corrupted, train=train, rng=rng)
    h_masked = hidden.states[np.asarray(coords_b), np.asarray(coords_t)]
    scores = score_full(params, h_masked)
    return L.mlm_loss(L.FullScores(scores), np.asarray(originals))
