"""Training objectives over model scores.

Every loss is a pure differentiable function from score tensors to a scalar
tape node; loss arithmetic always runs in double precision regardless of the
score dtype. Three target layouts exist: last-position only (bpr, bpr-max,
top1, top1-max, ce-last), every valid position (bce, ce-all), and masked
positions (mlm).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import (
    ConfigError,
    EmptyLossError,
    InvalidTargetError,
    NumericInputError,
)

LOSS_KINDS = ("bpr", "bpr-max", "top1", "top1-max", "bce", "ce-last", "ce-all", "mlm")
SAMPLED_KINDS = ("bpr", "bpr-max", "top1", "top1-max", "bce")

#: target layout per kind: which positions of the input sequence carry a loss
LAYOUTS = {
    "bpr": "last",
    "bpr-max": "last",
    "top1": "last",
    "top1-max": "last",
    "ce-last": "last",
    "bce": "all",
    "ce-all": "all",
    "mlm": "masked",
}

DEFAULT_MASK_PROB = 0.2


@dataclass(frozen=True)
class LossSpec:
    """Fully determines a training objective."""

    kind: str
    negatives: int = None
    mask_prob: float = None

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ConfigError(f"unknown loss kind {self.kind!r}; expected one of {LOSS_KINDS}")
        if self.kind in SAMPLED_KINDS:
            if self.negatives is None or self.negatives < 1:
                raise ConfigError(f"{self.kind} requires negatives >= 1")
        elif self.negatives is not None:
            raise ConfigError(f"{self.kind} does not take a negative count")
        if self.kind == "mlm":
            p = self.mask_prob
            if p is None or not (0.0 < p < 1.0):
                raise ConfigError("mlm requires mask_prob in (0, 1)")
        elif self.mask_prob is not None:
            raise ConfigError(f"{self.kind} does not take a mask probability")

    @property
    def layout(self) -> str:
        return LAYOUTS[self.kind]

    @staticmethod
    def from_options(kind, negatives=None, mask_prob=None) -> "LossSpec":
        """Build a spec from loose config values, applying defaults."""
        if kind in SAMPLED_KINDS:
            return LossSpec(kind, negatives=negatives if negatives else 1)
        if kind == "mlm":
            return LossSpec(kind, mask_prob=mask_prob if mask_prob else DEFAULT_MASK_PROB)
        return LossSpec(kind)

    def label(self) -> str:
        if self.kind in SAMPLED_KINDS:
            return f"{self.kind}-{self.negatives}"
        return self.kind


@dataclass
class CandidateScores:
    """Positive and sampled-negative scores, one slot group per position.

    ``pos`` has shape (...,), ``neg`` has shape (..., N_s). ``mask`` (same
    shape as pos) marks which leading slots are valid; None means all.
    """

    pos: "ad.Tensor"
    neg: "ad.Tensor"
    mask: np.ndarray = None

    def __post_init__(self):
        self.pos = ad.astensor(self.pos)
        self.neg = ad.astensor(self.neg)
        if self.neg.shape[:-1] != self.pos.shape:
            raise ValueError("neg must have shape pos.shape + (N_s,)")


@dataclass
class FullScores:
    """One score row per position over the whole catalog (items 1..n)."""

    rows: "ad.Tensor"
    mask: np.ndarray = None

    def __post_init__(self):
        self.rows = ad.astensor(self.rows)

    @property
    def n_items(self) -> int:
        return self.rows.shape[-1]


@dataclass
class MaskedSequence:
    """Result of masking a sequence for masked-item training."""

    corrupted: list
    positions: list
    originals: list


def _check_finite(*arrays):
    for arr in arrays:
        if not np.all(np.isfinite(arr)):
            raise NumericInputError("loss received a non-finite score")


def _f64(c: CandidateScores):
    _check_finite(c.pos.data, c.neg.data)
    return ad.cast(c.pos, np.float64), ad.cast(c.neg, np.float64)


def _reduce_positions(values, mask):
    """Average per-position loss values over valid positions."""
    if mask is None:
        return ad.tmean(values)
    count = int(mask.sum())
    if count == 0:
        raise EmptyLossError("no valid positions to average over")
    keep = ad.astensor(mask.astype(np.float64))
    return ad.mul(ad.tsum(ad.mul(values, keep)), 1.0 / count)


# pairwise last-position losses ------------------------------------------


def bpr_loss(c: CandidateScores):
    """Mean over negatives of -log sigmoid(pos - neg)."""
    pos, neg = _f64(c)
    d = ad.sub(pos[..., None], neg)
    per_pos = ad.tmean(ad.softplus(ad.mul(d, -1.0)), axis=-1)
    return _reduce_positions(per_pos, c.mask)


def bpr_max_loss(c: CandidateScores):
    """-log of the softmax-of-negatives weighted sigmoid margins.

    Computed in log space: logsumexp(log_softmax(neg) + log sigmoid(d)), so
    saturated margins cannot underflow the inner sum.
    """
    pos, neg = _f64(c)
    d = ad.sub(pos[..., None], neg)
    log_w = ad.log_softmax(neg, axis=-1)
    per_pos = ad.mul(ad.logsumexp(ad.add(log_w, ad.logsigmoid(d)), axis=-1), -1.0)
    return _reduce_positions(per_pos, c.mask)


def _top1_terms(pos, neg):
    d = ad.sub(neg, pos[..., None])
    return ad.add(ad.sigmoid(d), ad.sigmoid(ad.square(neg)))


def top1_loss(c: CandidateScores):
    """Mean over negatives of sigmoid(neg - pos) + sigmoid(neg^2)."""
    pos, neg = _f64(c)
    per_pos = ad.tmean(_top1_terms(pos, neg), axis=-1)
    return _reduce_positions(per_pos, c.mask)


def top1_max_loss(c: CandidateScores):
    """Softmax-of-negatives weighted version of top1_loss."""
    pos, neg = _f64(c)
    w = ad.softmax(neg, axis=-1)
    per_pos = ad.tsum(ad.mul(w, _top1_terms(pos, neg)), axis=-1)
    return _reduce_positions(per_pos, c.mask)


# pointwise all-position loss ---------------------------------------------


def bce_loss(c: CandidateScores):
    """Per position: -log sigmoid(pos) - sum_j log(1 - sigmoid(neg_j)).

    Summed over the negatives within a position, averaged over valid
    positions. log(1 - sigmoid(x)) is evaluated as -softplus(x).
    """
    pos, neg = _f64(c)
    per_pos = ad.add(
        ad.softplus(ad.mul(pos, -1.0)),
        ad.tsum(ad.softplus(neg), axis=-1),
    )
    return _reduce_positions(per_pos, c.mask)


# full-softmax losses ------------------------------------------------------


def _row_nll(rows, targets, n_items):
    targets = np.asarray(targets)
    if np.any(targets < 1) or np.any(targets > n_items):
        raise InvalidTargetError("target outside the real-item range [1, n_items]")
    logp = ad.log_softmax(rows, axis=-1)
    picked = ad.take_along_last(logp, targets - 1)
    return ad.mul(picked, -1.0)


def ce_last_loss(f: FullScores, target):
    """Full-softmax cross entropy on a single (or one-per-sequence) row."""
    _check_finite(f.rows.data)
    rows = ad.cast(f.rows, np.float64)
    nll = _row_nll(rows, target, f.n_items)
    return _reduce_positions(nll, f.mask)


def enhanced_ce_loss(f: FullScores, targets):
    """Cross entropy averaged over every valid position of the sequence."""
    _check_finite(f.rows.data)
    if f.mask is not None and not f.mask.any():
        raise EmptyLossError("no valid rows")
    rows = ad.cast(f.rows, np.float64)
    nll = _row_nll(rows, targets, f.n_items)
    return _reduce_positions(nll, f.mask)


def mlm_loss(f: FullScores, originals):
    """Cross entropy on masked rows against the original items.

    Same arithmetic as enhanced_ce_loss restricted to the masked rows.
    """
    return enhanced_ce_loss(f, originals)


# masking -------------------------------------------------------------------


def apply_mlm_masking(rng, items, mask_prob: float, mask_id: int) -> MaskedSequence:
    """Independently mask each position; force one mask if none hit."""
    if not 0.0 < mask_prob < 1.0:
        raise ConfigError("mask_prob must lie in (0, 1)")
    items = list(items)
    if not items:
        raise ValueError("cannot mask an empty sequence")
    hits = rng.random(len(items)) < mask_prob
    if not hits.any():
        hits[rng.integers(len(items))] = True
    corrupted = list(items)
    positions = []
    originals = []
    for idx in np.flatnonzero(hits):
        positions.append(int(idx))
        originals.append(items[idx])
        corrupted[idx] = mask_id
    return MaskedSequence(corrupted, positions, originals)


def append_inference_mask(items, mask_id: int, max_len: int) -> list:
    """Inference-time layout: most recent items followed by one MASK slot."""
    window = list(items)[-(max_len - 1):] if max_len > 1 else []
    return window + [mask_id]


#: callable registry for the scalar losses that act on CandidateScores
CANDIDATE_LOSSES = {
    "bpr": bpr_loss,
    "bpr-max": bpr_max_loss,
    "top1": top1_loss,
    "top1-max": top1_max_loss,
    "bce": bce_loss,
}
