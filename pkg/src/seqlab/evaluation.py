"""Ranking metrics: full-rank and sampled HIT@k / NDCG@k, plus the
per-position diagnostic curve.

Ties are broken pessimistically by item ID: an item with an equal score and
a smaller ID outranks the target. Nothing is filtered from the catalog when
ranking.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .data import SplitDataset, child_rng
from .errors import InvalidTargetError
from .models import ParameterSet, SequenceModel, score_candidates, score_full

DEFAULT_KS = (1, 5, 10, 20)
EVAL_CHUNK = 512


@dataclass
class RankResult:
    user: int
    target: int
    rank: int


@dataclass
class MetricsReport:
    phase: str
    users: int
    hit: dict
    ndcg: dict

    def to_dict(self):
        out = {f"hit@{k}": self.hit[k] for k in sorted(self.hit)}
        out.update({f"ndcg@{k}": self.ndcg[k] for k in sorted(self.ndcg)})
        out["users"] = self.users
        out["phase"] = self.phase
        return out


@dataclass
class PerTimestampReport:
    positions: np.ndarray
    hit10: np.ndarray
    ndcg10: np.ndarray
    counts: np.ndarray

    def write_csv(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("position,hit_at_10,ndcg_at_10,count\n")
            for p, h, n, c in zip(self.positions, self.hit10, self.ndcg10, self.counts):
                fh.write(f"{p},{h:.6f},{n:.6f},{c}\n")


@dataclass
class ResourceReport:
    seconds: float
    score_evals: int
    neg_samples: int

    def to_dict(self):
        return {
            "seconds": self.seconds,
            "score_evals": self.score_evals,
            "neg_samples": self.neg_samples,
        }


def rank_of_target(scores_row, target: int) -> int:
    """1 + strictly-better items + equal-scored items with a smaller ID."""
    row = np.asarray(scores_row)
    if not 1 <= target <= row.shape[-1]:
        raise InvalidTargetError(f"target {target} outside [1, {row.shape[-1]}]")
    s = row[target - 1]
    greater = int(np.sum(row > s))
    tied_lower = int(np.sum(row[: target - 1] == s))
    return 1 + greater + tied_lower


def _ranks_for_rows(rows: np.ndarray, targets: np.ndarray) -> np.ndarray:
    idx = targets - 1
    s = rows[np.arange(rows.shape[0]), idx]
    greater = (rows > s[:, None]).sum(axis=1)
    cols = np.arange(rows.shape[1])[None, :]
    tied_lower = ((rows == s[:, None]) & (cols < idx[:, None])).sum(axis=1)
    return 1 + greater + tied_lower


def _metrics_from_ranks(ranks: np.ndarray, ks) -> tuple:
    hit = {k: float(np.mean(ranks <= k)) for k in ks}
    gains = 1.0 / np.log2(ranks + 1.0)
    ndcg = {k: float(np.mean(np.where(ranks <= k, gains, 0.0))) for k in ks}
    return hit, ndcg


def _score_rows(model: SequenceModel, params: ParameterSet, input_rows: np.ndarray) -> np.ndarray:
    """Catalog scores at the last position of each input row."""
    with ad.no_grad():
        hidden = model.forward(params, input_rows, train=False)
        last = hidden.states[:, -1, :]
        return score_full(params, last).data


def full_rank_metrics(model, params, split: SplitDataset, phase: str, ks=DEFAULT_KS) -> MetricsReport:
    """Rank every user's held-out target against the whole catalog."""
    if phase not in ("valid", "test"):
        raise ValueError("phase must be 'valid' or 'test'")
    ranks = rank_all_targets(model, params, split, phase)
    hit, ndcg = _metrics_from_ranks(ranks, ks)
    return MetricsReport(phase, len(ranks), hit, ndcg)


def rank_all_targets(model, params, split: SplitDataset, phase: str) -> np.ndarray:
    prefixes, targets = [], []
    for user in split.users:
        if phase == "valid":
            prefixes.append(user.train)
            targets.append(user.valid)
        else:
            prefixes.append(user.train + [user.valid])
            targets.append(user.test)
    targets = np.asarray(targets, dtype=np.int64)
    ranks = np.empty(len(prefixes), dtype=np.int64)
    for start in range(0, len(prefixes), EVAL_CHUNK):
        chunk = prefixes[start:start + EVAL_CHUNK]
        rows = np.stack([model.inference_row(p) for p in chunk])
        scores = _score_rows(model, params, rows)
        ranks[start:start + len(chunk)] = _ranks_for_rows(scores, targets[start:start + len(chunk)])
    return ranks


def sampled_metrics(model, params, split: SplitDataset, seed: int, negatives: int = 100,
                    ks=DEFAULT_KS) -> MetricsReport:
    """Rank the target among itself plus ``negatives`` distinct items the
    user never interacted with; per-user rng streams come from (seed, user)."""
    n_items = split.vocab.size if split.vocab else model.n_items
    ranks = []
    short_users = 0
    users = split.users
    for start in range(0, len(users), EVAL_CHUNK):
        chunk = users[start:start + EVAL_CHUNK]
        rows = np.stack([model.inference_row(u.train + [u.valid]) for u in chunk])
        with ad.no_grad():
            hidden = model.forward(params, rows, train=False)
            last = hidden.states[:, -1, :]
            for i, user in enumerate(chunk):
                seen = np.zeros(n_items + 1, dtype=bool)
                seen[np.asarray(user.full)] = True
                eligible = np.flatnonzero(~seen[1:]) + 1
                n_eff = min(negatives, eligible.size)
                if n_eff < negatives:
                    short_users += 1
                rng = child_rng(seed, user.user)
                negs = rng.choice(eligible, size=n_eff, replace=False)
                cands = np.concatenate([[user.test], negs])
                scores = score_candidates(params, last[i], cands).data
                s_t = scores[0]
                greater = int(np.sum(scores[1:] > s_t))
                tied_lower = int(np.sum((scores[1:] == s_t) & (negs < user.test)))
                ranks.append(1 + greater + tied_lower)
    if short_users:
        warnings.warn(
            f"catalog too small for {negatives} distinct negatives; "
            f"{short_users} users ranked against fewer candidates"
        )
    ranks = np.asarray(ranks, dtype=np.int64)
    hit, ndcg = _metrics_from_ranks(ranks, ks)
    return MetricsReport("test-sampled", len(ranks), hit, ndcg)


def per_timestamp_eval(model, params, split: SplitDataset, max_len: int = None) -> PerTimestampReport:
    """HIT@10 / NDCG@10 at every position of the (right-aligned) sequence.

    Sequences are truncated to their most recent ``max_len + 2`` items so the
    final two columns are exactly the validation and test targets. The first
    covered position of each user is skipped (no prefix to predict from).
    """
    T = max_len if max_len is not None else model.config.max_len
    width = T + 2
    jobs_prefix, jobs_target, jobs_pos = [], [], []
    for user in split.users:
        full = user.full
        window = full[-width:]
        offset = len(full) - len(window)
        start_pos = width - len(window) + 1
        for p_local, item in enumerate(window):
            g = offset + p_local            # 0-based global index of this item
            if g == 0:
                continue                    # empty prefix
            jobs_prefix.append(full[:g])
            jobs_target.append(item)
            jobs_pos.append(start_pos + p_local)
    hit_sum = np.zeros(width + 1)
    ndcg_sum = np.zeros(width + 1)
    counts = np.zeros(width + 1, dtype=np.int64)
    targets = np.asarray(jobs_target, dtype=np.int64)
    positions = np.asarray(jobs_pos, dtype=np.int64)
    for start in range(0, len(jobs_prefix), EVAL_CHUNK):
        chunk = jobs_prefix[start:start + EVAL_CHUNK]
        rows = np.stack([model.inference_row(p) for p in chunk])
        scores = _score_rows(model, params, rows)
        ranks = _ranks_for_rows(scores, targets[start:start + len(chunk)])
        pos = positions[start:start + len(chunk)]
        np.add.at(hit_sum, pos, (ranks <= 10).astype(float))
        np.add.at(ndcg_sum, pos, np.where(ranks <= 10, 1.0 / np.log2(ranks + 1.0), 0.0))
        np.add.at(counts, pos, 1)
    with np.errstate(invalid="ignore"):
        hit10 = np.where(counts > 0, hit_sum / np.maximum(counts, 1), 0.0)
        ndcg10 = np.where(counts > 0, ndcg_sum / np.maximum(counts, 1), 0.0)
    return PerTimestampReport(
        positions=np.arange(1, width + 1),
        hit10=hit10[1:],
        ndcg10=ndcg10[1:],
        counts=counts[1:],
    )
