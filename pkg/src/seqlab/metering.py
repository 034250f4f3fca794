"""Deterministic cost counters.

Score evaluations and drawn negatives are counted where they are requested,
so the totals follow closed-form per-layout formulas instead of wall-clock
noise: a last-timestep sampled loss costs B*(N_s+1) scorings per batch, an
all-timestep sampled loss costs sum(l)*(N_s+1), and a full-softmax loss
costs (valid rows)*|I|.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field


@dataclass
class CostMeter:
    score_evals: int = 0
    neg_samples: int = 0
    _paused: int = field(default=0, repr=False)

    def add_score_evals(self, n: int):
        if not self._paused:
            self.score_evals += int(n)

    def add_neg_samples(self, n: int):
        if not self._paused:
            self.neg_samples += int(n)

    def reset(self):
        self.score_evals = 0
        self.neg_samples = 0

    def snapshot(self):
        return (self.score_evals, self.neg_samples)

    @contextlib.contextmanager
    def paused(self):
        """Suppress counting inside the block (e.g. validation ranking)."""
        self._paused += 1
        try:
            yield
        finally:
            self._paused -= 1


GLOBAL_METER = CostMeter()
