"""Deterministic synthetic interaction logs for desk-scale experiments.

Two generators: a fully deterministic successor chain (every item is always
followed by the same next item, so a correct learner must saturate), and a
noisy Markov log (each item has a planted preferred successor followed with
a configurable probability).
"""

from __future__ import annotations

import numpy as np

from .data import (
    ItemVocabulary,
    SplitDataset,
    UserSequence,
    child_rng,
    leave_one_out_split,
    write_sequence_lines,
)


def _vocabulary(n_items: int) -> ItemVocabulary:
    names = [f"it{k}" for k in range(1, n_items + 1)]
    return ItemVocabulary({name: k + 1 for k, name in enumerate(names)}, names)


def planted_chain_log(n_users: int = 200, n_items: int = 20, min_len: int = 8,
                      max_len: int = 12, seed: int = 0):
    """Every sequence walks the fixed cycle i -> i+1 -> ... -> 1."""
    rng = child_rng(seed, 0)
    sequences = []
    for u in range(n_users):
        length = int(rng.integers(min_len, max_len + 1))
        cur = int(rng.integers(1, n_items + 1))
        items = [cur]
        for _ in range(length - 1):
            cur = cur % n_items + 1
            items.append(cur)
        sequences.append(UserSequence(u, items, name=f"u{u}"))
    return sequences, _vocabulary(n_items)


def markov_log(n_users: int = 2000, n_items: int = 150, min_len: int = 8,
               max_len: int = 30, fidelity: float = 0.75, seed: int = 7):
    """Noisy successor walk: with probability ``fidelity`` the next item is
    the planted successor of the current one, otherwise uniform random."""
    rng = child_rng(seed, 0)
    successor = rng.permutation(n_items) + 1          # successor[i-1] follows item i
    sequences = []
    for u in range(n_users):
        length = int(rng.integers(min_len, max_len + 1))
        cur = int(rng.integers(1, n_items + 1))
        items = [cur]
        for _ in range(length - 1):
            if rng.random() < fidelity:
                cur = int(successor[cur - 1])
            else:
                cur = int(rng.integers(1, n_items + 1))
            items.append(cur)
        sequences.append(UserSequence(u, items, name=f"u{u}"))
    return sequences, _vocabulary(n_items)


def planted_chain_split(**kwargs) -> SplitDataset:
    sequences, vocab = planted_chain_log(**kwargs)
    return leave_one_out_split(sequences, vocab)


def markov_split(**kwargs) -> SplitDataset:
    sequences, vocab = markov_log(**kwargs)
    return leave_one_out_split(sequences, vocab)


def write_markov_dataset(path, **kwargs):
    """Materialize a Markov log as a sequence-lines file."""
    sequences, vocab = markov_log(**kwargs)
    write_sequence_lines(path, sequences, vocab)
    return path
