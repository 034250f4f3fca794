"""Interaction-log ingestion, filtering, vocabulary, splits, and batching.

The pipeline is pure and deterministic: every output is a function of the
input bytes, the configuration, and the seed. Item IDs are contiguous
integers in [1, n_items]; 0 is reserved for PAD and n_items + 1 for MASK.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    EmptyAfterFilterError,
    EmptyInputError,
    ParseError,
    UnsampleableError,
)

PAD_ID = 0


def child_rng(seed, *key) -> np.random.Generator:
    """Independent deterministic stream for (seed, key...)."""
    return np.random.default_rng(np.random.SeedSequence((int(seed),) + tuple(int(k) for k in key)))


# domain types ----------------------------------------------------------


@dataclass(frozen=True)
class InteractionRecord:
    user: str
    item: str
    timestamp: int


@dataclass(frozen=True)
class RawSequence:
    """One already-ordered line of item strings for a user."""

    user: str
    items: tuple


@dataclass
class ItemVocabulary:
    item_to_id: dict
    id_to_item: list

    @property
    def size(self) -> int:
        return len(self.id_to_item)

    @property
    def pad_id(self) -> int:
        return PAD_ID

    @property
    def mask_id(self) -> int:
        return self.size + 1

    def __getitem__(self, item: str) -> int:
        return self.item_to_id[item]


@dataclass
class UserSequence:
    user: int
    items: list
    name: str = ""


@dataclass
class UserSplit:
    user: int
    train: list
    valid: int
    test: int

    @property
    def full(self) -> list:
        return self.train + [self.valid, self.test]


@dataclass
class SplitDataset:
    users: list
    vocab: ItemVocabulary

    def __len__(self):
        return len(self.users)


@dataclass
class TrainingBatch:
    inputs: np.ndarray   # (B, T) int64, left-padded with PAD
    targets: np.ndarray  # (B, T) int64, inputs shifted one step
    mask: np.ndarray     # (B, T) bool, True where targets holds a real item
    user_rows: np.ndarray  # (B,) indices into SplitDataset.users

    @property
    def size(self) -> int:
        return self.inputs.shape[0]


# ingestion -------------------------------------------------------------


def ingest_interactions(path, fmt: str):
    """Read a raw log.

    ``csv-triples`` rows are ``user,item,timestamp`` (optional header,
    detected by a non-integer timestamp field on the first line).
    ``sequence-lines`` rows are ``user item1 item2 ...``, already ordered.
    """
    if fmt == "csv-triples":
        return _ingest_csv(path)
    if fmt == "sequence-lines":
        return _ingest_sequence_lines(path)
    raise ValueError(f"unknown input format: {fmt!r}")


def _ingest_csv(path):
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split(",")
            if len(parts) != 3:
                raise ParseError(f"{path}:{lineno}: expected 'user,item,timestamp', got {line!r}")
            user, item, ts = (p.strip() for p in parts)
            try:
                ts_val = int(ts)
            except ValueError:
                if lineno == 1:
                    continue  # header row
                raise ParseError(f"{path}:{lineno}: timestamp {ts!r} is not an integer")
            if not user or not item:
                raise ParseError(f"{path}:{lineno}: empty user or item field")
            records.append(InteractionRecord(user, item, ts_val))
    if not records:
        raise EmptyInputError(f"{path}: no interaction records")
    return records


def _ingest_sequence_lines(path):
    sequences = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            tokens = line.split()
            if not tokens:
                continue
            if len(tokens) < 2:
                raise ParseError(f"{path}:{lineno}: user {tokens[0]!r} has no items")
            sequences.append(RawSequence(tokens[0], tuple(tokens[1:])))
    if not sequences:
        raise EmptyInputError(f"{path}: no sequences")
    return sequences


# filtering -------------------------------------------------------------


def dedup_user_item(records):
    """Keep only the earliest interaction of each (user, item) pair."""
    seen = set()
    out = []
    for rec in sorted(records, key=lambda r: r.timestamp):
        key = (rec.user, rec.item)
        if key not in seen:
            seen.add(key)
            out.append(rec)
    # restore the original file order among survivors
    kept = set(id(r) for r in out)
    return [r for r in records if id(r) in kept]


def k_core_filter(records, k: int):
    """Iteratively drop users and items with fewer than k interactions.

    Accepts either InteractionRecord lists or RawSequence lists; runs the
    removal to a fixed point.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if records and isinstance(records[0], RawSequence):
        return _k_core_sequences(records, k)
    current = list(records)
    while True:
        user_counts = Counter(r.user for r in current)
        item_counts = Counter(r.item for r in current)
        kept = [
            r for r in current
            if user_counts[r.user] >= k and item_counts[r.item] >= k
        ]
        if len(kept) == len(current):
            break
        current = kept
    if not current:
        raise EmptyAfterFilterError(f"no records survive {k}-core filtering")
    return current


def _k_core_sequences(sequences, k: int):
    current = [(s.user, list(s.items)) for s in sequences]
    while True:
        item_counts = Counter(it for _, items in current for it in items)
        changed = False
        nxt = []
        for user, items in current:
            kept_items = [it for it in items if item_counts[it] >= k]
            if len(kept_items) != len(items):
                changed = True
            if len(kept_items) >= k:
                nxt.append((user, kept_items))
            else:
                changed = True
        current = nxt
        if not changed:
            break
    if not current:
        raise EmptyAfterFilterError(f"no sequences survive {k}-core filtering")
    return [RawSequence(u, tuple(items)) for u, items in current]


# vocabulary and sequences ----------------------------------------------


def build_vocabulary(records) -> ItemVocabulary:
    """Assign integer IDs by first appearance order."""
    if not records:
        raise EmptyInputError("cannot build a vocabulary from no records")
    item_to_id = {}
    id_to_item = []
    for rec in records:
        items = rec.items if isinstance(rec, RawSequence) else (rec.item,)
        for it in items:
            if it not in item_to_id:
                item_to_id[it] = len(id_to_item) + 1
                id_to_item.append(it)
    return ItemVocabulary(item_to_id, id_to_item)


def build_sequences(records, vocab: ItemVocabulary):
    """Group per user, order by (timestamp, file position), drop length < 3.

    RawSequence input is taken as already ordered. Users get contiguous
    integer IDs by first appearance among the retained lines.
    """
    grouped = {}
    if records and isinstance(records[0], RawSequence):
        for seq in records:
            grouped.setdefault(seq.user, []).extend(vocab[it] for it in seq.items)
    else:
        order = {}
        for idx, rec in enumerate(records):
            order.setdefault(rec.user, []).append((rec.timestamp, idx, rec.item))
        for user, rows in order.items():
            rows.sort(key=lambda row: (row[0], row[1]))
            grouped[user] = [vocab[item] for _, _, item in rows]
    sequences = []
    for user_key, items in grouped.items():
        if len(items) >= 3:
            sequences.append(UserSequence(len(sequences), items, name=str(user_key)))
    return sequences


def leave_one_out_split(sequences, vocab: ItemVocabulary = None) -> SplitDataset:
    """Last item is the test target, second-to-last the validation target."""
    splits = []
    for seq in sequences:
        if len(seq.items) < 3:
            raise ValueError(f"user {seq.user}: sequence shorter than 3")
        splits.append(
            UserSplit(seq.user, list(seq.items[:-2]), seq.items[-2], seq.items[-1])
        )
    return SplitDataset(splits, vocab)


# batching --------------------------------------------------------------


def pad_and_truncate(items, max_len: int):
    """Build one left-padded (input, target, mask) row of width ``max_len``.

    Keeps the most recent ``max_len + 1`` items; the target row is the
    input row shifted one step forward.
    """
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    window = list(items)[-(max_len + 1):]
    inputs = np.full(max_len, PAD_ID, dtype=np.int64)
    targets = np.full(max_len, PAD_ID, dtype=np.int64)
    n = len(window) - 1
    if n > 0:
        inputs[max_len - n:] = window[:-1]
        targets[max_len - n:] = window[1:]
    mask = targets != PAD_ID
    return inputs, targets, mask


def sample_negatives(rng, vocab: ItemVocabulary, exclude, n: int) -> np.ndarray:
    """Draw n real-item IDs uniformly with replacement, avoiding ``exclude``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    excluded = np.zeros(vocab.size + 1, dtype=bool)
    for it in exclude:
        if 1 <= it <= vocab.size:
            excluded[it] = True
    eligible = np.flatnonzero(~excluded[1:]) + 1
    if eligible.size == 0:
        raise UnsampleableError("exclusion set covers the whole catalog")
    return eligible[rng.integers(0, eligible.size, size=n)]


def iterate_batches(split: SplitDataset, max_len: int, batch_size: int, rng):
    """Yield shuffled TrainingBatch objects covering every usable user once."""
    if not split.users:
        raise EmptyInputError("empty split dataset")
    order = rng.permutation(len(split.users))
    rows = []
    for row_idx in order:
        user = split.users[row_idx]
        inputs, targets, mask = pad_and_truncate(user.train, max_len)
        if not mask.any():
            continue
        rows.append((inputs, targets, mask, row_idx))
    for start in range(0, len(rows), batch_size):
        chunk = rows[start:start + batch_size]
        yield TrainingBatch(
            inputs=np.stack([c[0] for c in chunk]),
            targets=np.stack([c[1] for c in chunk]),
            mask=np.stack([c[2] for c in chunk]),
            user_rows=np.array([c[3] for c in chunk], dtype=np.int64),
        )


# preprocessed files ----------------------------------------------------


def write_sequence_lines(path, sequences, vocab: ItemVocabulary):
    """Write ``user item1 item2 ...`` lines using original item strings."""
    with open(path, "w", encoding="utf-8") as fh:
        for seq in sequences:
            name = seq.name or f"u{seq.user}"
            items = " ".join(vocab.id_to_item[i - 1] for i in seq.items)
            fh.write(f"{name} {items}\n")


def write_vocabulary(path, vocab: ItemVocabulary):
    with open(path, "w", encoding="utf-8") as fh:
        for idx, item in enumerate(vocab.id_to_item, start=1):
            fh.write(f"{item}\t{idx}\n")


def read_vocabulary(path) -> ItemVocabulary:
    item_to_id = {}
    id_to_item = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ParseError(f"{path}:{lineno}: expected 'item<TAB>id'")
            item_to_id[parts[0]] = int(parts[1])
            id_to_item.append(parts[0])
    if not id_to_item:
        raise EmptyInputError(f"{path}: empty vocabulary")
    return ItemVocabulary(item_to_id, id_to_item)


def load_dataset(path, fmt: str, kcore: int = 1, dedup: bool = False) -> SplitDataset:
    """Ingest, filter, and split a raw log in one call."""
    raw = ingest_interactions(path, fmt)
    if dedup and raw and isinstance(raw[0], InteractionRecord):
        raw = dedup_user_item(raw)
    if kcore > 1:
        raw = k_core_filter(raw, kcore)
    vocab = build_vocabulary(raw)
    sequences = build_sequences(raw, vocab)
    if not sequences:
        raise EmptyAfterFilterError("no user kept at least 3 interactions")
    return leave_one_out_split(sequences, vocab)
