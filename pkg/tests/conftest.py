import numpy as np
import pytest

from seqlab.data import ItemVocabulary, UserSequence, leave_one_out_split
from seqlab.synth import planted_chain_split


@pytest.fixture
def tiny_vocab():
    names = [f"it{k}" for k in range(1, 11)]
    return ItemVocabulary({n: i + 1 for i, n in enumerate(names)}, names)


@pytest.fixture
def tiny_split(tiny_vocab):
    rng = np.random.default_rng(7)
    sequences = []
    for u in range(12):
        length = int(rng.integers(3, 9))
        items = rng.integers(1, tiny_vocab.size + 1, size=length).tolist()
        sequences.append(UserSequence(u, items, name=f"u{u}"))
    return leave_one_out_split(sequences, tiny_vocab)


@pytest.fixture(scope="session")
def planted():
    return planted_chain_split(n_users=200, n_items=20, min_len=8, max_len=12, seed=3)
