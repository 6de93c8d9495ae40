"""Pi(5) word-problem instances packaged as a sequence-labeling stream."""
from __future__ import annotations

import numpy as np

from ..nc1 import BOS, gen_word_problem
from ..numcore.rng import Rng

# ids 1..10 transpositions, 11 BOS; 0 is left free for padding
WORD_VOCAB = 12
WORD_PAD = 0


def gen_word_problem_lm(N: int, rng: Rng, count: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """``count`` streams of length N (BOS first) and per-position 0/1 identity labels.

    ``labels[k, i] == 1`` iff the composition of transpositions up to position i
    is the identity; position 0 (BOS alone) is always labelled 1.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    tokens = np.empty((count, N), dtype=np.int64)
    labels = np.empty((count, N), dtype=np.int64)
    for k in range(count):
        inst, lab = gen_word_problem(N, rng)
        tokens[k], labels[k] = inst.u, lab
    assert np.all(tokens[:, 0] == BOS)
    return tokens, labels
