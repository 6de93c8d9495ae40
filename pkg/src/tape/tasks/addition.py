"""Multi-digit addition as a next-token task.

Layout (least-significant digit first by default)::

    BOS a_0 a_1 ... + b_0 b_1 ... = s_0 s_1 ... EOS

The loss covers the answer digits and the closing EOS only.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..numcore.io import load_archive, save_archive
from ..numcore.rng import Rng

PLUS, EQUALS, BOS, EOS, PAD = 10, 11, 12, 13, 14
VOCAB_SIZE = 15
SYMBOLS = {PLUS: "+", EQUALS: "=", BOS: "<s>", EOS: "</s>", PAD: "<pad>"}


class TokenError(ValueError):
    pass


@dataclass(frozen=True)
class AdditionSample:
    operand_a: str
    operand_b: str

    @property
    def answer(self) -> str:
        return str(int(self.operand_a) + int(self.operand_b))

    @property
    def lengths(self) -> tuple[int, int]:
        return len(self.operand_a), len(self.operand_b)

    def __str__(self):
        return f"{self.operand_a}+{self.operand_b}={self.answer}"


def _digits(s: str, lsd_first: bool) -> list[int]:
    if not s or not s.isdigit():
        raise TokenError(f"not a digit string: {s!r}")
    ids = [int(ch) for ch in s]
    return ids[::-1] if lsd_first else ids


def tokenize(sample: AdditionSample, lsd_first: bool = True) -> tuple[list[int], list[int]]:
    """Return ``(prompt_ids, target_ids)``; the target ends with EOS."""
    prompt = [BOS] + _digits(sample.operand_a, lsd_first) + [PLUS] + _digits(sample.operand_b, lsd_first) + [EQUALS]
    target = _digits(sample.answer, lsd_first) + [EOS]
    return prompt, target


def detokenize(ids, lsd_first: bool = True) -> str:
    """Inverse of :func:`tokenize` on ``prompt + target`` (BOS/EOS/PAD dropped)."""
    out, run = [], []

    def flush():
        out.append("".join(str(d) for d in (run[::-1] if lsd_first else run)))
        run.clear()

    for t in ids:
        t = int(t)
        if 0 <= t <= 9:
            run.append(t)
        elif t in (PLUS, EQUALS):
            flush()
            out.append(SYMBOLS[t])
        elif t in (BOS, EOS, PAD):
            continue
        else:
            raise TokenError(f"unknown token id {t}")
    if run:
        flush()
    return "".join(out)


def random_operand(length: int, rng: Rng) -> str:
    if length < 1:
        raise ValueError("operand length must be >= 1")
    if length == 1:
        return str(rng.integer(0, 10))
    digits = [rng.integer(1, 10)] + list(rng.integers(0, 10, length - 1))
    return "".join(str(int(d)) for d in digits)


def gen_addition(max_len: int, count: int, rng: Rng, min_len: int = 1) -> list[AdditionSample]:
    """Operand lengths drawn independently and uniformly from ``min_len..max_len``."""
    if max_len < 1 or min_len < 1 or min_len > max_len:
        raise ValueError(f"bad length range {min_len}..{max_len}")
    lens = rng.integers(min_len, max_len + 1, (count, 2))
    return [AdditionSample(random_operand(int(la), rng), random_operand(int(lb), rng)) for la, lb in lens]


def gen_cell(len_a: int, len_b: int, count: int, rng: Rng) -> list[AdditionSample]:
    return [AdditionSample(random_operand(len_a, rng), random_operand(len_b, rng)) for _ in range(count)]


@dataclass
class AdditionBatch:
    """Padded teacher-forcing batch: ``inputs`` predict ``targets`` where ``weights`` is 1."""

    inputs: np.ndarray
    targets: np.ndarray
    weights: np.ndarray


def encode_batch(samples, lsd_first: bool = True) -> AdditionBatch:
    seqs, starts = [], []
    for s in samples:
        prompt, target = tokenize(s, lsd_first)
        seqs.append(prompt + target)
        starts.append(len(prompt))
    n = max(len(s) for s in seqs)
    toks = np.full((len(seqs), n), PAD, dtype=np.int64)
    w = np.zeros((len(seqs), n - 1))
    for r, (seq, st) in enumerate(zip(seqs, starts)):
        toks[r, :len(seq)] = seq
        # position t predicts token t+1; answer tokens are seq[st:]
        w[r, st - 1:len(seq) - 1] = 1.0
    return AdditionBatch(toks[:, :-1], toks[:, 1:], w)


@dataclass
class AdditionDataset:
    """Pre-tokenized training pool (fixed width, PAD-filled) with a cache file format."""

    tokens: np.ndarray   # (count, width) full sequences
    weights: np.ndarray  # (count, width - 1) loss mask for next-token targets
    lengths: np.ndarray  # (count, 2) operand lengths
    max_len: int
    seed: int
    lsd_first: bool = True

    @classmethod
    def generate(cls, max_len: int, count: int, seed: int, lsd_first: bool = True) -> "AdditionDataset":
        rng = Rng(seed, 11)
        samples = gen_addition(max_len, count, rng)
        batch = encode_batch(samples, lsd_first)
        tokens = np.concatenate([batch.inputs, batch.targets[:, -1:]], axis=1)
        lengths = np.array([s.lengths for s in samples], dtype=np.int64)
        return cls(tokens, batch.weights, lengths, max_len, seed, lsd_first)

    def __len__(self):
        return len(self.tokens)

    def batch(self, idx) -> AdditionBatch:
        toks = self.tokens[idx]
        w = self.weights[idx]
        # trim trailing all-PAD columns
        used = int(np.max(np.nonzero(w.any(axis=0))[0])) + 2
        return AdditionBatch(toks[:, :used - 1], toks[:, 1:used], w[:, :used - 1])

    def save(self, path) -> None:
        header = {"task": "addition", "max_len": self.max_len, "seed": self.seed,
                  "lsd_first": int(self.lsd_first), "count": len(self)}
        save_archive(path, {"tokens": self.tokens, "weights": self.weights, "lengths": self.lengths}, header)

    @classmethod
    def load(cls, path) -> "AdditionDataset":
        t, h = load_archive(Path(path))
        if h.get("task") != "addition":
            raise ValueError(f"{path}: not an addition dataset cache")
        return cls(t["tokens"].astype(np.int64), t["weights"], t["lengths"].astype(np.int64),
                   int(h["max_len"]), int(h["seed"]), bool(int(h["lsd_first"])))
