"""Greedy decoding and the (len_a, len_b) exact-match accuracy grid."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..model.config import ModelConfig
from ..model.transformer import model_forward
from ..numcore.io import read_csv_grid, write_csv
from ..numcore.rng import Rng
from .addition import EOS, AdditionSample, gen_cell, tokenize


@dataclass
class AccuracyGrid:
    """``acc[a-1, b-1]`` is the exact-match rate for operand lengths (a, b)."""

    acc: np.ndarray
    train_len: int
    samples_per_cell: int = 0

    @property
    def max_len(self) -> int:
        return self.acc.shape[0]

    @property
    def mean(self) -> float:
        return float(self.acc.mean())

    def region_mask(self, lo: int, hi: int) -> np.ndarray:
        """Cells whose longer operand has length in ``lo..hi``."""
        a = np.arange(1, self.max_len + 1)
        longest = np.maximum(a[:, None], a[None, :])
        return (longest >= lo) & (longest <= hi)

    def region_mean(self, lo: int, hi: int) -> float:
        return float(self.acc[self.region_mask(lo, hi)].mean())

    @property
    def in_distribution(self) -> float:
        return self.region_mean(1, self.train_len)

    def to_csv(self, path, tag: str = "") -> None:
        labels = list(range(1, self.max_len + 1))
        write_csv(path, self.acc, row_labels=labels, col_labels=labels, fmt="%.6g")
        if tag:
            p = Path(path)
            p.write_text(f"# {tag} train_len={self.train_len}\n" + p.read_text())

    @classmethod
    def from_csv(cls, path, train_len: int) -> "AccuracyGrid":
        text = Path(path).read_text().splitlines()
        if text and text[0].startswith("#"):
            tmp = Path(path).with_suffix(".tmp")
            tmp.write_text("\n".join(text[1:]) + "\n")
            _, _, vals = read_csv_grid(tmp)
            tmp.unlink()
        else:
            _, _, vals = read_csv_grid(path)
        return cls(vals, train_len)


def greedy_decode(cfg: ModelConfig, params, prompts: np.ndarray, steps: int) -> np.ndarray:
    """Append ``steps`` argmax tokens to equal-length prompts (batch, P); full recompute per step."""
    seq = np.asarray(prompts, dtype=np.int64)
    for _ in range(steps):
        logits = model_forward(seq, cfg, params)
        seq = np.concatenate([seq, logits[:, -1].argmax(-1)[:, None]], axis=1)
    return seq[:, prompts.shape[1]:]


def exact_match(cfg: ModelConfig, params, samples: list[AdditionSample], lsd_first: bool = True) -> np.ndarray:
    """0/1 per sample; all samples must share operand lengths (one grid cell)."""
    prompts, targets = zip(*(tokenize(s, lsd_first) for s in samples))
    width = max(len(t) for t in targets)
    out = greedy_decode(cfg, params, np.array(prompts), width)
    hits = np.zeros(len(samples))
    for r, tgt in enumerate(targets):
        # the answer plus EOS must be produced exactly; tokens after EOS are ignored
        hits[r] = float(list(out[r, :len(tgt)]) == list(tgt))
    return hits


def evaluate_grid(cfg: ModelConfig, params, max_eval_len: int, samples_per_cell: int, rng: Rng,
                  train_len: int = 10, lsd_first: bool = True, chunk: int = 256) -> AccuracyGrid:
    if samples_per_cell < 1:
        raise ValueError("samples_per_cell must be >= 1")
    acc = np.zeros((max_eval_len, max_eval_len))
    for a in range(1, max_eval_len + 1):
        for b in range(1, max_eval_len + 1):
            samples = gen_cell(a, b, samples_per_cell, rng.spawn(a * 1000 + b))
            hits = [exact_match(cfg, params, samples[i:i + chunk], lsd_first)
                    for i in range(0, len(samples), chunk)]
            acc[a - 1, b - 1] = np.concatenate(hits).mean()
    return AccuracyGrid(acc, train_len, samples_per_cell)
