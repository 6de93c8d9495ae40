"""Synthetic tasks, training loop and evaluation grids."""
from .addition import (
    BOS, EOS, EQUALS, PAD, PLUS, VOCAB_SIZE,
    AdditionBatch, AdditionDataset, AdditionSample, TokenError,
    detokenize, encode_batch, gen_addition, gen_cell, tokenize,
)
from .evaluate import AccuracyGrid, evaluate_grid, exact_match, greedy_decode
from .optim import AdamW, clip_grad_norm, lr_at
from .train import TrainConfig, TrainingDiverged, TrainResult, resume, train
from .wordproblem import WORD_VOCAB, gen_word_problem_lm

__all__ = [
    "BOS", "EOS", "EQUALS", "PAD", "PLUS", "VOCAB_SIZE",
    "AdditionBatch", "AdditionDataset", "AdditionSample", "TokenError",
    "detokenize", "encode_batch", "gen_addition", "gen_cell", "tokenize",
    "AccuracyGrid", "evaluate_grid", "exact_match", "greedy_decode",
    "AdamW", "clip_grad_norm", "lr_at",
    "TrainConfig", "TrainingDiverged", "TrainResult", "resume", "train",
    "WORD_VOCAB", "gen_word_problem_lm",
]
