"""Deterministic single-threaded training loop for the addition task."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..model.config import ModelConfig
from ..model.params import init_params, load_checkpoint, save_checkpoint
from ..model.transformer import forward
from ..numcore import tensor as T
from ..numcore.gradcheck import value_and_grad
from ..numcore.io import load_archive
from ..numcore.rng import Rng
from .addition import AdditionDataset
from .optim import AdamW, clip_grad_norm, lr_at

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, checkpoint: Path | None):
        super().__init__(f"non-finite loss at step {step}; last good checkpoint: {checkpoint}")
        self.step = step
        self.checkpoint = checkpoint


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.1
    batch_size: int = 32
    steps: int = 1000
    warmup: int = 0
    grad_clip: float = 1.0
    seed: int = 0
    eval_every: int = 0
    checkpoint_every: int = 0
    time_budget: float = 0.0  # seconds; 0 disables
    precision: str = "float64"  # working dtype of forward/backward; params and optimizer stay float64

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.steps < 0:
            raise ValueError("lr and batch_size must be positive, steps non-negative")
        if self.precision not in ("float64", "float32"):
            raise ValueError(f"precision must be float64 or float32, got {self.precision!r}")


@dataclass
class TrainResult:
    params: dict
    losses: list = field(default_factory=list)
    steps_done: int = 0
    seconds: float = 0.0
    stopped_early: bool = False


def batch_indices(seed: int, step: int, pool: int, batch: int) -> np.ndarray:
    """Batch ``step`` depends only on (seed, step), so resumed runs see the same data."""
    return Rng(seed, 1000 + step).integers(0, pool, batch)


def loss_fn(cfg: ModelConfig, batch):
    def f(leaves):
        logits = forward(leaves, batch.inputs, cfg)
        return T.cross_entropy(logits, batch.targets, batch.weights)
    return f


def train(cfg: ModelConfig, data: AdditionDataset, tc: TrainConfig, out_dir=None,
          params: dict | None = None, optimizer: AdamW | None = None, start_step: int = 0,
          callback=None, prior_seconds: float = 0.0) -> TrainResult:
    """Train with AdamW on answer-token cross entropy.

    ``out_dir`` (optional) receives ``loss.csv`` and ``checkpoint.tapa`` (params
    plus optimizer state). A non-finite loss raises :class:`TrainingDiverged`
    naming the last checkpoint written. Checkpoint headers carry the cumulative
    CPU time, starting from ``prior_seconds`` for resumed runs.
    """
    params = {k: v.copy() for k, v in (params or init_params(cfg, Rng(cfg.seed, 0))).items()}
    opt = optimizer or AdamW(tc.lr, tc.beta1, tc.beta2, weight_decay=tc.weight_decay)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    last_ckpt = None
    result = TrainResult(params)
    t0 = time.process_time()
    for step in range(start_step, tc.steps):
        batch = data.batch(batch_indices(tc.seed, step, len(data), tc.batch_size))
        try:
            with T.precision(tc.precision):
                loss, grads = value_and_grad(loss_fn(cfg, batch), params)
        except FloatingPointError:  # backward refuses non-finite gradients
            raise TrainingDiverged(step, last_ckpt) from None
        if not math.isfinite(loss):
            raise TrainingDiverged(step, last_ckpt)
        clip_grad_norm(grads, tc.grad_clip)
        opt.step(params, grads, lr_at(step, tc.lr, tc.warmup, tc.steps))
        result.losses.append((step, loss))
        result.steps_done = step + 1
        if callback is not None:
            callback(step, loss, params)
        if out is not None and tc.checkpoint_every and (step + 1) % tc.checkpoint_every == 0:
            last_ckpt = write_checkpoint(out / "checkpoint.tapa", cfg, tc, params, opt, step + 1,
                                         prior_seconds + time.process_time() - t0)
        if step % 100 == 0:
            log.info("step %d loss %.4f", step, loss)
        if tc.time_budget and time.process_time() - t0 > tc.time_budget:
            result.stopped_early = True
            break
    result.seconds = time.process_time() - t0
    if out is not None:
        write_checkpoint(out / "checkpoint.tapa", cfg, tc, params, opt, result.steps_done,
                         prior_seconds + result.seconds)
        write_loss_csv(out / "loss.csv", result.losses)
    return result


def write_loss_csv(path, losses) -> None:
    lines = ["step,loss"] + [f"{s},{l:.17g}" for s, l in losses]
    Path(path).write_text("\n".join(lines) + "\n")


def write_checkpoint(path, cfg: ModelConfig, tc: TrainConfig, params: dict, opt: AdamW, step: int,
                     cpu_seconds: float = 0.0) -> Path:
    extra = {f"train.{k}": str(v) for k, v in asdict(tc).items()}
    extra["train.step"] = str(step)
    extra["train.cpu_seconds"] = repr(float(cpu_seconds))
    tensors = dict(params)
    tensors.update(opt.state())
    save_checkpoint(path, cfg, tensors, extra)
    return Path(path)


def resume(path, data: AdditionDataset, tc: TrainConfig | None = None, out_dir=None) -> TrainResult:
    """Continue a run from a checkpoint written by :func:`train`."""
    tensors, header = load_archive(path)
    cfg, params, _ = load_checkpoint(path)
    if tc is None:
        fields = {k[len("train."):]: v for k, v in header.items() if k.startswith("train.") and k not in ("train.step", "train.cpu_seconds")}
        tc = TrainConfig(**{k: type(getattr(TrainConfig, k))(v) for k, v in fields.items()})
    opt = AdamW(tc.lr, tc.beta1, tc.beta2, weight_decay=tc.weight_decay)
    opt.load_state(tensors)
    return train(cfg, data, tc, out_dir, params=params, optimizer=opt, start_step=int(header["train.step"]),
                 prior_seconds=float(header.get("train.cpu_seconds", 0.0)))
