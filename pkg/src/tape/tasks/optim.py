from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamW:
    """Decoupled weight decay Adam. Decay applies to matrices only (ndim >= 2)."""

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.1
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params: dict, grads: dict, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for k, g in grads.items():
            p = params[k]
            m = self.m.setdefault(k, np.zeros_like(p))
            v = self.v.setdefault(k, np.zeros_like(p))
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if self.weight_decay and p.ndim >= 2:
                p *= 1.0 - lr * self.weight_decay
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state(self) -> dict[str, np.ndarray]:
        out = {f"state.m.{k}": v for k, v in self.m.items()}
        out.update({f"state.v.{k}": v for k, v in self.v.items()})
        out["state.step"] = np.array([float(self.step_count)])
        return out

    def load_state(self, tensors: dict) -> None:
        self.m = {k[len("state.m."):]: v.copy() for k, v in tensors.items() if k.startswith("state.m.")}
        self.v = {k[len("state.v."):]: v.copy() for k, v in tensors.items() if k.startswith("state.v.")}
        self.step_count = int(tensors["state.step"][0])


def clip_grad_norm(grads: dict, max_norm: float) -> float:
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads.values():
            g *= scale
    return total


def lr_at(step: int, base: float, warmup: int, total: int, final_frac: float = 0.1) -> float:
    """Linear warmup then cosine decay to ``final_frac * base``."""
    if warmup and step < warmup:
        return base * (step + 1) / warmup
    if total <= warmup:
        return base
    frac = min(1.0, (step - warmup) / max(1, total - warmup))
    return base * (final_frac + (1 - final_frac) * 0.5 * (1 + math.cos(math.pi * frac)))
