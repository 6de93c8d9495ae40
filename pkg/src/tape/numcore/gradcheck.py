"""Gradients of recorded scalar functions and a central finite-difference check."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .tensor import Tensor, no_grad

ScalarFn = Callable[[dict], Tensor]


def value_and_grad(f: ScalarFn, leaves: Mapping[str, np.ndarray]) -> tuple[float, dict[str, np.ndarray]]:
    """Evaluate ``f`` on fresh leaf tensors and return its value and gradients.

    ``f`` receives a dict of :class:`Tensor` leaves (same keys as ``leaves``) and
    must return a scalar tensor. Leaves that do not influence the output get
    zero gradients.
    """
    params = {k: Tensor(v, requires_grad=True) for k, v in leaves.items()}
    out = f(params)
    if not isinstance(out, Tensor):
        out = Tensor(out)
    if out.data.size != 1:
        raise ValueError(f"grad needs a scalar output, got shape {out.shape}")
    if out.requires_grad:
        out.backward()
    grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}
    return float(out.data), grads


def grad(f: ScalarFn, leaves: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    return value_and_grad(f, leaves)[1]


@dataclass
class GradCheckReport:
    tol: float
    h: float
    max_rel_error: dict[str, float] = field(default_factory=dict)
    worst_leaf: str | None = None
    worst_index: tuple | None = None
    worst_values: tuple[float, float] | None = None

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.worst <= self.tol

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} max rel err {self.worst:.3e} (tol {self.tol:.0e}) "
                f"at {self.worst_leaf}{list(self.worst_index or ())} ad/fd={self.worst_values}")


def finite_diff_check(f: ScalarFn, leaves: Mapping[str, np.ndarray], h: float = 1e-5,
                      tol: float = 1e-4) -> GradCheckReport:
    """Compare reverse-mode gradients with central differences, coordinate by coordinate.

    Relative error per coordinate is ``|ad - fd| / max(|ad|, |fd|, 1e-8)``.
    """
    _, ad = value_and_grad(f, leaves)
    work = {k: np.array(v, dtype=np.float64) for k, v in leaves.items()}
    report = GradCheckReport(tol=tol, h=h)
    worst = -1.0

    def evaluate() -> float:
        with no_grad():
            return float(f({k: Tensor(v, check=False) for k, v in work.items()}).data)

    for name, arr in work.items():
        flat = arr.reshape(-1)
        g_ad = ad[name].reshape(-1)
        leaf_worst = 0.0
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + h
            fp = evaluate()
            flat[idx] = orig - h
            fm = evaluate()
            flat[idx] = orig
            g_fd = (fp - fm) / (2 * h)
            err = abs(g_ad[idx] - g_fd) / max(abs(g_ad[idx]), abs(g_fd), 1e-8)
            if err > leaf_worst:
                leaf_worst = err
            if err > worst:
                worst = err
                report.worst_leaf = name
                report.worst_index = np.unravel_index(idx, arr.shape)
                report.worst_values = (float(g_ad[idx]), float(g_fd))
        report.max_rel_error[name] = leaf_worst
    return report
