"""Dense float64 tensors, reverse-mode autodiff and small linear-algebra kernels."""
from . import tensor as ops
from .gradcheck import GradCheckReport, finite_diff_check, grad, value_and_grad
from .io import load_archive, load_tensor, save_archive, save_tensor, write_csv
from .linalg import (
    DegenerateRowError,
    Permutation,
    SingularMatrixError,
    masked_softmax,
    matmul,
    random_orthogonal,
    random_permutation,
    unit_lower_solve,
)
from .rng import Rng
from .tensor import Tensor, no_grad

__all__ = [
    "ops", "Tensor", "no_grad", "Rng", "Permutation",
    "grad", "value_and_grad", "finite_diff_check", "GradCheckReport",
    "matmul", "masked_softmax", "unit_lower_solve", "random_orthogonal", "random_permutation",
    "DegenerateRowError", "SingularMatrixError",
    "save_tensor", "load_tensor", "save_archive", "load_archive", "write_csv",
]
