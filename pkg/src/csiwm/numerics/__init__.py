"""Dense float64 numerics: reverse-mode autodiff, matrix exponential, Jacobi eigensolver."""

from . import autodiff as ad
from .autodiff import Node, backward, const, corrupted_rules, param
from .expm import expm, expm_frechet
from .gradcheck import GradReport, grad_check
from .linalg import sym_eig

__all__ = [
    "GradReport",
    "Node",
    "ad",
    "backward",
    "const",
    "corrupted_rules",
    "expm",
    "expm_frechet",
    "grad_check",
    "param",
    "sym_eig",
]
