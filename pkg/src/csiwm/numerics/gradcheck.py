from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .autodiff import Node, backward, param

LossBuilder = Callable[[Mapping[str, Node]], Node]


@dataclass
class GradReport:
    max_rel_error: dict[str, float]
    tolerance: float
    n_probes: int = 0
    worst: str = ""
    errors: list[float] = field(default_factory=list, repr=False)

    @property
    def max_error(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance


def _rel_err(g: float, g_fd: float) -> float:
    return abs(g - g_fd) / max(abs(g), abs(g_fd), 1e-8)


def grad_check(build: LossBuilder, params: Mapping[str, np.ndarray], epsilon: float = 1e-5,
               tolerance: float = 1e-4, max_coords: int = 32, n_directions: int = 8,
               seed: int = 0) -> GradReport:
    """Compare reverse-mode gradients of ``build(params)`` with central differences.

    Parameters with at most ``max_coords`` entries are checked coordinate by
    coordinate; larger ones along ``n_directions`` random unit directions.
    """
    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}

    def value(p: Mapping[str, np.ndarray]) -> float:
        return float(build({k: Node(v) for k, v in p.items()}).value)

    f0 = value(base)
    if value(base) != f0:
        raise RuntimeError("loss builder is not deterministic")

    nodes = {k: param(v, name=k) for k, v in base.items()}
    backward(build(nodes))
    grads = {k: (n.grad if n.grad is not None else np.zeros_like(n.value)) for k, n in nodes.items()}

    rng = np.random.default_rng(seed)
    report = GradReport(max_rel_error={}, tolerance=tolerance)
    worst = -1.0
    for name, x in base.items():
        if x.size <= max_coords:
            directions = []
            for i in range(x.size):
                d = np.zeros(x.size)
                d[i] = 1.0
                directions.append(d.reshape(x.shape))
        else:
            directions = []
            for _ in range(n_directions):
                d = rng.standard_normal(x.shape)
                directions.append(d / np.linalg.norm(d))
        errs = []
        for d in directions:
            plus = dict(base)
            minus = dict(base)
            plus[name] = x + epsilon * d
            minus[name] = x - epsilon * d
            g_fd = (value(plus) - value(minus)) / (2.0 * epsilon)
            g = float(np.sum(grads[name] * d))
            errs.append(_rel_err(g, g_fd))
        report.max_rel_error[name] = max(errs)
        report.errors.extend(errs)
        report.n_probes += len(errs)
        if report.max_rel_error[name] > worst:
            worst = report.max_rel_error[name]
            report.worst = name
    return report
