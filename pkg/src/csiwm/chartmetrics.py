"""Chart-quality metrics between ground-truth positions and latent embeddings.

Trustworthiness and continuity follow the Venna-Kaski definitions, Kruskal
stress uses the optimally scaled form, and the Rajski distance is computed
from a joint histogram of normalized pairwise distances.  Everything here is
deterministic.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .numerics import sym_eig

DEFAULT_BINS = 50
CSV_FIELDS = ("traj_id", "n", "k", "bins", "tw", "ct", "ks", "rd")


def default_k(n: int) -> int:
    return max(1, math.ceil(0.05 * n))


def _as_points(X, name: str) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError(f"{name} must be a 2-D (n, p) array, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError(f"{name} contains non-finite values")
    return X


def _pair(X, Z, min_n: int = 3):
    X, Z = _as_points(X, "X"), _as_points(Z, "Z")
    if X.shape[0] != Z.shape[0]:
        raise ValueError(f"X has {X.shape[0]} points but Z has {Z.shape[0]}")
    if X.shape[0] < min_n:
        raise ValueError(f"need at least {min_n} points, got {X.shape[0]}")
    return X, Z


def pairwise_distances(X: np.ndarray) -> np.ndarray:
    diff = X[:, None, :] - X[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def neighbor_ranks(D: np.ndarray) -> np.ndarray:
    """``rank[i, j]`` = 1-based position of j among i's neighbors; ties go to the lower index."""
    n = D.shape[0]
    D = D.copy()
    np.fill_diagonal(D, -np.inf)
    order = np.argsort(D, axis=1, kind="stable")
    rank = np.empty((n, n), dtype=np.int64)
    rows = np.arange(n)[:, None]
    rank[rows, order] = np.arange(n)[None, :]
    return rank


def _false_neighbor_score(rank_ref: np.ndarray, rank_emb: np.ndarray, k: int) -> float:
    n = rank_ref.shape[0]
    if not 1 <= k < n / 2:
        raise ValueError(f"k must satisfy 1 <= k < n/2 (n={n}), got {k}")
    intruders = (rank_emb <= k) & (rank_ref > k)
    np.fill_diagonal(intruders, False)
    penalty = float(np.sum((rank_ref - k)[intruders]))
    return 1.0 - 2.0 / (n * k * (2 * n - 3 * k - 1)) * penalty


def trustworthiness(X, Z, k: int) -> float:
    """Penalizes latent neighbors that are far apart in ground truth."""
    X, Z = _pair(X, Z)
    return _false_neighbor_score(neighbor_ranks(pairwise_distances(X)),
                                 neighbor_ranks(pairwise_distances(Z)), k)


def continuity(X, Z, k: int) -> float:
    """Penalizes true neighbors missing from the latent neighborhood."""
    X, Z = _pair(X, Z)
    return _false_neighbor_score(neighbor_ranks(pairwise_distances(Z)),
                                 neighbor_ranks(pairwise_distances(X)), k)


def _upper(D: np.ndarray) -> np.ndarray:
    return D[np.triu_indices(D.shape[0], k=1)]


def kruskal_stress(X, Z) -> float:
    X, Z = _pair(X, Z, min_n=2)
    dx = _upper(pairwise_distances(X))
    dz = _upper(pairwise_distances(Z))
    den = float(dx @ dx)
    if den == 0.0:
        raise ValueError("ground-truth points are all identical")
    dzz = float(dz @ dz)
    beta = float(dx @ dz) / dzz if dzz > 0 else 0.0
    r = dx - beta * dz
    return math.sqrt(float(r @ r) / den)


def _entropy(p: np.ndarray) -> float:
    p = p[p > 0]
    return float(-np.sum(p * np.log(p)))


def _bin(d: np.ndarray, bins: int) -> np.ndarray:
    m = d.max()
    u = d / m if m > 0 else np.zeros_like(d)
    return np.minimum((u * bins).astype(np.int64), bins - 1)


def rajski_distance(X, Z, bins: int = DEFAULT_BINS) -> float:
    """1 - I(U;V)/H(U,V) over the joint histogram of max-normalized pairwise distances."""
    if bins < 2:
        raise ValueError("bins must be >= 2")
    X, Z = _pair(X, Z)
    dx = _upper(pairwise_distances(X))
    dz = _upper(pairwise_distances(Z))
    if np.ptp(dx) <= 1e-12 * dx.max():
        raise ValueError("ground-truth pairwise distances are all equal")
    joint = np.zeros((bins, bins))
    np.add.at(joint, (_bin(dx, bins), _bin(dz, bins)), 1.0)
    joint /= joint.sum()
    h_uv = _entropy(joint.ravel())
    mi = _entropy(joint.sum(1)) + _entropy(joint.sum(0)) - h_uv
    # clamp rounding noise from the entropy difference
    return min(1.0, max(0.0, 1.0 - mi / h_uv))


@dataclass(frozen=True)
class ProcrustesTransform:
    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    @property
    def angle(self) -> float:
        return math.atan2(self.rotation[1, 0], self.rotation[0, 0])

    def apply(self, Z2: np.ndarray) -> np.ndarray:
        return self.scale * np.asarray(Z2) @ self.rotation.T + self.translation


def procrustes_align(Z2, X2):
    """Best similarity transform (no reflection) taking ``Z2`` onto ``X2``.

    Returns ``(aligned, transform, residual)`` where residual is the summed
    squared distance after alignment.
    """
    Z2, X2 = _pair(X2, Z2, min_n=2)[::-1]
    if Z2.shape[1] != 2 or X2.shape[1] != 2:
        raise ValueError("procrustes_align works on 2-D point sets")
    mz, mx = Z2.mean(0), X2.mean(0)
    zc, xc = Z2 - mz, X2 - mx
    var_z = float(np.sum(zc * zc))
    if var_z == 0.0:
        raise ValueError("Z2 has zero variance")
    # In 2-D the optimal rotation angle has a closed form.
    c = float(np.sum(zc[:, 0] * xc[:, 0] + zc[:, 1] * xc[:, 1]))
    s = float(np.sum(zc[:, 0] * xc[:, 1] - zc[:, 1] * xc[:, 0]))
    theta = math.atan2(s, c)
    R = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
    scale = math.hypot(c, s) / var_z
    if scale == 0.0:
        raise ValueError("Z2 and X2 are uncorrelated; no positive scale exists")
    t = mx - scale * R @ mz
    tf = ProcrustesTransform(scale, R, t)
    aligned = tf.apply(Z2)
    residual = float(np.sum((aligned - X2) ** 2))
    return aligned, tf, residual


def pca_basis(Z) -> tuple[np.ndarray, np.ndarray]:
    """Mean and (D, 2) leading principal axes of ``Z``, signs fixed so each axis's largest loading is positive."""
    Z = _as_points(Z, "Z")
    n, D = Z.shape
    if n < 3:
        raise ValueError("pca2 needs at least 3 points")
    zc = Z - Z.mean(0)
    if not np.any(zc):
        raise ValueError("pca2 input has rank 0")
    cov = zc.T @ zc / (n - 1)
    _, vecs = sym_eig(cov)
    if D < 2:
        vecs = np.hstack([vecs, np.zeros((1, 1))])
    W = vecs[:, :2].copy()
    for j in range(2):
        i = int(np.argmax(np.abs(W[:, j])))
        if W[i, j] < 0:
            W[:, j] = -W[:, j]
    return Z.mean(0), W


def pca2(Z) -> np.ndarray:
    """Project centered ``Z`` on its two leading principal axes."""
    mean, W = pca_basis(Z)
    return (np.asarray(Z, dtype=np.float64) - mean) @ W


# -- reports -----------------------------------------------------------------

@dataclass(frozen=True)
class ChartReport:
    tw: float
    ct: float
    ks: float
    rd: float
    k: int
    bins: int
    n: int

    def as_dict(self) -> dict:
        return asdict(self)


def chart_report(X, Z, k: int | None = None, bins: int = DEFAULT_BINS) -> ChartReport:
    X, Z = _pair(X, Z)
    if np.unique(X, axis=0).shape[0] < X.shape[0]:
        # separate duplicate ground-truth points so ranks stay well defined
        X = X + 1e-9 * np.arange(X.shape[0])[:, None]
    n = X.shape[0]
    k = default_k(n) if k is None else k
    return ChartReport(
        tw=trustworthiness(X, Z, k),
        ct=continuity(X, Z, k),
        ks=kruskal_stress(X, Z),
        rd=rajski_distance(X, Z, bins),
        k=k, bins=bins, n=n,
    )


@dataclass
class EvalSummary:
    per_trajectory: list[ChartReport]
    mean: dict[str, float]
    std: dict[str, float]


def evaluate_trajectories(positions: Sequence[np.ndarray], latents: Sequence[np.ndarray],
                          k: int | None = None, bins: int = DEFAULT_BINS) -> EvalSummary:
    """Per-trajectory reports plus mean and (population) std of each metric."""
    if len(positions) != len(latents) or not positions:
        raise ValueError("need matching, non-empty lists of positions and latents")
    reports = [chart_report(np.asarray(X)[:, :2], Z, k, bins) for X, Z in zip(positions, latents)]
    mean, std = {}, {}
    for m in ("tw", "ct", "ks", "rd"):
        v = np.array([getattr(r, m) for r in reports])
        mean[m], std[m] = float(v.mean()), float(v.std())
    return EvalSummary(reports, mean, std)


def write_metrics_csv(summary: EvalSummary, path: str | Path) -> None:
    """One row per trajectory plus ``mean`` and ``std`` summary rows."""
    from .simulator import atomic_write

    lines = [",".join(CSV_FIELDS)]
    for i, r in enumerate(summary.per_trajectory):
        lines.append(f"{i},{r.n},{r.k},{r.bins},{r.tw:.10g},{r.ct:.10g},{r.ks:.10g},{r.rd:.10g}")
    ks = {r.k for r in summary.per_trajectory}
    ns = {r.n for r in summary.per_trajectory}
    k = ks.pop() if len(ks) == 1 else ""
    n = ns.pop() if len(ns) == 1 else ""
    bins = summary.per_trajectory[0].bins
    for label, d in (("mean", summary.mean), ("std", summary.std)):
        lines.append(f"{label},{n},{k},{bins},{d['tw']:.10g},{d['ct']:.10g},{d['ks']:.10g},{d['rd']:.10g}")
    atomic_write(path, ("\n".join(lines) + "\n").encode())


def read_metrics_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
