"""Complex CSI -> real model inputs: delay truncation, magnitude/phase channels, tube masks."""

from __future__ import annotations

import math

import numpy as np
from pydantic import BaseModel, ConfigDict, Field


class PreprocConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    n_taps: int = Field(16, ge=1)
    mask_ratio: float = Field(0.15, ge=0.0, le=1.0)
    mask_seed: int = 0


def truncate_delay(H: np.ndarray, n_taps: int) -> np.ndarray:
    """Inverse DFT along subcarriers (1/N convention), keeping the first ``n_taps`` taps."""
    H = np.asarray(H)
    n_sub = H.shape[-1]
    if not 1 <= n_taps <= n_sub:
        raise ValueError(f"n_taps={n_taps} must lie in [1, {n_sub}]")
    return np.fft.ifft(H, axis=-1)[..., :n_taps]


def to_model_input(h: np.ndarray) -> np.ndarray:
    """``(..., B, M, L)`` complex taps -> ``(..., 2, B*M, L)`` magnitude / wrapped phase.

    Phase is in (-pi, pi]; a tap of exactly zero maps to (0, 0).
    """
    h = np.asarray(h)
    *lead, B, M, L = h.shape
    flat = h.reshape(*lead, B * M, L)
    mag = np.abs(flat)
    phase = np.arctan2(flat.imag, flat.real)
    phase = np.where(phase == -np.pi, np.pi, phase)
    return np.stack([mag, phase], axis=-3)


def preprocess_csi(csi: np.ndarray, n_taps: int) -> np.ndarray:
    return to_model_input(truncate_delay(csi, n_taps))


def n_masked_cells(rows: int, taps: int, ratio: float) -> int:
    return int(math.floor(ratio * rows * taps + 1e-9))


def tube_mask_cells(rows: int, taps: int, ratio: float, rng: np.random.Generator) -> np.ndarray:
    """Boolean ``(rows, taps)`` mask with exactly ``floor(ratio * rows * taps)`` cells set."""
    if not 0.0 <= ratio <= 1.0:
        raise ValueError("mask ratio must lie in [0, 1]")
    mask = np.zeros(rows * taps, dtype=bool)
    k = n_masked_cells(rows, taps, ratio)
    if k:
        mask[rng.choice(rows * taps, size=k, replace=False)] = True
    return mask.reshape(rows, taps)


def tube_mask(x: np.ndarray, ratio: float, seed: int | np.random.Generator) -> np.ndarray:
    """Zero the same (row, tap) cells of both channels at every time step.

    ``x`` has shape ``(T, 2, rows, taps)`` for one segment.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    x = np.asarray(x, dtype=np.float64)
    mask = tube_mask_cells(x.shape[-2], x.shape[-1], ratio, rng)
    return np.where(mask, 0.0, x)
