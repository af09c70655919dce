"""Matrix exponential by scaling and squaring with a degree-13 Pade approximant.

All routines accept a single ``(D, D)`` matrix or a stack ``(..., D, D)``;
each matrix in a stack gets its own scaling exponent so batched and
unbatched calls agree matrix by matrix.
"""

from __future__ import annotations

import numpy as np

# Pade(13, 13) numerator coefficients b_0 .. b_13.
_PADE13 = (
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
)

# Scale until the 1-norm of A / 2**s is at most this.
SCALE_THRESHOLD = 0.5


def _check_square(A: np.ndarray, name: str = "A") -> np.ndarray:
    A = np.asarray(A, dtype=np.float64)
    if A.ndim < 2 or A.shape[-1] != A.shape[-2]:
        raise ValueError(f"{name} must be square, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise ValueError(f"{name} has non-finite entries")
    return A


def _squaring_counts(A: np.ndarray) -> np.ndarray:
    norms = np.abs(A).sum(axis=-2).max(axis=-1)
    with np.errstate(divide="ignore"):
        s = np.ceil(np.log2(norms / SCALE_THRESHOLD))
    s = np.where(norms > SCALE_THRESHOLD, s, 0.0)
    return s.astype(np.int64)


def expm(A: np.ndarray) -> np.ndarray:
    """Return exp(A) for a square matrix or a stack of square matrices."""
    A = _check_square(A)
    n = A.shape[-1]
    s = _squaring_counts(A)
    As = A / np.ldexp(1.0, s)[..., None, None]

    b = _PADE13
    ident = np.broadcast_to(np.eye(n), As.shape)
    A2 = As @ As
    A4 = A2 @ A2
    A6 = A4 @ A2
    U = As @ (A6 @ (b[13] * A6 + b[11] * A4 + b[9] * A2)
              + b[7] * A6 + b[5] * A4 + b[3] * A2 + b[1] * ident)
    V = (A6 @ (b[12] * A6 + b[10] * A4 + b[8] * A2)
         + b[6] * A6 + b[4] * A4 + b[2] * A2 + b[0] * ident)
    # (V - U)^-1 (V + U) written as I + 2 (V - U)^-1 U so exp(0) is exactly I
    X = ident + 2.0 * np.linalg.solve(V - U, U)

    with np.errstate(over="ignore", invalid="ignore"):  # overflow is reported just below
        if X.ndim == 2:
            for _ in range(int(s)):
                X = X @ X
        else:
            flat = X.reshape(-1, n, n)
            counts = s.reshape(-1)
            for i in range(int(counts.max(initial=0))):
                idx = np.nonzero(counts > i)[0]
                flat[idx] = flat[idx] @ flat[idx]
            X = flat.reshape(X.shape)
    if not np.all(np.isfinite(X)):
        raise FloatingPointError("expm overflowed")
    return X


def expm_frechet(A: np.ndarray, E: np.ndarray) -> np.ndarray:
    """Directional derivative d/dh exp(A + hE) at h = 0.

    Read off the top-right block of exp([[A, E], [0, A]]).
    """
    A = _check_square(A)
    E = _check_square(E, "E")
    if A.shape != E.shape:
        raise ValueError(f"shape mismatch: A {A.shape} vs E {E.shape}")
    n = A.shape[-1]
    # The derivative is linear in E; shrinking E to A's size keeps the block's
    # norm (and hence the number of squarings) set by A alone.
    a_norm = np.abs(A).sum(axis=-2).max(axis=-1)
    e_norm = np.abs(E).sum(axis=-2).max(axis=-1)
    c = np.where(e_norm > 0, np.maximum(a_norm, 1e-3) / np.where(e_norm > 0, e_norm, 1.0), 1.0)
    block = np.zeros(A.shape[:-2] + (2 * n, 2 * n))
    block[..., :n, :n] = A
    block[..., n:, n:] = A
    block[..., :n, n:] = E * c[..., None, None]
    return expm(block)[..., :n, n:] / c[..., None, None]
