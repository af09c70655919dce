"""Synthetic multi-BS wideband CSI trajectories and the ``CSTJ0001`` dataset format.

The channel is a deterministic geometric multipath model with fixed point
scatterers: for UE position ``u`` and antenna ``m`` of BS ``b``

    H[b, m, k] = sum_p alpha_p * exp(-j 2 pi f_k tau_p(b, m)) + noise

where path 0 is line-of-sight and path ``p >= 1`` bounces once off
scatterer ``p - 1``.
"""

from __future__ import annotations

import math
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

SPEED_OF_LIGHT = 299_792_458.0
NLOS_REFLECTION = 0.6
MAGIC = b"CSTJ0001"

# Heading correction toward the active waypoint, as a fraction per step.
_STEER_GAIN = 0.15


class DatasetError(Exception):
    """Base class for dataset file problems."""


class BadMagicError(DatasetError):
    pass


class TruncatedFileError(DatasetError):
    pass


class DimensionMismatchError(DatasetError):
    pass


def _default_bs_positions() -> list[list[float]]:
    return [[0.3, 4.0, 2.5], [9.7, 4.0, 2.5]]


def _default_scatterers() -> list[list[float]]:
    return [[2.0, 0.2, 1.5], [7.5, 7.8, 1.2], [5.0, 0.3, 2.0], [1.0, 7.0, 0.8], [8.5, 1.0, 1.8]]


class SceneConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    n_bs: int = 2
    n_antennas: int = 4
    n_subcarriers: int = 64
    # Low carrier: at walking speed the per-snapshot phase rotation stays small.
    carrier_hz: float = 100e6
    bandwidth_hz: float = 100e6
    bs_positions: list[list[float]] = Field(default_factory=_default_bs_positions)
    # Horizontal ULA axis angle per BS (radians); None = perpendicular to the room-center direction.
    array_orientations: list[float] | None = None
    # Element spacing in meters; None = half a carrier wavelength.
    antenna_spacing: float | None = None
    n_paths: int = 4
    scatterers: list[list[float]] = Field(default_factory=_default_scatterers)
    # Std of the complex noise per entry, relative to that link's LoS amplitude.
    noise_std: float = 1e-4
    room_min: list[float] = Field(default_factory=lambda: [0.0, 0.0, 0.0])
    room_max: list[float] = Field(default_factory=lambda: [10.0, 8.0, 3.0])
    ue_height: float = 1.0

    @model_validator(mode="after")
    def _check(self) -> "SceneConfig":
        if min(self.n_bs, self.n_antennas, self.n_subcarriers) < 1:
            raise ValueError("n_bs, n_antennas and n_subcarriers must be >= 1")
        if self.bandwidth_hz <= 0 or self.carrier_hz <= 0:
            raise ValueError("carrier and bandwidth must be positive")
        if self.n_paths < 1:
            raise ValueError("n_paths must be >= 1")
        if len(self.scatterers) < self.n_paths - 1:
            raise ValueError(f"{self.n_paths} paths need at least {self.n_paths - 1} scatterers")
        if len(self.bs_positions) != self.n_bs:
            raise ValueError(f"expected {self.n_bs} BS positions, got {len(self.bs_positions)}")
        if self.array_orientations is not None and len(self.array_orientations) != self.n_bs:
            raise ValueError("one array orientation per BS required")
        if any(lo >= hi for lo, hi in zip(self.room_min, self.room_max)):
            raise ValueError("room bounds must satisfy min < max")
        return self

    @property
    def wavelength(self) -> float:
        return SPEED_OF_LIGHT / self.carrier_hz

    def subcarrier_freqs(self) -> np.ndarray:
        k = np.arange(self.n_subcarriers)
        return self.carrier_hz - self.bandwidth_hz / 2 + k * self.bandwidth_hz / self.n_subcarriers

    def antenna_positions(self) -> np.ndarray:
        """(B, M, 3) element coordinates of the horizontal uniform linear arrays."""
        bs = np.asarray(self.bs_positions, dtype=np.float64)
        spacing = self.wavelength / 2 if self.antenna_spacing is None else self.antenna_spacing
        if self.array_orientations is None:
            center = (np.asarray(self.room_min) + np.asarray(self.room_max)) / 2
            to_center = center[:2] - bs[:, :2]
            angles = np.arctan2(to_center[:, 1], to_center[:, 0]) + np.pi / 2
        else:
            angles = np.asarray(self.array_orientations, dtype=np.float64)
        axis = np.stack([np.cos(angles), np.sin(angles), np.zeros_like(angles)], axis=-1)
        offsets = (np.arange(self.n_antennas) - (self.n_antennas - 1) / 2) * spacing
        return bs[:, None, :] + offsets[None, :, None] * axis[:, None, :]


class MotionConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    dt: float = 0.04
    speed_min: float = 0.8
    speed_max: float = 1.6
    turn_std: float = 0.03
    n_waypoints: int = 8
    seed: int = 0

    @model_validator(mode="after")
    def _check(self) -> "MotionConfig":
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.speed_min < 0 or self.speed_max < self.speed_min:
            raise ValueError("speed range must satisfy 0 <= min <= max")
        if self.n_waypoints < 1:
            raise ValueError("n_waypoints must be >= 1")
        return self


@dataclass
class CsiSnapshot:
    H: np.ndarray
    x: np.ndarray
    t: float


@dataclass
class TrajectoryRecord:
    """One trajectory: ``T + 1`` snapshots stored as stacked arrays."""

    csi: np.ndarray        # (T+1, B, M, N_sub) complex
    positions: np.ndarray  # (T+1, 3)
    timestamps: np.ndarray  # (T+1,)

    def __post_init__(self):
        n = len(self.timestamps)
        if self.csi.shape[0] != n or self.positions.shape != (n, 3):
            raise DimensionMismatchError("csi, positions and timestamps disagree on length")
        if n >= 2 and np.any(np.diff(self.timestamps) <= 0):
            raise ValueError("timestamps must be strictly increasing")

    def __len__(self) -> int:
        return len(self.timestamps)

    @property
    def actions(self) -> np.ndarray:
        return actions_from_positions(self.positions, self.timestamps)

    @property
    def snapshots(self) -> list[CsiSnapshot]:
        return [CsiSnapshot(self.csi[i], self.positions[i], float(self.timestamps[i])) for i in range(len(self))]

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.csi.shape[1:])  # type: ignore[return-value]


def actions_from_positions(positions, timestamps) -> np.ndarray:
    """Planar velocity between consecutive positions, shape ``(len - 1, 2)``."""
    x = np.asarray(positions, dtype=np.float64)
    t = np.asarray(timestamps, dtype=np.float64)
    if len(x) < 2 or len(t) != len(x):
        raise ValueError("need at least two positions with matching timestamps")
    dt = np.diff(t)
    if np.any(dt <= 0):
        raise ValueError("timestamps must be strictly increasing (duplicate timestamp?)")
    return np.diff(x[:, :2], axis=0) / dt[:, None]


def channel_response(scene: SceneConfig, ue: np.ndarray, rng: np.random.Generator | None = None) -> np.ndarray:
    """CSI for UE positions ``(..., 3)``, returned as ``(..., B, M, N_sub)`` complex."""
    ue = np.asarray(ue, dtype=np.float64)
    ant = scene.antenna_positions()  # (B, M, 3)
    freqs = scene.subcarrier_freqs()
    lam = scene.wavelength
    u = ue[..., None, None, :]
    los = np.linalg.norm(u - ant, axis=-1)  # (..., B, M)
    lengths = [los]
    gains = [1.0]
    for s in np.asarray(scene.scatterers[: scene.n_paths - 1], dtype=np.float64):
        leg1 = np.linalg.norm(ue - s, axis=-1)[..., None, None]
        leg2 = np.linalg.norm(s - ant, axis=-1)
        lengths.append(leg1 + leg2)
        gains.append(NLOS_REFLECTION)
    L = np.stack(lengths, axis=-1)  # (..., B, M, P)
    if np.any(L <= 0):
        raise ValueError("zero-length propagation path")
    alpha = np.asarray(gains) * lam / (4 * np.pi * L)
    tau = L / SPEED_OF_LIGHT
    phase = np.exp(-2j * np.pi * tau[..., None] * freqs)  # (..., B, M, P, K)
    H = np.einsum("...p,...pk->...k", alpha.astype(np.complex128), phase)
    if rng is not None and scene.noise_std > 0:
        # Noise scaled per BS by that link's LoS amplitude (array-center distance).
        bs = np.asarray(scene.bs_positions, dtype=np.float64)
        d_los = np.linalg.norm(ue[..., None, :] - bs, axis=-1)
        sigma = scene.noise_std * lam / (4 * np.pi * d_los)
        sigma = sigma[..., None, None] / math.sqrt(2.0)
        noise = rng.standard_normal(H.shape) + 1j * rng.standard_normal(H.shape)
        H = H + sigma * noise
    return H


def _random_waypoint_path(scene: SceneConfig, motion: MotionConfig, T: int,
                          rng: np.random.Generator) -> np.ndarray:
    lo = np.asarray(scene.room_min[:2], dtype=np.float64)
    hi = np.asarray(scene.room_max[:2], dtype=np.float64)
    margin = np.minimum(0.5, 0.25 * (hi - lo))
    lo_m, hi_m = lo + margin, hi - margin
    pos = rng.uniform(lo_m, hi_m)
    waypoints = rng.uniform(lo_m, hi_m, size=(motion.n_waypoints, 2))
    speeds = rng.uniform(motion.speed_min, motion.speed_max, size=motion.n_waypoints)
    w = 0
    heading = math.atan2(*(waypoints[0] - pos)[::-1])
    out = np.empty((T + 1, 3))
    out[0, :2] = pos
    for t in range(1, T + 1):
        speed = speeds[w]
        step = speed * motion.dt
        delta = waypoints[w] - pos
        if np.hypot(*delta) < max(2.0 * step, 0.3):
            w = (w + 1) % motion.n_waypoints
            delta = waypoints[w] - pos
        desired = math.atan2(delta[1], delta[0])
        turn = (desired - heading + math.pi) % (2 * math.pi) - math.pi
        heading += _STEER_GAIN * turn + motion.turn_std * rng.standard_normal()
        pos = np.clip(pos + step * np.array([math.cos(heading), math.sin(heading)]), lo, hi)
        out[t, :2] = pos
    out[:, 2] = scene.ue_height
    return out


def generate_trajectory(scene: SceneConfig, motion: MotionConfig, T: int, seed: int | None = None) -> TrajectoryRecord:
    """Simulate ``T`` steps (``T + 1`` snapshots) of a smooth random-waypoint walk."""
    if T < 1:
        raise ValueError("T must be >= 1")
    rng = np.random.default_rng(motion.seed if seed is None else seed)
    positions = _random_waypoint_path(scene, motion, T, rng)
    csi = channel_response(scene, positions, rng)
    timestamps = np.arange(T + 1, dtype=np.float64) * motion.dt
    return TrajectoryRecord(csi=csi, positions=positions, timestamps=timestamps)


def generate_dataset(scene: SceneConfig, motion: MotionConfig, n_trajectories: int, T: int,
                     seed: int) -> list[TrajectoryRecord]:
    """Trajectory ``i`` uses seed ``seed + i``."""
    return [generate_trajectory(scene, motion, T, seed + i) for i in range(n_trajectories)]


def summarize(traj: TrajectoryRecord) -> dict[str, float]:
    steps = np.linalg.norm(np.diff(traj.positions[:, :2], axis=0), axis=1)
    duration = float(traj.timestamps[-1] - traj.timestamps[0])
    return {
        "T": len(traj) - 1,
        "path_length": float(steps.sum()),
        "mean_speed": float(steps.sum() / duration) if duration > 0 else 0.0,
    }


# -- file format -------------------------------------------------------------

def encode_dataset(trajectories: Sequence[TrajectoryRecord]) -> bytes:
    if not trajectories:
        raise ValueError("refusing to write an empty dataset")
    dims = trajectories[0].dims
    for tr in trajectories:
        if tr.dims != dims:
            raise DimensionMismatchError(f"trajectory dims {tr.dims} differ from {dims}")
    B, M, N = dims
    parts = [MAGIC, struct.pack("<4I", B, M, N, len(trajectories))]
    for tr in trajectories:
        parts.append(struct.pack("<I", len(tr)))
        parts.append(np.asarray(tr.timestamps, dtype="<f8").tobytes())
        parts.append(np.asarray(tr.positions, dtype="<f4").tobytes())
        inter = np.empty(tr.csi.shape + (2,), dtype="<f4")
        inter[..., 0] = tr.csi.real
        inter[..., 1] = tr.csi.imag
        parts.append(inter.tobytes())
    return b"".join(parts)


def decode_dataset(blob: bytes) -> list[TrajectoryRecord]:
    if len(blob) < 8 or blob[:8] != MAGIC:
        raise BadMagicError("bad magic: not a CSTJ0001 dataset")
    off = 8

    def take(nbytes: int) -> bytes:
        nonlocal off
        if off + nbytes > len(blob):
            raise TruncatedFileError(f"truncated dataset: needed {nbytes} bytes at offset {off}")
        chunk = blob[off: off + nbytes]
        off += nbytes
        return chunk

    B, M, N, n_traj = struct.unpack("<4I", take(16))
    if min(B, M, N) < 1:
        raise DimensionMismatchError(f"invalid dimensions B={B} M={M} N_sub={N}")
    out = []
    for _ in range(n_traj):
        (n,) = struct.unpack("<I", take(4))
        ts = np.frombuffer(take(8 * n), dtype="<f8").astype(np.float64)
        pos = np.frombuffer(take(4 * 3 * n), dtype="<f4").astype(np.float64).reshape(n, 3)
        raw = np.frombuffer(take(4 * n * B * M * N * 2), dtype="<f4").reshape(n, B, M, N, 2)
        csi = raw[..., 0].astype(np.float64) + 1j * raw[..., 1].astype(np.float64)
        out.append(TrajectoryRecord(csi=csi, positions=pos, timestamps=ts))
    if off != len(blob):
        raise DimensionMismatchError(f"{len(blob) - off} trailing bytes after {n_traj} trajectories")
    return out


def atomic_write(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_dataset(trajectories: Sequence[TrajectoryRecord], path: str | os.PathLike) -> None:
    atomic_write(path, encode_dataset(trajectories))


def read_dataset(path: str | os.PathLike) -> list[TrajectoryRecord]:
    return decode_dataset(Path(path).read_bytes())
