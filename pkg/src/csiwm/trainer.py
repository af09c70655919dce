"""Training loop: segment sampling, AdamW, lr / weight-decay schedules, EMA target."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from . import model as wm
from .losses import LOSS_NAMES, LossBreakdown, LossWeights, RolloutBatch, loss_total
from .numerics import ad, backward
from .preprocess import preprocess_csi, tube_mask_cells
from .simulator import TrajectoryRecord

log = logging.getLogger(__name__)

LOG_FIELDS = ("step", "epoch", "lr", "wd", "tf", "roll", "var", "cov", "idm", "total", "seconds")


class NumericalError(RuntimeError):
    """Non-finite loss or gradient during training."""


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    epochs: int = Field(30, ge=0)
    batch_size: int = Field(32, ge=2)
    horizon: int = Field(6, ge=1)
    lr_start: float = 1e-4
    lr_peak: float = 3e-4
    lr_end: float = 1e-6
    warmup_frac: float = Field(0.05, gt=0, lt=1)
    wd_start: float = 0.04
    wd_end: float = 0.4
    ema_decay: float = Field(0.9995, ge=0, le=1)
    beta1: float = 0.9
    beta2: float = 0.999
    eps_opt: float = 1e-8
    grad_clip: float = 10.0
    # None: enough segments per epoch to cover every snapshot once on average.
    steps_per_epoch: int | None = None
    ablate: list[str] = Field(default_factory=list)
    seed: int = 0

    @model_validator(mode="after")
    def _check(self) -> "TrainConfig":
        unknown = set(self.ablate) - set(LOSS_NAMES)
        if unknown:
            raise ValueError(f"unknown loss names in ablate: {sorted(unknown)}")
        return self


# -- schedules ---------------------------------------------------------------

def warmup_steps(total_steps: int, cfg: TrainConfig) -> int:
    return max(1, math.ceil(cfg.warmup_frac * total_steps))


def lr_schedule(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear warm-up from lr_start to lr_peak, then cosine decay to lr_end at ``total_steps``."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warm = warmup_steps(total_steps, cfg)
    if step <= warm:
        f = step / warm
        return cfg.lr_start * (1.0 - f) + cfg.lr_peak * f
    progress = (step - warm) / (total_steps - warm)
    c = 0.5 * (1.0 + math.cos(math.pi * progress))
    return cfg.lr_end * (1.0 - c) + cfg.lr_peak * c


def wd_schedule(step: int, total_steps: int, cfg: TrainConfig) -> float:
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    f = step / total_steps if total_steps else 0.0
    return cfg.wd_start * (1.0 - f) + cfg.wd_end * f


# -- optimizer ---------------------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def decays(name: str) -> bool:
    """Decoupled weight decay touches weights only, never biases or norm affines."""
    return name.endswith(".w")


def adamw_step(params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray], state: AdamState,
               lr: float, wd: float, beta1: float = 0.9, beta2: float = 0.999,
               eps: float = 1e-8) -> None:
    """In-place AdamW update of ``params`` (bias-corrected moments, decoupled decay)."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for {name}")
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for name, g in grads.items():
        p = params[name]
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        if wd and decays(name):
            p *= 1.0 - lr * wd
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for k in grads:
            grads[k] = grads[k] * scale
    return norm


# -- data --------------------------------------------------------------------

@dataclass
class SegmentData:
    """Preprocessed inputs for all trajectories, addressable by (trajectory, start)."""

    inputs: list[np.ndarray]    # per trajectory (T+1, 2, rows, taps)
    actions: list[np.ndarray]   # per trajectory (T, 2)
    positions: list[np.ndarray]

    @classmethod
    def from_trajectories(cls, trajectories: Sequence[TrajectoryRecord], n_taps: int) -> "SegmentData":
        return cls(
            inputs=[preprocess_csi(tr.csi, n_taps) for tr in trajectories],
            actions=[tr.actions for tr in trajectories],
            positions=[tr.positions for tr in trajectories],
        )

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return tuple(self.inputs[0].shape[1:])  # type: ignore[return-value]

    @property
    def n_snapshots(self) -> int:
        return sum(len(x) for x in self.inputs)

    def valid_starts(self, horizon: int) -> np.ndarray:
        pairs = [(i, s) for i, x in enumerate(self.inputs) for s in range(len(x) - horizon)]
        if not pairs:
            raise ValueError(f"no trajectory has the {horizon + 1} snapshots a segment needs")
        return np.asarray(pairs, dtype=np.int64)


def sample_rollout_segments(data: SegmentData, horizon: int, batch_size: int, rng,
                            starts: np.ndarray | None = None):
    """Draw ``batch_size`` segments uniformly over valid (trajectory, start) pairs.

    Returns ``(frames (K, H+1, 2, rows, taps), actions (K, H, 2), pairs (K, 2))``.
    """
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    if starts is None:
        starts = data.valid_starts(horizon)
    pick = starts[rng.integers(len(starts), size=batch_size)]
    frames = np.stack([data.inputs[i][s: s + horizon + 1] for i, s in pick])
    actions = np.stack([data.actions[i][s: s + horizon] for i, s in pick])
    return frames, actions, pick


# -- training ----------------------------------------------------------------

class RunSpec(BaseModel):
    """What the trainer needs beyond TrainConfig."""

    model_config = ConfigDict(extra="forbid")

    model: wm.ModelConfig = Field(default_factory=wm.ModelConfig)
    loss: LossWeights = Field(default_factory=LossWeights)
    train: TrainConfig = Field(default_factory=TrainConfig)
    mask_ratio: float = Field(0.15, ge=0, le=1)
    mask_seed: int = 0


@dataclass
class TrainState:
    params: wm.ModelParams
    opt: AdamState
    step: int = 0


@dataclass
class StepOutput:
    losses: LossBreakdown
    grads: dict[str, np.ndarray]
    grad_norm: float


def steps_per_epoch(cfg: TrainConfig, n_snapshots: int) -> int:
    if cfg.steps_per_epoch is not None:
        return cfg.steps_per_epoch
    return max(1, math.ceil(n_snapshots / ((cfg.horizon + 1) * cfg.batch_size)))


def compute_step(params: wm.ModelParams, frames: np.ndarray, actions: np.ndarray, mask: np.ndarray,
                 weights: LossWeights, disabled: Iterable[str] = (), update_stats: bool = True) -> StepOutput:
    """Forward + backward for one batch of segments.

    frames: (K, H+1, 2, rows, taps); actions: (K, H, 2); mask: (K, rows, taps) cells
    hidden from the online branch.
    """
    cfg = params.config
    K, H1 = frames.shape[:2]
    H = H1 - 1
    stats_t = params.stats_ema if update_stats else {k: v.copy() for k, v in params.stats_ema.items()}
    stats_o = params.stats if update_stats else {k: v.copy() for k, v in params.stats.items()}
    flat = frames.reshape((K * H1,) + frames.shape[2:])
    target = wm.encode(params.theta_ema, flat, cfg.encoder, stats_t, training=True).value
    target = target.reshape(K, H1, -1).transpose(1, 0, 2)

    theta = wm.as_nodes(params.theta)
    dyn = wm.as_nodes(params.dyn)
    x0 = np.where(mask[:, None], 0.0, frames[:, 0])
    z0 = wm.encode(theta, x0, cfg.encoder, stats_o, training=True)
    A = np.ascontiguousarray(actions.transpose(1, 0, 2))
    pred = wm.rollout(cfg.predictor, dyn, z0, A)
    batch = RolloutBatch(pred=pred, target=target[1:], actions=A, z0=z0, target0=target[0])
    losses = loss_total(batch, weights, params.psi, frozenset(disabled))
    if not math.isfinite(losses.total):
        raise NumericalError(f"non-finite loss {losses.as_dict()}")
    grads: dict[str, np.ndarray] = {}
    if losses.graph is not None and losses.graph.requires_grad:
        backward(losses.graph)
    for prefix, nodes in (("theta", theta), ("dyn", dyn)):
        for k, n in nodes.items():
            grads[f"{prefix}/{k}"] = n.grad if n.grad is not None else np.zeros_like(n.value)
    return StepOutput(losses, grads, 0.0)


def train_step(state: TrainState, data: SegmentData, spec: RunSpec, total_steps: int,
               starts: np.ndarray | None = None) -> tuple[LossBreakdown, float, float]:
    cfg = spec.train
    rng = np.random.default_rng([cfg.seed, state.step])
    frames, actions, _ = sample_rollout_segments(data, cfg.horizon, cfg.batch_size, rng, starts)
    rows, taps = frames.shape[-2:]
    mask_rng = np.random.default_rng([spec.mask_seed, cfg.seed, state.step])
    mask = np.stack([tube_mask_cells(rows, taps, spec.mask_ratio, mask_rng) for _ in range(cfg.batch_size)])
    out = compute_step(state.params, frames, actions, mask, spec.loss, cfg.ablate)
    grads = out.grads
    clip_by_global_norm(grads, cfg.grad_clip)
    lr = lr_schedule(state.step, total_steps, cfg)
    wd = wd_schedule(state.step, total_steps, cfg)
    p = state.params
    flat = {f"theta/{k}": v for k, v in p.theta.items()} | {f"dyn/{k}": v for k, v in p.dyn.items()}
    adamw_step(flat, grads, state.opt, lr, wd, cfg.beta1, cfg.beta2, cfg.eps_opt)
    p.theta_ema = wm.ema_update(p.theta, p.theta_ema, cfg.ema_decay)
    state.step += 1
    return out.losses, lr, wd


def init_state(spec: RunSpec, input_shape: tuple[int, int, int]) -> TrainState:
    return TrainState(wm.init_model(spec.model, input_shape, spec.train.seed), AdamState(), 0)


def train(spec: RunSpec, data: SegmentData, state: TrainState | None = None,
          on_epoch_end: Callable[[TrainState, int], None] | None = None,
          log_path: str | Path | None = None) -> tuple[wm.ModelParams, list[dict]]:
    """Run ``spec.train.epochs`` epochs (resuming from ``state.step`` if given)."""
    cfg = spec.train
    if state is None:
        state = init_state(spec, data.input_shape)
    if tuple(state.params.input_shape) != tuple(data.input_shape):
        raise ValueError(f"model input shape {state.params.input_shape} != data {data.input_shape}")
    per_epoch = steps_per_epoch(cfg, data.n_snapshots)
    total = per_epoch * cfg.epochs
    starts = data.valid_starts(cfg.horizon)
    rows: list[dict] = []
    writer = fh = None
    if log_path is not None:
        log_path = Path(log_path)
        append = state.step > 0 and log_path.exists() and log_path.stat().st_size > 0
        fh = open(log_path, "a" if append else "w", newline="")
        writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        if not append:
            writer.writeheader()
    t0 = time.perf_counter()
    try:
        while state.step < total:
            epoch = state.step // per_epoch
            losses, lr, wd = train_step(state, data, spec, total, starts)
            row = {"step": state.step - 1, "epoch": epoch, "lr": lr, "wd": wd, **losses.as_dict(),
                   "seconds": round(time.perf_counter() - t0, 3)}
            rows.append(row)
            if writer is not None:
                writer.writerow(row)
            if state.step % per_epoch == 0:
                log.info("epoch %d step %d total %.4f", epoch, state.step, losses.total)
                if fh is not None:
                    fh.flush()
                if on_epoch_end is not None:
                    on_epoch_end(state, epoch)
    finally:
        if fh is not None:
            fh.close()
    return state.params, rows
