"""Encoder, action-conditioned latent predictors and the frozen inverse-dynamics probe.

Parameters live in flat ``dict[str, np.ndarray]`` maps with dotted names
(``enc.s0.b0.conv1.w``).  Forward functions accept either arrays or
:class:`~csiwm.numerics.Node` values, so the same code runs with or without
gradient tracking.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Literal, Mapping

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .numerics import Node
from .numerics import ad

PredictorKind = Literal["homomorphic", "mlp", "film", "gru"]
PREDICTORS: tuple[str, ...] = ("homomorphic", "mlp", "film", "gru")

Params = Mapping[str, "np.ndarray | Node"]


class EncoderConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    depths: list[int] = Field(default_factory=lambda: [1, 1, 1, 1])
    channels: list[int] = Field(default_factory=lambda: [16, 32, 32, 32])
    latent_dim: int = Field(16, ge=2)
    # "standardize": per-sample zero mean / unit variance + affine; "l2": unit sphere + affine.
    output_norm: Literal["standardize", "l2"] = "standardize"
    bn_momentum: float = 0.1

    @model_validator(mode="after")
    def _check(self) -> "EncoderConfig":
        if len(self.depths) != len(self.channels) or not self.depths:
            raise ValueError("depths and channels must be non-empty and the same length")
        if min(self.depths) < 1 or min(self.channels) < 1:
            raise ValueError("depths and channels must be positive")
        return self


class ModelConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    encoder: EncoderConfig = Field(default_factory=EncoderConfig)
    predictor: PredictorKind = "homomorphic"
    dyn_hidden: int = 64
    idm_hidden: int = 64
    action_dim: int = 2
    # Final generator layer scale at init, so early transitions start near identity.
    generator_init_scale: float = 1e-2


@dataclass
class ModelParams:
    """Online encoder, EMA target, dynamics, frozen probe and batch-norm buffers."""

    config: ModelConfig
    input_shape: tuple[int, int, int]
    theta: dict[str, np.ndarray]
    theta_ema: dict[str, np.ndarray]
    dyn: dict[str, np.ndarray]
    psi: dict[str, np.ndarray]
    stats: dict[str, np.ndarray] = field(default_factory=dict)
    stats_ema: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def latent_dim(self) -> int:
        return self.config.encoder.latent_dim

    def copy(self) -> "ModelParams":
        def dup(d):
            return {k: v.copy() for k, v in d.items()}

        return ModelParams(self.config, self.input_shape, dup(self.theta), dup(self.theta_ema),
                           dup(self.dyn), dup(self.psi), dup(self.stats), dup(self.stats_ema))


def params_hash(params: Mapping[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for k in sorted(params):
        h.update(k.encode())
        h.update(np.ascontiguousarray(params[k], dtype=np.float64).tobytes())
    return h.hexdigest()


# -- initialization ----------------------------------------------------------

def _linear(rng, params, name, fan_in, fan_out, scale=1.0):
    bound = 1.0 / math.sqrt(fan_in)
    params[f"{name}.w"] = rng.uniform(-bound, bound, (fan_in, fan_out)) * scale
    params[f"{name}.b"] = rng.uniform(-bound, bound, fan_out) * scale


def _conv(rng, params, name, c_in, c_out, k):
    std = math.sqrt(2.0 / (c_in * k * k))
    params[f"{name}.w"] = rng.standard_normal((c_out, c_in, k, k)) * std


def _bn(params, stats, name, c):
    params[f"{name}.g"] = np.ones(c)
    params[f"{name}.b"] = np.zeros(c)
    stats[f"{name}.rm"] = np.zeros(c)
    stats[f"{name}.rv"] = np.ones(c)


def init_encoder(cfg: EncoderConfig, in_channels: int, rng: np.random.Generator):
    params: dict[str, np.ndarray] = {}
    stats: dict[str, np.ndarray] = {}
    _bn(params, stats, "enc.in", in_channels)
    c = cfg.channels[0]
    _conv(rng, params, "enc.stem.conv", in_channels, c, 3)
    _bn(params, stats, "enc.stem.bn", c)
    for s, (depth, width) in enumerate(zip(cfg.depths, cfg.channels)):
        for j in range(depth):
            p = f"enc.s{s}.b{j}"
            stride = 2 if j == depth - 1 else 1
            _conv(rng, params, f"{p}.conv1", c, width, 3)
            _bn(params, stats, f"{p}.bn1", width)
            _conv(rng, params, f"{p}.conv2", width, width, 3)
            _bn(params, stats, f"{p}.bn2", width)
            if stride != 1 or c != width:
                _conv(rng, params, f"{p}.proj", c, width, 1)
                _bn(params, stats, f"{p}.projbn", width)
            c = width
    _linear(rng, params, "enc.head", c, cfg.latent_dim)
    params["enc.out.g"] = np.ones(cfg.latent_dim)
    params["enc.out.b"] = np.zeros(cfg.latent_dim)
    return params, stats


def init_predictor(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    D, d, h = cfg.encoder.latent_dim, cfg.action_dim, cfg.dyn_hidden
    p: dict[str, np.ndarray] = {}
    if cfg.predictor == "homomorphic":
        _linear(rng, p, "dyn.l1", d, h)
        _linear(rng, p, "dyn.l2", h, D * D, scale=cfg.generator_init_scale)
    elif cfg.predictor == "mlp":
        _linear(rng, p, "dyn.l1", D + d, h)
        _linear(rng, p, "dyn.l2", h, D)
    elif cfg.predictor == "film":
        for part in ("gamma", "beta"):
            _linear(rng, p, f"dyn.{part}.l1", d, h)
            _linear(rng, p, f"dyn.{part}.l2", h, D, scale=cfg.generator_init_scale)
    elif cfg.predictor == "gru":
        _linear(rng, p, "dyn.in", d, 3 * D)
        _linear(rng, p, "dyn.hid", D, 3 * D)
    else:
        raise ValueError(f"unknown predictor kind {cfg.predictor!r}")
    return p


def init_idm(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    D = cfg.encoder.latent_dim
    p: dict[str, np.ndarray] = {}
    _linear(rng, p, "idm.l1", 2 * D, cfg.idm_hidden)
    _linear(rng, p, "idm.l2", cfg.idm_hidden, cfg.action_dim)
    return p


def init_model(cfg: ModelConfig, input_shape: tuple[int, int, int], seed: int) -> ModelParams:
    """``input_shape`` is ``(2, B*M, L)``; the EMA target starts as a copy of the online encoder."""
    rng = np.random.default_rng([seed, 0x5EED])
    theta, stats = init_encoder(cfg.encoder, input_shape[0], rng)
    dyn = init_predictor(cfg, rng)
    psi = init_idm(cfg, rng)
    return ModelParams(
        config=cfg,
        input_shape=tuple(input_shape),
        theta=theta,
        theta_ema={k: v.copy() for k, v in theta.items()},
        dyn=dyn,
        psi=psi,
        stats=stats,
        stats_ema={k: v.copy() for k, v in stats.items()},
    )


# -- encoder -----------------------------------------------------------------

def _affine_bn(p: Params, stats, name, h, training, momentum):
    if stats is None:
        raise ValueError("batch-norm statistics are required")
    out = ad.batch_norm(h, stats[f"{name}.rm"], stats[f"{name}.rv"], training=training, momentum=momentum)
    shape = (1, -1) + (1,) * (out.ndim - 2)
    return ad.add(ad.mul(out, ad.reshape(p[f"{name}.g"], shape)), ad.reshape(p[f"{name}.b"], shape))


def encode(theta: Params, x, cfg: EncoderConfig, stats: dict[str, np.ndarray] | None,
           training: bool = False) -> Node:
    """Map inputs ``(N, 2, rows, taps)`` to latents ``(N, D)``.

    In training mode batch statistics normalize each layer and ``stats`` is
    updated in place; in eval mode the running statistics are used, so each
    sample's latent does not depend on its batch companions.
    """
    x = ad.const(x)
    if x.ndim != 4:
        raise ValueError(f"encoder input must be (N, C, rows, taps), got {x.shape}")
    if x.shape[1] != theta["enc.in.g"].shape[0]:
        raise ValueError(f"encoder expects {theta['enc.in.g'].shape[0]} input channels, got {x.shape[1]}")
    m = cfg.bn_momentum
    h = _affine_bn(theta, stats, "enc.in", x, training, m)
    h = ad.gelu(_affine_bn(theta, stats, "enc.stem.bn", ad.conv2d(h, theta["enc.stem.conv.w"], pad=1), training, m))
    for s, depth in enumerate(cfg.depths):
        for j in range(depth):
            p = f"enc.s{s}.b{j}"
            stride = 2 if j == depth - 1 else 1
            y = ad.conv2d(h, theta[f"{p}.conv1.w"], stride=stride, pad=1)
            y = ad.gelu(_affine_bn(theta, stats, f"{p}.bn1", y, training, m))
            y = _affine_bn(theta, stats, f"{p}.bn2", ad.conv2d(y, theta[f"{p}.conv2.w"], pad=1), training, m)
            if f"{p}.proj.w" in theta:
                skip = _affine_bn(theta, stats, f"{p}.projbn",
                                  ad.conv2d(h, theta[f"{p}.proj.w"], stride=stride), training, m)
            else:
                skip = h
            h = ad.gelu(ad.add(y, skip))
    pooled = ad.mean(h, axis=(2, 3))
    u = ad.add(ad.matmul(pooled, theta["enc.head.w"]), theta["enc.head.b"])
    u = ad.standardize(u) if cfg.output_norm == "standardize" else ad.l2_normalize(u)
    return ad.add(ad.mul(u, theta["enc.out.g"]), theta["enc.out.b"])


# -- dynamics ----------------------------------------------------------------

def _mlp(p: Params, name: str, x, act=ad.gelu):
    h = act(ad.add(ad.matmul(x, p[f"{name}.l1.w"]), p[f"{name}.l1.b"]))
    return ad.add(ad.matmul(h, p[f"{name}.l2.w"]), p[f"{name}.l2.b"])


def generator(dyn: Params, a, latent_dim: int) -> Node:
    """Actions ``(..., 2)`` -> Lie-algebra elements ``(..., D, D)``."""
    a = ad.const(a)
    flat = _mlp(dyn, "dyn", a)
    return ad.reshape(flat, a.shape[:-1] + (latent_dim, latent_dim))


def act_on(G, z) -> Node:
    """exp(G) z for stacks ``G (..., D, D)`` and ``z (..., D)``."""
    z = ad.const(z)
    out = ad.matmul(ad.expm(G), ad.reshape(z, z.shape + (1,)))
    return ad.reshape(out, z.shape)


def step(kind: str, dyn: Params, z, a, latent_dim: int | None = None) -> Node:
    """One latent transition ``z_{t+1} = f(z_t, a_t)`` for the given predictor kind."""
    z, a = ad.const(z), ad.const(a)
    D = z.shape[-1] if latent_dim is None else latent_dim
    if kind == "homomorphic":
        return act_on(generator(dyn, a, D), z)
    if kind == "mlp":
        return _mlp(dyn, "dyn", ad.concat([z, a], axis=-1))
    if kind == "film":
        gamma = _mlp(dyn, "dyn.gamma", a)
        beta = _mlp(dyn, "dyn.beta", a)
        return ad.add(ad.add(z, ad.mul(gamma, z)), beta)
    if kind == "gru":
        return gru_cell(dyn, z, a)
    raise ValueError(f"unknown predictor kind {kind!r}")


def gru_cell(dyn: Params, z, a) -> Node:
    """Gated recurrent cell with hidden state ``z`` and input ``a``.

    z' = (1 - u) * z + u * n, so a closed update gate (u = 0) keeps z.
    """
    D = z.shape[-1]
    gi = ad.add(ad.matmul(a, dyn["dyn.in.w"]), dyn["dyn.in.b"])
    gh = ad.add(ad.matmul(z, dyn["dyn.hid.w"]), dyn["dyn.hid.b"])
    r = ad.sigmoid(ad.add(gi[..., :D], gh[..., :D]))
    u = ad.sigmoid(ad.add(gi[..., D:2 * D], gh[..., D:2 * D]))
    n = ad.tanh(ad.add(gi[..., 2 * D:], ad.mul(r, gh[..., 2 * D:])))
    return ad.add(z, ad.mul(u, ad.sub(n, z)))


def predict_baseline(kind: str, dyn: Params, z, a) -> Node:
    if kind not in ("mlp", "film", "gru"):
        raise ValueError(f"unknown baseline predictor {kind!r}")
    return step(kind, dyn, z, a)


def rollout(kind: str, dyn: Params, z0, actions) -> Node:
    """Apply ``actions (h, ..., 2)`` one after another starting from ``z0 (..., D)``.

    Returns the ``h`` predicted latents stacked as ``(h, ..., D)``; the
    earliest action acts first.
    """
    actions = ad.const(actions)
    if actions.shape[0] < 1:
        raise ValueError("rollout needs at least one action")
    z = ad.const(z0)
    outs = []
    for i in range(actions.shape[0]):
        z = step(kind, dyn, z, actions[i])
        outs.append(z)
    return ad.stack(outs, axis=0)


# -- EMA and probe -----------------------------------------------------------

def ema_update(theta: Mapping[str, np.ndarray], theta_ema: Mapping[str, np.ndarray],
               decay: float) -> dict[str, np.ndarray]:
    if not 0.0 <= decay <= 1.0:
        raise ValueError("decay must lie in [0, 1]")
    if theta.keys() != theta_ema.keys():
        raise ValueError("online and target parameter names differ")
    out = {}
    for k, target in theta_ema.items():
        if theta[k].shape != target.shape:
            raise ValueError(f"shape mismatch for {k}: {theta[k].shape} vs {target.shape}")
        out[k] = decay * target + (1.0 - decay) * theta[k]
    return out


def idm_predict(psi: Params, z_t, z_next) -> Node:
    """Decode the action from a pair of consecutive latents (ReLU MLP)."""
    return _mlp(psi, "idm", ad.concat([ad.const(z_t), ad.const(z_next)], axis=-1), act=ad.relu)


def as_nodes(params: Mapping[str, np.ndarray], trainable: bool = True) -> dict[str, Node]:
    if trainable:
        return {k: ad.param(v, name=k) for k, v in params.items()}
    return {k: Node(v) for k, v in params.items()}


def encode_eval(params: ModelParams, x: np.ndarray, use_ema: bool = True, batch: int = 256) -> np.ndarray:
    """Eval-mode latents for ``x (N, 2, rows, taps)``."""
    theta = params.theta_ema if use_ema else params.theta
    stats = params.stats_ema if use_ema else params.stats
    out = [encode(theta, x[i:i + batch], params.config.encoder, stats, training=False).value
           for i in range(0, len(x), batch)]
    return np.concatenate(out, axis=0) if out else np.zeros((0, params.latent_dim))
