"""Binary checkpoint format.

Layout (little-endian): magic ``CSWM0001``; u32 version; u64 metadata length
and UTF-8 JSON metadata (run config, global step, input shape); u32 tensor
count; per tensor: u16 name length, name, u8 rank, u32 dims, f32 data.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..model import ModelParams, init_model
from ..simulator import atomic_write
from ..trainer import AdamState, TrainState
from .config import RunConfig

MAGIC = b"CSWM0001"
VERSION = 1
GROUPS = ("theta", "theta_ema", "dyn", "psi", "stats", "stats_ema")


class CheckpointError(Exception):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    config: RunConfig
    step: int
    input_shape: tuple[int, int, int]
    tensors: dict[str, np.ndarray]
    version: int = VERSION

    @classmethod
    def from_state(cls, config: RunConfig, state: TrainState) -> "Checkpoint":
        p = state.params
        tensors: dict[str, np.ndarray] = {}
        for g in GROUPS:
            for k, v in getattr(p, g).items():
                tensors[f"{g}/{k}"] = v
        for g in ("theta", "dyn"):
            for k, v in getattr(p, g).items():
                name = f"{g}/{k}"
                tensors[f"adam.m/{name}"] = state.opt.m.get(name, np.zeros_like(v))
                tensors[f"adam.v/{name}"] = state.opt.v.get(name, np.zeros_like(v))
        return cls(config, state.step, tuple(p.input_shape), tensors)

    def expected_shapes(self) -> dict[str, tuple[int, ...]]:
        ref = init_model(self.config.model, self.input_shape, 0)
        ref_state = TrainState(ref, AdamState(), 0)
        return {k: v.shape for k, v in Checkpoint.from_state(self.config, ref_state).tensors.items()}

    def validate(self) -> None:
        expected = self.expected_shapes()
        missing = sorted(set(expected) - set(self.tensors))
        extra = sorted(set(self.tensors) - set(expected))
        if missing or extra:
            raise CheckpointError(f"tensor names do not match the config: missing {missing[:5]}, unexpected {extra[:5]}")
        for k, shape in expected.items():
            if self.tensors[k].shape != shape:
                raise CheckpointError(f"tensor {k} has shape {self.tensors[k].shape}, expected {shape}")

    def to_state(self) -> TrainState:
        self.validate()
        groups = {g: {} for g in GROUPS}
        opt = AdamState(t=self.step)
        for name, v in self.tensors.items():
            head, rest = name.split("/", 1)
            v = np.array(v, dtype=np.float64)
            if head == "adam.m":
                opt.m[rest] = v
            elif head == "adam.v":
                opt.v[rest] = v
            else:
                groups[head][rest] = v
        params = ModelParams(self.config.model, self.input_shape, **groups)
        return TrainState(params, opt, self.step)

    @property
    def params(self) -> ModelParams:
        return self.to_state().params


def _metadata(ck: Checkpoint) -> bytes:
    doc = {"config": ck.config.model_dump(mode="json"), "global_step": ck.step,
           "input_shape": list(ck.input_shape)}
    return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()


def encode_checkpoint(ck: Checkpoint) -> bytes:
    meta = _metadata(ck)
    out = [MAGIC, struct.pack("<IQ", ck.version, len(meta)), meta, struct.pack("<I", len(ck.tensors))]
    for name in sorted(ck.tensors):
        arr = np.asarray(ck.tensors[name])
        raw = name.encode()
        out.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        out.append(np.asarray(arr.shape, dtype="<u4").tobytes())
        out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob, self.pos = blob, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise TruncatedCheckpointError(f"checkpoint truncated at byte {len(self.blob)} (needed {self.pos + n})")
        b = self.blob[self.pos:self.pos + n]
        self.pos += n
        return b

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_checkpoint(blob: bytes, validate: bool = True) -> Checkpoint:
    r = _Reader(blob)
    if r.take(8) != MAGIC:
        raise CheckpointError("bad magic: not a CSWM0001 checkpoint")
    version, meta_len = r.unpack("<IQ")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (this build reads {VERSION}, no migration)")
    try:
        meta = json.loads(r.take(meta_len).decode())
        config = RunConfig.model_validate(meta["config"])
        step, shape = int(meta["global_step"]), tuple(meta["input_shape"])
    except (ValueError, KeyError) as e:
        raise CheckpointError(f"unreadable checkpoint metadata: {e}") from e
    (count,) = r.unpack("<I")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode()
        (rank,) = r.unpack("<B")
        dims = tuple(int(d) for d in np.frombuffer(r.take(4 * rank), dtype="<u4"))
        n = int(np.prod(dims)) if dims else 1
        data = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(dims)
        tensors[name] = data.astype(np.float64)
    if r.pos != len(blob):
        raise CheckpointError(f"{len(blob) - r.pos} trailing bytes after the last tensor")
    ck = Checkpoint(config, step, shape, tensors, version)  # type: ignore[arg-type]
    if validate:
        ck.validate()
    return ck


def save_checkpoint(path: str | Path, ck: Checkpoint) -> None:
    atomic_write(path, encode_checkpoint(ck))


def load_checkpoint(path: str | Path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())
