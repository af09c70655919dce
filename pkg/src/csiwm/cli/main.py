"""``csiwm`` command-line entry point.

Exit codes: 0 ok, 2 usage / config / dimension error, 3 I/O error,
4 numerical failure (non-finite loss, failed gradient check).
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
from pathlib import Path

import numpy as np

from .. import model as wm
from ..chartmetrics import evaluate_trajectories, pca_basis, procrustes_align, write_metrics_csv
from ..losses import LOSS_NAMES, LossWeights, loss_total, RolloutBatch
from ..numerics import ad, corrupted_rules, grad_check
from ..preprocess import preprocess_csi
from ..simulator import DatasetError, atomic_write, generate_trajectory, read_dataset, summarize, write_dataset
from ..trainer import NumericalError, SegmentData, init_state, train
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, load_config

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERICAL = 0, 2, 3, 4

log = logging.getLogger("csiwm")


class UsageError(Exception):
    pass


def _fail(code: int, msg: str) -> int:
    print(f"error: {msg}", file=sys.stderr)
    return code


# -- simulate ----------------------------------------------------------------

def cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    n = args.trajectories if args.trajectories is not None else cfg.data.train_trajectories
    T = args.steps if args.steps is not None else cfg.data.steps
    seed = args.seed if args.seed is not None else cfg.data.seed
    if n < 1 or T < 1:
        raise UsageError("--trajectories and --steps must be >= 1")
    out = Path(args.out)
    if not out.parent.is_dir():
        raise OSError(f"output directory does not exist: {out.parent}")
    trajs = []
    for i in range(n):
        tr = generate_trajectory(cfg.scene, cfg.motion, T, seed + i)
        s = summarize(tr)
        print(f"traj {i}: T={int(s['T'])} path_length={s['path_length']:.3f} m mean_speed={s['mean_speed']:.3f} m/s")
        trajs.append(tr)
    write_dataset(trajs, out)
    print(f"wrote {n} trajectories to {out}")
    return EXIT_OK


# -- train -------------------------------------------------------------------

def _check_dims(cfg: RunConfig, trajs) -> None:
    B, M, N = trajs[0].dims
    if (B, M, N) != (cfg.scene.n_bs, cfg.scene.n_antennas, cfg.scene.n_subcarriers):
        raise UsageError(f"dataset dims (B={B}, M={M}, N_sub={N}) differ from config "
                         f"({cfg.scene.n_bs}, {cfg.scene.n_antennas}, {cfg.scene.n_subcarriers})")
    if cfg.preproc.n_taps > N:
        raise UsageError(f"n_taps {cfg.preproc.n_taps} exceeds {N} subcarriers")


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    updates = {}
    if args.predictor:
        updates["model"] = cfg.model.model_copy(update={"predictor": args.predictor})
    train_update = {}
    if args.ablate is not None:
        names = [a for a in args.ablate.split(",") if a]
        bad = set(names) - set(LOSS_NAMES)
        if bad:
            raise UsageError(f"unknown loss names in --ablate: {sorted(bad)}")
        train_update["ablate"] = names
    if args.epochs is not None:
        train_update["epochs"] = args.epochs
    if args.seed is not None:
        train_update["seed"] = args.seed
    if train_update:
        updates["train"] = cfg.train.model_copy(update=train_update)
    cfg = RunConfig.model_validate({**cfg.model_dump(), **{k: v.model_dump() for k, v in updates.items()}})

    trajs = read_dataset(args.data)
    _check_dims(cfg, trajs)
    data = SegmentData.from_trajectories(trajs, cfg.preproc.n_taps)
    try:
        data.valid_starts(cfg.train.horizon)
    except ValueError as e:
        raise UsageError(str(e)) from e
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    spec = cfg.run_spec()

    state = None
    if args.resume:
        ck = load_checkpoint(args.resume)
        if ck.config.model != cfg.model:
            raise UsageError("resume checkpoint was trained with a different model config")
        state = ck.to_state()
        print(f"resuming at step {state.step}")
    else:
        state = init_state(spec, data.input_shape)

    def on_epoch(st, epoch):
        save_checkpoint(out_dir / f"epoch_{epoch + 1:03d}.ckpt", Checkpoint.from_state(cfg, st))

    try:
        _, rows = train(spec, data, state=state, on_epoch_end=on_epoch, log_path=out_dir / "train_log.csv")
    except NumericalError as e:
        return _fail(EXIT_NUMERICAL, f"{e}; last good checkpoint kept in {out_dir}")
    save_checkpoint(out_dir / "final.ckpt", Checkpoint.from_state(cfg, state))
    if rows:
        last = rows[-1]
        print(f"step {last['step']} total {last['total']:.5f} "
              + " ".join(f"{k}={last[k]:.4f}" for k in LOSS_NAMES))
    print(f"predictor={cfg.model.predictor} ablate={','.join(cfg.train.ablate) or '-'} -> {out_dir / 'final.ckpt'}")
    return EXIT_OK


# -- eval --------------------------------------------------------------------

def _load_pair(args):
    ck = load_checkpoint(args.ckpt)
    trajs = read_dataset(args.data)
    _check_dims(ck.config, trajs)
    params = ck.params
    L = ck.config.preproc.n_taps
    shape = preprocess_csi(trajs[0].csi[:1], L).shape[1:]
    if tuple(shape) != tuple(params.input_shape):
        raise UsageError(f"data gives model inputs {shape}, checkpoint expects {params.input_shape}")
    return ck, params, trajs


def cmd_eval(args) -> int:
    ck, params, trajs = _load_pair(args)
    L = ck.config.preproc.n_taps
    latents = [wm.encode_eval(params, preprocess_csi(t.csi, L)) for t in trajs]
    k = args.k if args.k is not None else ck.config.eval.k
    bins = args.bins if args.bins is not None else ck.config.eval.bins
    try:
        summary = evaluate_trajectories([t.positions for t in trajs], latents, k, bins)
    except ValueError as e:
        raise UsageError(str(e)) from e
    write_metrics_csv(summary, args.out)
    m, s = summary.mean, summary.std
    print(" ".join(f"{x}={m[x]:.4f}+-{s[x]:.4f}" for x in ("tw", "ct", "ks", "rd")))
    return EXIT_OK


# -- rollout -----------------------------------------------------------------

def cmd_rollout(args) -> int:
    ck, params, trajs = _load_pair(args)
    if not 0 <= args.traj < len(trajs):
        raise UsageError(f"--traj {args.traj} out of range (dataset has {len(trajs)} trajectories)")
    tr = trajs[args.traj]
    T = len(tr.csi) - 1
    if args.horizon < 0 or args.start < 0 or args.start + args.horizon > T:
        raise UsageError(f"start {args.start} + horizon {args.horizon} overruns trajectory of {T} steps")
    L = ck.config.preproc.n_taps
    x = preprocess_csi(tr.csi, L)
    # chart frame: PCA of the encoded trajectory, Procrustes-aligned to its positions
    chart = wm.encode_eval(params, x)
    mean, W = pca_basis(chart)
    _, tf, _ = procrustes_align((chart - mean) @ W, tr.positions[:, :2])

    z0 = wm.encode_eval(params, x[args.start:args.start + 1])[0]
    Z = [z0]
    if args.horizon > 0:
        acts = tr.actions[args.start:args.start + args.horizon]
        Z += list(wm.rollout(params.config.predictor, params.dyn, z0, acts).value)
    Z = np.asarray(Z)
    pca = (Z - mean) @ W
    aligned = tf.apply(pca)
    truth = tr.positions[args.start:args.start + args.horizon + 1, :2]
    gap = np.linalg.norm(aligned - truth, axis=1)

    D = Z.shape[1]
    header = ["step"] + [f"z{i}" for i in range(D)] + ["pca_x", "pca_y", "aligned_x", "aligned_y",
                                                      "true_x", "true_y", "gap"]
    lines = [",".join(header)]
    for i in range(len(Z)):
        vals = list(Z[i]) + list(pca[i]) + list(aligned[i]) + list(truth[i]) + [gap[i]]
        lines.append(",".join([str(args.start + i)] + [f"{v:.10g}" for v in vals]))
    atomic_write(args.out, ("\n".join(lines) + "\n").encode())
    print(f"rolled out {args.horizon} steps from t={args.start}; mean aligned gap {gap.mean():.4f} m")
    return EXIT_OK


# -- gradcheck ---------------------------------------------------------------

def tiny_gradcheck_config() -> RunConfig:
    """D = 4, H = 3, K = 2, all five losses, homomorphic predictor."""
    return RunConfig.model_validate({
        "scene": {"n_subcarriers": 16},
        "preproc": {"n_taps": 4},
        "model": {"encoder": {"depths": [1, 1], "channels": [3, 4], "latent_dim": 4},
                  "dyn_hidden": 6, "idm_hidden": 6, "generator_init_scale": 0.3},
        "train": {"batch_size": 2, "horizon": 3},
    })


def gradcheck_loss(cfg: RunConfig, seed: int = 0):
    """Build the full training loss as a function of (encoder, dynamics) parameters."""
    from ..simulator import generate_dataset

    L, H, K = cfg.preproc.n_taps, cfg.train.horizon, cfg.train.batch_size
    trajs = generate_dataset(cfg.scene, cfg.motion, K, H, seed)
    frames = np.stack([preprocess_csi(t.csi, L) for t in trajs])  # (K, H+1, 2, rows, L)
    actions = np.stack([t.actions for t in trajs]).transpose(1, 0, 2)
    params = wm.init_model(cfg.model, frames.shape[2:], seed)
    enc = cfg.model.encoder
    target = wm.encode(params.theta_ema, frames.reshape((-1,) + frames.shape[2:]), enc,
                       dict(params.stats_ema), training=True).value
    target = target.reshape(K, H + 1, -1).transpose(1, 0, 2)
    weights = cfg.loss
    names = {f"theta/{k}": v for k, v in params.theta.items()} | {f"dyn/{k}": v for k, v in params.dyn.items()}

    def build(p):
        theta = {k[6:]: v for k, v in p.items() if k.startswith("theta/")}
        dyn = {k[4:]: v for k, v in p.items() if k.startswith("dyn/")}
        stats = {k: v.copy() for k, v in params.stats.items()}
        z0 = wm.encode(theta, frames[:, 0], enc, stats, training=True)
        pred = wm.rollout(cfg.model.predictor, dyn, z0, actions)
        batch = RolloutBatch(pred=pred, target=target[1:], actions=actions, z0=z0, target0=target[0])
        return loss_total(batch, weights, params.psi).graph

    return build, names


def cmd_gradcheck(args) -> int:
    cfg = load_config(args.config) if args.config else tiny_gradcheck_config()
    if cfg.model.encoder.latent_dim > 8:
        raise UsageError(f"gradcheck needs a tiny model (D <= 8), config has D = {cfg.model.encoder.latent_dim}")
    build, params = gradcheck_loss(cfg, args.seed)
    if args.corrupt:
        with corrupted_rules("expm", "conv2d"):
            report = grad_check(build, params, tolerance=args.tolerance)
    else:
        report = grad_check(build, params, tolerance=args.tolerance)
    for name in sorted(report.max_rel_error):
        print(f"{name:40s} {report.max_rel_error[name]:.3e}")
    print(f"probes={report.n_probes} max_rel_error={report.max_error:.3e} worst={report.worst} "
          f"tolerance={args.tolerance:g} -> {'PASS' if report.passed else 'FAIL'}")
    return EXIT_OK if report.passed else EXIT_NUMERICAL


# -- entry point -------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="csiwm", description="Latent world model for CSI channel charting.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="generate a synthetic trajectory dataset")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--trajectories", type=int)
    s.add_argument("--steps", type=int)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_simulate)

    t = sub.add_parser("train", help="train a world model")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--out-dir", required=True)
    t.add_argument("--predictor", choices=wm.PREDICTORS)
    t.add_argument("--ablate", help="comma-separated loss names to disable, e.g. var,cov,idm")
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="chart metrics per trajectory")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--k", type=int)
    e.add_argument("--bins", type=int)
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("rollout", help="roll a latent forward along recorded actions")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--traj", type=int, default=0)
    r.add_argument("--start", type=int, default=0)
    r.add_argument("--horizon", type=int, default=6)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_rollout)

    g = sub.add_parser("gradcheck", help="finite-difference check of the full loss on a tiny model")
    g.add_argument("--config")
    g.add_argument("--tolerance", type=float, default=1e-4)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--corrupt", action="store_true", help="deliberately perturb backward rules (negative control)")
    g.set_defaults(func=cmd_gradcheck)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code is not None else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError) as e:
        return _fail(EXIT_USAGE, str(e))
    except (CheckpointError, DatasetError) as e:
        return _fail(EXIT_IO, str(e))
    except OSError as e:
        where = f" ({e.filename})" if getattr(e, "filename", None) else ""
        return _fail(EXIT_IO, f"{e.strerror or e}{where}")
    except NumericalError as e:
        return _fail(EXIT_NUMERICAL, str(e))
    except FloatingPointError as e:
        return _fail(EXIT_NUMERICAL, str(e))


if __name__ == "__main__":
    sys.exit(main())
