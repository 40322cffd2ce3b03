"""Command-line entry point: synth, train, estimate, eval, plot.

Every command is deterministic under a fixed config and seed; rerunning
produces byte-identical artifacts (the training log's wall-clock column
excepted). Exit codes: 0 success, 1 user/config error, 2 internal invariant
violation. ``POSEDIFF_THREADS`` caps worker parallelism during estimation;
results are merged by index so the thread count never changes outputs.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
import traceback
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .config import build_runtime, config_hash, load_config
from .container import read_container, write_container
from .data import (
    denormalize_poses,
    load_dataset,
    normalize_record,
    save_dataset,
    synth_generate,
    synth_generate_multi,
)
from .exceptions import ConfigError, PoseDiffError
from .metrics import auc, mpjpe, p_mpjpe, pck
from .plotting import per_joint_error_rows, skeleton_svg
from .rng import rng_for
from .sampler import character_seed, default_camera, estimate_single
from .training import (
    Trainer,
    read_checkpoint,
    restore_model,
    restore_trainer,
    save_checkpoint,
)

REPORT_COLUMNS = (
    "scope",
    "id",
    "action",
    "frames",
    "joints",
    "mpjpe_mm",
    "p_mpjpe_mm",
    "pck150_percent",
    "auc_percent",
)


def _fmt(v: float) -> str:
    return f"{v:.9f}"


def _worker_count() -> int:
    raw = os.environ.get("POSEDIFF_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"POSEDIFF_THREADS must be an integer, got {raw!r}")


# -- synth -----------------------------------------------------------------------


def run_synth(out_path, n_sequences, n_frames, n_joints, seed, motion, characters=0):
    records = synth_generate(n_sequences, n_frames, n_joints, seed, motion)
    if characters:
        records += synth_generate_multi(characters, n_frames, n_joints, seed + 1, motion)
    save_dataset(out_path, records)
    return out_path


# -- train -----------------------------------------------------------------------


def _training_samples(records, runtime):
    cfg = runtime.cfg
    samples = []
    for rec in records:
        if rec.gt_3d is None:
            raise ConfigError(f"record {rec.seq_id!r} has no 3D ground truth to train on")
        if (rec.n_frames, rec.n_joints) != (cfg["data"]["n_frames"], cfg["data"]["n_joints"]):
            raise ConfigError(
                f"record {rec.seq_id!r} is {rec.n_frames}x{rec.n_joints}; config expects "
                f"{cfg['data']['n_frames']}x{cfg['data']['n_joints']} "
                "(adjust data.n_frames/data.n_joints)"
            )
        norm, _ = normalize_record(rec, cfg["data"]["normalize"])
        samples.append((norm.keypoints_2d, norm.gt_3d, rec.action))
    return samples


def run_train(cfg, data_path, out_dir, resume=False, max_steps=None, epochs=None):
    if not os.path.exists(data_path):
        raise ConfigError(f"dataset not found: {data_path} (run `posediff synth` first)")
    os.makedirs(out_dir, exist_ok=True)
    runtime = build_runtime(cfg)
    records = load_dataset(data_path)
    if not records:
        raise ConfigError(f"dataset {data_path} holds no sequences")
    samples = _training_samples(records, runtime)
    trainer = Trainer(runtime.model, runtime.bank, runtime.sched, runtime.train_config, cfg["seed"])

    last_path = os.path.join(out_dir, "ckpt_last.ptc")
    if resume:
        if not os.path.exists(last_path):
            raise ConfigError(f"--resume set but {last_path} does not exist")
        tensors, meta = read_checkpoint(last_path)
        if meta["run_config"] and config_hash(meta["run_config"]) != runtime.hash:
            raise ConfigError(
                "checkpoint was trained with a different config "
                f"(hash {config_hash(meta['run_config'])} != {runtime.hash})"
            )
        restore_trainer(trainer, tensors, meta)

    if max_steps is None:
        max_steps = cfg["train"]["max_steps"]
    target_epochs = cfg["train"]["epochs"] if epochs is None else epochs
    every = cfg["train"]["checkpoint_every"]
    while trainer.epoch < target_epochs:
        trainer.train_epoch(samples, max_steps=max_steps)
        done = max_steps is not None and trainer.opt.step_count >= max_steps
        if trainer.epoch % every == 0 or trainer.epoch == target_epochs or done:
            save_checkpoint(
                os.path.join(out_dir, f"ckpt_epoch{trainer.epoch:05d}.ptc"), trainer, cfg
            )
            save_checkpoint(last_path, trainer, cfg)
        if done:
            break
    if not os.path.exists(last_path):
        save_checkpoint(last_path, trainer, cfg)

    log_path = os.path.join(out_dir, "log.csv")
    with open(log_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "step", "loss", "train_mpjpe", "lr", "wall_ms"])
        for row in trainer.logs:
            w.writerow(
                [row.epoch, row.step, _fmt(row.loss), _fmt(row.train_mpjpe),
                 f"{row.lr:.3e}", f"{row.wall_ms:.1f}"]
            )
    return last_path, trainer


# -- estimate --------------------------------------------------------------------


def _load_model(checkpoint_path):
    tensors, meta = read_checkpoint(checkpoint_path)
    cfg = meta.get("run_config")
    if not cfg:
        raise ConfigError(f"{checkpoint_path}: checkpoint carries no run config")
    runtime = build_runtime(cfg)
    restore_model(runtime.model, runtime.bank, tensors)
    return runtime


def _estimate_record(rec, runtime, H, M, seed, per_frame):
    cfg = runtime.cfg
    if (rec.n_frames, rec.n_joints) != (
        runtime.model_config.n_frames,
        runtime.model_config.n_joints,
    ):
        raise ConfigError(
            f"record {rec.seq_id!r} is {rec.n_frames}x{rec.n_joints}; checkpoint "
            f"expects {runtime.model_config.n_frames}x{runtime.model_config.n_joints}"
        )
    cam = rec.camera or default_camera()
    norm, params = normalize_record(rec, cfg["data"]["normalize"])
    prompt = runtime.prompt_for(rec.action)
    x_norm = norm.keypoints_2d.astype(runtime.dtype)

    def denoise_fn(yt, x, t):
        return runtime.model.denoise_array(yt.astype(runtime.dtype), x, t, prompt)

    return estimate_single(
        x_norm,
        cam,
        denoise_fn,
        runtime.sched,
        H,
        M,
        seed,
        deterministic=cfg["sample"]["deterministic"],
        per_frame=per_frame,
        to_camera=lambda y: denormalize_poses(y, params),
        x_pixels=rec.keypoints_2d,
        frame_mask=rec.presence,
    ), rec.camera is None


def run_estimate(
    checkpoint_path,
    data_path,
    out_path,
    hypotheses=None,
    iterations=None,
    seed=None,
    per_frame=None,
):
    runtime = _load_model(checkpoint_path)
    cfg = runtime.cfg
    H = hypotheses if hypotheses is not None else cfg["sample"]["hypotheses"]
    M = iterations if iterations is not None else cfg["sample"]["iterations"]
    base_seed = seed if seed is not None else cfg["seed"]
    jpma_per_frame = (
        per_frame if per_frame is not None else cfg["sample"]["per_frame_jpma"]
    )
    records = load_dataset(data_path)
    if not records:
        raise ConfigError(f"dataset {data_path} holds no sequences")

    # characters of one scene share a scene seed and get per-character streams,
    # matching the documented multi-human derivation rule
    def record_seed(rec):
        if rec.scene is not None and rec.character is not None:
            scene_seed = int(rng_for(base_seed, "estimate", rec.scene).integers(0, 2**63 - 1))
            return character_seed(scene_seed, rec.character)
        return int(rng_for(base_seed, "estimate", rec.seq_id).integers(0, 2**63 - 1))

    def work(rec):
        return _estimate_record(rec, runtime, H, M, record_seed(rec), jpma_per_frame)

    workers = _worker_count()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(work, records))
    else:
        results = [work(rec) for rec in records]

    tensors, cam_notes = {}, {}
    for rec, (res, used_default) in zip(records, results):
        base = f"pred/{rec.seq_id}"
        tensors[f"{base}/poses"] = res.poses
        tensors[f"{base}/per_joint_hypothesis_index"] = res.hypothesis_index.astype(np.float64)
        if rec.presence is not None:
            tensors[f"{base}/presence"] = rec.presence.astype(np.float64)
        cam = rec.camera or default_camera()
        cam_notes[rec.seq_id] = {"camera": cam.to_dict(), "default_camera": used_default}
    meta = {
        "kind": "predictions",
        "config": cfg,
        "config_hash": runtime.hash,
        "hypotheses": H,
        "iterations": M,
        "seed": base_seed,
        "per_frame_jpma": jpma_per_frame,
        "cameras": cam_notes,
    }
    write_container(out_path, tensors, meta)
    return out_path


# -- eval ------------------------------------------------------------------------


def _pair_predictions(pred_tensors, records):
    # multi-human ids look like "scene000/ch1", so strip fixed affixes only
    pred_ids = {
        name[len("pred/") : -len("/poses")]
        for name in pred_tensors
        if name.startswith("pred/") and name.endswith("/poses")
    }
    rec_ids = {r.seq_id for r in records}
    missing = sorted(rec_ids - pred_ids)
    orphans = sorted(pred_ids - rec_ids)
    if missing or orphans:
        raise ConfigError(
            f"prediction/dataset id mismatch: missing predictions for {missing}, "
            f"predictions without records {orphans}"
        )


def run_eval(pred_path, data_path, out_dir, rigid_only=False):
    os.makedirs(out_dir, exist_ok=True)
    pred_tensors, pred_meta = read_container(pred_path)
    if pred_meta.get("kind") != "predictions":
        raise ConfigError(f"{pred_path}: not a predictions container")
    records = load_dataset(data_path)
    _pair_predictions(pred_tensors, records)

    rows = []
    per_joint_rows = []
    by_action = {}
    for rec in sorted(records, key=lambda r: r.seq_id):
        if rec.gt_3d is None:
            raise ConfigError(f"record {rec.seq_id!r} has no ground truth to evaluate")
        pred = pred_tensors[f"pred/{rec.seq_id}/poses"]
        mask = rec.presence if rec.presence is not None else np.ones(rec.n_frames, bool)
        p, g = pred[mask], rec.gt_3d[mask]
        seq = {
            "mpjpe_mm": mpjpe(p, g),
            "p_mpjpe_mm": p_mpjpe(p, g, rigid_only=rigid_only),
            "pck150_percent": pck(p, g),
            "auc_percent": auc(p, g),
        }
        rows.append(
            ("sequence", rec.seq_id, rec.action, int(mask.sum()), rec.n_joints, seq)
        )
        by_action.setdefault(rec.action, []).append(seq)
        for j, err in enumerate(per_joint_error_rows(pred, rec.gt_3d, mask)):
            per_joint_rows.append((rec.seq_id, j, err))

    metric_keys = ("mpjpe_mm", "p_mpjpe_mm", "pck150_percent", "auc_percent")
    action_rows = []
    for action in sorted(by_action):
        seqs = by_action[action]
        agg = {k: float(np.mean([s[k] for s in seqs])) for k in metric_keys}
        n = sum(1 for r in rows if r[0] == "sequence" and r[2] == action)
        action_rows.append(("action", action, action, n, rows[0][4], agg))
    overall = {
        k: float(np.mean([r[5][k] for r in rows if r[0] == "sequence"]))
        for k in metric_keys
    }
    by_action_avg = {
        k: float(np.mean([r[5][k] for r in action_rows])) for k in metric_keys
    }
    n_seq = sum(1 for r in rows if r[0] == "sequence")
    rows.extend(action_rows)
    rows.append(("overall", "overall", "", n_seq, rows[0][4], overall))
    rows.append(("overall_by_action", "overall_by_action", "", n_seq, rows[0][4], by_action_avg))

    report_path = os.path.join(out_dir, "report.csv")
    with open(report_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(REPORT_COLUMNS)
        for scope, rid, action, frames, joints, m in rows:
            w.writerow(
                [scope, rid, action, frames, joints]
                + [_fmt(m[k]) for k in metric_keys]
            )
    per_joint_path = os.path.join(out_dir, "per_joint.csv")
    with open(per_joint_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["sequence_id", "joint", "mpjpe_mm"])
        for sid, j, err in per_joint_rows:
            w.writerow([sid, j, _fmt(err)])
    return report_path, per_joint_path, rows


# -- plot ------------------------------------------------------------------------


def run_plot(pred_path, data_path, seq_id, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    pred_tensors, pred_meta = read_container(pred_path)
    if pred_meta.get("kind") != "predictions":
        raise ConfigError(f"{pred_path}: not a predictions container")
    records = {r.seq_id: r for r in load_dataset(data_path)}
    if seq_id not in records:
        raise ConfigError(f"unknown sequence id {seq_id!r}; dataset has {sorted(records)}")
    key = f"pred/{seq_id}/poses"
    if key not in pred_tensors:
        raise ConfigError(f"{pred_path} has no prediction for {seq_id!r}")
    rec = records[seq_id]
    pred = pred_tensors[key]
    cam = rec.camera or default_camera()

    from .sampler import reproject

    pred_2d = reproject(pred, cam)
    svg = skeleton_svg(pred_2d, rec.keypoints_2d, title=f"{seq_id} ({rec.action})")
    stem = seq_id.replace("/", "_")
    svg_path = os.path.join(out_dir, f"{stem}.svg")
    with open(svg_path, "w") as f:
        f.write(svg)

    csv_path = os.path.join(out_dir, f"{stem}_errors.csv")
    mask = rec.presence if rec.presence is not None else None
    if rec.gt_3d is None:
        raise ConfigError(f"record {seq_id!r} has no ground truth for error plotting")
    with open(csv_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["sequence_id", "joint", "mpjpe_mm"])
        for j, err in enumerate(per_joint_error_rows(pred, rec.gt_3d, mask)):
            w.writerow([seq_id, j, _fmt(err)])
    return svg_path, csv_path


# -- argparse --------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _add_config_args(p):
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--preset", choices=["tiny", "paper"], help="configuration preset")
    p.add_argument("--seed", type=int, help="override config seed")


def build_parser() -> _Parser:
    parser = _Parser(prog="posediff", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--sequences", type=int, default=8)
    p.add_argument("--frames", type=int, default=16)
    p.add_argument("--joints", type=int, default=17)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--motion", default="mixed",
                   choices=["walk_cycle", "arm_wave", "sit", "mixed"])
    p.add_argument("--characters", type=int, default=0,
                   help="also add one multi-human scene with this many characters")

    p = sub.add_parser("train", help="train a denoiser")
    _add_config_args(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", action="store_true")
    p.add_argument("--steps", type=int, help="stop after this many optimizer steps")
    p.add_argument("--epochs", type=int, help="override config epoch count")

    p = sub.add_parser("estimate", help="predict 3D poses for a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--hypotheses", type=int)
    p.add_argument("--iterations", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--per-frame-jpma", action="store_true", default=None)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    p.add_argument("--predictions", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--rigid-only", action="store_true")

    p = sub.add_parser("plot", help="render one sequence as SVG + error CSV")
    p.add_argument("--predictions", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--sequence", required=True)
    p.add_argument("--out", required=True)
    return parser


def _dispatch(args) -> int:
    if args.command == "synth":
        path = run_synth(
            args.out, args.sequences, args.frames, args.joints, args.seed,
            args.motion, args.characters,
        )
        print(f"wrote dataset {path}")
    elif args.command == "train":
        overrides = {"seed": args.seed} if args.seed is not None else None
        cfg = load_config(args.config, args.preset, overrides)
        ckpt, trainer = run_train(
            cfg, args.data, args.out, resume=args.resume,
            max_steps=args.steps, epochs=args.epochs,
        )
        final = trainer.logs[-1].loss if trainer.logs else float("nan")
        print(f"trained {trainer.opt.step_count} steps; final loss {final:.6f}; wrote {ckpt}")
    elif args.command == "estimate":
        path = run_estimate(
            args.checkpoint, args.data, args.out,
            hypotheses=args.hypotheses, iterations=args.iterations,
            seed=args.seed, per_frame=args.per_frame_jpma,
        )
        print(f"wrote predictions {path}")
    elif args.command == "eval":
        report, per_joint, rows = run_eval(
            args.predictions, args.data, args.out, rigid_only=args.rigid_only
        )
        overall = next(r for r in rows if r[0] == "overall")[5]
        print(
            f"MPJPE {overall['mpjpe_mm']:.3f}mm  P-MPJPE {overall['p_mpjpe_mm']:.3f}mm  "
            f"PCK {overall['pck150_percent']:.2f}  AUC {overall['auc_percent']:.2f}"
        )
        print(f"wrote {report} and {per_joint}")
    elif args.command == "plot":
        svg, errors = run_plot(args.predictions, args.data, args.sequence, args.out)
        print(f"wrote {svg} and {errors}")
    else:  # pragma: no cover - argparse enforces the choices
        raise ConfigError(f"unknown command {args.command!r}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return _dispatch(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except PoseDiffError as e:
        print(f"internal error: {e}", file=sys.stderr)
        return 2
    except Exception:
        traceback.print_exc()
        return 2


if __name__ == "__main__":
    sys.exit(main())
