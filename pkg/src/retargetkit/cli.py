"""Command-line interface.

Subcommands cover the full workflow: ``calibrate`` the embodiment pair,
``preprocess`` the motion clips, ``train`` the policy and retargeting
parameters, ``retarget`` clips with a trained checkpoint, ``eval`` exported
trajectories with the kinematic quality metrics, and ``plot`` training
curves.

Exit codes: 0 on success, 1 on configuration/validation errors, 2 on
runtime faults.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import bilevel, metrics, rotmath
from .config import (
    ConfigError,
    ExperimentConfig,
    load_config,
    resolve_reward,
)
from .export import contact_body_map, retarget_all
from .metrics import ContactEstimate
from .morphology import (
    calibrate,
    load_calibration,
    load_morphology,
    load_pairs,
    save_calibration,
)
from .refmap import load_clip, precompute_z_nom, save_clip
from .trainer import (
    ActorCritic,
    TrainTask,
    load_checkpoint,
    policy_input_dim,
    train,
)

__all__ = ["main"]


def _load_inputs(cfg: ExperimentConfig, *, need_calibration: bool):
    """Load every input file an experiment references, as one bundle."""
    cfg.validate_inputs(need_calibration=need_calibration)
    try:
        source = load_morphology(cfg.source_morphology)
        target = load_morphology(cfg.target_morphology)
        pairs = load_pairs(cfg.correspondences)
        clips = [load_clip(p) for p in cfg.clips]
        cal = load_calibration(cfg.calibration) if need_calibration else None
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"invalid input file: {exc}") from exc
    return source, target, pairs, clips, cal


def _build_task(cfg: ExperimentConfig, source, target, pairs, clips, cal) -> TrainTask:
    z_nom = []
    for clip, path in zip(clips, cfg.clips):
        if clip.z_nom is None:
            raise ConfigError(
                f"clip {path} has no height offset; run the preprocess command first"
            )
        z_nom.append(clip.z_nom)
    try:
        return TrainTask(source, target, pairs, cal, clips, np.array(z_nom))
    except ValueError as exc:
        raise ConfigError(f"inconsistent experiment inputs: {exc}") from exc


def _load_policy_checkpoint(path, task, ppo_cfg):
    if not Path(path).is_file():
        raise ConfigError(f"no such checkpoint file: {path}")
    nq = task.target.n_joints
    policy = ActorCritic(policy_input_dim(nq, len(task.pairs)), nq + 6,
                         hidden=ppo_cfg.hidden, init_std=ppo_cfg.init_std)
    params, _ = load_checkpoint(path, policy, None, None)
    if params.pair_names != task.pair_names or params.motion_ids != task.motion_ids:
        params = bilevel.RetargetParams(
            task.pair_names, task.motion_ids,
            params.p_pos.copy(), params.p_ori.copy(),
            np.zeros(len(task.motion_ids)),
        )
    return policy, params


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_calibrate(args) -> int:
    cfg = load_config(args.config)
    source, target, pairs, _, _ = _load_inputs(cfg, need_calibration=False)
    try:
        cal = calibrate(source, target, pairs)
    except ValueError as exc:
        raise ConfigError(f"calibration failed: {exc}") from exc
    out = Path(args.out or cfg.calibration)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_calibration(cal, out)
    print(f"global scale s = {cal.s:.6f}")
    for i, name in enumerate(cal.pair_names):
        ang = np.degrees(np.linalg.norm(rotmath.log_map(cal.R_nom[i])))
        print(f"  {name}: |x_nom| = {np.linalg.norm(cal.x_nom[i]):.4f} m, "
              f"rotation = {ang:.2f} deg")
    print(f"wrote {out}")
    return 0


def cmd_preprocess(args) -> int:
    cfg = load_config(args.config)
    source, _, _, clips, cal = _load_inputs(cfg, need_calibration=True)
    for clip, path in zip(clips, cfg.clips):
        clip.z_nom = precompute_z_nom(clip, source, cal)
        save_clip(clip, path)
        print(f"{clip.id}: {clip.n_frames} frames @ {clip.fps:g} fps, "
              f"z_nom = {clip.z_nom:.4f} m -> {path}")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    source, target, pairs, clips, cal = _load_inputs(cfg, need_calibration=True)
    task = _build_task(cfg, source, target, pairs, clips, cal)
    seed = cfg.seed if args.seed is None else args.seed
    bilevel_enabled = cfg.bilevel and not args.no_bilevel
    out_dir = Path(args.out or cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    result = train(
        task, cfg.ppo, cfg.sim, cfg.update, cfg.box, cfg.loss,
        resolve_reward(cfg), seed=seed, bilevel_enabled=bilevel_enabled,
        out_dir=out_dir, checkpoint_every=cfg.checkpoint_every,
        log_every=cfg.log_every, resume_from=args.checkpoint, quiet=args.quiet,
    )
    with open(out_dir / "params.json", "w") as fh:
        json.dump(bilevel.params_to_dict(result.params, len(result.history)),
                  fh, indent=2)
    last = result.history[-1]
    print(f"trained {len(result.history)} iterations; "
          f"final mean reward {last['mean_reward']:.3f}, "
          f"upper loss {last['upper_loss']:.4f}, "
          f"failure rate {last['failure_rate']:.3f}")
    print(f"log: {result.log_path}")
    print(f"checkpoint: {result.checkpoint_path}")
    return 0


def cmd_retarget(args) -> int:
    cfg = load_config(args.config)
    source, target, pairs, clips, cal = _load_inputs(cfg, need_calibration=True)
    task = _build_task(cfg, source, target, pairs, clips, cal)
    ckpt = args.checkpoint or str(Path(cfg.out_dir) / "checkpoint.pt")
    policy, params = _load_policy_checkpoint(ckpt, task, cfg.ppo)
    out_dir = Path(args.out or Path(cfg.out_dir) / "retargeted")
    out_dir.mkdir(parents=True, exist_ok=True)

    results = retarget_all(task, policy, params, cfg.sim, cfg.ppo, cfg.loss)
    summary = []
    for res in results:
        clip_path = out_dir / f"{res.clip.id}.json"
        save_clip(res.clip, clip_path)
        summary.append({
            "id": res.clip.id,
            "file": clip_path.name,
            "success": res.success,
            "frames": res.frames,
            "expected_frames": res.expected_frames,
            "max_force_n": res.max_force,
            "max_torque_nm": res.max_torque,
            "mean_upper_loss": res.mean_upper_loss,
        })
        status = "ok" if res.success else "FAILED (truncated)"
        print(f"{res.clip.id}: {res.frames}/{res.expected_frames} frames, "
              f"max |F| {res.max_force:.2f} N, {status}")
    with open(out_dir / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    print(f"wrote {len(results)} trajectories to {out_dir}")
    return 0


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    source, target, pairs, clips, _ = _load_inputs(cfg, need_calibration=True)
    traj_dir = Path(args.retargeted or Path(cfg.out_dir) / "retargeted")
    if not traj_dir.is_dir():
        raise ConfigError(f"no such trajectory directory: {traj_dir}")
    by_id = {c.id: c for c in clips}
    name_map = contact_body_map(pairs)
    reports = []
    for path in sorted(traj_dir.glob("*.json")):
        if path.name == "summary.json":
            continue
        traj = load_clip(path)
        src_clip = by_id.get(traj.id)
        if src_clip is None:
            raise ConfigError(
                f"trajectory {path} has id {traj.id!r} not present in the config clips"
            )
        contacts = metrics.estimate_reference_contacts(
            src_clip, source,
            h_thresh=cfg.metrics.height_m, v_thresh=cfg.metrics.velocity_ms,
        )
        mapped = ContactEstimate(
            [name_map.get(n, n) for n in contacts.body_names],
            contacts.in_contact[:traj.n_frames],
        )
        reports.append(metrics.evaluate_motion(traj, target, mapped))
    if not reports:
        raise ConfigError(f"no trajectory files found in {traj_dir}")
    out = Path(args.out or Path(cfg.out_dir) / "metrics.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    metrics.write_report_csv(out, reports)
    print(metrics.format_report(reports))
    print(f"wrote {out}")
    return 0


def cmd_plot(args) -> int:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    cfg = load_config(args.config)
    log_path = Path(args.log or Path(cfg.out_dir) / "training_log.csv")
    if not log_path.is_file():
        raise ConfigError(f"no such training log: {log_path}")
    with open(log_path) as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ConfigError(f"training log {log_path} is empty")
    it = [int(r["iteration"]) for r in rows]
    out_dir = Path(args.out or Path(cfg.out_dir) / "plots")
    out_dir.mkdir(parents=True, exist_ok=True)
    curves = [
        ("mean_reward", "Mean tracking reward", "reward.png"),
        ("upper_loss", "Upper-level loss", "upper_loss.png"),
        ("update_rate", "Parameter update rate", "update_rate.png"),
    ]
    for column, title, fname in curves:
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.plot(it, [float(r[column]) for r in rows])
        ax.set_xlabel("iteration")
        ax.set_ylabel(column)
        ax.set_title(title)
        ax.grid(True, alpha=0.3)
        fig.tight_layout()
        fig.savefig(out_dir / fname, dpi=120)
        plt.close(fig)
        print(f"wrote {out_dir / fname}")
    return 0


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="retargetkit",
        description="Physics-aware motion retargeting: calibrate, train, "
                    "export, and audit retargeted motion.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="experiment config JSON")
        p.set_defaults(func=func)
        return p

    p = add("calibrate", cmd_calibrate,
            "compute the global scale and nominal per-pair offsets")
    p.add_argument("--out", help="calibration output path (default: config value)")

    add("preprocess", cmd_preprocess,
        "fill clip velocities and per-motion height offsets in place")

    p = add("train", cmd_train, "run the joint policy/parameter optimization")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", help="output directory (default: config out_dir)")
    p.add_argument("--checkpoint", help="resume from this checkpoint")
    p.add_argument("--no-bilevel", action="store_true",
                   help="freeze the retargeting parameters (ablation baseline)")
    p.add_argument("--quiet", action="store_true",
                   help="suppress per-iteration progress output")

    p = add("retarget", cmd_retarget,
            "export deterministic retargeted trajectories from a checkpoint")
    p.add_argument("--checkpoint", help="trained checkpoint "
                   "(default: <out_dir>/checkpoint.pt)")
    p.add_argument("--out", help="trajectory output directory "
                   "(default: <out_dir>/retargeted)")

    p = add("eval", cmd_eval, "kinematic quality metrics for exported trajectories")
    p.add_argument("--retargeted", help="trajectory directory "
                   "(default: <out_dir>/retargeted)")
    p.add_argument("--out", help="metrics CSV path (default: <out_dir>/metrics.csv)")

    p = add("plot", cmd_plot, "render training-curve images from the log CSV")
    p.add_argument("--log", help="training log CSV (default: <out_dir>/training_log.csv)")
    p.add_argument("--out", help="image output directory (default: <out_dir>/plots)")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # simulation faults, non-finite losses, I/O races
        print(f"runtime fault: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
