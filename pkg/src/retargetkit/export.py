"""Deterministic retargeted-trajectory export.

Replays the trained policy with mean actions from the first frame of each
motion, records the simulated target-body world frames at the clip frame
rate, and reports per-clip success together with the applied root wrench
and the mean tracking loss over the exported frames.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .bilevel import RetargetParams, UpperBatch, grad_estimate
from .morphology import CorrespondencePair
from .objective import LossWeights
from .refmap import SourceMotionClip
from .simcore import SimConfig
from .trainer import (
    ActorCritic,
    PPOConfig,
    RolloutEnvs,
    TrainTask,
    check_termination,
    init_episode_pose,
)

__all__ = ["ExportResult", "retarget_clip", "retarget_all"]


@dataclass
class ExportResult:
    """One retargeted motion: simulated body frames plus rollout diagnostics."""

    clip: SourceMotionClip
    success: bool
    frames: int  # exported post-ramp control steps
    expected_frames: int  # source clip length
    max_force: float  # max applied root force magnitude, N
    max_torque: float  # max applied root torque magnitude, N*m
    mean_upper_loss: float


def retarget_clip(
    task: TrainTask,
    policy: ActorCritic,
    params: RetargetParams,
    sim_cfg: SimConfig,
    ppo_cfg: PPOConfig,
    motion_idx: int,
    weights: LossWeights | None = None,
) -> ExportResult:
    """Deterministic mean-action rollout of one motion from its first frame.

    The ramp-in phase holds the first reference frame and is not exported;
    afterwards one trajectory frame is recorded per reference frame until the
    clip ends or the tracking-failure thresholds fire. Failed rollouts are
    truncated at the failing frame and flagged, but still returned.
    """
    if weights is None:
        weights = LossWeights()
    clip_len = int(task.clip_len[motion_idx])
    target = task.target

    envs = RolloutEnvs(task, sim_cfg, ppo_cfg, 1, np.random.default_rng(0))
    root, q = init_episode_pose(task, motion_idx, 0, params,
                                np.random.default_rng(0), 0.0)
    envs.sim.set_env(0, root, q)
    envs.motion_idx[0] = motion_idx
    envs.start_frame[0] = 0
    envs.steps[0] = 0
    envs.end_frame[0] = clip_len - 1

    P = len(task.pairs)
    rp = task.root_pair
    pos_rows, rot_rows, lin_rows, ang_rows = [], [], [], []
    upper = UpperBatch()
    max_force = 0.0
    max_torque = 0.0
    success = True

    for _ in range(envs.ramp_steps + clip_len):
        fi = int(envs.ref_frame_idx()[0])
        psi = float(envs.psi()[0])
        obs = envs.observe(params)
        with torch.no_grad():
            actions = policy.act_deterministic(
                torch.as_tensor(obs, dtype=torch.float32)
            ).numpy().astype(float)

        raw, (x_g, R_g, v_g, w_g) = envs._gather_reference(params)
        _, eff_wrench = envs.apply_actions(actions)
        envs.a_prev2 = envs.a_prev.copy()
        envs.a_prev = actions.copy()
        envs.steps += 1

        if psi >= 1.0:
            pos, rot, linvel, angvel = envs.sim.body_kinematics()
            pos_rows.append(pos[0])
            rot_rows.append(rot[0])
            lin_rows.append(linvel[0])
            ang_rows.append(angvel[0])
            max_force = max(max_force, float(np.linalg.norm(eff_wrench[0, :3])))
            max_torque = max(max_torque, float(np.linalg.norm(eff_wrench[0, 3:])))
            m_pos, m_rot, m_lin, m_ang = raw
            x_s, R_s, v_s, w_s = envs.sim_pair_frames()
            upper.extend(
                np.arange(P), np.full(P, motion_idx),
                m_pos.reshape(P, 3), m_rot.reshape(P, 3, 3),
                m_lin.reshape(P, 3), m_ang.reshape(P, 3),
                x_s.reshape(P, 3), R_s.reshape(P, 3, 3),
                v_s.reshape(P, 3), w_s.reshape(P, 3),
                np.ones(P),
            )

        failed = check_termination(
            envs.sim.root_pos, envs.sim.root_rot,
            x_g[:, rp], R_g[:, rp], fault=envs.sim.fault,
        )
        if bool(failed[0]):
            success = False
            break
        if fi >= clip_len - 1 and psi >= 1.0:
            break

    frames = len(pos_rows)
    if frames == 0:
        # Fell during ramp-in: export the single current frame so the clip
        # container stays well-formed.
        pos, rot, linvel, angvel = envs.sim.body_kinematics()
        pos_rows, rot_rows = [pos[0]], [rot[0]]
        lin_rows, ang_rows = [linvel[0]], [angvel[0]]
        frames = 1
        success = False

    out_clip = SourceMotionClip(
        id=str(task.motion_ids[motion_idx]),
        fps=task.fps,
        body_names=list(target.body_names),
        pos=np.stack(pos_rows),
        rot=np.stack(rot_rows),
        linvel=np.stack(lin_rows),
        angvel=np.stack(ang_rows),
    )
    if upper.size > 0:
        grad = grad_estimate(upper, params, task.cal, task.pairs, weights,
                             alpha=0.0, z_nom=task.z_nom)
        mean_loss = float(grad.mean_loss)
    else:
        mean_loss = float("nan")
    return ExportResult(
        clip=out_clip, success=success, frames=frames,
        expected_frames=clip_len, max_force=max_force, max_torque=max_torque,
        mean_upper_loss=mean_loss,
    )


def retarget_all(
    task: TrainTask,
    policy: ActorCritic,
    params: RetargetParams,
    sim_cfg: SimConfig,
    ppo_cfg: PPOConfig,
    weights: LossWeights | None = None,
) -> list[ExportResult]:
    """Export every motion in the task; see `retarget_clip`."""
    return [
        retarget_clip(task, policy, params, sim_cfg, ppo_cfg, m, weights)
        for m in range(len(task.clips))
    ]


def contact_body_map(pairs: list[CorrespondencePair]) -> dict[str, str]:
    """Source-to-target body-name translation from the correspondence pairs."""
    return {p.source_body: p.target_body for p in pairs}
