"""Policy optimization for reference tracking.

One training iteration: roll the current policy out across a batch of
environments tracking parameterized reference motions, update the policy
with PPO (GAE advantages, clipped surrogate, KL-adaptive learning rate),
then feed the collected full-phase samples to the upper-level parameter
update. Episodes start with a ramp phase during which the reference is
paused and the character moves from a randomized pose to the start frame;
ramp samples never enter the upper-level batch.
"""

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn

from . import bilevel, morphology, refmap, rotmath
from .bilevel import ConstraintBox, RetargetParams, UpdateConfig, UpperBatch
from .morphology import Calibration, CorrespondencePair, Morphology, root_pair_index
from .objective import ActionContext, LossWeights, RewardConfig, step_reward_batch
from .refmap import SourceMotionClip
from .frames import Frame
from .simcore import SimBatch, SimConfig, SimState

TERMINATION_POS_M = 1.0
TERMINATION_ANGLE_RAD = np.deg2rad(45.0)


# ---------------------------------------------------------------------------
# Configuration


@dataclass(frozen=True)
class PPOConfig:
    iterations: int = 20000
    n_envs: int = 4096
    horizon: int = 24
    minibatches: int = 4
    epochs: int = 5
    clip: float = 0.2
    entropy_coef: float = 0.0025
    gamma: float = 0.97
    lam: float = 0.95
    desired_kl: float = 0.009
    max_grad_norm: float = 1.0
    lr: float = 1.0e-3
    lr_min: float = 1.0e-6
    lr_max: float = 1.0e-2
    value_coef: float = 1.0
    hidden: tuple[int, ...] = (128, 128)
    init_std: float = 0.5
    action_scale: float = 0.5
    force_scale: float = 10.0  # N per unit action
    torque_scale: float = 1.0  # N*m per unit action
    t_ramp: float = 1.0  # seconds
    init_q_std: float = 0.1  # radians
    max_episode_s: float = 10.0  # post-ramp tracking horizon

    def __post_init__(self):
        positive = (self.iterations, self.n_envs, self.horizon, self.minibatches,
                    self.epochs, self.entropy_coef + 1.0, self.gamma, self.lam,
                    self.desired_kl, self.max_grad_norm, self.lr, self.value_coef,
                    self.init_std, self.t_ramp, self.max_episode_s)
        if min(positive) <= 0.0:
            raise ValueError("PPO settings must be positive")
        if not 0.0 < self.clip < 1.0:
            raise ValueError("clip range must lie in (0, 1)")
        if self.entropy_coef < 0.0 or self.init_q_std < 0.0:
            raise ValueError("entropy coefficient and init noise must be >= 0")


# ---------------------------------------------------------------------------
# Observations


def projected_gravity(root_rot: np.ndarray) -> np.ndarray:
    """Unit gravity direction expressed in the root frame: R^T (0,0,-1)."""
    return -np.asarray(root_rot)[..., 2, :]


def build_observation_batch(root_pos, root_rot, root_linvel, root_angvel,
                            q, qd, a_prev, a_prev2, psi) -> np.ndarray:
    """Fixed-layout proprioceptive observation, batched over the leading axis.

    Layout: root height (1), projected gravity (3), root linear and angular
    velocity in the root frame (3 + 3), q, qd, previous two actions, psi (1).
    """
    RT = np.swapaxes(np.asarray(root_rot), -1, -2)
    v_rt = (RT @ np.asarray(root_linvel)[..., None])[..., 0]
    w_rt = (RT @ np.asarray(root_angvel)[..., None])[..., 0]
    return np.concatenate(
        [
            np.asarray(root_pos)[..., 2:3],
            projected_gravity(root_rot),
            v_rt,
            w_rt,
            np.asarray(q, dtype=float),
            np.asarray(qd, dtype=float),
            np.asarray(a_prev, dtype=float),
            np.asarray(a_prev2, dtype=float),
            np.asarray(psi, dtype=float)[..., None],
        ],
        axis=-1,
    )


def build_observation(state: SimState, prev_actions, psi: float) -> np.ndarray:
    """Single-state observation; prev_actions = (a_{t-1}, a_{t-2})."""
    a1, a2 = prev_actions
    return build_observation_batch(
        state.root.pos, state.root.rot, state.root.linvel, state.root.angvel,
        state.q, state.qd, a1, a2, np.asarray(float(psi)),
    )


def build_reference_features(root_pos, root_rot, x_g, R_g, v_g) -> np.ndarray:
    """Per-pair reference summary in the root frame: offset (3), first two
    orientation columns of R_root^T R_g (6), linear velocity (3).

    Shapes: root_* (..., 3)/(·, 3, 3); x_g/R_g/v_g (..., P, ·). Output is
    flattened to (..., 12 P).
    """
    RT = np.swapaxes(np.asarray(root_rot), -1, -2)[..., None, :, :]
    dx = (RT @ (np.asarray(x_g) - np.asarray(root_pos)[..., None, :])[..., None])[..., 0]
    R_rel = RT @ np.asarray(R_g)
    v = (RT @ np.asarray(v_g)[..., None])[..., 0]
    feats = np.concatenate(
        [dx, R_rel[..., :, 0], R_rel[..., :, 1], v], axis=-1
    )  # (..., P, 12)
    return feats.reshape(feats.shape[:-2] + (-1,))


def observation_dim(n_joints: int) -> int:
    return 11 + 2 * n_joints + 2 * (n_joints + 6)


def policy_input_dim(n_joints: int, n_pairs: int) -> int:
    return observation_dim(n_joints) + 12 * n_pairs


# ---------------------------------------------------------------------------
# Networks


def _mlp(in_dim: int, hidden: Sequence[int], out_dim: int) -> nn.Sequential:
    layers: list[nn.Module] = []
    prev = in_dim
    for h in hidden:
        layers += [nn.Linear(prev, h), nn.ELU()]
        prev = h
    layers.append(nn.Linear(prev, out_dim))
    return nn.Sequential(*layers)


class RunningNorm(nn.Module):
    """Streaming per-feature standardization (Welford batch updates)."""

    def __init__(self, dim: int, clip: float = 10.0, eps: float = 1e-8):
        super().__init__()
        self.register_buffer("mean", torch.zeros(dim))
        self.register_buffer("var", torch.ones(dim))
        self.register_buffer("count", torch.tensor(0.0))
        self.clip = clip
        self.eps = eps

    @torch.no_grad()
    def update(self, x: torch.Tensor) -> None:
        x = x.reshape(-1, x.shape[-1])
        n = float(x.shape[0])
        batch_mean = x.mean(0)
        batch_var = x.var(0, unbiased=False)
        total = self.count + n
        delta = batch_mean - self.mean
        self.mean += delta * (n / total)
        self.var = (self.count * self.var + n * batch_var
                    + delta.pow(2) * self.count * n / total) / total
        self.count = total

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        normed = (x - self.mean) / torch.sqrt(self.var + self.eps)
        return torch.clamp(normed, -self.clip, self.clip)


class ActorCritic(nn.Module):
    """Diagonal-Gaussian policy with a state-independent learnable log-std,
    a separately parameterized value head, and shared input normalization."""

    def __init__(self, obs_dim: int, act_dim: int,
                 hidden: Sequence[int] = (128, 128), init_std: float = 0.5):
        super().__init__()
        self.obs_norm = RunningNorm(obs_dim)
        self.actor = _mlp(obs_dim, hidden, act_dim)
        self.critic = _mlp(obs_dim, hidden, 1)
        self.log_std = nn.Parameter(torch.full((act_dim,), float(np.log(init_std))))

    def distribution(self, obs: torch.Tensor) -> torch.distributions.Normal:
        mean = self.actor(self.obs_norm(obs))
        return torch.distributions.Normal(mean, self.log_std.exp().expand_as(mean))

    @torch.no_grad()
    def act(self, obs: torch.Tensor, update_norm: bool = True):
        if update_norm:
            self.obs_norm.update(obs)
        dist = self.distribution(obs)
        action = dist.sample()
        logp = dist.log_prob(action).sum(-1)
        value = self.value(obs)
        return action, logp, value

    @torch.no_grad()
    def act_deterministic(self, obs: torch.Tensor) -> torch.Tensor:
        return self.actor(self.obs_norm(obs))

    @torch.no_grad()
    def value(self, obs: torch.Tensor) -> torch.Tensor:
        return self.critic(self.obs_norm(obs)).squeeze(-1)

    def evaluate(self, obs: torch.Tensor, actions: torch.Tensor):
        dist = self.distribution(obs)
        logp = dist.log_prob(actions).sum(-1)
        entropy = dist.entropy().sum(-1)
        value = self.critic(self.obs_norm(obs)).squeeze(-1)
        return logp, entropy, value, dist.mean, dist.stddev


# ---------------------------------------------------------------------------
# Advantage estimation


def compute_gae(rewards, values, dones, last_values, gamma: float, lam: float):
    """Generalized advantage estimates over a (T, E) rollout.

    dones marks transitions whose successor starts a new episode; their
    bootstrap value is dropped. Returns (advantages, returns)."""
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    dones = np.asarray(dones, dtype=float)
    T = rewards.shape[0]
    adv = np.zeros_like(rewards)
    gae = np.zeros(rewards.shape[1:])
    for t in range(T - 1, -1, -1):
        next_v = last_values if t == T - 1 else values[t + 1]
        nonterminal = 1.0 - dones[t]
        delta = rewards[t] + gamma * next_v * nonterminal - values[t]
        gae = delta + gamma * lam * nonterminal * gae
        adv[t] = gae
    return adv, adv + values


# ---------------------------------------------------------------------------
# Adaptive motion sampling


class MotionSampler:
    """Clip sampling with probability proportional to the failure rate."""

    def __init__(self, n_motions: int, eps: float = 0.1):
        if n_motions < 1:
            raise ValueError("at least one motion is required")
        if eps <= 0.0:
            raise ValueError("smoothing floor must be positive")
        self.failures = np.zeros(n_motions)
        self.samples = np.zeros(n_motions)
        self.eps = eps

    def probabilities(self) -> np.ndarray:
        scores = (self.failures + self.eps) / (self.samples + 1.0)
        return scores / scores.sum()

    def record(self, motion_idx: int, failed: bool) -> None:
        self.samples[motion_idx] += 1.0
        if failed:
            self.failures[motion_idx] += 1.0

    def sample(self, rng: np.random.Generator) -> int:
        return int(rng.choice(len(self.samples), p=self.probabilities()))


def sample_motion(sampler: MotionSampler, rng: np.random.Generator) -> int:
    return sampler.sample(rng)


# ---------------------------------------------------------------------------
# Episodes


@dataclass
class EpisodeContext:
    motion_idx: int
    start_frame: int
    t_ramp: float
    elapsed: float = 0.0

    @property
    def psi(self) -> float:
        if self.t_ramp <= 0.0:
            return 1.0
        return float(np.clip(self.elapsed / self.t_ramp, 0.0, 1.0))


@dataclass
class TrainTask:
    """Everything fixed during training: embodiments, correspondences,
    calibration, and the motion dataset in gather-friendly padded arrays."""

    source: Morphology
    target: Morphology
    pairs: list[CorrespondencePair]
    cal: Calibration
    clips: list[SourceMotionClip]
    z_nom: np.ndarray  # (M,)
    clip_len: np.ndarray = field(init=False)
    # (M, Tmax, P, ...) source frames of the pair source bodies
    m_pos: np.ndarray = field(init=False)
    m_rot: np.ndarray = field(init=False)
    m_linvel: np.ndarray = field(init=False)
    m_angvel: np.ndarray = field(init=False)

    def __post_init__(self):
        self.z_nom = np.asarray(self.z_nom, dtype=float)
        if len(self.z_nom) != len(self.clips):
            raise ValueError("z_nom length does not match clip count")
        fps = {c.fps for c in self.clips}
        if len(fps) != 1:
            raise ValueError("all clips must share one frame rate")
        self.fps = fps.pop()
        P = len(self.pairs)
        M = len(self.clips)
        self.clip_len = np.array([c.n_frames for c in self.clips], dtype=int)
        Tmax = int(self.clip_len.max())
        self.m_pos = np.zeros((M, Tmax, P, 3))
        self.m_rot = np.tile(np.eye(3), (M, Tmax, P, 1, 1))
        self.m_linvel = np.zeros((M, Tmax, P, 3))
        self.m_angvel = np.zeros((M, Tmax, P, 3))
        for m, clip in enumerate(self.clips):
            idx = [clip.body_idx(p.source_body) for p in self.pairs]
            T = clip.n_frames
            self.m_pos[m, :T] = clip.pos[:, idx]
            self.m_rot[m, :T] = clip.rot[:, idx]
            self.m_linvel[m, :T] = clip.linvel[:, idx]
            self.m_angvel[m, :T] = clip.angvel[:, idx]
        self.root_pair = root_pair_index(self.pairs)
        self.motion_ids = tuple(c.id for c in self.clips)
        self.pair_names = tuple(f"{p.source_body}:{p.target_body}" for p in self.pairs)


def init_episode_pose(task: TrainTask, motion_idx: int, start_frame: int,
                      params: RetargetParams, rng: np.random.Generator,
                      sigma: float):
    """Initial root frame and joint positions for one episode.

    The root is placed at the mapped root-pair reference of the start frame,
    shifted vertically so the lowest collision point rests on the ground —
    the ramp-in phase, not the spawn, is responsible for reaching the
    reference height. Joints are drawn around the nominal configuration and
    clamped to limits.
    """
    clip = task.clips[motion_idx]
    if not 0 <= start_frame < clip.n_frames:
        raise IndexError(f"start frame {start_frame} outside clip {clip.id!r}")
    rp = task.root_pair
    m_frame = clip.frame(start_frame, task.pairs[rp].source_body)
    root = refmap.map_reference(
        task.cal, rp, m_frame, params.p_pos[rp], params.p_ori[rp],
        p_z=float(params.p_z[motion_idx]), z_nom=float(task.z_nom[motion_idx]),
    )
    q = task.target.nominal_q + sigma * rng.standard_normal(task.target.n_joints)
    q = np.clip(q, task.target.joint_limits_lo, task.target.joint_limits_hi)
    target = task.target
    frames = morphology.forward_kinematics(
        target, q, Frame(root.pos, root.rot, np.zeros(3), np.zeros(3))
    )
    lowest = np.inf
    for body in target.body_names:
        for p_local, radius in target.collision_points(body):
            f = frames[body]
            lowest = min(lowest, float(f.pos[2] + f.rot[2] @ p_local - radius))
    if np.isfinite(lowest):
        root.pos[2] -= lowest
    return root, q


def check_termination(root_pos, root_rot, g_pos, g_rot, fault=False,
                      pos_threshold: float = TERMINATION_POS_M,
                      angle_threshold: float = TERMINATION_ANGLE_RAD):
    """Episode failure: root strays too far from the reference root pose,
    in position or orientation, or the simulator faulted. Batched."""
    dist = np.linalg.norm(np.asarray(root_pos) - np.asarray(g_pos), axis=-1)
    angle = np.linalg.norm(rotmath.geodesic_error(root_rot, g_rot), axis=-1)
    return (dist > pos_threshold) | (angle > angle_threshold) | np.asarray(fault)


# ---------------------------------------------------------------------------
# Vectorized rollout


@dataclass
class RolloutBuffer:
    obs: np.ndarray  # (T, E, D)
    actions: np.ndarray  # (T, E, A)
    rewards: np.ndarray  # (T, E)
    dones: np.ndarray  # (T, E)
    values: np.ndarray  # (T, E)
    logprobs: np.ndarray  # (T, E)
    last_values: np.ndarray  # (E,)
    mean_reward: float
    failure_count: int
    episode_count: int
    reward_terms: dict[str, float]


class RolloutEnvs:
    """Batch of tracking environments sharing one target morphology."""

    def __init__(self, task: TrainTask, sim_cfg: SimConfig, ppo_cfg: PPOConfig,
                 n_envs: int, rng: np.random.Generator):
        if abs(task.fps * sim_cfg.control_dt - 1.0) > 1e-9:
            raise ValueError("clip frame rate must equal the control rate")
        self.task = task
        self.sim_cfg = sim_cfg
        self.cfg = ppo_cfg
        self.rng = rng
        self.sim = SimBatch(task.target, sim_cfg, n_envs)
        self.n_envs = n_envs
        nq = task.target.n_joints
        self.act_dim = nq + 6
        self.motion_idx = np.zeros(n_envs, dtype=int)
        self.start_frame = np.zeros(n_envs, dtype=int)
        self.steps = np.zeros(n_envs, dtype=int)
        self.end_frame = np.zeros(n_envs, dtype=int)
        self.a_prev = np.zeros((n_envs, self.act_dim))
        self.a_prev2 = np.zeros((n_envs, self.act_dim))
        self.sampler = MotionSampler(len(task.clips))
        self.ramp_steps = int(round(ppo_cfg.t_ramp / sim_cfg.control_dt))
        self.max_track_steps = int(round(ppo_cfg.max_episode_s / sim_cfg.control_dt))
        self.params: Optional[RetargetParams] = None

    def reset_env(self, e: int, params: RetargetParams) -> None:
        m = self.sampler.sample(self.rng)
        clip_len = int(self.task.clip_len[m])
        # Leave room to track at least one post-ramp second.
        latest = max(1, clip_len - int(round(1.0 / self.sim_cfg.control_dt)))
        f0 = int(self.rng.integers(0, latest))
        root, q = init_episode_pose(self.task, m, f0, params, self.rng,
                                    self.cfg.init_q_std)
        self.sim.set_env(e, root, q)
        self.motion_idx[e] = m
        self.start_frame[e] = f0
        self.steps[e] = 0
        self.end_frame[e] = min(clip_len - 1, f0 + self.max_track_steps)
        self.a_prev[e] = 0.0
        self.a_prev2[e] = 0.0

    def reset_all(self, params: RetargetParams) -> None:
        self.params = params
        for e in range(self.n_envs):
            self.reset_env(e, params)

    def psi(self) -> np.ndarray:
        if self.ramp_steps <= 0:
            return np.ones(self.n_envs)
        return np.clip(self.steps / self.ramp_steps, 0.0, 1.0)

    def ref_frame_idx(self) -> np.ndarray:
        return self.start_frame + np.maximum(0, self.steps - self.ramp_steps)

    def _gather_reference(self, params: RetargetParams):
        """Raw source frames (E, P, ...) and their mapped counterparts."""
        t = self.task
        E = self.n_envs
        P = len(t.pairs)
        mi = self.motion_idx
        fi = self.ref_frame_idx()
        m_pos = t.m_pos[mi, fi]
        m_rot = t.m_rot[mi, fi]
        m_lin = t.m_linvel[mi, fi]
        m_ang = t.m_angvel[mi, fi]
        pair_idx = np.tile(np.arange(P), E)
        z_shift = np.repeat(t.z_nom[mi] + params.p_z[mi], P)
        x_g, R_g, v_g, w_g = refmap.map_frames_gather(
            t.cal, pair_idx,
            m_pos.reshape(E * P, 3), m_rot.reshape(E * P, 3, 3),
            m_lin.reshape(E * P, 3), m_ang.reshape(E * P, 3),
            params.p_pos[pair_idx], params.p_ori[pair_idx], z_shift,
        )
        ref = (x_g.reshape(E, P, 3), R_g.reshape(E, P, 3, 3),
               v_g.reshape(E, P, 3), w_g.reshape(E, P, 3))
        raw = (m_pos, m_rot, m_lin, m_ang)
        return raw, ref

    def observe(self, params: RetargetParams) -> np.ndarray:
        _, (x_g, R_g, v_g, _) = self._gather_reference(params)
        proprio = build_observation_batch(
            self.sim.root_pos, self.sim.root_rot, self.sim.root_linvel,
            self.sim.root_angvel, self.sim.q, self.sim.qd,
            self.a_prev, self.a_prev2, self.psi(),
        )
        feats = build_reference_features(
            self.sim.root_pos, self.sim.root_rot, x_g, R_g, v_g
        )
        return np.concatenate([proprio, feats], axis=-1)

    def apply_actions(self, actions: np.ndarray):
        nq = self.task.target.n_joints
        a_jts = actions[:, :nq]
        wrench = np.concatenate(
            [self.cfg.force_scale * actions[:, nq:nq + 3],
             self.cfg.torque_scale * actions[:, nq + 3:]], axis=-1,
        )
        setpoints = self.task.target.nominal_q + self.cfg.action_scale * a_jts
        eff = self.sim.step(setpoints, wrench)
        return a_jts, eff

    def sim_pair_frames(self):
        pos, rot, linvel, angvel = self.sim.body_kinematics()
        idx = [self.task.target.body_index[p.target_body] for p in self.task.pairs]
        return pos[:, idx], rot[:, idx], linvel[:, idx], angvel[:, idx]


def rollout(envs: RolloutEnvs, policy: ActorCritic, params: RetargetParams,
            reward_cfg: RewardConfig, horizon: int,
            upper_batch: Optional[UpperBatch] = None):
    """Collect `horizon` on-policy steps from every environment.

    Returns (RolloutBuffer, UpperBatch). Full-phase state/reference samples
    are appended per pair; episodes ending at the clip boundary bootstrap
    their value, early terminations count as clip failures."""
    task = envs.task
    E = envs.n_envs
    P = len(task.pairs)
    nq = task.target.n_joints
    if upper_batch is None:
        upper_batch = UpperBatch()

    obs_buf = np.zeros((horizon, E, policy_input_dim(nq, P)))
    act_buf = np.zeros((horizon, E, envs.act_dim))
    rew_buf = np.zeros((horizon, E))
    done_buf = np.zeros((horizon, E))
    val_buf = np.zeros((horizon, E))
    logp_buf = np.zeros((horizon, E))
    failures = 0
    episodes = 0
    term_sums: dict[str, float] = {}

    for t in range(horizon):
        obs = envs.observe(params)
        obs_t = torch.as_tensor(obs, dtype=torch.float32)
        action_t, logp_t, value_t = policy.act(obs_t)
        actions = action_t.numpy().astype(float)

        psi = envs.psi()
        raw, (x_g, R_g, v_g, w_g) = envs._gather_reference(params)
        a_jts, eff_wrench = envs.apply_actions(actions)
        x_s, R_s, v_s, w_s = envs.sim_pair_frames()

        ctx = ActionContext(
            a_jts=a_jts,
            a_jts_prev=envs.a_prev[:, :nq],
            a_jts_prev2=envs.a_prev2[:, :nq],
            root_force=eff_wrench[:, :3],
            root_torque=eff_wrench[:, 3:],
        )
        reward, terms = step_reward_batch(
            x_s, R_s, v_s, w_s, x_g, R_g, v_g, w_g, task.pairs,
            joint_torques=envs.sim.last_joint_torques,
            joint_acc=envs.sim.last_joint_acc,
            actions=ctx, psi=psi, cfg=reward_cfg,
        )
        for name, vals in terms.items():
            term_sums[name] = term_sums.get(name, 0.0) + float(np.mean(vals))

        rp = task.root_pair
        failed = check_termination(
            envs.sim.root_pos, envs.sim.root_rot,
            x_g[:, rp], R_g[:, rp], fault=envs.sim.fault,
        )
        envs.steps += 1
        timeout = (envs.ref_frame_idx() >= envs.end_frame) & ~failed
        done = failed | timeout

        # Full-phase samples feed the upper level before any env resets.
        m_pos, m_rot, m_lin, m_ang = raw
        upper_batch.extend(
            np.tile(np.arange(P), E),
            np.repeat(envs.motion_idx, P),
            m_pos.reshape(E * P, 3), m_rot.reshape(E * P, 3, 3),
            m_lin.reshape(E * P, 3), m_ang.reshape(E * P, 3),
            x_s.reshape(E * P, 3), R_s.reshape(E * P, 3, 3),
            v_s.reshape(E * P, 3), w_s.reshape(E * P, 3),
            np.repeat(psi, P),
        )

        obs_buf[t] = obs
        act_buf[t] = actions
        done_buf[t] = done
        val_buf[t] = value_t.numpy().astype(float)
        logp_buf[t] = logp_t.numpy().astype(float)

        new_prev2 = envs.a_prev.copy()
        envs.a_prev2 = new_prev2
        envs.a_prev = actions.copy()

        if np.any(done):
            if np.any(timeout):
                # Truncation is not failure: bootstrap the successor value.
                next_obs = envs.observe(params)
                next_v = policy.value(
                    torch.as_tensor(next_obs, dtype=torch.float32)
                ).numpy().astype(float)
                reward = reward + np.where(timeout, envs.cfg.gamma * next_v, 0.0)
            for e in np.flatnonzero(done):
                envs.sampler.record(int(envs.motion_idx[e]), bool(failed[e]))
                episodes += 1
                if failed[e]:
                    failures += 1
                envs.reset_env(int(e), params)
        rew_buf[t] = reward

    last_obs = envs.observe(params)
    last_values = policy.value(
        torch.as_tensor(last_obs, dtype=torch.float32)
    ).numpy().astype(float)

    buf = RolloutBuffer(
        obs=obs_buf, actions=act_buf, rewards=rew_buf, dones=done_buf,
        values=val_buf, logprobs=logp_buf, last_values=last_values,
        mean_reward=float(rew_buf.mean()),
        failure_count=failures, episode_count=episodes,
        reward_terms={k: v / horizon for k, v in term_sums.items()},
    )
    return buf, upper_batch


# ---------------------------------------------------------------------------
# PPO update


def ppo_update(buf: RolloutBuffer, policy: ActorCritic,
               optimizer: torch.optim.Optimizer, cfg: PPOConfig) -> dict:
    """One PPO update over the rollout. Returns statistics including the
    KL-adapted learning rate."""
    T, E, D = buf.obs.shape
    adv, returns = compute_gae(buf.rewards, buf.values, buf.dones,
                               buf.last_values, cfg.gamma, cfg.lam)
    obs = torch.as_tensor(buf.obs.reshape(T * E, D), dtype=torch.float32)
    actions = torch.as_tensor(
        buf.actions.reshape(T * E, -1), dtype=torch.float32
    )
    adv_t = torch.as_tensor(adv.reshape(T * E), dtype=torch.float32)
    ret_t = torch.as_tensor(returns.reshape(T * E), dtype=torch.float32)
    adv_t = (adv_t - adv_t.mean()) / (adv_t.std() + 1e-8)

    with torch.no_grad():
        old_mean = policy.actor(policy.obs_norm(obs))
        old_std = policy.log_std.exp().expand_as(old_mean).clone()
        # Log-probs are re-evaluated under the update-time normalizer
        # statistics so the importance ratio is exactly 1 at epoch start.
        old_logp = torch.distributions.Normal(old_mean, old_std) \
            .log_prob(actions).sum(-1)

    n = T * E
    mb_size = n // cfg.minibatches
    lr = optimizer.param_groups[0]["lr"]
    kl_final = 0.0
    clip_fracs = []
    losses = []
    for _ in range(cfg.epochs):
        perm = torch.randperm(n)
        for mb in range(cfg.minibatches):
            idx = perm[mb * mb_size:(mb + 1) * mb_size]
            logp, entropy, value, mean, std = policy.evaluate(obs[idx], actions[idx])
            ratio = torch.exp(logp - old_logp[idx])
            surr1 = ratio * adv_t[idx]
            surr2 = torch.clamp(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip) * adv_t[idx]
            policy_loss = -torch.min(surr1, surr2).mean()
            value_loss = (value - ret_t[idx]).pow(2).mean()
            loss = (policy_loss + cfg.value_coef * value_loss
                    - cfg.entropy_coef * entropy.mean())
            if not torch.isfinite(loss):
                raise RuntimeError(
                    "non-finite PPO loss "
                    f"(policy={policy_loss.item()}, value={value_loss.item()})"
                )
            # Analytic KL between old and new Gaussians steers the LR.
            with torch.no_grad():
                om, os = old_mean[idx], old_std[idx]
                kl = (
                    torch.log(std / os)
                    + (os.pow(2) + (om - mean).pow(2)) / (2.0 * std.pow(2))
                    - 0.5
                ).sum(-1).mean().item()
            kl_final = kl
            if cfg.desired_kl > 0.0:
                if kl > 2.0 * cfg.desired_kl:
                    lr = max(cfg.lr_min, lr / 2.0)
                elif 0.0 <= kl < cfg.desired_kl / 2.0:
                    lr = min(cfg.lr_max, lr * 2.0)
                for group in optimizer.param_groups:
                    group["lr"] = lr
            optimizer.zero_grad()
            loss.backward()
            nn.utils.clip_grad_norm_(policy.parameters(), cfg.max_grad_norm)
            optimizer.step()
            with torch.no_grad():
                clip_fracs.append(
                    ((ratio - 1.0).abs() > cfg.clip).float().mean().item()
                )
                losses.append(loss.item())
    return {
        "kl": kl_final,
        "lr": lr,
        "clip_fraction": float(np.mean(clip_fracs)),
        "loss": float(np.mean(losses)),
    }


# ---------------------------------------------------------------------------
# Training loop


LOG_COLUMNS = ["iteration", "mean_reward", "upper_loss", "update_rate",
               "kl", "lr", "failure_rate"]


@dataclass
class TrainResult:
    params: RetargetParams
    policy: ActorCritic
    history: list[dict]
    log_path: Optional[Path] = None
    checkpoint_path: Optional[Path] = None


def save_checkpoint(path, policy, optimizer, params: RetargetParams,
                    envs: RolloutEnvs, iteration: int, torch_rng_state) -> None:
    torch.save(
        {
            "policy": policy.state_dict(),
            "optimizer": optimizer.state_dict(),
            "params": bilevel.params_to_dict(params, iteration),
            "sampler_failures": envs.sampler.failures,
            "sampler_samples": envs.sampler.samples,
            "iteration": iteration,
            "numpy_rng": envs.rng.bit_generator.state,
            "torch_rng": torch_rng_state,
            "env_state": {
                "sim": envs.sim.snapshot(),
                "motion_idx": envs.motion_idx.copy(),
                "start_frame": envs.start_frame.copy(),
                "steps": envs.steps.copy(),
                "end_frame": envs.end_frame.copy(),
                "a_prev": envs.a_prev.copy(),
                "a_prev2": envs.a_prev2.copy(),
            },
        },
        path,
    )


def load_checkpoint(path, policy, optimizer, envs: RolloutEnvs):
    ckpt = torch.load(path, weights_only=False)
    policy.load_state_dict(ckpt["policy"])
    if optimizer is not None:
        optimizer.load_state_dict(ckpt["optimizer"])
    params, iteration = bilevel.params_from_dict(ckpt["params"])
    if envs is not None:
        envs.sampler.failures = np.asarray(ckpt["sampler_failures"], dtype=float)
        envs.sampler.samples = np.asarray(ckpt["sampler_samples"], dtype=float)
        envs.rng.bit_generator.state = ckpt["numpy_rng"]
        torch.set_rng_state(ckpt["torch_rng"])
        es = ckpt["env_state"]
        envs.sim.restore(es["sim"])
        envs.motion_idx[...] = es["motion_idx"]
        envs.start_frame[...] = es["start_frame"]
        envs.steps[...] = es["steps"]
        envs.end_frame[...] = es["end_frame"]
        envs.a_prev[...] = es["a_prev"]
        envs.a_prev2[...] = es["a_prev2"]
    return params, iteration


def train(
    task: TrainTask,
    ppo_cfg: PPOConfig,
    sim_cfg: SimConfig,
    update_cfg: UpdateConfig,
    box: ConstraintBox,
    loss_weights: LossWeights,
    reward_cfg: RewardConfig,
    seed: int = 0,
    bilevel_enabled: bool = True,
    out_dir: Optional[Path] = None,
    checkpoint_every: int = 0,
    log_every: int = 1,
    resume_from: Optional[Path] = None,
    quiet: bool = True,
) -> TrainResult:
    """Joint policy/parameter optimization.

    Every iteration: snapshot the retargeting parameters, roll out, run the
    PPO update, then (unless disabled) apply one projected upper-level step
    on the full-phase batch. Logs one CSV row per iteration."""
    rng = np.random.default_rng(seed)
    torch.manual_seed(seed)
    nq = task.target.n_joints
    P = len(task.pairs)
    policy = ActorCritic(policy_input_dim(nq, P), nq + 6,
                         hidden=ppo_cfg.hidden, init_std=ppo_cfg.init_std)
    optimizer = torch.optim.Adam(policy.parameters(), lr=ppo_cfg.lr)
    envs = RolloutEnvs(task, sim_cfg, ppo_cfg, ppo_cfg.n_envs, rng)
    params = RetargetParams.zeros(task.pair_names, task.motion_ids)
    start_iter = 0
    if resume_from is not None:
        params, start_iter = load_checkpoint(resume_from, policy, optimizer, envs)
    else:
        envs.reset_all(params)

    log_file = None
    writer = None
    term_columns = None
    history: list[dict] = []
    log_path = checkpoint_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / "training_log.csv"
        checkpoint_path = out_dir / "checkpoint.pt"

    try:
        for it in range(start_iter, ppo_cfg.iterations):
            snapshot = params.copy()
            buf, upper = rollout(envs, policy, snapshot, reward_cfg,
                                 ppo_cfg.horizon)
            stats = ppo_update(buf, policy, optimizer, ppo_cfg)
            grad = bilevel.grad_estimate(
                upper, params, task.cal, task.pairs, loss_weights,
                alpha=update_cfg.alpha, z_nom=task.z_nom,
            )
            if bilevel_enabled and not grad.skipped:
                params, update_rate = bilevel.ttsa_step(
                    params, grad, update_cfg.eta, box
                )
            else:
                update_rate = 0.0
            failure_rate = (buf.failure_count / buf.episode_count
                            if buf.episode_count else 0.0)
            row = {
                "iteration": it,
                "mean_reward": buf.mean_reward,
                "upper_loss": grad.mean_loss,
                "update_rate": update_rate,
                "kl": stats["kl"],
                "lr": stats["lr"],
                "failure_rate": failure_rate,
            }
            for name, val in buf.reward_terms.items():
                row[f"reward/{name}"] = val
            history.append(row)
            if log_path is not None and it % log_every == 0:
                if writer is None:
                    term_columns = sorted(buf.reward_terms)
                    log_file = open(log_path, "w", newline="")
                    writer = csv.DictWriter(
                        log_file,
                        fieldnames=LOG_COLUMNS
                        + [f"reward/{n}" for n in term_columns],
                    )
                    writer.writeheader()
                writer.writerow(row)
                log_file.flush()
            if not quiet:
                print(
                    f"iter {it}: reward {buf.mean_reward:.3f} "
                    f"upper {grad.mean_loss:.5f} rate {update_rate:.2e} "
                    f"kl {stats['kl']:.4f} lr {stats['lr']:.1e}"
                )
            if (checkpoint_path is not None and checkpoint_every
                    and (it + 1) % checkpoint_every == 0):
                save_checkpoint(checkpoint_path, policy, optimizer, params,
                                envs, it + 1, torch.get_rng_state())
        if checkpoint_path is not None:
            save_checkpoint(checkpoint_path, policy, optimizer, params, envs,
                            ppo_cfg.iterations, torch.get_rng_state())
    finally:
        if log_file is not None:
            log_file.close()
    return TrainResult(params=params, policy=policy, history=history,
                       log_path=log_path, checkpoint_path=checkpoint_path)
