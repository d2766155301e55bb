"""Tracking losses between reference and simulated frames, and step rewards.

Position, linear-velocity, and angular-velocity losses are squared norms of
the frame differences; the orientation loss is the squared geodesic error,
optionally restricted to the swing or twist component about a per-pair axis
when the target joint has fewer degrees of freedom than the source.

Orientation gradients are expressed with respect to a right perturbation of
the reference rotation (R_g -> R_g Exp(delta)); the upper-level optimizer
chains them with the right Jacobian of Exp at p_ori.
"""

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import rotmath
from .frames import Frame
from .morphology import CorrespondencePair

# Reward terms that may be scaled by the retargeting phase.
PHASE_SCALABLE = frozenset({"rbs_pos", "rbs_ori", "root_force", "root_torque"})

REWARD_TERM_NAMES = (
    "root_pos_xy", "root_height", "root_ori", "root_linvel", "root_angvel",
    "rbs_pos", "rbs_ori", "survival",
    "joint_torques", "joint_acc", "action_rate", "action_acc",
    "root_force", "root_torque",
)


@dataclass(frozen=True)
class LossWeights:
    w_x: float = 10.0
    w_R: float = 1.0
    w_v: float = 0.0
    w_w: float = 0.0

    def __post_init__(self):
        if min(self.w_x, self.w_R, self.w_v, self.w_w) < 0.0:
            raise ValueError("loss weights must be nonnegative")


def orientation_loss_batch(
    R_s: np.ndarray,
    R_g: np.ndarray,
    mode: str = "full",
    axis: Optional[np.ndarray] = None,
    with_grad: bool = False,
):
    """Orientation loss for error rotation E = R_s^T R_g, batched.

    Returns loss (...,) and, when with_grad, the gradient of the loss with
    respect to a right perturbation delta of R_g (shape (..., 3)); at the
    half-turn-perpendicular degeneracy of swing/twist modes the gradient is
    zeroed and the twist treated as identity.
    """
    E = np.swapaxes(np.asarray(R_s, dtype=float), -1, -2) @ np.asarray(R_g, dtype=float)
    if mode == "full":
        e = rotmath.log_map(E)
        loss = np.sum(e * e, axis=-1)
        if not with_grad:
            return loss
        # d/d_delta ||Log(E Exp(delta))||^2 = 2 e^T Jr^{-1}(e) = 2 e^T
        return loss, 2.0 * e

    if axis is None:
        raise ValueError(f"{mode} mode requires a twist axis")
    q = rotmath.quat_from_matrix(E)
    w = q[..., 0]
    v = q[..., 1:]
    u = np.sum(v * axis, axis=-1)
    n2 = w * w + u * u
    degenerate = n2 < rotmath.TWIST_DEGENERATE_TOL ** 2

    if mode == "twist":
        theta = np.where(degenerate, 0.0, 2.0 * np.arctan2(u, w))
        loss = theta * theta
        if not with_grad:
            return loss
        # d theta / d delta with quaternion right perturbation (1, delta/2)
        axv = np.cross(np.broadcast_to(axis, v.shape), v)
        num = w[..., None] * (w[..., None] * axis + axv) + u[..., None] * v
        grad = 2.0 * theta[..., None] * num / np.where(degenerate, 1.0, n2)[..., None]
        return loss, np.where(degenerate[..., None], 0.0, grad)

    if mode == "swing":
        n = np.sqrt(np.clip(n2, 0.0, 1.0))
        s = np.sqrt(np.clip(1.0 - n * n, 0.0, None))
        phi = 2.0 * np.arctan2(s, n)
        phi = np.where(degenerate, np.pi, phi)  # swing carries the half turn
        loss = phi * phi
        if not with_grad:
            return loss
        # loss' = -4 phi (w dw + u du) / (n sqrt(1 - n^2)); near n = 1 the
        # ratio phi / sqrt(1 - n^2) tends to 2.
        axv = np.cross(np.broadcast_to(axis, v.shape), v)
        wdw_udu = 0.5 * (-w[..., None] * v + u[..., None] * (w[..., None] * axis + axv))
        small_s = s < 1e-7
        factor = np.where(small_s, 2.0, phi / np.where(small_s, 1.0, s))
        grad = -4.0 * (factor / np.where(degenerate, 1.0, np.maximum(n, 1e-30)))[..., None] * wdw_udu
        return loss, np.where(degenerate[..., None], 0.0, grad)

    raise ValueError(f"unknown orientation mode {mode!r}")


@dataclass
class BodyError:
    """Per-pair tracking losses with raw error vectors for gradient reuse."""

    l_x: float
    l_R: float
    l_v: float
    l_w: float
    dx: np.ndarray  # x_g - x_s
    dv: np.ndarray  # v_g - v_s
    dw: np.ndarray  # w_g - w_s
    # d l_R / d delta for a right perturbation of R_g
    ori_grad_delta: np.ndarray


def body_losses(g: Frame, s: Frame, pair: CorrespondencePair) -> BodyError:
    dx = g.pos - s.pos
    dv = g.linvel - s.linvel
    dw = g.angvel - s.angvel
    l_R, ori_grad = orientation_loss_batch(
        s.rot, g.rot, mode=pair.orientation_mode, axis=pair.twist_axis, with_grad=True
    )
    return BodyError(
        l_x=float(dx @ dx),
        l_R=float(l_R),
        l_v=float(dv @ dv),
        l_w=float(dw @ dw),
        dx=dx,
        dv=dv,
        dw=dw,
        ori_grad_delta=np.asarray(ori_grad, dtype=float),
    )


def upper_loss(errors: Sequence[BodyError], w: LossWeights) -> float:
    """Weighted sum of all loss terms over all source-target pairs."""
    return float(
        sum(w.w_x * e.l_x + w.w_R * e.l_R + w.w_v * e.l_v + w.w_w * e.l_w for e in errors)
    )


@dataclass(frozen=True)
class RewardConfig:
    weights: dict[str, float]
    phase_scaled: frozenset[str] = frozenset(PHASE_SCALABLE)

    def __post_init__(self):
        unknown = set(self.weights) - set(REWARD_TERM_NAMES)
        if unknown:
            raise ValueError(f"unknown reward terms: {sorted(unknown)}")
        if not all(np.isfinite(v) for v in self.weights.values()):
            raise ValueError("reward weights must be finite")
        bad = set(self.phase_scaled) - PHASE_SCALABLE
        if bad:
            raise ValueError(f"terms not eligible for phase scaling: {sorted(bad)}")
        object.__setattr__(self, "phase_scaled", frozenset(self.phase_scaled))

    def replace_weight(self, name: str, value: float) -> "RewardConfig":
        w = dict(self.weights)
        w[name] = value
        return RewardConfig(weights=w, phase_scaled=self.phase_scaled)


def retargeting_reward() -> RewardConfig:
    """Reward preset for retargeting policy training."""
    return RewardConfig(
        weights={
            "root_pos_xy": 2.0,
            "root_height": 10.0,
            "root_ori": 2.0,
            "root_linvel": 0.5,
            "root_angvel": 0.5,
            "rbs_pos": 2.0,
            "rbs_ori": 2.0,
            "survival": 20.0,
            "joint_torques": 1.0e-4,
            "joint_acc": 1.0e-6,
            "action_rate": 1.0e-2,
            "action_acc": 1.0e-2,
            "root_force": 1.0e-2,
            "root_torque": 1.0e-2,
        },
        phase_scaled=frozenset(PHASE_SCALABLE),
    )


def downstream_reward(robot: str = "g1") -> RewardConfig:
    """Reward preset for downstream tracking policies (no root wrench)."""
    common = {
        "root_pos_xy": 5.0,
        "root_height": 5.0,
        "root_ori": 3.0,
        "root_linvel": 0.5,
        "root_angvel": 0.5,
        "rbs_pos": 5.0,
        "rbs_ori": 2.5,
        "root_force": 0.0,
        "root_torque": 0.0,
    }
    if robot == "g1":
        common.update(survival=10.0, joint_torques=1.0e-4, joint_acc=2.5e-8,
                      action_rate=0.15, action_acc=1.0e-2)
    elif robot == "lima":
        common.update(survival=1.0, joint_torques=1.0e-3, joint_acc=2.5e-6,
                      action_rate=3.0, action_acc=1.0)
    else:
        raise ValueError(f"unknown downstream preset {robot!r}")
    return RewardConfig(weights=common, phase_scaled=frozenset())


REWARD_PRESETS = {
    "retargeting": retargeting_reward,
    "downstream_g1": lambda: downstream_reward("g1"),
    "downstream_lima": lambda: downstream_reward("lima"),
}


@dataclass
class ActionContext:
    """Joint setpoints for the current and two previous steps, plus the
    effective (post-deadband) root wrench applied this step."""

    a_jts: np.ndarray  # (..., J)
    a_jts_prev: np.ndarray
    a_jts_prev2: np.ndarray
    root_force: np.ndarray  # (..., 3)
    root_torque: np.ndarray  # (..., 3)


def step_reward_batch(
    x_s: np.ndarray,  # (..., P, 3) simulated frames per pair
    R_s: np.ndarray,
    v_s: np.ndarray,
    w_s: np.ndarray,
    x_g: np.ndarray,  # (..., P, 3) reference frames per pair
    R_g: np.ndarray,
    v_g: np.ndarray,
    w_g: np.ndarray,
    pairs: Sequence[CorrespondencePair],
    joint_torques: np.ndarray,  # (..., J)
    joint_acc: np.ndarray,  # (..., J)
    actions: ActionContext,
    psi: np.ndarray,  # (...,)
    cfg: RewardConfig,
):
    """Weighted step reward, batched. Returns (total, per-term breakdown).

    The root pair feeds the dedicated root rows and is excluded from the
    generic rigid-body (rbs) rows.
    """
    psi = np.asarray(psi, dtype=float)
    root = next(i for i, p in enumerate(pairs) if p.is_root)
    terms: dict[str, np.ndarray] = {}

    dx_root = x_g[..., root, :] - x_s[..., root, :]
    terms["root_pos_xy"] = -np.sum(dx_root[..., :2] ** 2, axis=-1)
    terms["root_height"] = -(dx_root[..., 2] ** 2)
    terms["root_ori"] = -orientation_loss_batch(
        R_s[..., root, :, :], R_g[..., root, :, :],
        mode=pairs[root].orientation_mode, axis=pairs[root].twist_axis,
    )
    terms["root_linvel"] = -np.sum((v_g[..., root, :] - v_s[..., root, :]) ** 2, axis=-1)
    terms["root_angvel"] = -np.sum((w_g[..., root, :] - w_s[..., root, :]) ** 2, axis=-1)

    rbs_pos = np.zeros(psi.shape)
    rbs_ori = np.zeros(psi.shape)
    for i, p in enumerate(pairs):
        if i == root:
            continue
        d = x_g[..., i, :] - x_s[..., i, :]
        rbs_pos = rbs_pos - np.sum(d * d, axis=-1)
        rbs_ori = rbs_ori - orientation_loss_batch(
            R_s[..., i, :, :], R_g[..., i, :, :],
            mode=p.orientation_mode, axis=p.twist_axis,
        )
    terms["rbs_pos"] = rbs_pos
    terms["rbs_ori"] = rbs_ori

    terms["survival"] = np.ones(psi.shape)
    terms["joint_torques"] = -np.sum(joint_torques**2, axis=-1)
    terms["joint_acc"] = -np.sum(joint_acc**2, axis=-1)
    terms["action_rate"] = -np.sum((actions.a_jts - actions.a_jts_prev) ** 2, axis=-1)
    terms["action_acc"] = -np.sum(
        (actions.a_jts - 2.0 * actions.a_jts_prev + actions.a_jts_prev2) ** 2, axis=-1
    )
    terms["root_force"] = -np.sum(np.abs(actions.root_force), axis=-1)
    terms["root_torque"] = -np.sum(np.abs(actions.root_torque), axis=-1)

    breakdown = {}
    total = np.zeros(psi.shape)
    for name in REWARD_TERM_NAMES:
        weight = cfg.weights.get(name, 0.0)
        scale = psi if name in cfg.phase_scaled else 1.0
        contrib = weight * scale * terms[name]
        breakdown[name] = contrib
        total = total + contrib
    return total, breakdown


def step_reward(
    state,
    ref_frames: Sequence[Frame],
    actions: ActionContext,
    psi: float,
    cfg: RewardConfig,
    pairs: Sequence[CorrespondencePair],
):
    """Step reward for one simulator state against per-pair reference frames.

    `state` is a simulator state exposing body_frames, last_joint_torques,
    and last_joint_acc. Returns (reward, per-term breakdown).
    """
    if not 0.0 <= psi <= 1.0:
        raise ValueError("psi must lie in [0, 1]")
    sim = [state.body_frames[p.target_body] for p in pairs]
    x_s = np.stack([f.pos for f in sim])
    R_s = np.stack([f.rot for f in sim])
    v_s = np.stack([f.linvel for f in sim])
    w_s = np.stack([f.angvel for f in sim])
    x_g = np.stack([f.pos for f in ref_frames])
    R_g = np.stack([f.rot for f in ref_frames])
    v_g = np.stack([f.linvel for f in ref_frames])
    w_g = np.stack([f.angvel for f in ref_frames])
    total, breakdown = step_reward_batch(
        x_s, R_s, v_s, w_s, x_g, R_g, v_g, w_g, pairs,
        joint_torques=state.last_joint_torques,
        joint_acc=state.last_joint_acc,
        actions=actions,
        psi=np.asarray(float(psi)),
        cfg=cfg,
    )
    return float(total), {k: float(v) for k, v in breakdown.items()}
