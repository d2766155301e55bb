"""Upper-level optimizer: retargeting parameters, convex projection,
simplified gradient estimate, and the projected (single-loop) update.

The gradient estimate avoids differentiating through the policy optimum: the
sensitivity of the simulated trajectories to the reference is modeled as
alpha * I, which scales the reference-side gradient by (1 - alpha). The
batch gradient is the plain average of per-sample gradients with the
simulated states held fixed.
"""

import json
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import refmap, rotmath
from .morphology import Calibration, CorrespondencePair
from .objective import LossWeights, orientation_loss_batch


@dataclass(frozen=True)
class ConstraintBox:
    """Norm bounds of the convex feasible set for the retargeting parameters."""

    delta_pos: float = 0.5
    delta_ori: float = 0.5
    delta_z: float = 0.5

    def __post_init__(self):
        if min(self.delta_pos, self.delta_ori, self.delta_z) <= 0.0:
            raise ValueError("constraint radii must be positive")


@dataclass(frozen=True)
class UpdateConfig:
    """Upper-level step size and trajectory-sensitivity coefficient.

    The two constants only enter the update through the product
    (1 - alpha) * eta, the effective step size.
    """

    eta: float = 1e-4
    alpha: float = 0.0

    def __post_init__(self):
        if self.eta <= 0.0:
            raise ValueError("step size eta must be positive")
        if not 0.0 <= self.alpha < 1.0:
            raise ValueError("alpha must lie in [0, 1)")


@dataclass
class RetargetParams:
    """Upper-level decision variables: per-pair offsets and per-motion height."""

    pair_names: tuple[str, ...]
    motion_ids: tuple[str, ...]
    p_pos: np.ndarray  # (P, 3)
    p_ori: np.ndarray  # (P, 3)
    p_z: np.ndarray  # (M,)

    def __post_init__(self):
        self.pair_names = tuple(self.pair_names)
        self.motion_ids = tuple(self.motion_ids)
        self.p_pos = np.asarray(self.p_pos, dtype=float).reshape(len(self.pair_names), 3)
        self.p_ori = np.asarray(self.p_ori, dtype=float).reshape(len(self.pair_names), 3)
        self.p_z = np.asarray(self.p_z, dtype=float).reshape(len(self.motion_ids))

    @classmethod
    def zeros(cls, pair_names: Sequence[str], motion_ids: Sequence[str]) -> "RetargetParams":
        return cls(tuple(pair_names), tuple(motion_ids),
                   np.zeros((len(pair_names), 3)), np.zeros((len(pair_names), 3)),
                   np.zeros(len(motion_ids)))

    def copy(self) -> "RetargetParams":
        return RetargetParams(self.pair_names, self.motion_ids,
                              self.p_pos.copy(), self.p_ori.copy(), self.p_z.copy())

    def motion_index(self, motion_id: str) -> int:
        return self.motion_ids.index(motion_id)

    def flat(self) -> np.ndarray:
        return np.concatenate([self.p_pos.ravel(), self.p_ori.ravel(), self.p_z])

    def satisfies(self, box: ConstraintBox, tol: float = 0.0) -> bool:
        return bool(
            np.all(np.linalg.norm(self.p_pos, axis=-1) <= box.delta_pos + tol)
            and np.all(np.linalg.norm(self.p_ori, axis=-1) <= box.delta_ori + tol)
            and np.all(np.abs(self.p_z) <= box.delta_z + tol)
        )


def _project_ball(v: np.ndarray, radius: float) -> np.ndarray:
    """Euclidean projection of each row onto the radius-ball.

    Iterates the rescale until it is a fixed point so that projecting twice
    is exactly a no-op despite floating-point rounding.
    """
    v = np.array(v, dtype=float, copy=True)
    for _ in range(5):
        norms = np.linalg.norm(v, axis=-1)
        outside = norms > radius
        if not np.any(outside):
            break
        scale = np.where(outside, radius / np.where(outside, norms, 1.0), 1.0)
        v = v * scale[..., None]
    return v


def project(params: RetargetParams, box: ConstraintBox) -> RetargetParams:
    """Euclidean projection onto the convex constraint set."""
    if not np.all(np.isfinite(params.flat())):
        raise ValueError("parameters contain non-finite values")
    return RetargetParams(
        params.pair_names, params.motion_ids,
        _project_ball(params.p_pos, box.delta_pos),
        _project_ball(params.p_ori, box.delta_ori),
        np.clip(params.p_z, -box.delta_z, box.delta_z),
    )


class UpperBatch:
    """Flat batch of state-reference sample pairs for the upper update.

    Samples are filtered structurally: `extend` drops everything collected
    before the retargeting phase reaches 1.
    """

    FIELDS = ("pair_idx", "motion_idx", "m_pos", "m_rot", "m_linvel", "m_angvel",
              "s_pos", "s_rot", "s_linvel", "s_angvel")

    def __init__(self):
        self._blocks: list[dict[str, np.ndarray]] = []
        self.size = 0

    def extend(self, pair_idx, motion_idx, m_pos, m_rot, m_linvel, m_angvel,
               s_pos, s_rot, s_linvel, s_angvel, psi) -> None:
        psi = np.asarray(psi, dtype=float)
        keep = psi >= 1.0
        if not np.any(keep):
            return
        block = {
            "pair_idx": np.asarray(pair_idx)[keep],
            "motion_idx": np.asarray(motion_idx)[keep],
            "m_pos": np.asarray(m_pos)[keep],
            "m_rot": np.asarray(m_rot)[keep],
            "m_linvel": np.asarray(m_linvel)[keep],
            "m_angvel": np.asarray(m_angvel)[keep],
            "s_pos": np.asarray(s_pos)[keep],
            "s_rot": np.asarray(s_rot)[keep],
            "s_linvel": np.asarray(s_linvel)[keep],
            "s_angvel": np.asarray(s_angvel)[keep],
        }
        self._blocks.append(block)
        self.size += int(keep.sum())

    def add_sample(self, pair_idx: int, motion_idx: int, m_frame, s_frame,
                   psi: float = 1.0) -> None:
        self.extend(
            np.array([pair_idx]), np.array([motion_idx]),
            m_frame.pos[None], m_frame.rot[None], m_frame.linvel[None],
            m_frame.angvel[None],
            s_frame.pos[None], s_frame.rot[None], s_frame.linvel[None],
            s_frame.angvel[None],
            np.array([psi]),
        )

    def stacked(self) -> dict[str, np.ndarray]:
        if not self._blocks:
            raise ValueError("batch is empty")
        return {f: np.concatenate([b[f] for b in self._blocks]) for f in self.FIELDS}


@dataclass
class ParamGradient:
    g_pos: np.ndarray  # (P, 3)
    g_ori: np.ndarray  # (P, 3)
    g_z: np.ndarray  # (M,)
    n_samples: int = 0
    mean_loss: float = 0.0
    skipped: bool = False

    def flat(self) -> np.ndarray:
        return np.concatenate([self.g_pos.ravel(), self.g_ori.ravel(), self.g_z])


def grad_estimate(
    batch: UpperBatch,
    params: RetargetParams,
    cal: Calibration,
    pairs: Sequence[CorrespondencePair],
    weights: LossWeights,
    alpha: float,
    z_nom: Optional[np.ndarray] = None,
) -> ParamGradient:
    """Simplified upper-level gradient averaged over the batch.

    The simulated frames are held fixed; only the reference side is
    differentiated, scaled by (1 - alpha). An empty batch yields a zero
    gradient with the skipped flag set.
    """
    P = len(params.pair_names)
    M = len(params.motion_ids)
    zero = ParamGradient(np.zeros((P, 3)), np.zeros((P, 3)), np.zeros(M), skipped=True)
    if batch.size == 0:
        return zero
    if z_nom is None:
        z_nom = np.zeros(M)
    data = batch.stacked()
    pi = data["pair_idx"]
    mi = data["motion_idx"]
    K = len(pi)

    x_g, R_g, v_g, w_g = refmap.map_frames_gather(
        cal, pi, data["m_pos"], data["m_rot"], data["m_linvel"], data["m_angvel"],
        params.p_pos[pi], params.p_ori[pi],
        z_shift=np.asarray(z_nom)[mi] + params.p_z[mi],
    )
    dx = x_g - data["s_pos"]
    dv = v_g - data["s_linvel"]
    dw = w_g - data["s_angvel"]

    RmRnom = data["m_rot"] @ cal.R_nom[pi]
    dv_dpos = rotmath.hat(data["m_angvel"]) @ RmRnom

    # Per-sample gradients; sum over samples into the parameter slots.
    g_pos_samples = (
        weights.w_x * 2.0 * (np.swapaxes(RmRnom, -1, -2) @ dx[..., None])[..., 0]
        + weights.w_v * 2.0 * (np.swapaxes(dv_dpos, -1, -2) @ dv[..., None])[..., 0]
    )
    g_z_samples = weights.w_x * 2.0 * dx[..., 2]

    # Orientation: loss gradient w.r.t. a right perturbation of R_g, chained
    # through the right Jacobian of Exp at p_ori (per-pair mode/axis).
    ori_loss = np.zeros(K)
    g_ori_samples = np.zeros((K, 3))
    for b in range(P):
        sel = pi == b
        if not np.any(sel):
            continue
        loss_b, grad_delta = orientation_loss_batch(
            data["s_rot"][sel], R_g[sel],
            mode=pairs[b].orientation_mode, axis=pairs[b].twist_axis,
            with_grad=True,
        )
        ori_loss[sel] = loss_b
        Jr = rotmath.right_jacobian(params.p_ori[b])
        g_ori_samples[sel] = weights.w_R * (grad_delta @ Jr)

    scale = (1.0 - alpha) / K
    g_pos = np.zeros((P, 3))
    g_ori = np.zeros((P, 3))
    g_z = np.zeros(M)
    np.add.at(g_pos, pi, g_pos_samples)
    np.add.at(g_ori, pi, g_ori_samples)
    np.add.at(g_z, mi, g_z_samples)

    mean_loss = float(
        np.mean(
            weights.w_x * np.sum(dx * dx, axis=-1)
            + weights.w_R * ori_loss
            + weights.w_v * np.sum(dv * dv, axis=-1)
            + weights.w_w * np.sum(dw * dw, axis=-1)
        )
    )
    return ParamGradient(
        g_pos=g_pos * scale, g_ori=g_ori * scale, g_z=g_z * scale,
        n_samples=K, mean_loss=mean_loss, skipped=False,
    )


def ttsa_step(
    params: RetargetParams,
    grad: ParamGradient,
    eta: float,
    box: ConstraintBox,
) -> tuple[RetargetParams, float]:
    """Projected gradient step; returns the new params and ||delta p||."""
    if not np.all(np.isfinite(grad.flat())):
        raise ValueError(
            "non-finite upper-level gradient; refusing to update parameters"
        )
    stepped = RetargetParams(
        params.pair_names, params.motion_ids,
        params.p_pos - eta * grad.g_pos,
        params.p_ori - eta * grad.g_ori,
        params.p_z - eta * grad.g_z,
    )
    new = project(stepped, box)
    update_rate = float(np.linalg.norm(new.flat() - params.flat()))
    return new, update_rate


def saturation_fractions(params: RetargetParams, box: ConstraintBox,
                         tol: float = 1e-9) -> dict[str, float]:
    """Fraction of parameter blocks sitting on each constraint boundary."""
    return {
        "pos": float(np.mean(np.linalg.norm(params.p_pos, axis=-1) >= box.delta_pos - tol)),
        "ori": float(np.mean(np.linalg.norm(params.p_ori, axis=-1) >= box.delta_ori - tol)),
        "z": float(np.mean(np.abs(params.p_z) >= box.delta_z - tol)),
    }


# ---------------------------------------------------------------------------
# Parameter checkpoint (structured text)


def params_to_dict(params: RetargetParams, iteration: int = 0) -> dict:
    return {
        "iteration": iteration,
        "pairs": {
            name: {"p_pos": params.p_pos[i].tolist(), "p_ori": params.p_ori[i].tolist()}
            for i, name in enumerate(params.pair_names)
        },
        "motions": {m: params.p_z[i] for i, m in enumerate(params.motion_ids)},
    }


def params_from_dict(d: dict) -> tuple[RetargetParams, int]:
    pair_names = tuple(d["pairs"].keys())
    motion_ids = tuple(d["motions"].keys())
    p_pos = np.array([d["pairs"][n]["p_pos"] for n in pair_names], dtype=float)
    p_ori = np.array([d["pairs"][n]["p_ori"] for n in pair_names], dtype=float)
    p_z = np.array([d["motions"][m] for m in motion_ids], dtype=float)
    return (
        RetargetParams(pair_names, motion_ids, p_pos.reshape(-1, 3),
                       p_ori.reshape(-1, 3), p_z),
        int(d.get("iteration", 0)),
    )


def save_params(params: RetargetParams, path, iteration: int = 0) -> None:
    with open(path, "w") as f:
        json.dump(params_to_dict(params, iteration), f, indent=2)


def load_params(path) -> tuple[RetargetParams, int]:
    with open(path) as f:
        return params_from_dict(json.load(f))
