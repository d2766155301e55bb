"""Mapping of source motion frames into the parameterized reference motion.

Per correspondence pair b, a source frame (x, R, v, w) maps to

    x_g = R_m (R_nom p_pos + x_nom) + s x_m + (z_nom + p_z) e_z
    R_g = R_m R_nom Exp(p_ori)
    v_g = w_m x R_m (R_nom p_pos + x_nom) + s v_m
    w_g = w_m

with the scale s and nominal transforms (x_nom, R_nom) from calibration and
the optimized offsets (p_pos, p_ori, p_z). All map_* functions are batched
over leading axes of the frame arrays.
"""

import json
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import rotmath
from .frames import Frame
from .morphology import Calibration, Morphology

E_Z = np.array([0.0, 0.0, 1.0])


@dataclass
class SourceMotionClip:
    """A source motion: per-frame world state of every source body."""

    id: str
    fps: float
    body_names: list[str]
    pos: np.ndarray  # (T, B, 3)
    rot: np.ndarray  # (T, B, 3, 3)
    linvel: np.ndarray  # (T, B, 3)
    angvel: np.ndarray  # (T, B, 3)
    z_nom: Optional[float] = None

    def __post_init__(self):
        if self.fps <= 0.0:
            raise ValueError("fps must be positive")
        T, B = self.pos.shape[:2]
        if len(self.body_names) != B:
            raise ValueError("body_names length does not match position array")
        for arr, name in ((self.linvel, "linvel"), (self.angvel, "angvel")):
            if arr.shape != (T, B, 3):
                raise ValueError(f"{name} has shape {arr.shape}, expected {(T, B, 3)}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite values")
        self._body_index = {n: i for i, n in enumerate(self.body_names)}

    @property
    def n_frames(self) -> int:
        return self.pos.shape[0]

    @property
    def duration(self) -> float:
        return self.n_frames / self.fps

    def body_idx(self, body: str) -> int:
        if body not in self._body_index:
            raise KeyError(f"clip {self.id!r} has no body {body!r}")
        return self._body_index[body]

    def frame(self, t: int, body: str) -> Frame:
        b = self.body_idx(body)
        return Frame(self.pos[t, b], self.rot[t, b], self.linvel[t, b], self.angvel[t, b])


def fill_velocities_central(pos: np.ndarray, rot: np.ndarray, fps: float):
    """Linear/angular velocities by central differences (one-sided endpoints)."""
    T = pos.shape[0]
    linvel = np.zeros_like(pos)
    angvel = np.zeros(pos.shape)
    if T == 1:
        return linvel, angvel
    linvel[1:-1] = (pos[2:] - pos[:-2]) * (fps / 2.0)
    linvel[0] = (pos[1] - pos[0]) * fps
    linvel[-1] = (pos[-1] - pos[-2]) * fps
    # World-frame angular velocity: R(t+dt) = Exp(w dt) R(t)
    RT = np.swapaxes(rot, -1, -2)
    angvel[1:-1] = rotmath.log_map(rot[2:] @ RT[:-2]) * (fps / 2.0)
    angvel[0] = rotmath.log_map(rot[1] @ RT[0]) * fps
    angvel[-1] = rotmath.log_map(rot[-1] @ RT[-2]) * fps
    return linvel, angvel


def clip_to_dict(clip: SourceMotionClip) -> dict:
    frames = []
    quats = rotmath.quat_from_matrix(clip.rot)
    for t in range(clip.n_frames):
        frames.append(
            {
                name: {
                    "pos": clip.pos[t, b].tolist(),
                    "quat": quats[t, b].tolist(),
                    "linvel": clip.linvel[t, b].tolist(),
                    "angvel": clip.angvel[t, b].tolist(),
                }
                for b, name in enumerate(clip.body_names)
            }
        )
    d = {"id": clip.id, "fps": clip.fps, "bodies": list(clip.body_names), "frames": frames}
    if clip.z_nom is not None:
        d["z_nom"] = clip.z_nom
    return d


def clip_from_dict(d: dict) -> SourceMotionClip:
    """Parse a clip; position-only frames get velocities by central differences."""
    bodies = d["bodies"]
    T, B = len(d["frames"]), len(bodies)
    pos = np.zeros((T, B, 3))
    quat = np.zeros((T, B, 4))
    linvel = np.full((T, B, 3), np.nan)
    angvel = np.full((T, B, 3), np.nan)
    for t, fr in enumerate(d["frames"]):
        for b, name in enumerate(bodies):
            entry = fr[name]
            pos[t, b] = entry["pos"]
            quat[t, b] = entry["quat"]
            if "linvel" in entry:
                linvel[t, b] = entry["linvel"]
            if "angvel" in entry:
                angvel[t, b] = entry["angvel"]
    rot = rotmath.matrix_from_quat(quat)
    if np.any(~np.isfinite(linvel)) or np.any(~np.isfinite(angvel)):
        lv, av = fill_velocities_central(pos, rot, d["fps"])
        linvel = np.where(np.isfinite(linvel), linvel, lv)
        angvel = np.where(np.isfinite(angvel), angvel, av)
    return SourceMotionClip(
        id=d["id"], fps=d["fps"], body_names=list(bodies),
        pos=pos, rot=rot, linvel=linvel, angvel=angvel, z_nom=d.get("z_nom"),
    )


def load_clip(path) -> SourceMotionClip:
    with open(path) as f:
        return clip_from_dict(json.load(f))


def save_clip(clip: SourceMotionClip, path) -> None:
    with open(path, "w") as f:
        json.dump(clip_to_dict(clip), f)


def precompute_z_nom(clip: SourceMotionClip, source: Morphology, cal: Calibration) -> float:
    """Per-motion vertical offset grounding the lowest scaled contact point.

    Over all frames and all collision points of the source contact bodies,
    the minimum height of the scaled (by s) point is shifted to z = 0.
    """
    if not source.contact_bodies:
        raise ValueError("source morphology defines no contact bodies")
    lowest = np.inf
    for body in source.contact_bodies:
        points = source.collision_points(body)
        if not points:
            raise ValueError(f"contact body {body!r} has no collision geometry")
        b = clip.body_idx(body)
        x = clip.pos[:, b]  # (T, 3)
        R = clip.rot[:, b]  # (T, 3, 3)
        for p_local, radius in points:
            z = (x + R @ p_local)[..., 2] - radius
            lowest = min(lowest, float(z.min()))
    return -cal.s * lowest


def map_frames(
    cal: Calibration,
    pair_idx: int,
    pos: np.ndarray,
    rot: np.ndarray,
    linvel: np.ndarray,
    angvel: np.ndarray,
    p_pos: np.ndarray,
    p_ori: np.ndarray,
    z_shift: float = 0.0,
):
    """Batched parameterized mapping for one pair; z_shift = z_nom + p_z."""
    offset_local = cal.R_nom[pair_idx] @ np.asarray(p_pos, dtype=float) + cal.x_nom[pair_idx]
    arm = rot @ offset_local  # (..., 3)
    x_g = arm + cal.s * pos
    x_g = x_g + z_shift * E_Z
    R_g = rot @ (cal.R_nom[pair_idx] @ rotmath.exp_map(p_ori))
    v_g = np.cross(angvel, arm) + cal.s * linvel
    w_g = np.array(angvel, copy=True)
    return x_g, R_g, v_g, w_g


def map_frames_gather(
    cal: Calibration,
    pair_idx: np.ndarray,  # (K,) int
    pos: np.ndarray,  # (K, 3)
    rot: np.ndarray,  # (K, 3, 3)
    linvel: np.ndarray,
    angvel: np.ndarray,
    p_pos: np.ndarray,  # (K, 3), already gathered per sample
    p_ori: np.ndarray,  # (K, 3)
    z_shift: np.ndarray,  # (K,)
):
    """Parameterized mapping for a flat batch with per-sample pair indices."""
    R_nom = cal.R_nom[pair_idx]  # (K, 3, 3)
    x_nom = cal.x_nom[pair_idx]  # (K, 3)
    offset_local = (R_nom @ p_pos[..., None])[..., 0] + x_nom
    arm = (rot @ offset_local[..., None])[..., 0]
    x_g = arm + cal.s * pos + np.asarray(z_shift)[..., None] * E_Z
    R_g = rot @ R_nom @ rotmath.exp_map(p_ori)
    v_g = np.cross(angvel, arm) + cal.s * linvel
    return x_g, R_g, v_g, np.array(angvel, copy=True)


def map_reference(
    cal: Calibration,
    pair_idx: int,
    frame: Frame,
    p_pos: np.ndarray,
    p_ori: np.ndarray,
    p_z: float = 0.0,
    z_nom: float = 0.0,
) -> Frame:
    """Map one source frame to its parameterized reference frame."""
    if not 0 <= pair_idx < cal.n_pairs:
        raise IndexError(f"pair index {pair_idx} out of range for calibration")
    x_g, R_g, v_g, w_g = map_frames(
        cal, pair_idx, frame.pos, frame.rot, frame.linvel, frame.angvel,
        p_pos, p_ori, z_shift=z_nom + p_z,
    )
    return Frame(x_g, R_g, v_g, w_g)


@dataclass(frozen=True)
class ReferenceJacobian:
    """Partials of the mapped reference with respect to (p_pos, p_ori, p_z)."""

    dx_dpos: np.ndarray  # (3, 3) = R_m R_nom
    dx_dz: np.ndarray  # (3,) = e_z
    dv_dpos: np.ndarray  # (3, 3) = [w_m]x R_m R_nom
    # Right Jacobian of Exp at p_ori: the orientation responds to dp_ori by a
    # right perturbation Exp(J_r dp_ori) of R_g. The loss-level chain rule
    # consumes this factor directly instead of a rotation 3-tensor.
    ori_right_jacobian: np.ndarray  # (3, 3)


def reference_jacobian(
    cal: Calibration,
    pair_idx: int,
    frame: Frame,
    p_ori: np.ndarray,
) -> ReferenceJacobian:
    if not 0 <= pair_idx < cal.n_pairs:
        raise IndexError(f"pair index {pair_idx} out of range for calibration")
    RmRnom = frame.rot @ cal.R_nom[pair_idx]
    return ReferenceJacobian(
        dx_dpos=RmRnom,
        dx_dz=E_Z.copy(),
        dv_dpos=rotmath.hat(frame.angvel) @ RmRnom,
        ori_right_jacobian=rotmath.right_jacobian(p_ori),
    )
