"""Rigid-body dynamics for articulated characters on a ground plane.

The generalized velocity of one environment is u = [v_root, w_root, qd] with
the root twist in world coordinates at the root body origin. Each control
step integrates several semi-implicit Euler substeps of

    M(q) du = Q - b(q, u)

where M is assembled from per-body Jacobians, b collects velocity-product
and gyroscopic terms, and Q gathers gravity, PD joint torques, the auxiliary
root wrench, and penalty ground contacts (spring-damper normal force with
regularized Coulomb friction).

Everything is batched over environments with elementwise numpy operations
only, so results are bitwise identical whether environments are stepped
together or one at a time.
"""

import copy
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import rotmath
from .frames import Frame
from .morphology import Morphology, fk_arrays


@dataclass(frozen=True)
class SimConfig:
    control_dt: float = 0.02
    substeps: int = 4
    gravity: float = 9.81
    wrench_deadband: float = 0.1
    contact_stiffness: float = 2.0e4
    contact_damping: float = 200.0
    friction: float = 0.8
    slip_velocity: float = 0.05  # friction regularization scale
    joint_damping: float = 0.0
    # Contact candidates from every body's collision geometry by default;
    # restrict to the declared contact bodies when set.
    contact_bodies_only: bool = False
    max_linvel: float = 100.0  # divergence fault thresholds
    max_angvel: float = 200.0

    def __post_init__(self):
        if self.control_dt <= 0.0 or self.substeps < 1:
            raise ValueError("control_dt must be positive and substeps >= 1")
        if self.contact_stiffness < 0.0 or self.contact_damping < 0.0:
            raise ValueError("contact gains must be nonnegative")
        if self.friction < 0.0 or self.slip_velocity <= 0.0:
            raise ValueError("friction must be >= 0 and slip_velocity > 0")
        if self.wrench_deadband < 0.0:
            raise ValueError("wrench deadband must be nonnegative")

    @property
    def dt(self) -> float:
        return self.control_dt / self.substeps


def apply_deadband(w: np.ndarray, d: float) -> np.ndarray:
    """Shrink each component toward zero by d: sgn(w) * max(0, |w| - d)."""
    w = np.asarray(w, dtype=float)
    return np.sign(w) * np.maximum(0.0, np.abs(w) - d)


def pd_torques(q, qd, setpoints, kp, kd, torque_limits) -> np.ndarray:
    """Proportional-derivative joint torques clamped to the actuator limits."""
    tau = kp * (setpoints - q) - kd * qd
    return np.clip(tau, -torque_limits, torque_limits)


def batched_cholesky(M: np.ndarray) -> np.ndarray:
    """Cholesky factor of a stack of SPD matrices, elementwise over the stack."""
    n = M.shape[-1]
    L = np.zeros_like(M)
    for j in range(n):
        s = M[..., j, j] - np.sum(L[..., j, :j] * L[..., j, :j], axis=-1)
        L[..., j, j] = np.sqrt(s)
        for i in range(j + 1, n):
            L[..., i, j] = (
                M[..., i, j] - np.sum(L[..., i, :j] * L[..., j, :j], axis=-1)
            ) / L[..., j, j]
    return L


def cholesky_solve(L: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Solve L L^T x = rhs by substitution, elementwise over the stack."""
    n = L.shape[-1]
    y = np.zeros_like(rhs)
    for i in range(n):
        y[..., i] = (rhs[..., i] - np.sum(L[..., i, :i] * y[..., :i], axis=-1)) / L[..., i, i]
    x = np.zeros_like(rhs)
    for i in range(n - 1, -1, -1):
        x[..., i] = (
            y[..., i] - np.sum(L[..., i + 1:, i] * x[..., i + 1:], axis=-1)
        ) / L[..., i, i]
    return x


class SimModel:
    """Static dynamics tables precomputed from a morphology."""

    def __init__(self, morph: Morphology, cfg: SimConfig):
        self.morph = morph
        B, nq = morph.n_bodies, morph.n_joints
        self.root_idx = morph.body_index[morph.root_body]
        self.masses = np.array([b.mass for b in morph.bodies])
        self.inertias = np.stack([b.inertia for b in morph.bodies])
        self.com_offsets = np.stack([b.com_offset for b in morph.bodies])
        self.total_mass = float(self.masses.sum())

        # q-ordered joint tables and the joint path from the root to each body.
        self.child_of_joint = np.zeros(nq, dtype=int)
        parent_joint_of_body = np.full(B, -1, dtype=int)
        for j in morph.joints:
            ci = morph.body_index[j.child_body]
            self.child_of_joint[morph.joint_index[j.name]] = ci
            parent_joint_of_body[ci] = morph.joint_index[j.name]
        self.ancestor_mask = np.zeros((B, nq))
        for j in morph.traversal:
            ji = morph.joint_index[j.name]
            ci = morph.body_index[j.child_body]
            pi = morph.body_index[j.parent_body]
            self.ancestor_mask[ci] = self.ancestor_mask[pi]
            self.ancestor_mask[ci, ji] = 1.0

        bodies = morph.contact_bodies if cfg.contact_bodies_only else morph.body_names
        cp_body, cp_local, cp_radius = [], [], []
        for name in bodies:
            for p_local, radius in morph.collision_points(name):
                cp_body.append(morph.body_index[name])
                cp_local.append(p_local)
                cp_radius.append(radius)
        self.cp_body = np.array(cp_body, dtype=int)
        self.cp_local = np.array(cp_local, dtype=float).reshape(-1, 3)
        self.cp_radius = np.array(cp_radius, dtype=float)
        self.n_contacts = len(self.cp_body)


def _hat_batch(v):
    """Skew matrices for (..., 3) vectors without matmul."""
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


class SimBatch:
    """Mutable simulation state for a batch of identical-morphology envs."""

    def __init__(self, morph: Morphology, cfg: SimConfig, n_envs: int):
        self.model = SimModel(morph, cfg)
        self.cfg = cfg
        self.n_envs = n_envs
        nq = morph.n_joints
        E = n_envs
        self.root_pos = np.tile(morph.nominal_root.pos, (E, 1))
        self.root_rot = np.tile(morph.nominal_root.rot, (E, 1, 1))
        self.root_linvel = np.zeros((E, 3))
        self.root_angvel = np.zeros((E, 3))
        self.q = np.tile(morph.nominal_q, (E, 1))
        self.qd = np.zeros((E, nq))
        self.last_joint_torques = np.zeros((E, nq))
        self.last_joint_acc = np.zeros((E, nq))
        self.fault = np.zeros(E, dtype=bool)
        # Per contact candidate, refreshed each substep: world point,
        # penetration depth (> 0 inside the ground), and normal force.
        self.contact_depth = np.zeros((E, self.model.n_contacts))
        self.contact_normal_force = np.zeros((E, self.model.n_contacts))
        self.contact_point = np.zeros((E, self.model.n_contacts, 3))

    @property
    def morph(self) -> Morphology:
        return self.model.morph

    # -- state access -----------------------------------------------------

    def set_env(self, e, root: Frame, q, qd=None) -> None:
        nq = self.morph.n_joints
        self.root_pos[e] = root.pos
        self.root_rot[e] = root.rot
        self.root_linvel[e] = root.linvel
        self.root_angvel[e] = root.angvel
        self.q[e] = q
        self.qd[e] = np.zeros(nq) if qd is None else qd
        self.last_joint_torques[e] = 0.0
        self.last_joint_acc[e] = 0.0
        self.fault[e] = False

    def body_kinematics(self):
        """World pose and twist of every body: (pos, rot, linvel, angvel)."""
        return fk_arrays(
            self.morph, self.q, self.root_pos, self.root_rot,
            qd=self.qd, root_linvel=self.root_linvel, root_angvel=self.root_angvel,
        )

    def snapshot(self) -> dict:
        return {
            k: getattr(self, k).copy()
            for k in ("root_pos", "root_rot", "root_linvel", "root_angvel",
                      "q", "qd", "last_joint_torques", "last_joint_acc",
                      "fault", "contact_depth", "contact_normal_force",
                      "contact_point")
        }

    def restore(self, snap: dict) -> None:
        for k, v in snap.items():
            getattr(self, k)[...] = v

    # -- dynamics ----------------------------------------------------------

    def _jacobians(self, pos, rot, axes, coms):
        """Per-body COM Jacobians (E, B, 3, nu) for linear and angular parts."""
        m = self.model
        E, B = pos.shape[0], self.morph.n_bodies
        nq = self.morph.n_joints
        nu = 6 + nq
        Jv = np.zeros((E, B, 3, nu))
        Jw = np.zeros((E, B, 3, nu))
        eye = np.eye(3)
        Jv[:, :, :, 0:3] = eye
        Jw[:, :, :, 3:6] = eye
        r_root = coms - pos[:, m.root_idx, None, :]
        Jv[:, :, :, 3:6] = -_hat_batch(r_root)
        if nq:
            anchors = pos[:, m.child_of_joint]  # (E, nq, 3)
            arm = coms[:, :, None, :] - anchors[:, None, :, :]  # (E, B, nq, 3)
            col = np.cross(axes[:, None, :, :], arm) * m.ancestor_mask[None, :, :, None]
            Jv[:, :, :, 6:] = np.swapaxes(col, -1, -2)
            Jw[:, :, :, 6:] = np.swapaxes(
                axes[:, None, :, :] * m.ancestor_mask[None, :, :, None], -1, -2
            )
        return Jv, Jw

    def _bias_accels(self, pos, angvel, axes, coms):
        """COM linear and angular accelerations with du = 0 held."""
        E, B = pos.shape[0], self.morph.n_bodies
        a0 = np.zeros((E, B, 3))  # body-origin acceleration
        al0 = np.zeros((E, B, 3))  # angular acceleration
        for joint in self.morph.traversal:
            ji = self.morph.joint_index[joint.name]
            pi = self.morph.body_index[joint.parent_body]
            ci = self.morph.body_index[joint.child_body]
            wp = angvel[:, pi]
            al0[:, ci] = al0[:, pi] + self.qd[:, ji, None] * np.cross(wp, axes[:, ji])
            dr = pos[:, ci] - pos[:, pi]
            a0[:, ci] = a0[:, pi] + np.cross(al0[:, pi], dr) + np.cross(wp, np.cross(wp, dr))
        rc = coms - pos
        ac0 = a0 + np.cross(al0, rc) + np.cross(angvel, np.cross(angvel, rc))
        return ac0, al0

    def step(self, setpoints: np.ndarray, root_wrench: Optional[np.ndarray] = None):
        """Advance all non-faulted envs by one control step.

        setpoints: (E, nq) PD position targets. root_wrench: (E, 6) raw
        auxiliary root force/torque; the deadband is applied here and the
        effective wrench is returned for reward accounting.
        """
        cfg = self.cfg
        m = self.model
        E = self.n_envs
        nq = self.morph.n_joints
        setpoints = np.asarray(setpoints, dtype=float).reshape(E, nq)
        if root_wrench is None:
            wrench = np.zeros((E, 6))
        else:
            wrench = apply_deadband(root_wrench, cfg.wrench_deadband).reshape(E, 6)
        live = ~self.fault

        g_vec = np.array([0.0, 0.0, -cfg.gravity])
        for _ in range(cfg.substeps):
            pos, rot, linvel, angvel = self.body_kinematics()
            if nq:
                axes_local = np.stack([j.axis for j in self.morph.joints])
                axes = np.einsum(
                    "eqij,qj->eqi", rot[:, m.child_of_joint], axes_local
                )
            else:
                axes = np.zeros((E, 0, 3))
            coms = pos + np.einsum("ebij,bj->ebi", rot, m.com_offsets)

            Jv, Jw = self._jacobians(pos, rot, axes, coms)
            Iw = np.einsum("ebij,bjk,eblk->ebil", rot, m.inertias, rot)
            M = (
                np.einsum("ebiu,b,ebiv->euv", Jv, m.masses, Jv)
                + np.einsum("ebiu,ebij,ebjv->euv", Jw, Iw, Jw)
            )

            ac0, al0 = self._bias_accels(pos, angvel, axes, coms)
            gyro = np.cross(angvel, np.einsum("ebij,ebj->ebi", Iw, angvel))
            bias = (
                np.einsum("ebiu,b,ebi->eu", Jv, m.masses, ac0)
                + np.einsum("ebiu,ebi->eu", Jw,
                            np.einsum("ebij,ebj->ebi", Iw, al0) + gyro)
            )

            Q = np.einsum("ebiu,b,i->eu", Jv, m.masses, g_vec)
            Q[:, 0:3] += wrench[:, 0:3]
            Q[:, 3:6] += wrench[:, 3:6]
            if nq:
                tau = pd_torques(self.q, self.qd, setpoints,
                                 self.morph.kp, self.morph.kd, self.morph.torque_limits)
                Q[:, 6:] += tau - cfg.joint_damping * self.qd
                self.last_joint_torques = np.where(live[:, None], tau,
                                                   self.last_joint_torques)

            if m.n_contacts:
                cp = (
                    pos[:, m.cp_body]
                    + np.einsum("ecij,cj->eci", rot[:, m.cp_body], m.cp_local)
                )
                depth = m.cp_radius[None, :] - cp[..., 2]
                v_cp = linvel[:, m.cp_body] + np.cross(
                    angvel[:, m.cp_body], cp - pos[:, m.cp_body]
                )
                active = depth > 0.0
                fn = np.where(
                    active,
                    np.maximum(
                        0.0,
                        cfg.contact_stiffness * depth
                        - cfg.contact_damping * v_cp[..., 2],
                    ),
                    0.0,
                )
                vt = v_cp.copy()
                vt[..., 2] = 0.0
                vt_norm = np.sqrt(np.sum(vt * vt, axis=-1))
                ft_scale = -cfg.friction * fn / np.maximum(vt_norm, cfg.slip_velocity)
                f = vt * ft_scale[..., None]
                f[..., 2] += fn
                # Generalized contact force through the point Jacobian.
                Q[:, 0:3] += np.sum(f, axis=1)
                Q[:, 3:6] += np.sum(
                    np.cross(cp - self.root_pos[:, None, :], f), axis=1
                )
                if nq:
                    arm = cp[:, :, None, :] - pos[:, None, m.child_of_joint, :]
                    jcol = (
                        np.cross(axes[:, None, :, :], arm)
                        * m.ancestor_mask[m.cp_body][None, :, :, None]
                    )
                    Q[:, 6:] += np.einsum("ecqi,eci->eq", jcol, f)
                self.contact_depth = np.where(live[:, None], depth,
                                              self.contact_depth)
                self.contact_normal_force = np.where(live[:, None], fn,
                                                     self.contact_normal_force)
                self.contact_point = np.where(live[:, None, None], cp,
                                              self.contact_point)

            with np.errstate(invalid="ignore", divide="ignore"):
                L = batched_cholesky(M)
                du = cholesky_solve(L, Q - bias)

            dt = cfg.dt
            new_linvel = self.root_linvel + dt * du[:, 0:3]
            new_angvel = self.root_angvel + dt * du[:, 3:6]
            new_qd = self.qd + dt * du[:, 6:]
            new_pos = self.root_pos + dt * new_linvel
            new_rot = rotmath.exp_map(dt * new_angvel) @ self.root_rot
            new_q = self.q + dt * new_qd
            if nq:
                lo, hi = self.morph.joint_limits_lo, self.morph.joint_limits_hi
                clamped = np.clip(new_q, lo, hi)
                at_limit = clamped != new_q
                new_qd = np.where(at_limit, 0.0, new_qd)
                new_q = clamped

            ok = (
                np.all(np.isfinite(new_pos), axis=-1)
                & np.all(np.isfinite(new_rot), axis=(-1, -2))
                & np.all(np.isfinite(new_q) & np.isfinite(new_qd), axis=-1)
                & (np.linalg.norm(new_linvel, axis=-1) < cfg.max_linvel)
                & (np.linalg.norm(new_angvel, axis=-1) < cfg.max_angvel)
            )
            live = live & ok
            upd = live[:, None]
            self.root_pos = np.where(upd, new_pos, self.root_pos)
            self.root_rot = np.where(upd[..., None], new_rot, self.root_rot)
            self.root_linvel = np.where(upd, new_linvel, self.root_linvel)
            self.root_angvel = np.where(upd, new_angvel, self.root_angvel)
            self.q = np.where(upd, new_q, self.q)
            self.qd = np.where(upd, new_qd, self.qd)
            self.last_joint_acc = np.where(upd, du[:, 6:], self.last_joint_acc)

        # Envs that diverged keep their last healthy state (updates above are
        # masked) and stay frozen until explicitly reset.
        self.fault = ~live
        return wrench

    # -- diagnostics ---------------------------------------------------

    def linear_momentum(self) -> np.ndarray:
        pos, rot, linvel, angvel = self.body_kinematics()
        m = self.model
        coms = pos + np.einsum("ebij,bj->ebi", rot, m.com_offsets)
        v_com = linvel + np.cross(angvel, coms - pos)
        return np.einsum("b,ebi->ei", m.masses, v_com)

    def angular_momentum(self) -> np.ndarray:
        """About the world origin."""
        pos, rot, linvel, angvel = self.body_kinematics()
        m = self.model
        coms = pos + np.einsum("ebij,bj->ebi", rot, m.com_offsets)
        v_com = linvel + np.cross(angvel, coms - pos)
        Iw = np.einsum("ebij,bjk,eblk->ebil", rot, m.inertias, rot)
        spin = np.einsum("ebij,ebj->ebi", Iw, angvel)
        orbital = np.cross(coms, m.masses[None, :, None] * v_com)
        return np.sum(spin + orbital, axis=1)


@dataclass
class SimState:
    """Single-environment snapshot in object form."""

    root: Frame
    q: np.ndarray
    qd: np.ndarray
    body_frames: dict[str, Frame]
    last_joint_torques: np.ndarray
    last_joint_acc: np.ndarray
    fault: bool = False


def make_env_batch(morph: Morphology, cfg: SimConfig, n_envs: int) -> SimBatch:
    return SimBatch(morph, cfg, n_envs)


def read_state(batch: SimBatch, e: int) -> SimState:
    pos, rot, linvel, angvel = batch.body_kinematics()
    frames = {
        name: Frame(pos[e, i].copy(), rot[e, i].copy(),
                    linvel[e, i].copy(), angvel[e, i].copy())
        for name, i in batch.morph.body_index.items()
    }
    return SimState(
        root=Frame(batch.root_pos[e].copy(), batch.root_rot[e].copy(),
                   batch.root_linvel[e].copy(), batch.root_angvel[e].copy()),
        q=batch.q[e].copy(),
        qd=batch.qd[e].copy(),
        body_frames=frames,
        last_joint_torques=batch.last_joint_torques[e].copy(),
        last_joint_acc=batch.last_joint_acc[e].copy(),
        fault=bool(batch.fault[e]),
    )


def step(
    morph: Morphology,
    state: SimState,
    setpoints: np.ndarray,
    cfg: SimConfig,
    root_wrench: Optional[np.ndarray] = None,
) -> SimState:
    """Single-environment convenience wrapper around SimBatch.step."""
    batch = SimBatch(morph, cfg, 1)
    batch.set_env(0, state.root, state.q, state.qd)
    batch.fault[0] = state.fault
    batch.step(setpoints[None], None if root_wrench is None else root_wrench[None])
    return read_state(batch, 0)
