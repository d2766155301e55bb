"""Articulated characters: structure definition, forward kinematics, calibration.

Conventions: z-up right-handed world, x-forward nominal heading, lengths in
meters, angles in radians, mass in kg. A body's frame coincides with its
parent joint's frame after the joint rotation; the root body's frame is the
floating-base pose.
"""

import json
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import rotmath
from .frames import Frame


@dataclass(frozen=True)
class CollisionShape:
    """Sphere or capsule in body-local coordinates."""

    kind: str  # "sphere" | "capsule"
    radius: float
    center: Optional[np.ndarray] = None  # sphere
    p0: Optional[np.ndarray] = None  # capsule endpoints
    p1: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind not in ("sphere", "capsule"):
            raise ValueError(f"unknown collision shape kind {self.kind!r}")
        if self.radius <= 0.0:
            raise ValueError("collision radius must be positive")
        if self.kind == "sphere":
            object.__setattr__(self, "center", np.asarray(self.center, dtype=float))
        else:
            object.__setattr__(self, "p0", np.asarray(self.p0, dtype=float))
            object.__setattr__(self, "p1", np.asarray(self.p1, dtype=float))

    def local_points(self) -> list[tuple[np.ndarray, float]]:
        """Candidate contact points as (body-frame point, radius) tuples."""
        if self.kind == "sphere":
            return [(self.center, self.radius)]
        return [(self.p0, self.radius), (self.p1, self.radius)]


@dataclass(frozen=True)
class BodySpec:
    name: str
    parent_joint: Optional[str]  # None for the root body
    mass: float
    inertia: np.ndarray  # 3x3, body frame, about the COM
    com_offset: np.ndarray = field(default_factory=lambda: np.zeros(3))
    collision: tuple[CollisionShape, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "inertia", np.asarray(self.inertia, dtype=float))
        object.__setattr__(self, "com_offset", np.asarray(self.com_offset, dtype=float))
        object.__setattr__(self, "collision", tuple(self.collision))
        if self.mass <= 0.0:
            raise ValueError(f"body {self.name!r}: mass must be positive")
        if np.abs(self.inertia - self.inertia.T).max() > 1e-12:
            raise ValueError(f"body {self.name!r}: inertia must be symmetric")
        if np.any(np.linalg.eigvalsh(self.inertia) <= 0.0):
            raise ValueError(f"body {self.name!r}: inertia must be positive definite")


@dataclass(frozen=True)
class JointSpec:
    """Revolute joint; the floating base supplies the 6 root DoF."""

    name: str
    parent_body: str
    child_body: str
    axis: np.ndarray  # unit vector, parent frame
    origin_pos: np.ndarray = field(default_factory=lambda: np.zeros(3))
    origin_rot: np.ndarray = field(default_factory=lambda: np.eye(3))
    limits: tuple[float, float] = (-np.pi, np.pi)
    torque_limit: float = 100.0
    kp: float = 60.0
    kd: float = 2.0

    def __post_init__(self):
        object.__setattr__(self, "axis", rotmath.check_unit_vector(self.axis))
        object.__setattr__(self, "origin_pos", np.asarray(self.origin_pos, dtype=float))
        object.__setattr__(self, "origin_rot", np.asarray(self.origin_rot, dtype=float))
        if not self.limits[0] < self.limits[1]:
            raise ValueError(f"joint {self.name!r}: limits must satisfy lo < hi")
        if self.torque_limit <= 0.0:
            raise ValueError(f"joint {self.name!r}: torque_limit must be positive")
        if self.kp < 0.0 or self.kd < 0.0:
            raise ValueError(f"joint {self.name!r}: PD gains must be nonnegative")


class Morphology:
    """Immutable articulated character rooted at a floating base."""

    def __init__(
        self,
        bodies: list[BodySpec],
        joints: list[JointSpec],
        root_body: str,
        contact_bodies: list[str],
        nominal_q: np.ndarray,
        nominal_root: Frame,
    ):
        self.bodies = tuple(bodies)
        self.root_body = root_body
        self.contact_bodies = tuple(contact_bodies)
        self.nominal_q = np.asarray(nominal_q, dtype=float)
        self.nominal_root = nominal_root.copy()

        self.body_names = [b.name for b in self.bodies]
        self.body_index = {name: i for i, name in enumerate(self.body_names)}
        if len(self.body_index) != len(self.bodies):
            raise ValueError("duplicate body names")
        if root_body not in self.body_index:
            raise ValueError(f"unknown root body {root_body!r}")
        for c in contact_bodies:
            if c not in self.body_index:
                raise ValueError(f"unknown contact body {c!r}")

        roots = [b.name for b in self.bodies if b.parent_joint is None]
        if roots != [root_body] and set(roots) != {root_body}:
            raise ValueError(
                f"exactly the root body must have no parent joint (found {roots})"
            )

        # Order joints topologically from the root so FK is independent of
        # the input joint ordering. Joint index in the declared list defines
        # the q layout; the traversal order is stored separately.
        self.joints = tuple(joints)
        self.joint_names = [j.name for j in self.joints]
        self.joint_index = {name: i for i, name in enumerate(self.joint_names)}
        if len(self.joint_index) != len(self.joints):
            raise ValueError("duplicate joint names")
        if len(self.nominal_q) != len(self.joints):
            raise ValueError("nominal_q length does not match joint count")

        joint_of_body = {}
        for j in self.joints:
            for b in (j.parent_body, j.child_body):
                if b not in self.body_index:
                    raise ValueError(f"joint {j.name!r} references unknown body {b!r}")
            if j.child_body in joint_of_body:
                raise ValueError(f"body {j.child_body!r} has multiple parent joints")
            joint_of_body[j.child_body] = j
        for b in self.bodies:
            if b.name == root_body:
                continue
            if b.parent_joint is None or b.parent_joint not in self.joint_index:
                raise ValueError(f"body {b.name!r} has no valid parent joint")
            if joint_of_body.get(b.name) is None or joint_of_body[b.name].name != b.parent_joint:
                raise ValueError(
                    f"body {b.name!r}: parent_joint does not match joint definitions"
                )

        # Breadth-first traversal from the root; detects cycles/disconnection.
        children: dict[str, list[JointSpec]] = {b.name: [] for b in self.bodies}
        for j in self.joints:
            children[j.parent_body].append(j)
        order: list[JointSpec] = []
        visited = {root_body}
        queue = [root_body]
        while queue:
            b = queue.pop(0)
            for j in sorted(children[b], key=lambda jj: jj.name):
                if j.child_body in visited:
                    raise ValueError("joint graph contains a cycle")
                visited.add(j.child_body)
                order.append(j)
                queue.append(j.child_body)
        if len(visited) != len(self.bodies):
            missing = set(self.body_names) - visited
            raise ValueError(f"bodies not connected to the root: {sorted(missing)}")
        self.traversal = tuple(order)

        lo = np.array([j.limits[0] for j in self.joints])
        hi = np.array([j.limits[1] for j in self.joints])
        if np.any(self.nominal_q < lo) or np.any(self.nominal_q > hi):
            raise ValueError("nominal_q violates joint limits")
        self.joint_limits_lo = lo
        self.joint_limits_hi = hi
        self.torque_limits = np.array([j.torque_limit for j in self.joints])
        self.kp = np.array([j.kp for j in self.joints])
        self.kd = np.array([j.kd for j in self.joints])

    @property
    def n_joints(self) -> int:
        return len(self.joints)

    @property
    def n_bodies(self) -> int:
        return len(self.bodies)

    def collision_points(self, body: str) -> list[tuple[np.ndarray, float]]:
        return [
            pt
            for shape in self.bodies[self.body_index[body]].collision
            for pt in shape.local_points()
        ]


def fk_arrays(
    morph: Morphology,
    q: np.ndarray,
    root_pos: np.ndarray,
    root_rot: np.ndarray,
    qd: Optional[np.ndarray] = None,
    root_linvel: Optional[np.ndarray] = None,
    root_angvel: Optional[np.ndarray] = None,
):
    """Batched forward kinematics.

    q has shape (..., n_joints); root_pos (..., 3); root_rot (..., 3, 3).
    Returns (pos, rot, linvel, angvel) with a body axis inserted before the
    coordinate axes: pos has shape (..., n_bodies, 3). Velocities are of the
    body-frame origins; zero root twist and qd are assumed when omitted.
    """
    q = np.asarray(q, dtype=float)
    if q.shape[-1] != morph.n_joints:
        raise ValueError(
            f"q has {q.shape[-1]} entries, morphology has {morph.n_joints} joints"
        )
    batch = q.shape[:-1]
    root_pos = np.broadcast_to(np.asarray(root_pos, dtype=float), batch + (3,))
    root_rot = np.broadcast_to(np.asarray(root_rot, dtype=float), batch + (3, 3))
    if qd is None:
        qd = np.zeros_like(q)
    qd = np.broadcast_to(np.asarray(qd, dtype=float), q.shape)
    if root_linvel is None:
        root_linvel = np.zeros(3)
    if root_angvel is None:
        root_angvel = np.zeros(3)
    root_linvel = np.broadcast_to(np.asarray(root_linvel, dtype=float), batch + (3,))
    root_angvel = np.broadcast_to(np.asarray(root_angvel, dtype=float), batch + (3,))

    B = morph.n_bodies
    pos = np.zeros(batch + (B, 3))
    rot = np.zeros(batch + (B, 3, 3))
    linvel = np.zeros(batch + (B, 3))
    angvel = np.zeros(batch + (B, 3))

    ri = morph.body_index[morph.root_body]
    pos[..., ri, :] = root_pos
    rot[..., ri, :, :] = root_rot
    linvel[..., ri, :] = root_linvel
    angvel[..., ri, :] = root_angvel

    for joint in morph.traversal:
        ji = morph.joint_index[joint.name]
        pi = morph.body_index[joint.parent_body]
        ci = morph.body_index[joint.child_body]
        Rp = rot[..., pi, :, :]
        xp = pos[..., pi, :]
        anchor = xp + (Rp @ joint.origin_pos)
        axis_world = (Rp @ joint.origin_rot) @ joint.axis
        Rj = rotmath.exp_map(q[..., ji, None] * axis_world)
        rot[..., ci, :, :] = Rj @ Rp @ joint.origin_rot
        pos[..., ci, :] = anchor
        # Rigid propagation of the parent twist to the anchor, plus the
        # joint's own angular rate about the world axis.
        wp = angvel[..., pi, :]
        linvel[..., ci, :] = linvel[..., pi, :] + np.cross(wp, anchor - xp)
        angvel[..., ci, :] = wp + qd[..., ji, None] * axis_world
    return pos, rot, linvel, angvel


def forward_kinematics(
    morph: Morphology,
    q: np.ndarray,
    root: Frame,
    qd: Optional[np.ndarray] = None,
) -> dict[str, Frame]:
    """World frame of every body given joint positions and the root pose."""
    pos, rot, linvel, angvel = fk_arrays(
        morph, q, root.pos, root.rot, qd=qd,
        root_linvel=root.linvel, root_angvel=root.angvel,
    )
    return {
        name: Frame(pos[i], rot[i], linvel[i], angvel[i])
        for name, i in morph.body_index.items()
    }


@dataclass(frozen=True)
class CorrespondencePair:
    """A user-declared semantic match between a source and a target body."""

    source_body: str
    target_body: str
    orientation_mode: str = "full"  # "full" | "swing" | "twist"
    twist_axis: Optional[np.ndarray] = None  # target body frame
    is_root: bool = False

    def __post_init__(self):
        if self.orientation_mode not in ("full", "swing", "twist"):
            raise ValueError(f"unknown orientation mode {self.orientation_mode!r}")
        if self.orientation_mode == "full":
            if self.twist_axis is not None:
                raise ValueError("twist_axis only applies to swing/twist modes")
        else:
            if self.twist_axis is None:
                raise ValueError("swing/twist modes require a twist_axis")
            object.__setattr__(
                self, "twist_axis", rotmath.check_unit_vector(self.twist_axis)
            )


def validate_pairs(
    pairs: list[CorrespondencePair], source: Morphology, target: Morphology
) -> None:
    roots = [p for p in pairs if p.is_root]
    if len(roots) != 1:
        raise ValueError(f"exactly one correspondence pair must have is_root=true, found {len(roots)}")
    for p in pairs:
        if p.source_body not in source.body_index:
            raise ValueError(f"pair references unknown source body {p.source_body!r}")
        if p.target_body not in target.body_index:
            raise ValueError(f"pair references unknown target body {p.target_body!r}")


def root_pair_index(pairs: list[CorrespondencePair]) -> int:
    for i, p in enumerate(pairs):
        if p.is_root:
            return i
    raise ValueError("no root pair in correspondence set")


@dataclass(frozen=True)
class Calibration:
    """Global scale plus per-pair nominal offsets from source to target frames."""

    s: float
    pair_names: tuple[str, ...]  # "source:target" labels, calibration order
    x_nom: np.ndarray  # (P, 3)
    R_nom: np.ndarray  # (P, 3, 3)

    def __post_init__(self):
        object.__setattr__(self, "pair_names", tuple(self.pair_names))
        object.__setattr__(self, "x_nom", np.asarray(self.x_nom, dtype=float))
        object.__setattr__(self, "R_nom", np.asarray(self.R_nom, dtype=float))
        if self.s <= 0.0:
            raise ValueError("global scale must be positive")

    @property
    def n_pairs(self) -> int:
        return len(self.pair_names)


def pair_label(pair: CorrespondencePair) -> str:
    return f"{pair.source_body}:{pair.target_body}"


def calibrate(
    source: Morphology, target: Morphology, pairs: list[CorrespondencePair]
) -> Calibration:
    """Extract the global scale and per-pair nominal transforms.

    Both morphologies are posed in their nominal configuration; the offset
    from the scaled source frame to the target frame is expressed in the
    source's local coordinate frame.
    """
    validate_pairs(pairs, source, target)

    h_source = source.nominal_root.pos[2]
    h_target = target.nominal_root.pos[2]
    if h_source <= 0.0:
        raise ValueError("source nominal root height must be positive")
    s = h_target / h_source

    # The nominal configurations are assumed coarsely aligned; validate only
    # that both roots face the same nominal heading (x-forward).
    fwd_s = source.nominal_root.rot @ np.array([1.0, 0.0, 0.0])
    fwd_t = target.nominal_root.rot @ np.array([1.0, 0.0, 0.0])
    if np.dot(fwd_s[:2], fwd_t[:2]) < np.cos(np.deg2rad(30.0)) * max(
        np.linalg.norm(fwd_s[:2]) * np.linalg.norm(fwd_t[:2]), 1e-12
    ):
        warnings.warn(
            "source and target nominal headings differ; calibration assumes "
            "coarsely aligned nominal configurations",
            stacklevel=2,
        )

    src_frames = forward_kinematics(source, source.nominal_q, source.nominal_root)
    tgt_frames = forward_kinematics(target, target.nominal_q, target.nominal_root)

    x_nom = np.zeros((len(pairs), 3))
    R_nom = np.zeros((len(pairs), 3, 3))
    names = []
    for i, p in enumerate(pairs):
        fs = src_frames[p.source_body]
        ft = tgt_frames[p.target_body]
        x_nom[i] = fs.rot.T @ (ft.pos - s * fs.pos)
        R_nom[i] = fs.rot.T @ ft.rot
        names.append(pair_label(p))
    return Calibration(s=s, pair_names=tuple(names), x_nom=x_nom, R_nom=R_nom)


# ---------------------------------------------------------------------------
# JSON serialization


def _shape_to_dict(shape: CollisionShape) -> dict:
    d = {"kind": shape.kind, "radius": shape.radius}
    if shape.kind == "sphere":
        d["center"] = shape.center.tolist()
    else:
        d["p0"] = shape.p0.tolist()
        d["p1"] = shape.p1.tolist()
    return d


def _shape_from_dict(d: dict) -> CollisionShape:
    return CollisionShape(
        kind=d["kind"],
        radius=d["radius"],
        center=d.get("center"),
        p0=d.get("p0"),
        p1=d.get("p1"),
    )


def morphology_to_dict(morph: Morphology) -> dict:
    return {
        "bodies": [
            {
                "name": b.name,
                "parent_joint": b.parent_joint,
                "mass": b.mass,
                "inertia": b.inertia.tolist(),
                "com_offset": b.com_offset.tolist(),
                "collision": [_shape_to_dict(s) for s in b.collision],
            }
            for b in morph.bodies
        ],
        "joints": [
            {
                "name": j.name,
                "parent_body": j.parent_body,
                "child_body": j.child_body,
                "axis": j.axis.tolist(),
                "origin_pos": j.origin_pos.tolist(),
                "origin_rot": rotmath.quat_from_matrix(j.origin_rot).tolist(),
                "limits": list(j.limits),
                "torque_limit": j.torque_limit,
                "kp": j.kp,
                "kd": j.kd,
            }
            for j in morph.joints
        ],
        "root_body": morph.root_body,
        "contact_bodies": list(morph.contact_bodies),
        "nominal_q": morph.nominal_q.tolist(),
        "nominal_root": {
            "pos": morph.nominal_root.pos.tolist(),
            "quat": rotmath.quat_from_matrix(morph.nominal_root.rot).tolist(),
        },
    }


def morphology_from_dict(d: dict) -> Morphology:
    bodies = [
        BodySpec(
            name=b["name"],
            parent_joint=b.get("parent_joint"),
            mass=b["mass"],
            inertia=b["inertia"],
            com_offset=b.get("com_offset", np.zeros(3)),
            collision=[_shape_from_dict(s) for s in b.get("collision", [])],
        )
        for b in d["bodies"]
    ]
    joints = [
        JointSpec(
            name=j["name"],
            parent_body=j["parent_body"],
            child_body=j["child_body"],
            axis=j["axis"],
            origin_pos=j.get("origin_pos", np.zeros(3)),
            origin_rot=rotmath.matrix_from_quat(np.asarray(j["origin_rot"]))
            if "origin_rot" in j
            else np.eye(3),
            limits=tuple(j.get("limits", (-np.pi, np.pi))),
            torque_limit=j.get("torque_limit", 100.0),
            kp=j.get("kp", 60.0),
            kd=j.get("kd", 2.0),
        )
        for j in d["joints"]
    ]
    nr = d["nominal_root"]
    return Morphology(
        bodies=bodies,
        joints=joints,
        root_body=d["root_body"],
        contact_bodies=d.get("contact_bodies", []),
        nominal_q=np.asarray(d["nominal_q"], dtype=float),
        nominal_root=Frame(
            pos=np.asarray(nr["pos"], dtype=float),
            rot=rotmath.matrix_from_quat(np.asarray(nr["quat"])),
        ),
    )


def load_morphology(path) -> Morphology:
    with open(path) as f:
        return morphology_from_dict(json.load(f))


def save_morphology(morph: Morphology, path) -> None:
    with open(path, "w") as f:
        json.dump(morphology_to_dict(morph), f, indent=2)


def pairs_to_list(pairs: list[CorrespondencePair]) -> list[dict]:
    out = []
    for p in pairs:
        d = {
            "source": p.source_body,
            "target": p.target_body,
            "orientation_mode": p.orientation_mode,
            "is_root": p.is_root,
        }
        if p.twist_axis is not None:
            d["twist_axis"] = p.twist_axis.tolist()
        out.append(d)
    return out


def pairs_from_list(items: list[dict]) -> list[CorrespondencePair]:
    return [
        CorrespondencePair(
            source_body=d["source"],
            target_body=d["target"],
            orientation_mode=d.get("orientation_mode", "full"),
            twist_axis=np.asarray(d["twist_axis"], dtype=float)
            if d.get("twist_axis") is not None
            else None,
            is_root=d.get("is_root", False),
        )
        for d in items
    ]


def load_pairs(path) -> list[CorrespondencePair]:
    with open(path) as f:
        return pairs_from_list(json.load(f))


def save_pairs(pairs: list[CorrespondencePair], path) -> None:
    with open(path, "w") as f:
        json.dump(pairs_to_list(pairs), f, indent=2)


def calibration_to_dict(cal: Calibration) -> dict:
    return {
        "s": cal.s,
        "pairs": [
            {"name": n, "x_nom": cal.x_nom[i].tolist(),
             "R_nom_quat": rotmath.quat_from_matrix(cal.R_nom[i]).tolist()}
            for i, n in enumerate(cal.pair_names)
        ],
    }


def calibration_from_dict(d: dict) -> Calibration:
    names = [p["name"] for p in d["pairs"]]
    x_nom = np.array([p["x_nom"] for p in d["pairs"]], dtype=float).reshape(len(names), 3)
    R_nom = np.array(
        [rotmath.matrix_from_quat(np.asarray(p["R_nom_quat"])) for p in d["pairs"]]
    ).reshape(len(names), 3, 3)
    return Calibration(s=d["s"], pair_names=tuple(names), x_nom=x_nom, R_nom=R_nom)


def load_calibration(path) -> Calibration:
    with open(path) as f:
        return calibration_from_dict(json.load(f))


def save_calibration(cal: Calibration, path) -> None:
    with open(path, "w") as f:
        json.dump(calibration_to_dict(cal), f, indent=2)
