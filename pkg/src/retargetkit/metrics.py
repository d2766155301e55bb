"""Kinematic quality audit of motion trajectories.

Evaluates ground penetration, self-penetration, foot sliding, and foot
floating for trajectories stored in the motion-clip format, plus dataset
aggregation (mean, population std, min, max of per-motion means).

Conventions:
- Penetration uses a strict ``depth > 0.01 m`` violation threshold; per
  violating frame the maximum depth is recorded and depths are averaged
  over violating frames only.
- Foot sliding is horizontal-only (tangential phenomenon).
- Reported depths/heights are centimeters, sliding is cm/s.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .morphology import Morphology
from .refmap import SourceMotionClip

PENETRATION_THRESHOLD_M = 0.01
DEFAULT_H_THRESH_M = 0.05
DEFAULT_V_THRESH_MS = 0.15


# ---------------------------------------------------------------------------
# Geometry helpers


def _world_points(clip: SourceMotionClip, morph: Morphology,
                  body_names: Sequence[str]):
    """World positions and radii of every collision point on `body_names`.

    Returns (points (T, N, 3), radii (N,), owner (N,) body index into
    body_names). Capsules contribute both endpoints; because a segment is
    linear, its lowest world point is always one of its endpoints.
    """
    pts, radii, owner = [], [], []
    T = clip.pos.shape[0]
    for k, name in enumerate(body_names):
        bi = clip.body_idx(name)
        body = morph.bodies[morph.body_index[name]]
        for shape in body.collision:
            for local, r in shape.local_points():
                world = clip.pos[:, bi] + np.einsum(
                    "tij,j->ti", clip.rot[:, bi], local)
                pts.append(world)
                radii.append(r)
                owner.append(k)
    if not pts:
        return np.zeros((T, 0, 3)), np.zeros(0), np.zeros(0, dtype=int)
    return (np.stack(pts, axis=1), np.asarray(radii),
            np.asarray(owner, dtype=int))


def _segment_points(clip: SourceMotionClip, morph: Morphology):
    """Per-body collision primitives as world segments for pair queries.

    Returns a list of (body_index_in_morph, a (T,3), b (T,3), radius);
    spheres are degenerate segments with a == b.
    """
    prims = []
    for body in morph.bodies:
        bi = clip.body_idx(body.name)
        pos, rot = clip.pos[:, bi], clip.rot[:, bi]
        for shape in body.collision:
            if shape.kind == "sphere":
                a = pos + np.einsum("tij,j->ti", rot, shape.center)
                prims.append((morph.body_index[body.name], a, a, shape.radius))
            else:
                a = pos + np.einsum("tij,j->ti", rot, shape.p0)
                b = pos + np.einsum("tij,j->ti", rot, shape.p1)
                prims.append((morph.body_index[body.name], a, b, shape.radius))
    return prims


def _segment_distance(p0, p1, q0, q1):
    """Minimum distance between segments [p0,p1] and [q0,q1], batched (T,3)."""
    d1 = p1 - p0
    d2 = q1 - q0
    r = p0 - q0
    a = np.einsum("ti,ti->t", d1, d1)
    e = np.einsum("ti,ti->t", d2, d2)
    f = np.einsum("ti,ti->t", d2, r)
    c = np.einsum("ti,ti->t", d1, r)
    b = np.einsum("ti,ti->t", d1, d2)
    denom = a * e - b * b
    # Clamped closed-form closest parameters; degenerate segments fall back
    # to point projections through the np.where branches below.
    s = np.where(denom > 1e-12, np.clip((b * f - c * e) / np.where(
        denom > 1e-12, denom, 1.0), 0.0, 1.0), 0.0)
    t = np.where(e > 1e-12, np.clip((b * s + f) / np.where(
        e > 1e-12, e, 1.0), 0.0, 1.0), 0.0)
    s = np.where(a > 1e-12, np.clip((b * t - c) / np.where(
        a > 1e-12, a, 1.0), 0.0, 1.0), 0.0)
    closest1 = p0 + s[:, None] * d1
    closest2 = q0 + t[:, None] * d2
    return np.linalg.norm(closest1 - closest2, axis=-1)


# ---------------------------------------------------------------------------
# Contact estimation


@dataclass
class ContactEstimate:
    """Per-frame boolean in-contact flags for each contact body."""

    body_names: list[str]
    in_contact: np.ndarray  # (T, F) bool

    def __post_init__(self):
        self.in_contact = np.asarray(self.in_contact, dtype=bool)
        if self.in_contact.ndim != 2 or \
                self.in_contact.shape[1] != len(self.body_names):
            raise ValueError("in_contact must be (frames, contact bodies)")


def estimate_reference_contacts(
        clip: SourceMotionClip, morph: Morphology,
        h_thresh: float = DEFAULT_H_THRESH_M,
        v_thresh: float = DEFAULT_V_THRESH_MS) -> ContactEstimate:
    """Height/velocity heuristic: a contact body is in contact on frames
    where its lowest collision point is below `h_thresh` and its speed is
    below `v_thresh`."""
    if not morph.contact_bodies:
        raise ValueError("morphology declares no contact bodies")
    names = list(morph.contact_bodies)
    T = clip.pos.shape[0]
    flags = np.zeros((T, len(names)), dtype=bool)
    for k, name in enumerate(names):
        pts, radii, _ = _world_points(clip, morph, [name])
        lowest = np.min(pts[..., 2] - radii[None, :], axis=1)
        speed = np.linalg.norm(clip.linvel[:, clip.body_idx(name)], axis=-1)
        flags[:, k] = (lowest < h_thresh) & (speed < v_thresh)
    return ContactEstimate(names, flags)


# ---------------------------------------------------------------------------
# Penetration metrics


def _penetration_stats(depths: np.ndarray):
    """(time fraction, mean of per-frame max depth over violating frames)
    from per-frame candidate depths (T, N); strict `> 0.01 m`."""
    if depths.size == 0:
        return 0.0, 0.0
    per_frame = np.max(depths, axis=1)
    violating = per_frame > PENETRATION_THRESHOLD_M
    fraction = float(np.mean(violating))
    depth = float(np.mean(per_frame[violating])) if np.any(violating) else 0.0
    return fraction, depth


def ground_penetration(traj: SourceMotionClip, morph: Morphology):
    """Fraction of frames where any collision point dips more than 0.01 m
    below ground, and the mean (over violating frames) of the per-frame
    maximum depth in meters."""
    pts, radii, _ = _world_points(traj, morph, morph.body_names)
    depths = radii[None, :] - pts[..., 2]
    return _penetration_stats(depths)


def self_penetration(traj: SourceMotionClip, morph: Morphology):
    """Sphere/capsule interpenetration among body pairs that are not
    adjacent in the joint tree (parent/child and same-body pairs ignored);
    aggregated like ground_penetration."""
    adjacent = {frozenset((j.parent_body, j.child_body))
                for j in morph.joints}
    prims = _segment_points(traj, morph)
    T = traj.pos.shape[0]
    depths = []
    for i in range(len(prims)):
        bi, a0, a1, ri = prims[i]
        for j in range(i + 1, len(prims)):
            bj, b0, b1, rj = prims[j]
            if bi == bj:
                continue
            pair = frozenset((morph.body_names[bi], morph.body_names[bj]))
            if pair in adjacent:
                continue
            dist = _segment_distance(a0, a1, b0, b1)
            depths.append(ri + rj - dist)
    if not depths:
        return 0.0, 0.0
    return _penetration_stats(np.stack(depths, axis=1))


# ---------------------------------------------------------------------------
# Foot metrics


def _check_alignment(traj: SourceMotionClip, contacts: ContactEstimate,
                     feet: Sequence[str]):
    if contacts.in_contact.shape[0] != traj.pos.shape[0]:
        raise ValueError("contact estimate is not time-aligned with the "
                         "trajectory")
    if contacts.in_contact.shape[1] != len(feet):
        raise ValueError("contact estimate covers a different number of "
                         "contact bodies than the trajectory morphology")


def foot_sliding(traj: SourceMotionClip, morph: Morphology,
                 contacts: ContactEstimate):
    """Mean horizontal speed (m/s) of feet over in-contact (frame, foot)
    pairs. Returns (value, no_contact_flag); no contacts → (0.0, True)."""
    feet = list(morph.contact_bodies)
    _check_alignment(traj, contacts, feet)
    mask = contacts.in_contact
    if not np.any(mask):
        return 0.0, True
    speeds = np.stack(
        [np.linalg.norm(traj.linvel[:, traj.body_idx(f), :2], axis=-1)
         for f in feet], axis=1)
    return float(np.mean(speeds[mask])), False


def foot_floating(traj: SourceMotionClip, morph: Morphology,
                  contacts: ContactEstimate):
    """Mean one-sided ground clearance (m) of feet over in-contact
    (frame, foot) pairs; penetration contributes zero."""
    feet = list(morph.contact_bodies)
    _check_alignment(traj, contacts, feet)
    mask = contacts.in_contact
    if not np.any(mask):
        return 0.0, True
    heights = np.zeros_like(mask, dtype=float)
    for k, name in enumerate(feet):
        pts, radii, _ = _world_points(traj, morph, [name])
        heights[:, k] = np.min(pts[..., 2] - radii[None, :], axis=1)
    return float(np.mean(np.maximum(0.0, heights[mask]))), False


# ---------------------------------------------------------------------------
# Reports


@dataclass
class MetricsReport:
    """Per-motion kinematic quality summary (depths/heights in cm)."""

    motion_id: str
    ground_pen_fraction: float
    ground_pen_depth_cm: float
    self_pen_fraction: float
    self_pen_depth_cm: float
    foot_slide_cm_s: float
    foot_float_cm: float
    no_contact: bool = False

    def __post_init__(self):
        for frac in (self.ground_pen_fraction, self.self_pen_fraction):
            if not 0.0 <= frac <= 1.0:
                raise ValueError("time fractions must lie in [0, 1]")
        for depth in (self.ground_pen_depth_cm, self.self_pen_depth_cm,
                      self.foot_float_cm):
            if depth < 0.0:
                raise ValueError("depths must be non-negative")


METRIC_FIELDS = ["ground_pen_fraction", "ground_pen_depth_cm",
                 "self_pen_fraction", "self_pen_depth_cm",
                 "foot_slide_cm_s", "foot_float_cm"]


def evaluate_motion(traj: SourceMotionClip, morph: Morphology,
                    contacts: ContactEstimate) -> MetricsReport:
    """All four kinematic metrics for one trajectory."""
    g_frac, g_depth = ground_penetration(traj, morph)
    s_frac, s_depth = self_penetration(traj, morph)
    slide, flag_a = foot_sliding(traj, morph, contacts)
    hover, flag_b = foot_floating(traj, morph, contacts)
    return MetricsReport(
        motion_id=traj.id,
        ground_pen_fraction=g_frac, ground_pen_depth_cm=g_depth * 100.0,
        self_pen_fraction=s_frac, self_pen_depth_cm=s_depth * 100.0,
        foot_slide_cm_s=slide * 100.0, foot_float_cm=hover * 100.0,
        no_contact=flag_a or flag_b,
    )


def aggregate(reports: Sequence[MetricsReport]) -> dict[str, dict[str, float]]:
    """Dataset summary: mean, population std, min, max of every per-motion
    metric."""
    if not reports:
        raise ValueError("aggregate requires at least one report")
    summary = {}
    for name in METRIC_FIELDS:
        vals = np.array([getattr(r, name) for r in reports], dtype=float)
        summary[name] = {
            "mean": float(np.mean(vals)),
            "std": float(np.std(vals)),
            "min": float(np.min(vals)),
            "max": float(np.max(vals)),
        }
    return summary


def write_report_csv(path, reports: Sequence[MetricsReport]) -> None:
    """One row per motion plus an aggregate mean/std/min/max block."""
    summary = aggregate(reports)
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["motion_id"] + METRIC_FIELDS + ["no_contact"])
        for r in reports:
            writer.writerow([r.motion_id]
                            + [repr(getattr(r, m)) for m in METRIC_FIELDS]
                            + [int(r.no_contact)])
        for stat in ("mean", "std", "min", "max"):
            writer.writerow([stat]
                            + [repr(summary[m][stat]) for m in METRIC_FIELDS]
                            + [""])


def format_report(reports: Sequence[MetricsReport]) -> str:
    """Human-readable table of per-motion metrics and the aggregate row."""
    summary = aggregate(reports)
    header = f"{'motion':<16}" + "".join(f"{m:>22}" for m in METRIC_FIELDS)
    lines = [header]
    for r in reports:
        row = f"{r.motion_id:<16}" + "".join(
            f"{getattr(r, m):>22.4f}" for m in METRIC_FIELDS)
        if r.no_contact:
            row += "  [no-contact]"
        lines.append(row)
    lines.append("-" * len(header))
    for stat in ("mean", "std", "min", "max"):
        lines.append(f"{stat:<16}" + "".join(
            f"{summary[m][stat]:>22.4f}" for m in METRIC_FIELDS))
    return "\n".join(lines)
