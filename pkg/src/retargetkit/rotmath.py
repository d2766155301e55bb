"""SO(3) primitives: exponential/logarithm maps, geodesic error, swing-twist.

All functions accept batched inputs: vectors of shape (..., 3) and rotation
matrices of shape (..., 3, 3). Angles are in radians.
"""

from typing import NamedTuple

import numpy as np

# Below this angle the Rodrigues coefficients switch to their Taylor series
# to avoid dividing by a near-zero angle.
SMALL_ANGLE = 1e-8

# Orthonormality tolerance for validating matrices that arrive from outside
# (looser than the 1e-9 construction invariant to absorb accumulated
# floating-point drift in products of valid rotations).
ORTHONORMAL_TOL = 1e-6


def hat(v: np.ndarray) -> np.ndarray:
    """Skew-symmetric cross-product matrix of v, batched over leading dims."""
    v = np.asarray(v, dtype=float)
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    zeros = np.zeros_like(x)
    return np.stack(
        [zeros, -z, y, z, zeros, -x, -y, x, zeros], axis=-1
    ).reshape(v.shape + (3,))


def check_rotation_matrix(R: np.ndarray, tol: float = ORTHONORMAL_TOL) -> np.ndarray:
    """Validate that R is a proper rotation matrix (batched)."""
    R = np.asarray(R, dtype=float)
    if R.shape[-2:] != (3, 3):
        raise ValueError(f"expected (..., 3, 3) rotation matrix, got shape {R.shape}")
    if not np.all(np.isfinite(R)):
        raise ValueError("rotation matrix contains non-finite entries")
    eye = np.eye(3)
    err = np.abs(np.swapaxes(R, -1, -2) @ R - eye).max()
    if err > tol:
        raise ValueError(f"matrix is not orthonormal (max deviation {err:.3e})")
    if np.any(np.linalg.det(R) < 0.0):
        raise ValueError("matrix has negative determinant (improper rotation)")
    return R


def check_unit_vector(axis: np.ndarray, tol: float = 1e-8) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    n = np.linalg.norm(axis, axis=-1)
    if np.any(np.abs(n - 1.0) > tol):
        raise ValueError("axis must be a unit vector")
    return axis


def exp_map(v: np.ndarray) -> np.ndarray:
    """Rotation matrix for the rotation vector v (Rodrigues formula)."""
    v = np.asarray(v, dtype=float)
    if v.shape[-1] != 3:
        raise ValueError(f"expected (..., 3) rotation vector, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError("rotation vector contains non-finite entries")
    theta = np.linalg.norm(v, axis=-1)
    theta2 = theta * theta
    small = theta < SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    # sin(t)/t and (1-cos(t))/t^2 with Taylor fallbacks near zero
    a = np.where(small, 1.0 - theta2 / 6.0, np.sin(safe) / safe)
    b = np.where(small, 0.5 - theta2 / 24.0, (1.0 - np.cos(safe)) / (safe * safe))
    K = hat(v)
    eye = np.broadcast_to(np.eye(3), K.shape)
    return eye + a[..., None, None] * K + b[..., None, None] * (K @ K)


def log_map(R: np.ndarray) -> np.ndarray:
    """Canonical rotation vector of R, with norm <= pi.

    Stable both near the identity and near half-turn rotations.
    """
    R = check_rotation_matrix(R)
    trace = R[..., 0, 0] + R[..., 1, 1] + R[..., 2, 2]
    cos_theta = np.clip((trace - 1.0) * 0.5, -1.0, 1.0)
    theta = np.arccos(cos_theta)
    # Antisymmetric part carries axis * 2 sin(theta)
    w = np.stack(
        [
            R[..., 2, 1] - R[..., 1, 2],
            R[..., 0, 2] - R[..., 2, 0],
            R[..., 1, 0] - R[..., 0, 1],
        ],
        axis=-1,
    )
    sin_theta = np.sin(theta)
    small = theta < SMALL_ANGLE
    near_pi = theta > np.pi - 1e-4

    # Generic branch: v = theta / (2 sin(theta)) * w, with the Taylor limit
    # theta/(2 sin theta) -> 1/2 near zero.
    safe_sin = np.where(small | near_pi, 1.0, sin_theta)
    scale = np.where(small, 0.5 + theta * theta / 12.0, theta / (2.0 * safe_sin))
    v = scale[..., None] * w

    if np.any(near_pi):
        # Near pi the antisymmetric part vanishes; recover the axis from the
        # symmetric part: R + I = 2 (cos(t) I + (1-cos t) a a^T) approx 2 a a^T.
        Rp = np.asarray(R, dtype=float)
        B = 0.5 * (Rp + np.swapaxes(Rp, -1, -2)) + (1.0 - cos_theta)[..., None, None] * np.eye(3) - np.eye(3)
        # B = (1 - cos t) a a^T at this point; take the largest column.
        diag = np.stack([B[..., 0, 0], B[..., 1, 1], B[..., 2, 2]], axis=-1)
        k = np.argmax(diag, axis=-1)
        axis = np.take_along_axis(B, k[..., None, None], axis=-1)[..., 0]
        axis = axis / np.maximum(np.linalg.norm(axis, axis=-1, keepdims=True), 1e-30)
        # Fix the sign using the antisymmetric part when it is not exactly zero
        sign = np.where(np.sum(axis * w, axis=-1) < 0.0, -1.0, 1.0)
        v_pi = (sign * theta)[..., None] * axis
        v = np.where(near_pi[..., None], v_pi, v)
    return v


def geodesic_error(R_a: np.ndarray, R_b: np.ndarray) -> np.ndarray:
    """Shortest rotation vector taking R_a to R_b: Log(R_a^T R_b)."""
    R_a = check_rotation_matrix(R_a)
    R_b = check_rotation_matrix(R_b)
    return log_map(np.swapaxes(R_a, -1, -2) @ R_b)


class SwingTwist(NamedTuple):
    swing: np.ndarray
    twist: np.ndarray
    degenerate: np.ndarray


def quat_from_matrix(R: np.ndarray) -> np.ndarray:
    """Unit quaternion (w, x, y, z) of R, batched; w >= 0."""
    R = np.asarray(R, dtype=float)
    # Shepperd's method, branch selected per element for stability
    m00, m11, m22 = R[..., 0, 0], R[..., 1, 1], R[..., 2, 2]
    trace = m00 + m11 + m22
    q = np.empty(R.shape[:-2] + (4,))

    tw = np.sqrt(np.maximum(1.0 + trace, 0.0))
    tx = np.sqrt(np.maximum(1.0 + m00 - m11 - m22, 0.0))
    ty = np.sqrt(np.maximum(1.0 - m00 + m11 - m22, 0.0))
    tz = np.sqrt(np.maximum(1.0 - m00 - m11 + m22, 0.0))
    choice = np.argmax(np.stack([tw, tx, ty, tz], axis=-1), axis=-1)

    # Build all four candidates, then select (cheap at these sizes).
    cw = 0.5 * np.stack(
        [tw,
         np.divide(R[..., 2, 1] - R[..., 1, 2], tw, out=np.zeros_like(tw), where=tw > 0),
         np.divide(R[..., 0, 2] - R[..., 2, 0], tw, out=np.zeros_like(tw), where=tw > 0),
         np.divide(R[..., 1, 0] - R[..., 0, 1], tw, out=np.zeros_like(tw), where=tw > 0)],
        axis=-1,
    )
    cx = 0.5 * np.stack(
        [np.divide(R[..., 2, 1] - R[..., 1, 2], tx, out=np.zeros_like(tx), where=tx > 0),
         tx,
         np.divide(R[..., 0, 1] + R[..., 1, 0], tx, out=np.zeros_like(tx), where=tx > 0),
         np.divide(R[..., 0, 2] + R[..., 2, 0], tx, out=np.zeros_like(tx), where=tx > 0)],
        axis=-1,
    )
    cy = 0.5 * np.stack(
        [np.divide(R[..., 0, 2] - R[..., 2, 0], ty, out=np.zeros_like(ty), where=ty > 0),
         np.divide(R[..., 0, 1] + R[..., 1, 0], ty, out=np.zeros_like(ty), where=ty > 0),
         ty,
         np.divide(R[..., 1, 2] + R[..., 2, 1], ty, out=np.zeros_like(ty), where=ty > 0)],
        axis=-1,
    )
    cz = 0.5 * np.stack(
        [np.divide(R[..., 1, 0] - R[..., 0, 1], tz, out=np.zeros_like(tz), where=tz > 0),
         np.divide(R[..., 0, 2] + R[..., 2, 0], tz, out=np.zeros_like(tz), where=tz > 0),
         np.divide(R[..., 1, 2] + R[..., 2, 1], tz, out=np.zeros_like(tz), where=tz > 0),
         tz],
        axis=-1,
    )
    candidates = np.stack([cw, cx, cy, cz], axis=-2)
    q = np.take_along_axis(candidates, choice[..., None, None], axis=-2)[..., 0, :]
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    q = np.where(q[..., :1] < 0.0, -q, q)
    return q


def matrix_from_quat(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of a unit quaternion (w, x, y, z), batched."""
    q = np.asarray(q, dtype=float)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    return np.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ],
        axis=-1,
    ).reshape(q.shape[:-1] + (3, 3))


# Twist projections with |w| and |u| both below this are ambiguous
# (half-turn perpendicular to the axis).
TWIST_DEGENERATE_TOL = 1e-9


def swing_twist(R: np.ndarray, axis: np.ndarray) -> SwingTwist:
    """Decompose R = swing @ twist, twist a rotation about `axis`.

    At the half-turn-perpendicular degeneracy the twist is ambiguous; there
    the twist is the identity and the degenerate flag is set.
    """
    R = check_rotation_matrix(R)
    axis = check_unit_vector(axis)
    q = quat_from_matrix(R)
    w = q[..., 0]
    u = np.sum(q[..., 1:] * axis, axis=-1)
    n = np.sqrt(w * w + u * u)
    degenerate = n < TWIST_DEGENERATE_TOL

    safe_n = np.where(degenerate, 1.0, n)
    tw = np.where(degenerate, 1.0, w / safe_n)
    tu = np.where(degenerate, 0.0, u / safe_n)
    q_twist = np.concatenate(
        [tw[..., None], tu[..., None] * np.broadcast_to(axis, tw.shape + (3,))], axis=-1
    )
    twist = matrix_from_quat(q_twist)
    swing = R @ np.swapaxes(twist, -1, -2)
    return SwingTwist(swing=swing, twist=twist, degenerate=degenerate)


def twist_angle(R: np.ndarray, axis: np.ndarray) -> np.ndarray:
    """Signed rotation angle of the twist component of R about `axis`."""
    q = quat_from_matrix(np.asarray(R, dtype=float))
    w = q[..., 0]
    u = np.sum(q[..., 1:] * axis, axis=-1)
    return 2.0 * np.arctan2(u, w)


def swing_angle(R: np.ndarray, axis: np.ndarray) -> np.ndarray:
    """Rotation angle of the swing component of R about `axis` (>= 0)."""
    q = quat_from_matrix(np.asarray(R, dtype=float))
    w = q[..., 0]
    u = np.sum(q[..., 1:] * axis, axis=-1)
    n = np.sqrt(np.clip(w * w + u * u, 0.0, 1.0))
    s = np.sqrt(np.clip(1.0 - n * n, 0.0, None))
    return 2.0 * np.arctan2(s, n)


def right_jacobian(v: np.ndarray) -> np.ndarray:
    """Right Jacobian of the SO(3) exponential at v.

    Satisfies Exp(v + dv) approx Exp(v) Exp(J_r(v) dv).
    """
    v = np.asarray(v, dtype=float)
    theta = np.linalg.norm(v, axis=-1)
    theta2 = theta * theta
    small = theta < SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    # (1 - cos t)/t^2 and (t - sin t)/t^3 with Taylor fallbacks
    a = np.where(small, 0.5 - theta2 / 24.0, (1.0 - np.cos(safe)) / (safe * safe))
    b = np.where(
        small, 1.0 / 6.0 - theta2 / 120.0, (safe - np.sin(safe)) / (safe ** 3)
    )
    K = hat(v)
    eye = np.broadcast_to(np.eye(3), K.shape)
    return eye - a[..., None, None] * K + b[..., None, None] * (K @ K)
