"""Quaternion kinematics: segment orientation, inertial signal synthesis,
and closed-form attitude recovery.

Quaternions are scalar-first ``(w, x, y, z)`` and map body-frame vectors to
world-frame vectors. All functions broadcast over leading axes, so a series
of N orientations is simply an (N, 4) array.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import (
    CollinearMarkers,
    ConfigInvalid,
    CopFrame,
    CopSeries,
    DegenerateObservations,
    ParseError,
    SensorId,
    SeriesTooShort,
    WrongFrame,
    quat_normalize,
)

MIN_TRIANGLE_AREA_MM2 = 1.0
MIN_OBSERVATION_ANGLE_RAD = np.deg2rad(1.0)


# ---------------------------------------------------------------------------
# Quaternion algebra
# ---------------------------------------------------------------------------

def quat_conjugate(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product a * b, re-normalized."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    aw, ax, ay, az = (a[..., i] for i in range(4))
    bw, bx, by, bz = (b[..., i] for i in range(4))
    out = np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )
    return quat_normalize(out)


def quat_rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rotate body-frame vector(s) v into the world frame.

    Uses the expansion v + 2 w (u x v) + 2 u x (u x v) with u the vector
    part, which preserves norms to machine precision.
    """
    q = np.asarray(q, dtype=float)
    v = np.asarray(v, dtype=float)
    w = q[..., :1]
    u = q[..., 1:]
    uv = np.cross(u, v)
    return v + 2.0 * (w * uv + np.cross(u, uv))


def quat_from_axis_angle(axis: np.ndarray, angle_rad: float | np.ndarray) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    n = np.linalg.norm(axis, axis=-1, keepdims=True)
    if np.any(n == 0):
        raise ConfigInvalid("rotation axis must be non-zero")
    axis = axis / n
    half = 0.5 * np.asarray(angle_rad, dtype=float)[..., None]
    return np.concatenate([np.cos(half), axis * np.sin(half)], axis=-1)


def quat_from_rotvec(rv: np.ndarray) -> np.ndarray:
    """Exponential map: rotation vector (axis * angle, rad) to quaternion."""
    rv = np.asarray(rv, dtype=float)
    angle = np.linalg.norm(rv, axis=-1, keepdims=True)
    half = 0.5 * angle
    # sinc form is stable at angle -> 0
    k = np.where(angle > 1e-12, np.sin(half) / np.where(angle > 0, angle, 1.0), 0.5)
    return np.concatenate([np.cos(half), rv * k], axis=-1)


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrix whose columns are the body axes in world coordinates."""
    q = np.asarray(q, dtype=float)
    w, x, y, z = (q[..., i] for i in range(4))
    m = np.empty(q.shape[:-1] + (3, 3))
    m[..., 0, 0] = 1 - 2 * (y * y + z * z)
    m[..., 0, 1] = 2 * (x * y - w * z)
    m[..., 0, 2] = 2 * (x * z + w * y)
    m[..., 1, 0] = 2 * (x * y + w * z)
    m[..., 1, 1] = 1 - 2 * (x * x + z * z)
    m[..., 1, 2] = 2 * (y * z - w * x)
    m[..., 2, 0] = 2 * (x * z - w * y)
    m[..., 2, 1] = 2 * (y * z + w * x)
    m[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return m


def matrix_to_quat(m: np.ndarray) -> np.ndarray:
    """Quaternion of rotation matrix/matrices, via the stable 4-branch form."""
    m = np.asarray(m, dtype=float)
    t = np.stack(
        [
            1.0 + m[..., 0, 0] + m[..., 1, 1] + m[..., 2, 2],
            1.0 + m[..., 0, 0] - m[..., 1, 1] - m[..., 2, 2],
            1.0 - m[..., 0, 0] + m[..., 1, 1] - m[..., 2, 2],
            1.0 - m[..., 0, 0] - m[..., 1, 1] + m[..., 2, 2],
        ],
        axis=-1,
    )
    branch = np.argmax(t, axis=-1)
    s = 2.0 * np.sqrt(np.maximum(np.take_along_axis(t, branch[..., None], axis=-1), 1e-30))[..., 0]

    q = np.empty(m.shape[:-2] + (4,))
    b0 = branch == 0
    b1 = branch == 1
    b2 = branch == 2
    b3 = branch == 3
    q[b0, 0] = 0.25 * s[b0]
    q[b0, 1] = (m[b0, 2, 1] - m[b0, 1, 2]) / s[b0]
    q[b0, 2] = (m[b0, 0, 2] - m[b0, 2, 0]) / s[b0]
    q[b0, 3] = (m[b0, 1, 0] - m[b0, 0, 1]) / s[b0]
    q[b1, 0] = (m[b1, 2, 1] - m[b1, 1, 2]) / s[b1]
    q[b1, 1] = 0.25 * s[b1]
    q[b1, 2] = (m[b1, 0, 1] + m[b1, 1, 0]) / s[b1]
    q[b1, 3] = (m[b1, 0, 2] + m[b1, 2, 0]) / s[b1]
    q[b2, 0] = (m[b2, 0, 2] - m[b2, 2, 0]) / s[b2]
    q[b2, 1] = (m[b2, 0, 1] + m[b2, 1, 0]) / s[b2]
    q[b2, 2] = 0.25 * s[b2]
    q[b2, 3] = (m[b2, 1, 2] + m[b2, 2, 1]) / s[b2]
    q[b3, 0] = (m[b3, 1, 0] - m[b3, 0, 1]) / s[b3]
    q[b3, 1] = (m[b3, 0, 2] + m[b3, 2, 0]) / s[b3]
    q[b3, 2] = (m[b3, 1, 2] + m[b3, 2, 1]) / s[b3]
    q[b3, 3] = 0.25 * s[b3]
    return quat_normalize(q)


def quat_angular_distance(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Rotation angle (rad) between two orientations, sign-insensitive.

    Chord-based form: precise down to ~1e-16 where the arccos of the dot
    product already saturates at ~1e-8.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    chord = np.minimum(
        np.linalg.norm(a - b, axis=-1), np.linalg.norm(a + b, axis=-1)
    )
    return 4.0 * np.arcsin(np.clip(chord / 2.0, 0.0, 1.0))


def hemisphere_align(qs: np.ndarray) -> np.ndarray:
    """Flip signs along a quaternion series so consecutive dots stay >= 0."""
    qs = np.asarray(qs, dtype=float)
    dots = np.sum(qs[:-1] * qs[1:], axis=-1)
    signs = np.concatenate([[1.0], np.cumprod(np.where(dots < 0, -1.0, 1.0))])
    return qs * signs[:, None]


# ---------------------------------------------------------------------------
# Reference fields and marker frames
# ---------------------------------------------------------------------------

def _default_gravity() -> np.ndarray:
    return np.array([0.0, 0.0, -9.81])


def _default_mag() -> np.ndarray:
    # unit field with a 60 degree downward dip in the x-z plane
    return np.array([0.5, 0.0, -np.sqrt(3.0) / 2.0])


@dataclass(frozen=True)
class ReferenceFields:
    """World-frame gravity and magnetic directions used for signal synthesis."""

    gravity_world: np.ndarray = field(default_factory=_default_gravity)
    mag_world: np.ndarray = field(default_factory=_default_mag)

    def __post_init__(self) -> None:
        g = np.asarray(self.gravity_world, dtype=float)
        m = np.asarray(self.mag_world, dtype=float)
        gn = np.linalg.norm(g)
        mn = np.linalg.norm(m)
        if gn == 0:
            raise ConfigInvalid("gravity_world must be non-zero")
        if abs(mn - 1.0) > 1e-6:
            raise ConfigInvalid("mag_world must be a unit vector")
        cosang = abs(float(np.dot(g / gn, m / mn)))
        if cosang > np.cos(MIN_OBSERVATION_ANGLE_RAD):
            raise ConfigInvalid("gravity and magnetic directions are near-parallel")
        object.__setattr__(self, "gravity_world", g)
        object.__setattr__(self, "mag_world", m)


def markers_to_orientation(p1: np.ndarray, p2: np.ndarray, p3: np.ndarray) -> np.ndarray:
    """Orientation of the right-handed frame spanned by a marker triplet.

    e1 points from p1 to p2, e3 is the triangle normal, e2 completes the
    frame. Inputs are lab-frame positions in mm and broadcast over leading
    axes; the result maps frame coordinates to lab coordinates.

    Raises CollinearMarkers when any sample's triangle area is at or below
    1 mm^2.
    """
    p1 = np.asarray(p1, dtype=float)
    p2 = np.asarray(p2, dtype=float)
    p3 = np.asarray(p3, dtype=float)
    a = p2 - p1
    b = p3 - p1
    normal = np.cross(a, b)
    area = 0.5 * np.linalg.norm(normal, axis=-1)
    if np.any(area <= MIN_TRIANGLE_AREA_MM2):
        idx = int(np.argmax(np.atleast_1d(area) <= MIN_TRIANGLE_AREA_MM2))
        raise CollinearMarkers(
            f"marker triplet area {np.atleast_1d(area)[idx]:.4g} mm^2 <= "
            f"{MIN_TRIANGLE_AREA_MM2} mm^2 at sample {idx}"
        )
    e1 = a / np.linalg.norm(a, axis=-1, keepdims=True)
    e3 = normal / np.linalg.norm(normal, axis=-1, keepdims=True)
    e2 = np.cross(e3, e1)
    return matrix_to_quat(np.stack([e1, e2, e3], axis=-1))


def apply_fixed_rotation(q_seg: np.ndarray, q_fix: np.ndarray) -> np.ndarray:
    """Compose a constant body-side alignment rotation onto a segment series."""
    return quat_multiply(q_seg, q_fix)


# ---------------------------------------------------------------------------
# Orientation series -> inertial signals
# ---------------------------------------------------------------------------

def quat_series_to_gyro(qs: np.ndarray, dt: float) -> np.ndarray:
    """Body-frame angular velocity of an orientation series.

    Differentiates with central differences (one-sided at the ends) after
    hemisphere alignment; omega = 2 * vec(conj(q) * dq/dt). Output has the
    same length as the input.
    """
    qs = np.asarray(qs, dtype=float)
    if qs.ndim != 2 or qs.shape[1] != 4:
        raise ConfigInvalid("expected an (N, 4) quaternion series")
    if len(qs) < 2:
        raise SeriesTooShort(f"need >= 2 samples, got {len(qs)}")
    if dt <= 0:
        raise ConfigInvalid("dt must be positive")
    qs = hemisphere_align(quat_normalize(qs))
    dq = np.empty_like(qs)
    dq[1:-1] = (qs[2:] - qs[:-2]) / (2.0 * dt)
    dq[0] = (qs[1] - qs[0]) / dt
    dq[-1] = (qs[-1] - qs[-2]) / dt
    # product without the unit-norm projection: dq is not a rotation
    w, x, y, z = qs[:, 0], -qs[:, 1], -qs[:, 2], -qs[:, 3]
    dw, dx, dy, dz = dq[:, 0], dq[:, 1], dq[:, 2], dq[:, 3]
    omega = 2.0 * np.stack(
        [
            w * dx + x * dw + y * dz - z * dy,
            w * dy - x * dz + y * dw + z * dx,
            w * dz + x * dy - y * dx + z * dw,
        ],
        axis=-1,
    )
    return omega


def quat_to_am(q: np.ndarray, ref: ReferenceFields) -> tuple[np.ndarray, np.ndarray]:
    """Static accelerometer and magnetometer readings for orientation(s) q.

    The accelerometer reports the reaction to gravity (+9.81 "up" at rest in
    body coordinates); the magnetometer reports the unit field direction.
    """
    qc = quat_conjugate(np.asarray(q, dtype=float))
    accel = quat_rotate(qc, -ref.gravity_world)
    mag = quat_rotate(qc, ref.mag_world)
    return accel, mag


def integrate_gyro(q0: np.ndarray, omega: np.ndarray, dt: float) -> np.ndarray:
    """First-order orientation propagation q_{k+1} = q_k * exp(omega_k dt)."""
    steps = quat_from_rotvec(np.asarray(omega, dtype=float) * dt)
    q = np.asarray(q0, dtype=float)
    out = np.empty((len(steps) + 1, 4))
    out[0] = q
    for k in range(len(steps)):
        q = quat_multiply(q, steps[k])
        out[k + 1] = q
    return out


# ---------------------------------------------------------------------------
# Two-observation attitude recovery
# ---------------------------------------------------------------------------

def _davenport_k(b_obs: np.ndarray, r_ref: np.ndarray, weights: np.ndarray) -> np.ndarray:
    bmat = np.einsum("i,ij,ik->jk", weights, r_ref, b_obs)
    sigma = np.trace(bmat)
    s = bmat + bmat.T
    z = np.array([bmat[1, 2] - bmat[2, 1], bmat[2, 0] - bmat[0, 2], bmat[0, 1] - bmat[1, 0]])
    k = np.empty((4, 4))
    k[0, 0] = sigma
    k[0, 1:] = z
    k[1:, 0] = z
    k[1:, 1:] = s - sigma * np.eye(3)
    return k


def quest_recover(accel: np.ndarray, mag: np.ndarray, ref: ReferenceFields) -> np.ndarray:
    """Recover body-to-world orientation from one accel/mag observation pair.

    Solves the equal-weight two-observation optimal-attitude problem with the
    closed-form largest eigenvalue and the Rodrigues-parameter shortcut,
    falling back to a dense eigendecomposition of the Davenport matrix near
    the 180-degree singularity of the shortcut.
    """
    accel = np.asarray(accel, dtype=float)
    mag = np.asarray(mag, dtype=float)
    an = np.linalg.norm(accel)
    mn = np.linalg.norm(mag)
    if an == 0 or mn == 0:
        raise DegenerateObservations("zero observation vector")
    b1 = accel / an
    b2 = mag / mn
    if abs(float(np.dot(b1, b2))) > np.cos(MIN_OBSERVATION_ANGLE_RAD):
        raise DegenerateObservations("accelerometer and magnetometer observations are near-parallel")

    r1 = -ref.gravity_world / np.linalg.norm(ref.gravity_world)
    r2 = ref.mag_world
    b_obs = np.stack([b1, b2])
    r_ref = np.stack([r1, r2])
    weights = np.array([0.5, 0.5])

    # exact max eigenvalue for two observations
    lam = np.sqrt(
        weights[0] ** 2
        + weights[1] ** 2
        + 2.0
        * weights[0]
        * weights[1]
        * (
            float(np.dot(b1, b2)) * float(np.dot(r1, r2))
            + np.linalg.norm(np.cross(b1, b2)) * np.linalg.norm(np.cross(r1, r2))
        )
    )

    bmat = np.einsum("i,ij,ik->jk", weights, r_ref, b_obs)
    sigma = float(np.trace(bmat))
    s = bmat + bmat.T
    z = np.array([bmat[1, 2] - bmat[2, 1], bmat[2, 0] - bmat[0, 2], bmat[0, 1] - bmat[1, 0]])

    adj = np.trace(s) ** 2 / 2.0 - np.trace(s @ s) / 2.0
    alpha = lam**2 - sigma**2 + adj
    beta = lam - sigma
    gamma = (lam + sigma) * alpha - float(np.linalg.det(s))
    xvec = (alpha * np.eye(3) + beta * s + s @ s) @ z
    norm2 = gamma**2 + float(np.dot(xvec, xvec))
    if norm2 > 1e-12:
        q = np.concatenate([[gamma], xvec]) / np.sqrt(norm2)
    else:
        # shortcut stalls near 180 degrees: dominant eigenvector instead
        k = _davenport_k(b_obs, r_ref, weights)
        q = np.linalg.eigh(k)[1][:, -1]
    # the eigen problem yields the world-to-body rotation; flip to body-to-world
    return quat_normalize(quat_conjugate(q))


def quest_recover_series(
    accel: np.ndarray, mag: np.ndarray, ref: ReferenceFields
) -> np.ndarray:
    """Vectorized orientation recovery for (N, 3) accel/mag series."""
    accel = np.asarray(accel, dtype=float)
    mag = np.asarray(mag, dtype=float)
    an = np.linalg.norm(accel, axis=-1, keepdims=True)
    mn = np.linalg.norm(mag, axis=-1, keepdims=True)
    if np.any(an == 0) or np.any(mn == 0):
        raise DegenerateObservations("zero observation vector in series")
    b1 = accel / an
    b2 = mag / mn
    cosang = np.abs(np.sum(b1 * b2, axis=-1))
    if np.any(cosang > np.cos(MIN_OBSERVATION_ANGLE_RAD)):
        idx = int(np.argmax(cosang > np.cos(MIN_OBSERVATION_ANGLE_RAD)))
        raise DegenerateObservations(f"near-parallel observations at sample {idx}")

    r1 = -ref.gravity_world / np.linalg.norm(ref.gravity_world)
    r2 = ref.mag_world
    w1 = w2 = 0.5

    lam = np.sqrt(
        w1**2
        + w2**2
        + 2.0
        * w1
        * w2
        * (
            np.sum(b1 * b2, axis=-1) * float(np.dot(r1, r2))
            + np.linalg.norm(np.cross(b1, b2), axis=-1) * np.linalg.norm(np.cross(r1, r2))
        )
    )

    bmat = w1 * r1[None, :, None] * b1[:, None, :] + w2 * r2[None, :, None] * b2[:, None, :]
    sigma = np.trace(bmat, axis1=1, axis2=2)
    s = bmat + np.swapaxes(bmat, 1, 2)
    z = np.stack(
        [
            bmat[:, 1, 2] - bmat[:, 2, 1],
            bmat[:, 2, 0] - bmat[:, 0, 2],
            bmat[:, 0, 1] - bmat[:, 1, 0],
        ],
        axis=-1,
    )
    ss = s @ s
    tr_s = np.trace(s, axis1=1, axis2=2)
    adj = tr_s**2 / 2.0 - np.trace(ss, axis1=1, axis2=2) / 2.0
    alpha = lam**2 - sigma**2 + adj
    beta = lam - sigma
    gamma = (lam + sigma) * alpha - np.linalg.det(s)
    mat = alpha[:, None, None] * np.eye(3) + beta[:, None, None] * s + ss
    xvec = np.einsum("nij,nj->ni", mat, z)
    norm2 = gamma**2 + np.sum(xvec * xvec, axis=-1)

    q = np.concatenate([gamma[:, None], xvec], axis=-1)
    good = norm2 > 1e-12
    q[good] = q[good] / np.sqrt(norm2[good])[:, None]
    for i in np.nonzero(~good)[0]:
        k = _davenport_k(np.stack([b1[i], b2[i]]), np.stack([r1, r2]), np.array([w1, w2]))
        q[i] = np.linalg.eigh(k)[1][:, -1]
    return quat_normalize(quat_conjugate(q))


# ---------------------------------------------------------------------------
# Frame transforms
# ---------------------------------------------------------------------------

def to_pelvis_frame(
    cop: CopSeries, pelvis_xy: np.ndarray, yaw_rad: np.ndarray | None = None
) -> CopSeries:
    """Express a treadmill-frame COP series relative to the pelvis centre.

    The transform is a pure per-sample translation; treadmill walking keeps
    heading nearly constant. Pass ``yaw_rad`` (per-sample pelvis heading) to
    additionally rotate into the heading-aligned frame.
    """
    if cop.frame is not CopFrame.Treadmill:
        raise WrongFrame(f"expected Treadmill-frame COP, got {cop.frame.value}")
    rel = cop.xy - np.asarray(pelvis_xy, dtype=float)[:, :2]
    if yaw_rad is not None:
        c = np.cos(-np.asarray(yaw_rad, dtype=float))
        s = np.sin(-np.asarray(yaw_rad, dtype=float))
        rel = np.stack([c * rel[:, 0] - s * rel[:, 1], s * rel[:, 0] + c * rel[:, 1]], axis=-1)
    return CopSeries(xy=rel, frame=CopFrame.Pelvis)


# ---------------------------------------------------------------------------
# Alignment files
# ---------------------------------------------------------------------------

def load_alignment(path) -> dict[SensorId, np.ndarray]:
    """Parse a sensor-alignment file into fixed rotation quaternions.

    Format: one ``sensor = ax, ay, az, angle_deg`` line per sensor; blank
    lines and ``#`` comments are ignored. Sensors not listed default to the
    identity rotation.
    """
    rotations: dict[SensorId, np.ndarray] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            try:
                key, value = line.split("=", 1)
                sensor = SensorId(int(key.strip()))
                ax, ay, az, deg = (float(tok) for tok in value.split(","))
            except (ValueError, KeyError) as exc:
                raise ParseError(f"{path}:{lineno}: bad alignment line {raw!r}") from exc
            rotations[sensor] = quat_from_axis_angle(
                np.array([ax, ay, az]), np.deg2rad(deg)
            )
    return rotations
