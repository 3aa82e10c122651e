"""Pinhole cameras, rigid poses, trajectories and trajectory-error metrics.

Conventions: poses map world to camera coordinates (``x_cam = R @ x_world + t``),
the camera looks down +z, and integer pixel coordinates address pixel centers.
"""

from dataclasses import dataclass, field
import math

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import (
    BadParams,
    DegenerateTrajectory,
    LengthMismatch,
    NonPositiveDepth,
)

_ORTHO_TOL = 1e-6


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise BadParams(f"focal lengths must be positive, got {self.fx}, {self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise BadParams("principal point must lie inside the image")

    @classmethod
    def from_fov(cls, width, height, fov_deg=60.0):
        """Square-pixel intrinsics with horizontal field of view ``fov_deg``."""
        f = 0.5 * width / math.tan(math.radians(fov_deg) / 2)
        return cls(f, f, (width - 1) / 2, (height - 1) / 2, int(width), int(height))

    @property
    def K(self):
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    def as_array(self):
        return np.array(
            [self.fx, self.fy, self.cx, self.cy, self.width, self.height], dtype=np.float64
        )

    @classmethod
    def from_array(cls, arr):
        fx, fy, cx, cy, w, h = (float(v) for v in arr)
        return cls(fx, fy, cx, cy, int(w), int(h))


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid world-to-camera transform."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if R.shape != (3, 3):
            raise BadParams(f"rotation must be 3x3, got {R.shape}")
        if not np.allclose(R.T @ R, np.eye(3), atol=_ORTHO_TOL):
            raise BadParams("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > _ORTHO_TOL:
            raise BadParams("rotation has determinant != +1")
        R.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_center(cls, rotation, center):
        """Build a pose from its rotation and its camera center in world coordinates."""
        R = np.asarray(rotation, dtype=np.float64)
        return cls(R, -R @ np.asarray(center, dtype=np.float64))

    @property
    def center(self):
        return -self.rotation.T @ self.translation

    def inverse(self):
        """Camera-to-world transform as a Pose object (same convention, inverted map)."""
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation)

    def apply(self, points):
        """Map world points ``(..., 3)`` into this camera's frame."""
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def apply_inverse(self, points):
        """Map camera-frame points ``(..., 3)`` back to world coordinates."""
        return (np.asarray(points, dtype=np.float64) - self.translation) @ self.rotation

    def compose(self, other):
        """Return ``self ∘ other`` (apply ``other`` first)."""
        return Pose(
            self.rotation @ other.rotation, self.rotation @ other.translation + self.translation
        )

    def matrix(self):
        return np.hstack([self.rotation, self.translation[:, None]])

    def allclose(self, other, atol=1e-9):
        return np.allclose(self.rotation, other.rotation, atol=atol) and np.allclose(
            self.translation, other.translation, atol=atol
        )

    def __eq__(self, other):
        if not isinstance(other, Pose):
            return NotImplemented
        return np.array_equal(self.rotation, other.rotation) and np.array_equal(
            self.translation, other.translation
        )

    def __hash__(self):
        return hash((self.rotation.tobytes(), self.translation.tobytes()))


@dataclass(frozen=True)
class Trajectory:
    """Ordered camera poses sharing one set of intrinsics; index 0 is the reference view."""

    poses: tuple
    intrinsics: Intrinsics
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        poses = tuple(self.poses)
        if len(poses) < 1:
            raise BadParams("a trajectory needs at least one pose")
        object.__setattr__(self, "poses", poses)

    def __len__(self):
        return len(self.poses)

    def __getitem__(self, i):
        return self.poses[i]

    @property
    def reference(self):
        return self.poses[0]

    def as_array(self):
        """Stack poses into an ``(N, 3, 4)`` array of ``[R | t]`` blocks."""
        return np.stack([p.matrix() for p in self.poses])

    @classmethod
    def from_array(cls, arr, intrinsics, meta=None):
        arr = np.asarray(arr, dtype=np.float64)
        poses = tuple(Pose(m[:, :3], m[:, 3]) for m in arr)
        return cls(poses, intrinsics, dict(meta or {}))


def project(point, intr):
    """Project camera-frame points ``(..., 3)`` to ``(u, v, z)``."""
    p = np.asarray(point, dtype=np.float64)
    z = p[..., 2]
    if np.any(z <= 0):
        raise NonPositiveDepth("cannot project points with z <= 0")
    u = intr.fx * p[..., 0] / z + intr.cx
    v = intr.fy * p[..., 1] / z + intr.cy
    return np.stack([u, v, z], axis=-1)


def unproject(u, v, depth, intr):
    """Lift pixel ``(u, v)`` at z-depth ``depth`` to a camera-frame point: depth * K^-1 [u, v, 1]."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    d = np.asarray(depth, dtype=np.float64)
    if np.any(d <= 0):
        raise NonPositiveDepth("depth must be positive")
    x = (u - intr.cx) / intr.fx * d
    y = (v - intr.cy) / intr.fy * d
    return np.stack(np.broadcast_arrays(x, y, d), axis=-1)


def transform_point(p, from_pose, to_pose):
    """Move a point from the ``from_pose`` camera frame to the ``to_pose`` camera frame."""
    if from_pose is to_pose:
        return np.array(p, dtype=np.float64)
    return to_pose.apply(from_pose.apply_inverse(p))


def geodesic_angle(Ra, Rb):
    """Rotation angle of ``Ra^T Rb`` in radians."""
    m = np.asarray(Ra).T @ np.asarray(Rb)
    # atan2 keeps precision near 0 and pi where arccos of the trace does not
    s = 0.5 * np.linalg.norm([m[2, 1] - m[1, 2], m[0, 2] - m[2, 0], m[1, 0] - m[0, 1]])
    c = (np.trace(m) - 1.0) / 2.0
    return float(np.arctan2(s, c))


def _axis_rotation(axis, angle):
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    return Rotation.from_rotvec(axis * angle).as_matrix()


_DEFAULT_PARAMS = {
    "orbit": {"radius": 5.0, "angle": 30.0},
    "dolly": {"distance": 1.5},
    "lateral": {"distance": 1.5},
}


def generate_trajectory(kind, count, params=None, intr=None, rng_seed=0):
    """Deterministic camera path starting at ``params['reference']`` (identity by default).

    ``orbit``: rotate about the reference up-axis around a pivot ``radius`` units
    ahead, sweeping ``angle`` degrees in total.  ``dolly``/``lateral``: translate
    ``distance`` units along the optical / horizontal axis.  ``jitter`` adds
    seeded translation noise to every pose but the first; ``max_step`` bounds the
    rotation between consecutive poses (radians).
    """
    if kind not in _DEFAULT_PARAMS:
        raise BadParams(f"unknown trajectory kind {kind!r}")
    if count < 2:
        raise BadParams("a generated trajectory needs count >= 2")
    p = dict(_DEFAULT_PARAMS[kind])
    p.update(params or {})
    if intr is None:
        intr = Intrinsics.from_fov(64, 64)
    ref = p.get("reference") or Pose.identity()
    max_step = float(p.get("max_step", math.pi / 4))
    jitter = float(p.get("jitter", 0.0))
    rng = np.random.default_rng(rng_seed)

    R0 = ref.rotation
    C0 = ref.center
    right, up, forward = R0[0], R0[1], R0[2]
    fracs = np.arange(count) / (count - 1)
    poses = []
    if kind == "orbit":
        sweep = math.radians(float(p["angle"]))
        if abs(sweep) / (count - 1) > max_step + 1e-12:
            raise BadParams("orbit step exceeds max_step")
        pivot = C0 + float(p["radius"]) * forward
        for f in fracs:
            Rw = _axis_rotation(up, sweep * f)
            R = R0 @ Rw.T
            C = C0 + (Rw - np.eye(3)) @ (C0 - pivot)
            poses.append((R, C))
    else:
        axis = forward if kind == "dolly" else right
        dist = float(p["distance"])
        for f in fracs:
            poses.append((R0, C0 + dist * f * axis))

    out = [ref]
    for R, C in poses[1:]:
        if jitter > 0:
            C = C + rng.normal(scale=jitter, size=3)
        out.append(Pose.from_center(R, C))
    meta = {"kind": kind, "seed": rng_seed}
    meta.update({k: v for k, v in p.items() if k != "reference"})
    return Trajectory(tuple(out), intr, meta)


def _normalized_translations(traj):
    t = np.stack([p.translation for p in traj.poses])
    scale = np.linalg.norm(t[-1] - t[0])
    if scale < 1e-12:
        raise DegenerateTrajectory("first and last translations coincide")
    return t / scale


def pose_errors(estimated, reference):
    """Return ``(t_err, r_err)`` between two trajectories.

    ``r_err`` is the mean per-frame geodesic angle (radians); ``t_err`` the mean
    distance between translations after dividing each trajectory by the norm
    of its end-to-end translation change.
    """
    if len(estimated) != len(reference):
        raise LengthMismatch(f"{len(estimated)} vs {len(reference)} poses")
    if len(estimated) < 2:
        raise BadParams("pose_errors needs at least two poses")
    r = np.mean(
        [geodesic_angle(a.rotation, b.rotation) for a, b in zip(estimated.poses, reference.poses)]
    )
    te = _normalized_translations(estimated)
    tr = _normalized_translations(reference)
    t = np.mean(np.linalg.norm(te - tr, axis=1))
    return float(t), float(r)


def view_distances(traj, lam=1.0):
    """Distance of every pose from pose 0: geodesic angle + lam * normalized center offset."""
    ref = traj.poses[0]
    offsets = np.array([np.linalg.norm(p.center - ref.center) for p in traj.poses])
    scale = offsets.max()
    norm = offsets / scale if scale > 1e-12 else offsets
    angles = np.array([geodesic_angle(ref.rotation, p.rotation) for p in traj.poses])
    return angles + lam * norm
