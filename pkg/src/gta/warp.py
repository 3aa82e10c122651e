"""Depth-based warping: lift depth maps to point clouds and z-buffer splat them
into other views, producing partial frames and visibility masks."""

from dataclasses import dataclass

import numpy as np

from .camera import Trajectory, unproject
from .errors import DimMismatch, IndexOutOfRange, PoseMismatch
from .validation import check_depth, check_frame, check_intrinsics_match

HOLE_VALUE = 0.5


@dataclass(frozen=True, eq=False)
class PointCloud:
    positions: np.ndarray  # (N, 3) world frame
    colors: np.ndarray  # (N, 3) in [0, 1]
    view: np.ndarray  # (N,) source view index
    pixel: np.ndarray  # (N,) row-major source pixel index

    def __len__(self):
        return self.positions.shape[0]

    @classmethod
    def empty(cls, channels=3):
        return cls(
            np.zeros((0, 3)),
            np.zeros((0, channels), dtype=np.float32),
            np.zeros(0, dtype=np.int64),
            np.zeros(0, dtype=np.int64),
        )

    @classmethod
    def concatenate(cls, clouds):
        clouds = list(clouds)
        if not clouds:
            return cls.empty()
        return cls(
            np.concatenate([c.positions for c in clouds]),
            np.concatenate([c.colors for c in clouds]),
            np.concatenate([c.view for c in clouds]),
            np.concatenate([c.pixel for c in clouds]),
        )


@dataclass(frozen=True, eq=False)
class PartialSequence:
    """Warped frames for every pose of ``trajectory`` (index 0 is the input view)."""

    frames: list
    masks: list
    depths: list
    trajectory: Trajectory

    def __post_init__(self):
        n = len(self.trajectory)
        if not (len(self.frames) == len(self.masks) == len(self.depths) == n):
            raise DimMismatch("partial sequence lists must match the trajectory length")

    def coverage(self):
        """Per-view fraction of pixels with mask = 1."""
        return np.array([m.mean() for m in self.masks])

    def target_frames(self):
        return self.frames[1:]


def lift_depth(rgb, depth, pose, intr, view_index=0):
    """Lift every pixel to a world-space point carrying its color."""
    rgb = check_frame(rgb, "rgb")
    depth = check_depth(depth)
    check_intrinsics_match(rgb, intr, "rgb")
    check_intrinsics_match(depth, intr, "depth")
    h, w = depth.shape
    v, u = np.mgrid[0:h, 0:w]
    cam = unproject(u.ravel(), v.ravel(), depth.ravel(), intr)
    return PointCloud(
        pose.apply_inverse(cam),
        rgb.reshape(-1, rgb.shape[2]).copy(),
        np.full(h * w, view_index, dtype=np.int64),
        np.arange(h * w, dtype=np.int64),
    )


def splat_render(cloud, target, intr, hole_value=HOLE_VALUE):
    """Z-buffer splat ``cloud`` into the ``target`` camera.

    Each point lands on its nearest pixel; per pixel the smallest depth wins,
    ties go to the lower source view, then the lower source pixel index.
    Returns ``(frame, depth, mask)``; uncovered pixels hold ``hole_value`` and depth 0.
    """
    h, w = intr.height, intr.width
    channels = cloud.colors.shape[1] if cloud.colors.ndim == 2 else 3
    frame = np.full((h, w, channels), hole_value, dtype=np.float32)
    depth = np.zeros((h, w), dtype=np.float32)
    mask = np.zeros((h, w), dtype=np.uint8)
    if len(cloud) == 0:
        return frame, depth, mask

    cam = target.apply(cloud.positions)
    z = cam[:, 2]
    front = z > 1e-9
    zs = np.where(front, z, 1.0)
    u = np.floor(intr.fx * cam[:, 0] / zs + intr.cx + 0.5)
    v = np.floor(intr.fy * cam[:, 1] / zs + intr.cy + 0.5)
    keep = front & (u >= 0) & (u < w) & (v >= 0) & (v < h)
    if not np.any(keep):
        return frame, depth, mask

    pix = (v[keep] * w + u[keep]).astype(np.int64)
    zk = z[keep]
    order = np.lexsort((cloud.pixel[keep], cloud.view[keep], zk, pix))
    pix_sorted = pix[order]
    first = np.ones(pix_sorted.size, dtype=bool)
    first[1:] = pix_sorted[1:] != pix_sorted[:-1]
    winners = order[first]
    dest = pix[winners]

    frame.reshape(-1, channels)[dest] = cloud.colors[keep][winners]
    depth.reshape(-1)[dest] = zk[winners]
    mask.reshape(-1)[dest] = 1
    return frame, depth, mask


def _check_start(view, trajectory):
    if not trajectory.poses[0].allclose(view.pose, atol=1e-9):
        raise PoseMismatch("trajectory pose 0 must equal the input view pose")


def warp_sequence(view, trajectory):
    """Lift the input view once and splat it into every pose of ``trajectory``."""
    _check_start(view, trajectory)
    cloud = lift_depth(view.rgb, view.depth, view.pose, trajectory.intrinsics)
    return _splat_all(cloud, trajectory)


def _splat_all(cloud, trajectory):
    frames, depths, masks = [], [], []
    for pose in trajectory.poses:
        f, d, m = splat_render(cloud, pose, trajectory.intrinsics)
        frames.append(f)
        depths.append(d)
        masks.append(m)
    return PartialSequence(frames, masks, depths, trajectory)


def masked_warp(view, generated_rgb, generated_depth, reliable, trajectory, colors="warped"):
    """Re-warp with the input view plus the reliable generated views.

    The visibility mask of view t is the union coverage of the merged point
    cloud (input + every reliable view lifted with its own generated depth).
    ``colors="warped"`` keeps the splatted colors, so input-view pixels that
    win the z-buffer stay exact; ``colors="synthesized"`` instead keeps the
    generated frame ``generated_rgb[t-1]`` under the mask and blanks the rest.  View 0 always
    reproduces the input.  ``reliable`` holds 1-based target indices.
    """
    _check_start(view, trajectory)
    n_targets = len(trajectory) - 1
    if len(generated_rgb) != n_targets or len(generated_depth) != n_targets:
        raise DimMismatch(f"expected {n_targets} generated frames and depths")
    reliable = sorted(set(int(r) for r in reliable))
    if any(r < 1 or r > n_targets for r in reliable):
        raise IndexOutOfRange(f"reliable views must lie in 1..{n_targets}, got {reliable}")
    if colors not in ("synthesized", "warped"):
        raise ValueError(f"unknown color source {colors!r}")

    intr = trajectory.intrinsics
    clouds = [lift_depth(view.rgb, view.depth, view.pose, intr, view_index=0)]
    for r in reliable:
        rgb = check_frame(generated_rgb[r - 1])
        check_intrinsics_match(rgb, intr, "generated rgb")
        clouds.append(
            lift_depth(rgb, generated_depth[r - 1], trajectory.poses[r], intr, view_index=r)
        )
    seq = _splat_all(PointCloud.concatenate(clouds), trajectory)
    if colors == "warped":
        return seq

    frames = [seq.frames[0]]
    for t in range(1, len(trajectory)):
        gen = check_frame(generated_rgb[t - 1])
        keep = seq.masks[t].astype(bool)[:, :, None]
        frames.append(np.where(keep, gen, np.float32(HOLE_VALUE)).astype(np.float32))
    return PartialSequence(frames, seq.masks, seq.depths, trajectory)
