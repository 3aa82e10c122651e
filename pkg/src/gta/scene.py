"""Procedural scenes and an exact ray caster producing ground-truth RGB and depth.

Scenes hold a ground plane plus axis-aligned boxes and spheres.  Textures are
analytic and piecewise constant so a color can be evaluated exactly at any
surface point.  There is no shading: the rendered color is the albedo at the
first hit.  Rays that hit nothing closer than ``far`` report depth ``far`` and
the background color.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from .camera import Intrinsics, Pose, Trajectory, generate_trajectory
from .errors import BadParams
from .validation import check_rng

FAR_DEPTH = 20.0
NEAR_EPS = 1e-6
BACKGROUND = (0.62, 0.74, 0.88)
GROUND_Y = 1.5
DEFAULT_BOUNDS = ((-6.0, -4.0, 2.0), (6.0, GROUND_Y, 14.0))
GROUND_CELL = 3.0
OBJECT_CELL = (1.0, 2.0)


@dataclass(frozen=True)
class Texture:
    """Piecewise-constant albedo evaluated in primitive-local coordinates.

    ``checker`` alternates two colors on a 3D grid of cell size ``scale``;
    ``gradient`` steps through ``bands`` colors between ``color_a`` and
    ``color_b`` along ``axis``.  ``phase`` shifts the grid off the primitive
    faces so hit points never sit on a cell boundary.
    """

    kind: str
    color_a: tuple
    color_b: tuple = (0.0, 0.0, 0.0)
    scale: float = 1.0
    phase: tuple = (0.0, 0.0, 0.0)
    axis: int = 1
    bands: int = 4

    def colors(self, local):
        n = local.shape[0]
        a = np.asarray(self.color_a, dtype=np.float64)
        b = np.asarray(self.color_b, dtype=np.float64)
        if self.kind == "solid":
            return np.broadcast_to(a, (n, 3)).copy()
        cells = np.floor((local + np.asarray(self.phase)) / self.scale).astype(np.int64)
        if self.kind == "checker":
            odd = (cells.sum(axis=1) % 2).astype(bool)
            return np.where(odd[:, None], b, a)
        if self.kind == "gradient":
            k = np.mod(cells[:, self.axis], self.bands) / (self.bands - 1)
            return a + (b - a) * k[:, None]
        raise BadParams(f"unknown texture kind {self.kind!r}")


@dataclass(frozen=True)
class Sphere:
    center: tuple
    radius: float
    texture: Texture

    def intersect(self, o, d):
        oc = o - np.asarray(self.center)
        a = np.einsum("ij,ij->i", d, d)
        b = 2.0 * np.einsum("ij,ij->i", d, oc)
        c = np.einsum("ij,ij->i", oc, oc) - self.radius**2
        disc = b * b - 4 * a * c
        hit = disc >= 0
        root = np.sqrt(np.where(hit, disc, 0.0))
        s = (-b - root) / (2 * a)
        return np.where(hit & (s > NEAR_EPS), s, np.inf)

    def distance(self, p):
        return np.abs(np.linalg.norm(p - np.asarray(self.center), axis=-1) - self.radius)

    def translated(self, offset):
        return replace(self, center=tuple(np.asarray(self.center) + offset))


@dataclass(frozen=True)
class Box:
    center: tuple
    half: tuple
    texture: Texture

    def intersect(self, o, d):
        lo = np.asarray(self.center) - np.asarray(self.half)
        hi = np.asarray(self.center) + np.asarray(self.half)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
            t1 = (lo - o) * inv
            t2 = (hi - o) * inv
        t1 = np.where(np.isnan(t1), -np.inf, t1)
        t2 = np.where(np.isnan(t2), np.inf, t2)
        tmin = np.minimum(t1, t2).max(axis=1)
        tmax = np.maximum(t1, t2).min(axis=1)
        ok = (tmax >= tmin) & (tmin > NEAR_EPS)
        return np.where(ok, tmin, np.inf)

    def distance(self, p):
        q = np.abs(p - np.asarray(self.center)) - np.asarray(self.half)
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(q.max(axis=-1), 0.0)
        return np.abs(outside + inside)

    def translated(self, offset):
        return replace(self, center=tuple(np.asarray(self.center) + offset))


@dataclass(frozen=True)
class GroundPlane:
    """Horizontal plane ``y = height`` (y points down, so the plane lies below the camera)."""

    height: float
    texture: Texture
    center_xz: tuple = (0.0, 8.0)

    @property
    def center(self):
        return (self.center_xz[0], self.height, self.center_xz[1])

    def intersect(self, o, d):
        with np.errstate(divide="ignore", invalid="ignore"):
            s = (self.height - o[:, 1]) / d[:, 1]
        return np.where(np.isfinite(s) & (s > NEAR_EPS), s, np.inf)

    def distance(self, p):
        return np.abs(p[..., 1] - self.height)

    def translated(self, offset):
        return replace(
            self,
            height=self.height + offset[1],
            center_xz=(self.center_xz[0] + offset[0], self.center_xz[1] + offset[2]),
        )


@dataclass(frozen=True)
class Scene:
    primitives: tuple
    bounds: tuple = DEFAULT_BOUNDS
    seed: int = 0
    far: float = FAR_DEPTH
    background: tuple = BACKGROUND

    def __post_init__(self):
        if len(self.primitives) < 1:
            raise BadParams("a scene needs at least one primitive")

    def translated(self, offset):
        """Rigidly translate every primitive (textures travel with their primitive)."""
        offset = np.asarray(offset, dtype=np.float64)
        lo, hi = (np.asarray(b) + offset for b in self.bounds)
        return replace(
            self,
            primitives=tuple(p.translated(offset) for p in self.primitives),
            bounds=(tuple(lo), tuple(hi)),
        )

    def surface_distance(self, points):
        """Distance from each world point to the nearest primitive surface."""
        p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        return np.min([prim.distance(p) for prim in self.primitives], axis=0)


@dataclass(frozen=True, eq=False)
class RenderedView:
    rgb: np.ndarray
    depth: np.ndarray
    pose: Pose
    intr: Intrinsics

    def __post_init__(self):
        shape = (self.intr.height, self.intr.width)
        if self.rgb.shape[:2] != shape or self.depth.shape != shape:
            raise BadParams("rgb/depth size disagrees with intrinsics")


def _random_texture(rng, ground=False):
    def color():
        return tuple(rng.uniform(0.05, 0.95, size=3).round(3))

    if ground:
        kind = "checker"
        scale = GROUND_CELL
    else:
        kind = rng.choice(["solid", "checker", "gradient"], p=[0.4, 0.3, 0.3])
        scale = float(rng.uniform(*OBJECT_CELL))
    phase = tuple(rng.uniform(0.1, 0.9, size=3) * scale)
    return Texture(
        kind=str(kind),
        color_a=color(),
        color_b=color(),
        scale=scale,
        phase=phase,
        axis=int(rng.integers(0, 3)),
        bands=int(rng.integers(3, 6)),
    )


def build_scene(seed, complexity=6):
    """Ground plane plus ``complexity`` boxes/spheres resting on it, inside DEFAULT_BOUNDS."""
    if complexity < 1:
        raise BadParams("complexity must be >= 1")
    rng = np.random.default_rng(seed)
    prims = [GroundPlane(GROUND_Y, _random_texture(rng, ground=True))]
    for _ in range(complexity):
        x = rng.uniform(-3.5, 3.5)
        z = rng.uniform(4.5, 11.0)
        size = rng.uniform(0.35, 1.1)
        tex = _random_texture(rng)
        if rng.random() < 0.5:
            prims.append(Sphere((x, GROUND_Y - size, z), size, tex))
        else:
            half = tuple(size * rng.uniform(0.6, 1.4, size=3))
            prims.append(Box((x, GROUND_Y - half[1], z), half, tex))
    return Scene(tuple(prims), DEFAULT_BOUNDS, seed)


def pixel_rays(pose, intr):
    """World-space ray origins and directions for every pixel, row-major.

    Directions are scaled so the ray parameter equals camera-frame z-depth.
    """
    v, u = np.mgrid[0 : intr.height, 0 : intr.width].astype(np.float64)
    d_cam = np.stack(
        [(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, np.ones_like(u)], axis=-1
    ).reshape(-1, 3)
    d = d_cam @ pose.rotation
    o = np.broadcast_to(pose.center, d.shape)
    return o, d


def raycast_render(scene, pose, intr):
    o, d = pixel_rays(pose, intr)
    hits = np.stack([p.intersect(o, d) for p in scene.primitives])
    idx = np.argmin(hits, axis=0)
    s = hits[idx, np.arange(hits.shape[1])]
    bg = ~(s < scene.far)
    depth = np.where(bg, scene.far, s)
    rgb = np.empty((s.size, 3))
    rgb[:] = scene.background
    for k, prim in enumerate(scene.primitives):
        sel = (idx == k) & ~bg
        if np.any(sel):
            pts = o[sel] + s[sel, None] * d[sel]
            rgb[sel] = prim.texture.colors(pts - np.asarray(prim.center))
    shape = (intr.height, intr.width)
    return RenderedView(
        rgb.reshape(*shape, 3).astype(np.float32),
        depth.reshape(shape).astype(np.float32),
        pose,
        intr,
    )


# Per-kind parameter ranges for dataset trajectories.
TRAJECTORY_RANGES = {
    "orbit": {"radius": (4.0, 7.0), "angle": (6.0, 20.0)},
    "dolly": {"distance": (0.4, 1.5)},
    "lateral": {"distance": (0.4, 1.2)},
}


def random_trajectory(rng, kind, views, intr):
    params = {}
    for key, (lo, hi) in TRAJECTORY_RANGES[kind].items():
        params[key] = float(rng.uniform(lo, hi))
    if kind != "dolly" and rng.random() < 0.5:
        key = "angle" if kind == "orbit" else "distance"
        params[key] = -params[key]
    return generate_trajectory(kind, views, params, intr, rng_seed=int(rng.integers(2**31)))


@dataclass
class DatasetConfig:
    scenes: int = 4
    views: int = 9
    resolution: int = 64
    kinds: tuple = ("orbit", "dolly", "lateral")
    seed: int = 0
    complexity: int = 6
    fov: float = 60.0
    extra: dict = field(default_factory=dict)

    def validate(self):
        if self.scenes < 1 or self.views < 2 or self.resolution < 1 or self.complexity < 1:
            raise BadParams("dataset counts must be >= 1 (views >= 2)")
        if not self.kinds or any(k not in TRAJECTORY_RANGES for k in self.kinds):
            raise BadParams(f"bad trajectory kinds {self.kinds!r}")


@dataclass
class SceneSample:
    """One generated scene: its trajectory and a ground-truth render per pose."""

    scene_id: int
    seed: int
    trajectory: Trajectory
    views: list

    @property
    def input_view(self):
        return self.views[0]

    @property
    def targets(self):
        return self.views[1:]


def generate_samples(cfg, start=0):
    """Render ``cfg.scenes`` scenes in memory (scene ids ``start .. start+scenes-1``)."""
    cfg.validate()
    intr = Intrinsics.from_fov(cfg.resolution, cfg.resolution, cfg.fov)
    seeds = np.random.SeedSequence(cfg.seed).spawn(start + cfg.scenes)[start:]
    samples = []
    for i, ss in enumerate(seeds):
        scene_seed = int(ss.generate_state(1)[0])
        rng = check_rng(scene_seed)
        scene = build_scene(scene_seed, cfg.complexity)
        kind = cfg.kinds[(start + i) % len(cfg.kinds)]
        traj = random_trajectory(rng, kind, cfg.views, intr)
        # poses are stored as f32; render from the stored values so reloads are exact
        traj = Trajectory.from_array(traj.as_array().astype(np.float32), intr, traj.meta)
        views = [raycast_render(scene, p, intr) for p in traj.poses]
        samples.append(SceneSample(start + i, scene_seed, traj, views))
    return samples


def make_dataset(cfg, root):
    """Render a dataset and persist it under ``root``; returns the manifest."""
    from .store import write_dataset

    return write_dataset(root, generate_samples(cfg), cfg)


def frustum_overlap_fraction(src, dst, scene):
    """Fraction of ``dst`` pixels whose ray-cast surface point is visible from ``src``.

    A pixel counts when its hit point projects inside the source image in front
    of the camera and is not occluded there (source depth agrees within 1e-3).
    """
    o, d = pixel_rays(dst.pose, dst.intr)
    pts = o + dst.depth.reshape(-1, 1).astype(np.float64) * d
    cam = src.pose.apply(pts)
    z = cam[:, 2]
    front = z > NEAR_EPS
    zs = np.where(front, z, 1.0)
    u = np.floor(src.intr.fx * cam[:, 0] / zs + src.intr.cx + 0.5).astype(np.int64)
    v = np.floor(src.intr.fy * cam[:, 1] / zs + src.intr.cy + 0.5).astype(np.int64)
    inside = front & (u >= 0) & (u < src.intr.width) & (v >= 0) & (v < src.intr.height)
    vis = np.zeros_like(inside)
    sd = src.depth[v[inside], u[inside]]
    vis[inside] = np.abs(sd - z[inside]) < 1e-3 * np.maximum(1.0, z[inside])
    return float(vis.mean())

