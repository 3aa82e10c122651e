"""Geometry-then-appearance inference and the test-time scaling loop.

Latents enter the denoisers in "model space" (``2 * latent - 1``), so warp holes
(0.5 gray) map to 0.  Every stage works on a batch of scenes and each scene draws
its noise from its own seed-derived generator.
"""

from dataclasses import dataclass, field
import math

import numpy as np
import torch

from .camera import view_distances
from .diffusion import (
    Denoiser,
    DenoiserConfig,
    Schedule,
    make_schedule,
    network_from_arch,
    sample_tensor,
)
from .errors import ArchMismatch, BadParams, DimMismatch
from .latent import (
    DEFAULT_PATCH,
    DEPTH_CHANNELS,
    decode,
    decode_depth,
    encode,
    encode_depth,
)
from .warp import masked_warp, warp_sequence

__all__ = [
    "GtaModels",
    "SceneOutput",
    "appearance_stage",
    "build_models",
    "geometry_stage",
    "infer",
    "infer_batch",
    "network_from_arch",
    "test_time_scaling",
    "tts_batch",
]


def to_model_space(z):
    return 2.0 * np.asarray(z, dtype=np.float32) - 1.0


def from_model_space(x):
    return (np.asarray(x, dtype=np.float32) + 1.0) / 2.0


@dataclass(eq=False)
class GtaModels:
    geometry: Denoiser = None
    appearance: Denoiser = None
    schedule: Schedule = None
    patch: int = DEFAULT_PATCH
    joint: Denoiser = None
    meta: dict = field(default_factory=dict)

    def components(self):
        for name in ("geometry", "appearance", "joint"):
            net = getattr(self, name)
            if net is not None:
                yield name, net

    def validate(self):
        rgb = 3 * self.patch**2
        depth = DEPTH_CHANNELS * self.patch**2
        if self.geometry is not None:
            c = self.geometry.config
            if c.cond_channels != rgb + depth or c.target_channels != depth:
                raise ArchMismatch("geometry model widths do not match the codec")
        if self.appearance is not None:
            c = self.appearance.config
            if c.fuse_channels != depth or c.cond_channels != rgb + depth or c.target_channels != rgb:
                raise ArchMismatch("appearance model widths do not match the codec")
        if self.joint is not None:
            c = self.joint.config
            if c.cond_channels != rgb + depth or c.target_channels != rgb + depth:
                raise ArchMismatch("joint model widths do not match the codec")
        return self

    @property
    def projection(self):
        return None if self.appearance is None else self.appearance.projection_params()


def build_models(patch=DEFAULT_PATCH, hidden=32, steps=64, schedule="cosine", view_embedding=0,
                 components=("geometry", "appearance"), seed=0):
    """Freshly initialized denoisers for the requested components."""
    rgb = 3 * patch**2
    depth = DEPTH_CHANNELS * patch**2
    configs = {
        "geometry": DenoiserConfig(depth, rgb + depth, hidden, view_embedding=view_embedding),
        "appearance": DenoiserConfig(
            rgb, rgb + depth, hidden, view_embedding=view_embedding, fuse_channels=depth
        ),
        "joint": DenoiserConfig(rgb + depth, rgb + depth, hidden, view_embedding=view_embedding),
    }
    torch.manual_seed(seed)
    nets = {name: Denoiser(configs[name]).eval() for name in components}
    return GtaModels(schedule=make_schedule(schedule, steps), patch=patch, **nets).validate()


@dataclass(eq=False)
class SceneOutput:
    geometry: list
    appearance: list
    trajectory: object
    provenance: dict
    partials: list = field(default_factory=list)


# ----------------------------------------------------------------------------
# conditioning
# ----------------------------------------------------------------------------


def geometry_condition(partial, input_depth, patch):
    """Model-space ``(T, h, w, C)`` array: warped RGB latents ⊕ broadcast input-depth latent."""
    z_rgb = encode(partial.target_frames(), patch).data
    z_d0 = encode_depth([input_depth], patch).data
    z_d0 = np.repeat(z_d0, z_rgb.shape[0], axis=0)
    return to_model_space(np.concatenate([z_rgb, z_d0], axis=3))


def appearance_condition(partial, depths, patch):
    """Model-space raw appearance condition ``z_rgb ⊕ z_geo`` (fused inside the network)."""
    z_rgb = encode(partial.target_frames(), patch).data
    z_geo = encode_depth(depths, patch).data
    if z_rgb.shape[:3] != z_geo.shape[:3]:
        raise DimMismatch("partial frames and geometry disagree in size or count")
    return to_model_space(np.concatenate([z_rgb, z_geo], axis=3))


def _stack_conds(conds):
    arr = np.stack(conds)  # (B, T, h, w, C)
    return torch.from_numpy(np.ascontiguousarray(arr)).permute(0, 1, 4, 2, 3)


def _latents(x):
    return x.permute(0, 1, 3, 4, 2).cpu().numpy().astype(np.float32)


def stage_generators(seeds, iteration, stage):
    """One torch generator per scene for (TTS iteration, stage)."""
    gens = []
    for s in seeds:
        state = np.random.SeedSequence([int(s), int(iteration), int(stage)]).generate_state(2)
        gens.append(torch.Generator().manual_seed(int(state[0]) << 32 | int(state[1])))
    return gens


def _sample(model, conds, schedule, gens, mode):
    if model is None:
        raise BadParams("model component is missing")
    return _latents(sample_tensor(model, _stack_conds(conds), schedule, gens, mode))


def _decode_depths(lat, patch):
    from .latent import LatentSeq

    return decode_depth(LatentSeq(from_model_space(lat)), patch)


def _decode_rgb(lat, patch):
    from .latent import LatentSeq

    return [np.clip(f, 0.0, 1.0) for f in decode(LatentSeq(from_model_space(lat)), patch)]


def geometry_from_partials(partials, input_depths, models, gens, mode="deterministic"):
    conds = [geometry_condition(p, d, models.patch) for p, d in zip(partials, input_depths)]
    lat = _sample(models.geometry, conds, models.schedule, gens, mode)
    return [_decode_depths(x, models.patch) for x in lat]


def appearance_from_partials(partials, geometries, models, gens, mode="deterministic"):
    conds = [appearance_condition(p, g, models.patch) for p, g in zip(partials, geometries)]
    lat = _sample(models.appearance, conds, models.schedule, gens, mode)
    return [_decode_rgb(x, models.patch) for x in lat]


def _as_seed(rng):
    if isinstance(rng, np.random.Generator):
        return int(rng.integers(2**63))
    return 0 if rng is None else int(rng)


def geometry_stage(view, trajectory, models, rng=0, mode="deterministic"):
    """Predict depth maps for the T target views of ``trajectory``."""
    partial = warp_sequence(view, trajectory)
    gens = stage_generators([_as_seed(rng)], 0, 0)
    return geometry_from_partials([partial], [view.depth], models, gens, mode)[0]


def appearance_stage(partial, geometry, models, rng=0, mode="deterministic"):
    """Predict RGB frames for the target views given partial frames and geometry."""
    if len(geometry) != len(partial.trajectory) - 1:
        raise DimMismatch("need one depth map per target view")
    gens = stage_generators([_as_seed(rng)], 0, 1)
    return appearance_from_partials([partial], [geometry], models, gens, mode)[0]


# ----------------------------------------------------------------------------
# inference
# ----------------------------------------------------------------------------


def _single_pass(views, partials, models, seeds, iteration, mode):
    geo = geometry_from_partials(
        partials, [v.depth for v in views], models, stage_generators(seeds, iteration, 0), mode
    )
    app = appearance_from_partials(
        partials, geo, models, stage_generators(seeds, iteration, 1), mode
    )
    return geo, app


def infer_batch(views, trajectories, models, seeds, mode="deterministic"):
    """Single-pass geometry-then-appearance inference for a batch of scenes."""
    partials = [warp_sequence(v, tr) for v, tr in zip(views, trajectories)]
    geo, app = _single_pass(views, partials, models, seeds, 0, mode)
    return [
        SceneOutput(
            g,
            a,
            tr,
            {
                "mode": "single-pass",
                "iterations": 0,
                "reliable_history": [],
                "coverage": [float(np.sum(p.coverage()[1:]))],
                "seed": int(s),
            },
            [p],
        )
        for g, a, tr, s, p in zip(geo, app, trajectories, seeds, partials)
    ]


def infer(view, trajectory, models, rng=0, mode="deterministic"):
    return infer_batch([view], [trajectory], models, [_as_seed(rng)], mode)[0]


def reliable_order(trajectory):
    """Target indices (1-based) sorted by increasing distance from pose 0."""
    dist = view_distances(trajectory)[1:]
    return [int(i) + 1 for i in np.argsort(dist, kind="stable")]


def tts_batch(views, trajectories, models, seeds, Q=5, max_iters=None, mode="deterministic",
              colors="warped"):
    """Test-time scaling for a batch of scenes sharing one target count."""
    if Q < 1:
        raise BadParams("Q must be >= 1")
    counts = {len(tr) - 1 for tr in trajectories}
    if len(counts) != 1:
        raise BadParams("all trajectories in a batch need the same length")
    T = counts.pop()
    bound = max(0, math.ceil((T - Q) / Q))
    max_iters = bound if max_iters is None else max(0, min(int(max_iters), bound))

    outs = infer_batch(views, trajectories, models, seeds, mode)
    orders = [reliable_order(tr) for tr in trajectories]
    size = min(Q, T)
    for o, order in zip(outs, orders):
        o.provenance.update(
            mode="tts", Q=Q, order=order, reliable_history=[sorted(order[:size])]
        )
    it = 0
    while size < T and it < max_iters:
        it += 1
        partials = [
            masked_warp(v, o.appearance, o.geometry, order[:size], tr, colors=colors)
            for v, o, order, tr in zip(views, outs, orders, trajectories)
        ]
        geo, app = _single_pass(views, partials, models, seeds, it, mode)
        size = min(size + Q, T)
        for o, g, a, p, order in zip(outs, geo, app, partials, orders):
            o.geometry, o.appearance = g, a
            o.partials.append(p)
            o.provenance["iterations"] = it
            o.provenance["coverage"].append(float(np.sum(p.coverage()[1:])))
            o.provenance["reliable_history"].append(sorted(order[:size]))
    return outs


def test_time_scaling(view, trajectory, models, Q=5, max_iters=None, rng=0, mode="deterministic"):
    """Iteratively re-condition on input + reliable generated views (window ``Q``)."""
    return tts_batch([view], [trajectory], models, [_as_seed(rng)], Q, max_iters, mode)[0]


test_time_scaling.__test__ = False


def joint_infer_batch(views, trajectories, models, seeds, mode="deterministic"):
    """Single-model variant predicting RGB and depth latents together."""
    partials = [warp_sequence(v, tr) for v, tr in zip(views, trajectories)]
    conds = [geometry_condition(p, v.depth, models.patch) for p, v in zip(partials, views)]
    lat = _sample(models.joint, conds, models.schedule, stage_generators(seeds, 0, 2), mode)
    rgb_ch = 3 * models.patch**2
    outs = []
    for x, tr, s, p in zip(lat, trajectories, seeds, partials):
        outs.append(
            SceneOutput(
                _decode_depths(x[..., rgb_ch:], models.patch),
                _decode_rgb(x[..., :rgb_ch], models.patch),
                tr,
                {"mode": "joint", "iterations": 0, "reliable_history": [], "seed": int(s)},
                [p],
            )
        )
    return outs


# ----------------------------------------------------------------------------
# training data
# ----------------------------------------------------------------------------


def training_pairs(samples, patch=DEFAULT_PATCH):
    """Model-space training arrays built from rendered scene samples.

    Returns a dict of ``(N, T, h, w, C)`` arrays: ``geo_target`` / ``geo_cond``,
    ``app_target`` / ``app_cond`` (ground-truth depth as geometry, i.e. teacher
    forcing) and ``joint_target`` (RGB latents ⊕ depth latents).
    """
    out = {k: [] for k in ("geo_target", "geo_cond", "app_target", "app_cond", "joint_target")}
    for s in samples:
        partial = warp_sequence(s.input_view, s.trajectory)
        gt_rgb = [v.rgb for v in s.targets]
        gt_depth = [v.depth for v in s.targets]
        z_rgb = to_model_space(encode(gt_rgb, patch).data)
        z_depth = to_model_space(encode_depth(gt_depth, patch).data)
        out["geo_target"].append(z_depth)
        out["geo_cond"].append(geometry_condition(partial, s.input_view.depth, patch))
        out["app_target"].append(z_rgb)
        out["app_cond"].append(appearance_condition(partial, gt_depth, patch))
        out["joint_target"].append(np.concatenate([z_rgb, z_depth], axis=3))
    return {k: np.stack(v) for k, v in out.items()}


def hole_filled_baseline(samples):
    """Warped input frames with holes left at the hole value, per target view."""
    return [warp_sequence(s.input_view, s.trajectory).target_frames() for s in samples]


def partial_coverage(partial):
    return float(np.sum(partial.coverage()[1:]))

