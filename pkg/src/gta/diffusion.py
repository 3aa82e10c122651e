"""Variance-preserving latent diffusion: schedules, noising, view shuffling,
a compact multi-view denoiser, noise-prediction training and sampling.

Tensors handed to the network are laid out ``(batch, views, channels, h, w)``;
the LatentSeq-level wrappers convert from and to ``(views, h, w, channels)``.
"""

from dataclasses import asdict, dataclass
import hashlib
import math

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .errors import (
    ArchMismatch,
    BadParams,
    BadTimestep,
    DimMismatch,
    EmptyDataset,
    NonFiniteLoss,
)
from .latent import LatentSeq, ProjectionParams, fuse

_ALPHA_BAR_MAX = 1.0 - 1e-4
_ALPHA_BAR_MIN = 1e-5


# ----------------------------------------------------------------------------
# schedules and the forward process
# ----------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Schedule:
    kind: str
    steps: int
    alpha: np.ndarray
    sigma: np.ndarray

    def alpha_t(self, t):
        return torch.as_tensor(self.alpha, dtype=torch.float32)[t]

    def sigma_t(self, t):
        return torch.as_tensor(self.sigma, dtype=torch.float32)[t]


def make_schedule(kind="cosine", steps=64):
    """Build a VP schedule on ``steps`` points of normalized time s = t / (steps - 1).

    ``cosine`` uses the squared-cosine cumulative signal with offset 0.008;
    ``linear`` is the continuous-time linear-beta profile with beta in [0.1, 20].
    The cumulative signal is clipped to [1e-5, 1 - 1e-4] so both endpoints keep
    a usable signal-to-noise ratio.
    """
    if steps < 2:
        raise BadParams("a schedule needs at least two steps")
    s = np.arange(steps, dtype=np.float64) / (steps - 1)
    if kind == "cosine":
        off = 0.008
        f = np.cos((s + off) / (1 + off) * math.pi / 2) ** 2
        alpha_bar = f / math.cos(off / (1 + off) * math.pi / 2) ** 2
    elif kind == "linear":
        beta_min, beta_max = 0.1, 20.0
        alpha_bar = np.exp(-(beta_min * s + 0.5 * (beta_max - beta_min) * s**2))
    else:
        raise BadParams(f"unknown schedule kind {kind!r}")
    alpha_bar = np.clip(alpha_bar, _ALPHA_BAR_MIN, _ALPHA_BAR_MAX)
    alpha = np.sqrt(alpha_bar)
    sigma = np.sqrt(1.0 - alpha_bar)
    return Schedule(kind, int(steps), alpha, sigma)


def _check_t(t, schedule):
    if not (0 <= int(t) < schedule.steps):
        raise BadTimestep(f"t={t} outside [0, {schedule.steps})")


def forward_diffuse(x0, t, eps, schedule):
    """``alpha_t * x0 + sigma_t * eps`` for LatentSeqs or arrays."""
    _check_t(t, schedule)
    a = x0.data if isinstance(x0, LatentSeq) else np.asarray(x0)
    e = eps.data if isinstance(eps, LatentSeq) else np.asarray(eps)
    if a.shape != e.shape:
        raise DimMismatch(f"x0 {a.shape} and eps {e.shape} differ")
    out = schedule.alpha[t] * a + schedule.sigma[t] * e
    if isinstance(x0, LatentSeq):
        return LatentSeq(out.astype(a.dtype), x0.tag)
    return out


# ----------------------------------------------------------------------------
# random latent shuffle
# ----------------------------------------------------------------------------


def draw_permutation(n_views, p, rng):
    """Uniform permutation of ``n_views`` with probability ``p``, identity otherwise."""
    if rng.random() < p:
        return rng.permutation(n_views)
    return np.arange(n_views)


def shuffle_latents(noisy, cond, target_eps, p, rng):
    """Apply one random view permutation jointly to the three latents.

    Returns ``(noisy', cond', target_eps', permutation)``.
    """
    if not (0.0 <= p <= 1.0):
        raise BadParams("shuffle probability must lie in [0, 1]")
    if not (noisy.views == cond.views == target_eps.views):
        raise DimMismatch("noisy, cond and target must share a view count")
    perm = draw_permutation(noisy.views, p, rng)
    return (
        noisy.permute_views(perm),
        cond.permute_views(perm),
        target_eps.permute_views(perm),
        perm,
    )


def _shuffle_batch(tensors, p, rng):
    """Per-sample joint view shuffle of ``(B, V, ...)`` tensors."""
    b, v = tensors[0].shape[:2]
    perms = torch.stack(
        [torch.as_tensor(draw_permutation(v, p, rng), dtype=torch.long) for _ in range(b)]
    )
    rows = torch.arange(b)[:, None]
    return [x[rows, perms] for x in tensors], perms


# ----------------------------------------------------------------------------
# denoiser
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class DenoiserConfig:
    target_channels: int
    cond_channels: int
    hidden: int = 32
    levels: int = 3
    heads: int = 4
    groups: int = 8
    # >0 adds a learned per-view-index embedding (breaks view equivariance).
    view_embedding: int = 0
    # >0 inserts the appearance projection: cond is split into two halves of
    # width ``fuse_channels`` and replaced by concat-project-plus-residual.
    fuse_channels: int = 0

    def arch_string(self):
        return "Denoiser(" + ",".join(f"{k}={v}" for k, v in asdict(self).items()) + ")"

    @classmethod
    def parse(cls, text):
        if not (text.startswith("Denoiser(") and text.endswith(")")):
            raise ArchMismatch(f"unrecognized architecture {text!r}")
        fields = dict(kv.split("=") for kv in text[len("Denoiser(") : -1].split(","))
        return cls(**{k: int(v) for k, v in fields.items()})


def timestep_embedding(t, dim):
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class ResBlock(nn.Module):
    def __init__(self, cin, cout, temb, groups):
        super().__init__()
        self.norm1 = nn.GroupNorm(min(groups, cin), cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb = nn.Linear(temb, cout)
        self.norm2 = nn.GroupNorm(min(groups, cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(emb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class CrossViewAttention(nn.Module):
    """Self-attention across views at every spatial location, no positional encoding."""

    def __init__(self, channels, heads):
        super().__init__()
        self.norm = nn.LayerNorm(channels)
        self.attn = nn.MultiheadAttention(channels, heads, batch_first=True)

    def forward(self, x, views):
        bv, c, h, w = x.shape
        tokens = x.reshape(bv // views, views, c, h * w).permute(0, 3, 1, 2)
        tokens = tokens.reshape(-1, views, c)
        y = self.norm(tokens)
        y, _ = self.attn(y, y, y, need_weights=False)
        y = y.reshape(bv // views, h * w, views, c).permute(0, 2, 3, 1).reshape(bv, c, h, w)
        return x + y


class Denoiser(nn.Module):
    """Small U-Net over each view with cross-view attention at the coarser levels.

    ``forward(x_t, t, cond)`` takes ``(B, V, C, h, w)`` tensors and integer
    timesteps ``(B,)`` and predicts the injected noise.
    """

    def __init__(self, config):
        super().__init__()
        self.config = config
        c = config.hidden
        g = config.groups
        temb = 4 * c
        self.time_mlp = nn.Sequential(nn.Linear(c, temb), nn.SiLU(), nn.Linear(temb, temb))
        if config.fuse_channels:
            self.projection = nn.Linear(2 * config.fuse_channels, config.fuse_channels)
            nn.init.zeros_(self.projection.weight)
            nn.init.zeros_(self.projection.bias)
        if config.view_embedding:
            self.view_embed = nn.Parameter(torch.zeros(config.view_embedding, c))
        cin = config.target_channels + (config.fuse_channels or config.cond_channels)
        self.conv_in = nn.Conv2d(cin, c, 3, padding=1)

        widths = [c * min(2**i, 2) for i in range(config.levels)]
        self.down = nn.ModuleList()
        self.down_attn = nn.ModuleList()
        self.downsample = nn.ModuleList()
        prev = c
        for i, wdt in enumerate(widths):
            self.down.append(ResBlock(prev, wdt, temb, g))
            self.down_attn.append(CrossViewAttention(wdt, config.heads) if i > 0 else nn.Identity())
            if i < len(widths) - 1:
                self.downsample.append(nn.Conv2d(wdt, wdt, 3, stride=2, padding=1))
            prev = wdt
        self.mid = ResBlock(prev, prev, temb, g)
        self.mid_attn = CrossViewAttention(prev, config.heads)
        self.up = nn.ModuleList()
        self.up_attn = nn.ModuleList()
        for i in reversed(range(len(widths))):
            self.up.append(ResBlock(prev + widths[i], widths[i], temb, g))
            self.up_attn.append(CrossViewAttention(widths[i], config.heads) if i > 0 else nn.Identity())
            prev = widths[i]
        self.norm_out = nn.GroupNorm(min(g, prev), prev)
        self.conv_out = nn.Conv2d(prev, config.target_channels, 3, padding=1)
        nn.init.zeros_(self.conv_out.weight)
        nn.init.zeros_(self.conv_out.bias)
        # Full-width linear paths around the body, gated per channel by t: the
        # noise target is largely a rescaled x_t minus a rescaled clean estimate,
        # and a body narrower than the latent cannot carry either through its
        # bottleneck. Zero gates keep the output zero at init.
        self.cond_skip = nn.Conv2d(config.cond_channels, config.target_channels, 1)
        self.skip_gain = nn.Linear(temb, 2 * config.target_channels)
        nn.init.zeros_(self.skip_gain.weight)
        nn.init.zeros_(self.skip_gain.bias)

    # -- architecture identity ------------------------------------------------

    def arch_string(self):
        return self.config.arch_string()

    def arch_hash(self):
        shapes = ";".join(f"{k}:{tuple(v.shape)}" for k, v in self.state_dict().items())
        return hashlib.sha256((self.arch_string() + "|" + shapes).encode()).hexdigest()[:16]

    def projection_params(self):
        if not self.config.fuse_channels:
            return None
        return ProjectionParams(
            self.projection.weight.detach().T.cpu().numpy().copy(),
            self.projection.bias.detach().cpu().numpy().copy(),
        )

    # -- forward --------------------------------------------------------------

    def condition(self, cond):
        if not self.config.fuse_channels:
            return cond
        k = self.config.fuse_channels
        z = cond.movedim(2, -1)
        fused = fuse(z[..., :k], z[..., k:], self.projection.weight.T, self.projection.bias)
        return fused.movedim(-1, 2)

    def forward(self, x_t, t, cond):
        b, v, cx, h, w = x_t.shape
        if cx != self.config.target_channels:
            raise ArchMismatch(f"x_t has {cx} channels, model expects {self.config.target_channels}")
        if cond.shape[2] != self.config.cond_channels:
            raise ArchMismatch(
                f"cond has {cond.shape[2]} channels, model expects {self.config.cond_channels}"
            )
        if cond.shape[:2] != (b, v) or cond.shape[3:] != (h, w):
            raise DimMismatch(f"cond {tuple(cond.shape)} does not match x_t {tuple(x_t.shape)}")
        t = torch.as_tensor(t, dtype=torch.long).reshape(-1).expand(b)
        emb = self.time_mlp(timestep_embedding(t, self.config.hidden).to(x_t.dtype))
        emb = emb.repeat_interleave(v, dim=0)

        raw = cond.reshape(b * v, -1, h, w)
        fused = self.condition(cond).reshape(b * v, -1, h, w)
        x = self.conv_in(torch.cat([x_t.reshape(b * v, -1, h, w), fused], dim=1))
        if self.config.view_embedding:
            x = x + self.view_embed[:v].repeat(b, 1)[:, :, None, None]
        skips = []
        for i, block in enumerate(self.down):
            x = block(x, emb)
            x = self.down_attn[i](x, v) if i > 0 else x
            skips.append(x)
            if i < len(self.downsample):
                x = self.downsample[i](x)
        x = self.mid_attn(self.mid(x, emb), v)
        n = len(self.up)
        for j, block in enumerate(self.up):
            skip = skips.pop()
            if x.shape[-1] != skip.shape[-1]:
                x = F.interpolate(x, size=skip.shape[-2:], mode="nearest")
            x = block(torch.cat([x, skip], dim=1), emb)
            x = self.up_attn[j](x, v) if n - 1 - j > 0 else x
        out = self.conv_out(F.silu(self.norm_out(x)))
        g_x, g_c = self.skip_gain(emb)[:, :, None, None].chunk(2, dim=1)
        out = out + g_x * x_t.reshape(b * v, -1, h, w) + g_c * self.cond_skip(raw)
        return out.reshape(b, v, -1, h, w)


def network_from_arch(text):
    return Denoiser(DenoiserConfig.parse(text))


def to_tensor(latent):
    """LatentSeq (V, h, w, C) -> tensor (1, V, C, h, w)."""
    return torch.from_numpy(np.ascontiguousarray(latent.data, dtype=np.float32)).permute(
        0, 3, 1, 2
    )[None]


def from_tensor(x, tag="raw"):
    """Tensor (V, C, h, w) or (1, V, C, h, w) -> LatentSeq."""
    if x.dim() == 5:
        x = x[0]
    return LatentSeq(x.detach().permute(0, 2, 3, 1).cpu().numpy().copy(), tag)


@torch.no_grad()
def denoiser_apply(model, x_t, t, cond):
    """Predicted noise for one latent sequence."""
    if x_t.shape[:3] != cond.shape[:3]:
        raise DimMismatch(f"x_t {x_t.shape} and cond {cond.shape} disagree")
    if cond.channels != model.config.cond_channels:
        raise ArchMismatch(f"cond has {cond.channels} channels, expected {model.config.cond_channels}")
    dtype = next(model.parameters()).dtype
    out = model(to_tensor(x_t).to(dtype), torch.tensor([int(t)]), to_tensor(cond).to(dtype))
    return from_tensor(out.float())


# ----------------------------------------------------------------------------
# training
# ----------------------------------------------------------------------------


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 4
    iterations: int = 2000
    shuffle_p: float = 0.5
    seed: int = 0
    clip_norm: float = 1.0
    # "constant" or "cosine" (anneal to zero over the run)
    lr_decay: str = "constant"

    def validate(self):
        if not 0.0 <= self.shuffle_p <= 1.0:
            raise BadParams("shuffle_p must lie in [0, 1]")
        if self.lr < 0 or self.batch_size < 1 or self.iterations < 0 or self.clip_norm <= 0:
            raise BadParams("learning rate, batch size, iterations and clip norm must be positive")
        if self.lr_decay not in ("constant", "cosine"):
            raise BadParams(f"unknown lr_decay {self.lr_decay!r}")


def noise_prediction_loss(model, x0, cond, t, eps, schedule):
    """Mean squared error between predicted and injected noise."""
    a = schedule.alpha_t(t).to(x0.dtype).view(-1, 1, 1, 1, 1)
    s = schedule.sigma_t(t).to(x0.dtype).view(-1, 1, 1, 1, 1)
    x_t = a * x0 + s * eps
    return torch.mean((model(x_t, t, cond) - eps) ** 2)


def _as_batch(arr):
    """(N, V, h, w, C) numpy -> (N, V, C, h, w) float32 tensor."""
    if isinstance(arr, torch.Tensor):
        return arr
    return torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float32)).permute(0, 1, 4, 2, 3)


class _DataStream:
    """Seeded draws of (batch indices, timesteps, noise) for one training run."""

    def __init__(self, seed, n, steps, shape, batch):
        self.gen = torch.Generator().manual_seed(int(seed))
        self.n, self.steps, self.shape, self.batch = n, steps, shape, batch

    def next(self):
        idx = torch.randint(self.n, (self.batch,), generator=self.gen)
        t = torch.randint(self.steps, (self.batch,), generator=self.gen)
        eps = torch.randn((self.batch, *self.shape), generator=self.gen)
        return idx, t, eps


def train(model, targets, conds, cfg, schedule, callback=None):
    """Optimize ``model`` on (target, condition) latent pairs.

    ``targets`` and ``conds`` are ``(N, V, h, w, C)`` arrays in model space.
    Each step draws a batch, one timestep per sample (shared by its views),
    Gaussian noise, applies the joint view shuffle with probability
    ``cfg.shuffle_p``, and takes an Adam step on the noise-prediction MSE with
    gradient-norm clipping.  Returns ``(model, losses)``.
    """
    cfg.validate()
    x_all = _as_batch(targets)
    c_all = _as_batch(conds)
    if x_all.shape[0] == 0:
        raise EmptyDataset("no training pairs")
    if x_all.shape[:2] != c_all.shape[:2] or x_all.shape[3:] != c_all.shape[3:]:
        raise DimMismatch(f"targets {tuple(x_all.shape)} and conds {tuple(c_all.shape)} disagree")
    dtype = next(model.parameters()).dtype
    x_all, c_all = x_all.to(dtype), c_all.to(dtype)

    stream = _DataStream(cfg.seed, x_all.shape[0], schedule.steps, x_all.shape[1:], cfg.batch_size)
    shuffle_rng = np.random.default_rng([cfg.seed, 7])
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    if cfg.lr_decay == "cosine":
        n = max(cfg.iterations, 1)
        decay = torch.optim.lr_scheduler.LambdaLR(
            opt, lambda i: 0.5 * (1.0 + math.cos(math.pi * min(i, n) / n))
        )
    else:
        decay = None
    losses = []
    model.train()
    for it in range(cfg.iterations):
        idx, t, eps = stream.next()
        x0, cond, eps = x_all[idx], c_all[idx], eps.to(dtype)
        if cfg.shuffle_p > 0:
            (x0, cond, eps), _ = _shuffle_batch([x0, cond, eps], cfg.shuffle_p, shuffle_rng)
        loss = noise_prediction_loss(model, x0, cond, t, eps, schedule)
        if not torch.isfinite(loss):
            raise NonFiniteLoss(f"loss became {loss.item()} at iteration {it}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.clip_norm)
        opt.step()
        if decay is not None:
            decay.step()
        losses.append(float(loss.item()))
        if callback is not None:
            callback(it, losses[-1])
    model.eval()
    return model, np.asarray(losses)


@torch.no_grad()
def evaluation_losses(model, targets, conds, cfg, schedule):
    """Losses the training loop would see at each step if no update were made."""
    dtype = next(model.parameters()).dtype
    x_all = _as_batch(targets).to(dtype)
    c_all = _as_batch(conds).to(dtype)
    stream = _DataStream(cfg.seed, x_all.shape[0], schedule.steps, x_all.shape[1:], cfg.batch_size)
    shuffle_rng = np.random.default_rng([cfg.seed, 7])
    out = []
    for _ in range(cfg.iterations):
        idx, t, eps = stream.next()
        x0, cond, eps = x_all[idx], c_all[idx], eps.to(dtype)
        if cfg.shuffle_p > 0:
            (x0, cond, eps), _ = _shuffle_batch([x0, cond, eps], cfg.shuffle_p, shuffle_rng)
        out.append(float(noise_prediction_loss(model, x0, cond, t, eps, schedule)))
    return np.asarray(out)


# ----------------------------------------------------------------------------
# sampling
# ----------------------------------------------------------------------------


def _generators(rng, batch):
    if isinstance(rng, (list, tuple)):
        if len(rng) != batch:
            raise DimMismatch("need one generator per batch element")
        return list(rng)
    if isinstance(rng, torch.Generator):
        return [rng] * batch
    return [torch.Generator().manual_seed(int(rng) + i) for i in range(batch)]


def _randn(shape, gens):
    return torch.stack([torch.randn(shape, generator=g) for g in gens])


@torch.no_grad()
def sample_tensor(model, cond, schedule, rng, mode="deterministic", noise=None, clip=1.0):
    """Reverse diffusion from unit Gaussian noise, conditioned on ``cond`` ``(B, V, C, h, w)``.

    ``deterministic`` follows the noise-free (DDIM) update; ``ancestral`` adds
    posterior noise at every step.  ``rng`` is an int seed, a generator, or one
    generator per batch element.  The predicted clean sample is clipped to
    ``[-clip, clip]`` at each step (``clip=None`` disables it).
    """
    if mode not in ("deterministic", "ancestral"):
        raise BadParams(f"unknown sampling mode {mode!r}")
    if cond.shape[2] != model.config.cond_channels:
        raise DimMismatch(
            f"cond has {cond.shape[2]} channels, model expects {model.config.cond_channels}"
        )
    dtype = next(model.parameters()).dtype
    cond = cond.to(dtype)
    b, v, _, h, w = cond.shape
    gens = _generators(rng, b)
    shape = (v, model.config.target_channels, h, w)
    x = (_randn(shape, gens) if noise is None else torch.as_tensor(noise)).to(dtype)
    alpha = torch.as_tensor(schedule.alpha, dtype=dtype)
    sigma = torch.as_tensor(schedule.sigma, dtype=dtype)
    for t in reversed(range(schedule.steps)):
        eps = model(x, torch.full((b,), t, dtype=torch.long), cond)
        x0 = (x - sigma[t] * eps) / alpha[t]
        if clip is not None:
            x0 = x0.clamp(-clip, clip)
            eps = (x - alpha[t] * x0) / sigma[t]
        if t == 0:
            x = x0
            break
        s = t - 1
        if mode == "deterministic":
            x = alpha[s] * x0 + sigma[s] * eps
        else:
            a_ts = alpha[t] / alpha[s]
            var_ts = sigma[t] ** 2 - a_ts**2 * sigma[s] ** 2
            mean = (alpha[s] * var_ts / sigma[t] ** 2) * x0 + (a_ts * sigma[s] ** 2 / sigma[t] ** 2) * x
            std = torch.sqrt(var_ts * sigma[s] ** 2 / sigma[t] ** 2)
            x = mean + std * _randn(shape, gens).to(dtype)
    return x


def sample(model, cond, schedule, rng, mode="deterministic", noise=None, clip=1.0):
    """LatentSeq front end to :func:`sample_tensor`."""
    n = None if noise is None else to_tensor(noise)
    out = sample_tensor(model, to_tensor(cond), schedule, rng, mode, n, clip)
    return from_tensor(out.float())
