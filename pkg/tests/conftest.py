import numpy as np
import pytest
import torch

from gta.diffusion import Denoiser, DenoiserConfig
from gta.pipeline import build_models
from gta.scene import DatasetConfig, generate_samples


@pytest.fixture(scope="session")
def small_samples():
    """Three 32x32 scenes, one per trajectory kind, 5 poses each (4 targets)."""
    return generate_samples(DatasetConfig(scenes=3, views=5, resolution=32, seed=11))


@pytest.fixture(scope="session")
def tiny_models():
    """Untrained GTA models with randomized output heads so samples depend on the inputs."""
    models = build_models(hidden=8, steps=4, seed=3)
    g = torch.Generator().manual_seed(5)
    with torch.no_grad():
        for _, net in models.components():
            for p in (net.conv_out.weight, net.conv_out.bias):
                p.copy_(0.05 * torch.randn(p.shape, generator=g))
    return models


def randomize(net, scale=0.3, seed=0):
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in net.parameters():
            p.copy_(scale * torch.randn(p.shape, generator=g, dtype=p.dtype))
    return net


def mini_denoiser(dtype=torch.float64, seed=0, **kw):
    cfg = dict(target_channels=2, cond_channels=2, hidden=2, levels=1, heads=1, groups=1)
    cfg.update(kw)
    return randomize(Denoiser(DenoiserConfig(**cfg)).to(dtype), seed=seed)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
