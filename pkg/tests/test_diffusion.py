from types import SimpleNamespace

import numpy as np
import pytest
import torch

from conftest import mini_denoiser, randomize
from gta.diffusion import (
    Denoiser,
    DenoiserConfig,
    TrainConfig,
    denoiser_apply,
    draw_permutation,
    evaluation_losses,
    forward_diffuse,
    make_schedule,
    network_from_arch,
    noise_prediction_loss,
    sample,
    sample_tensor,
    shuffle_latents,
    train,
)
from gta.errors import (
    ArchMismatch,
    BadParams,
    BadTimestep,
    DimMismatch,
    EmptyDataset,
    NonFiniteLoss,
)
from gta.latent import LatentSeq


@pytest.mark.parametrize("kind", ["cosine", "linear"])
def test_two_step_endpoints(kind):
    s = make_schedule(kind, 2)
    assert s.alpha[0] > 0.99 and s.alpha[-1] < 0.01
    np.testing.assert_allclose(s.alpha**2 + s.sigma**2, 1.0, atol=1e-12)


def test_cosine_strictly_decreasing():
    a = make_schedule("cosine", 64).alpha
    assert np.all(np.diff(a) < 0)


def test_schedule_rejects_bad_args():
    with pytest.raises(BadParams):
        make_schedule("cosine", 1)
    with pytest.raises(BadParams):
        make_schedule("sigmoid", 8)


def test_forward_diffuse_linearity(rng):
    s = make_schedule("cosine", 16)
    eps = rng.normal(size=(2, 3, 3, 4))
    np.testing.assert_allclose(forward_diffuse(np.zeros_like(eps), 5, eps, s), s.sigma[5] * eps)
    x0 = rng.normal(size=eps.shape)
    # with the noise scale forced to zero the clean sample passes through
    clean = make_schedule("cosine", 16)
    clean.alpha[0], clean.sigma[0] = 1.0, 0.0
    np.testing.assert_array_equal(forward_diffuse(x0, 0, eps, clean), x0)
    with pytest.raises(BadTimestep):
        forward_diffuse(x0, 16, eps, s)
    with pytest.raises(DimMismatch):
        forward_diffuse(x0, 1, eps[:1], s)


def test_forward_diffuse_latentseq(rng):
    s = make_schedule("linear", 8)
    x = LatentSeq(rng.random((2, 2, 2, 3)).astype(np.float32), "rgb")
    e = LatentSeq(rng.normal(size=(2, 2, 2, 3)).astype(np.float32))
    out = forward_diffuse(x, 3, e, s)
    assert out.tag == "rgb"
    np.testing.assert_allclose(out.data, s.alpha[3] * x.data + s.sigma[3] * e.data, rtol=1e-6)


def test_permutation_degenerate_cases():
    rng = np.random.default_rng(0)
    for _ in range(50):
        np.testing.assert_array_equal(draw_permutation(4, 0.0, rng), np.arange(4))


def test_shuffle_swaps_all_three(rng):
    def seq(v):
        return LatentSeq(np.arange(2.0)[:, None, None, None] * np.ones((2, 1, 1, 1)) + v)

    a, b, c = seq(0.0), seq(10.0), seq(20.0)

    class Swap:
        def random(self):
            return 0.0

        def permutation(self, n):
            return np.array([1, 0])

    out = shuffle_latents(a, b, c, 1.0, Swap())
    np.testing.assert_array_equal(out[3], [1, 0])
    for orig, got in zip((a, b, c), out[:3]):
        np.testing.assert_array_equal(got.data, orig.data[::-1])
    with pytest.raises(BadParams):
        shuffle_latents(a, b, c, 1.5, rng)
    with pytest.raises(DimMismatch):
        shuffle_latents(a, LatentSeq(np.zeros((3, 1, 1, 1))), c, 0.5, rng)


def test_zero_head_predicts_zero(rng):
    net = Denoiser(DenoiserConfig(4, 6, hidden=8))
    x = torch.randn(2, 3, 4, 4, 4)
    c = torch.randn(2, 3, 6, 4, 4)
    assert torch.count_nonzero(net(x, torch.tensor([1, 2]), c)) == 0


def test_denoiser_deterministic_and_checked():
    net = randomize(Denoiser(DenoiserConfig(4, 6, hidden=8)), 0.1)
    x = torch.randn(1, 3, 4, 4, 4)
    c = torch.randn(1, 3, 6, 4, 4)
    assert torch.equal(net(x, torch.tensor([3]), c), net(x, torch.tensor([3]), c))
    with pytest.raises(ArchMismatch):
        net(torch.randn(1, 3, 5, 4, 4), torch.tensor([3]), c)
    with pytest.raises(ArchMismatch):
        net(x, torch.tensor([3]), torch.randn(1, 3, 5, 4, 4))
    with pytest.raises(DimMismatch):
        net(x, torch.tensor([3]), torch.randn(1, 2, 6, 4, 4))


def test_denoiser_view_equivariance():
    net = randomize(Denoiser(DenoiserConfig(4, 6, hidden=8)), 0.2)
    x = torch.randn(2, 4, 4, 4, 4)
    c = torch.randn(2, 4, 6, 4, 4)
    t = torch.tensor([2, 7])
    perm = torch.tensor([2, 0, 3, 1])
    out = net(x, t, c)
    torch.testing.assert_close(net(x[:, perm], t, c[:, perm]), out[:, perm], atol=1e-5, rtol=1e-5)


def test_view_embedding_breaks_equivariance():
    net = randomize(Denoiser(DenoiserConfig(4, 6, hidden=8, view_embedding=4)), 0.3)
    x = torch.randn(1, 4, 4, 4, 4)
    c = torch.randn(1, 4, 6, 4, 4)
    perm = torch.tensor([1, 0, 3, 2])
    a = net(x[:, perm], torch.tensor([3]), c[:, perm])
    b = net(x, torch.tensor([3]), c)[:, perm]
    assert (a - b).abs().max() > 1e-3


def test_arch_string_roundtrip():
    cfg = DenoiserConfig(48, 96, hidden=16, view_embedding=8, fuse_channels=48)
    net = network_from_arch(cfg.arch_string())
    assert net.config == cfg
    with pytest.raises(ArchMismatch):
        network_from_arch("UNet(x=1)")


def test_denoiser_apply_latentseq():
    net = randomize(Denoiser(DenoiserConfig(3, 2, hidden=4, groups=2, heads=1)), 0.1)
    x = LatentSeq(np.random.default_rng(0).normal(size=(2, 4, 4, 3)).astype(np.float32))
    c = LatentSeq(np.zeros((2, 4, 4, 2), np.float32))
    out = denoiser_apply(net, x, 3, c)
    assert out.shape == x.shape
    with pytest.raises(ArchMismatch):
        denoiser_apply(net, x, 3, LatentSeq(np.zeros((2, 4, 4, 3), np.float32)))


class OracleDenoiser(torch.nn.Module):
    """Returns exactly the noise that turns x_t back into a known x0."""

    def __init__(self, x0, schedule):
        super().__init__()
        self.x0 = x0
        self.alpha = torch.as_tensor(schedule.alpha, dtype=torch.float64)
        self.sigma = torch.as_tensor(schedule.sigma, dtype=torch.float64)
        self.dummy = torch.nn.Parameter(torch.zeros(1, dtype=torch.float64))
        self.config = SimpleNamespace(cond_channels=1, target_channels=x0.shape[2])

    def forward(self, x, t, cond):
        a = self.alpha[t].view(-1, 1, 1, 1, 1)
        s = self.sigma[t].view(-1, 1, 1, 1, 1)
        return (x - a * self.x0) / s


@pytest.mark.parametrize("kind", ["cosine", "linear"])
def test_oracle_denoiser_recovers_x0(kind):
    s = make_schedule(kind, 2)
    x0 = torch.rand(1, 3, 2, 4, 4, dtype=torch.float64) * 1.8 - 0.9
    out = sample_tensor(OracleDenoiser(x0, s), torch.zeros(1, 3, 1, 4, 4), s, 0)
    assert (out - x0).abs().max() < 1e-4


def test_sampling_determinism():
    net = randomize(Denoiser(DenoiserConfig(3, 2, hidden=4, groups=2, heads=1)), 0.1)
    s = make_schedule("cosine", 6)
    cond = LatentSeq(np.random.default_rng(1).normal(size=(3, 4, 4, 2)).astype(np.float32))
    for mode in ("ancestral", "deterministic"):
        a = sample(net, cond, s, 17, mode)
        b = sample(net, cond, s, 17, mode)
        np.testing.assert_array_equal(a.data, b.data)
    assert not np.array_equal(sample(net, cond, s, 17, "ancestral").data,
                              sample(net, cond, s, 18, "ancestral").data)
    with pytest.raises(BadParams):
        sample(net, cond, s, 0, "euler")


def test_per_element_generators_make_batch_independent():
    net = randomize(Denoiser(DenoiserConfig(3, 2, hidden=4, groups=2, heads=1)), 0.1)
    s = make_schedule("cosine", 4)
    cond = torch.randn(2, 3, 2, 4, 4)
    both = sample_tensor(net, cond, s, [torch.Generator().manual_seed(k) for k in (5, 9)])
    alone = sample_tensor(net, cond[1:], s, [torch.Generator().manual_seed(9)])
    torch.testing.assert_close(both[1:], alone, atol=1e-5, rtol=1e-5)


def _pairs(n=3, v=3, ch=2, hw=4, seed=0):
    g = np.random.default_rng(seed)
    return (g.normal(size=(n, v, hw, hw, ch)).astype(np.float32),
            g.normal(size=(n, v, hw, hw, ch)).astype(np.float32))


def test_train_loss_curve_deterministic():
    x, c = _pairs()
    s = make_schedule("cosine", 8)
    cfg = TrainConfig(lr=1e-2, batch_size=2, iterations=15, seed=4)
    _, l1 = train(mini_denoiser(torch.float32, seed=1), x, c, cfg, s)
    _, l2 = train(mini_denoiser(torch.float32, seed=1), x, c, cfg, s)
    np.testing.assert_array_equal(l1, l2)
    assert l1.shape == (15,)


def test_zero_lr_freezes_params():
    x, c = _pairs()
    s = make_schedule("cosine", 8)
    net = mini_denoiser(torch.float32, seed=2)
    before = {k: v.clone() for k, v in net.state_dict().items()}
    cfg = TrainConfig(lr=0.0, batch_size=2, iterations=10, seed=3)
    _, losses = train(net, x, c, cfg, s)
    for k, v in net.state_dict().items():
        assert torch.equal(v, before[k])
    np.testing.assert_allclose(losses, evaluation_losses(net, x, c, cfg, s), rtol=1e-6)


def test_cosine_decay_keeps_first_step():
    x, c = _pairs()
    s = make_schedule("cosine", 8)
    ref = mini_denoiser(torch.float32, seed=6)
    n = 6
    cfg = TrainConfig(lr=1e-2, batch_size=2, iterations=n, seed=1, lr_decay="cosine")
    _, decayed = train(ref, x, c, cfg, s)
    _, const = train(mini_denoiser(torch.float32, seed=6), x, c,
                     TrainConfig(lr=1e-2, batch_size=2, iterations=n, seed=1), s)
    assert decayed[0] == const[0] and not np.array_equal(decayed, const)
    with pytest.raises(BadParams):
        TrainConfig(lr_decay="step").validate()


def test_single_sample_overfits():
    x, c = _pairs(n=1)
    s = make_schedule("cosine", 8)
    net = Denoiser(DenoiserConfig(2, 2, hidden=8, groups=4, heads=2))
    _, losses = train(net, x, c, TrainConfig(lr=3e-3, batch_size=1, iterations=500, seed=0), s)
    assert losses[-50:].mean() < losses[:50].mean()


def test_train_errors():
    x, c = _pairs()
    s = make_schedule("cosine", 8)
    net = mini_denoiser(torch.float32)
    with pytest.raises(EmptyDataset):
        train(net, x[:0], c[:0], TrainConfig(iterations=1), s)
    with pytest.raises(BadParams):
        train(net, x, c, TrainConfig(shuffle_p=1.2), s)
    with pytest.raises(DimMismatch):
        train(net, x, c[:, :2], TrainConfig(iterations=1), s)
    bad = x.copy()
    bad[:] = np.inf
    with pytest.raises(NonFiniteLoss):
        train(net, bad, c, TrainConfig(iterations=2, batch_size=1), s)


def test_shuffle_has_no_effect_on_equivariant_loss():
    x, c = _pairs(n=4, v=4)
    s = make_schedule("cosine", 8)
    base = TrainConfig(lr=0.0, batch_size=3, iterations=20, seed=8)
    net = mini_denoiser(torch.float64, seed=5)
    off = evaluation_losses(net, x.astype(np.float64), c.astype(np.float64), base, s)
    on = evaluation_losses(
        net, x.astype(np.float64), c.astype(np.float64),
        TrainConfig(lr=0.0, batch_size=3, iterations=20, seed=8, shuffle_p=1.0), s,
    )
    np.testing.assert_allclose(on, off, atol=1e-10)


def test_noise_prediction_loss_value():
    s = make_schedule("cosine", 4)
    net = Denoiser(DenoiserConfig(2, 2, hidden=4, groups=2, heads=1))  # zero head
    x0 = torch.randn(1, 2, 2, 3, 3)
    eps = torch.randn(1, 2, 2, 3, 3)
    loss = noise_prediction_loss(net, x0, torch.zeros_like(x0), torch.tensor([1]), eps, s)
    torch.testing.assert_close(loss, torch.mean(eps**2))
