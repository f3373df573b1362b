import math

import numpy as np
import pytest
import torch
import torch.nn as nn
from hypothesis import given, settings
from hypothesis import strategies as st

from gradcheck import max_relative_error
from sodgan.corpus import Corpus, build_corpus
from sodgan.diffusion import (DiffusionSchedule, EmbeddingNet, build_fewshot_set, diffusion_step, embed_images,
                              kl_term, load_fewshot, loss_adversarial_recon, loss_variational, make_schedule,
                              q_sample, reverse_step, sample_prior, save_fewshot, train_den)
from sodgan.errors import EmptyInputError, InvalidArgumentError, MissingClassError
from sodgan.generator import GeneratorNet, ReconDiscriminator


def test_schedule_running_product():
    s = make_schedule(3, 0.1, 0.1)
    assert np.allclose(s.alpha_bars, [0.9, 0.81, 0.729], rtol=0, atol=1e-15)
    assert np.allclose(s.alphas, 0.9)


def test_schedule_validation():
    for args in ((3, 0.0, 0.0), (0, 0.1, 0.2), (3, 0.3, 0.2), (3, 0.1, 1.0)):
        with pytest.raises(InvalidArgumentError):
            make_schedule(*args)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 200), st.floats(1e-5, 0.5), st.floats(0, 0.49))
def test_alpha_bar_strictly_decreasing(T, start, extra):
    s = make_schedule(T, start, min(start + extra, 0.99))
    ab = s.alpha_bars
    assert np.all(np.diff(ab) < 0) and 0 < ab[-1] < 1
    assert np.all((s.betas > 0) & (s.betas < 1))


def test_diffusion_step_examples():
    x = np.array([0.3, -1.2, 2.0])
    n = np.array([0.5, 0.1, -0.7])
    assert np.array_equal(diffusion_step(x, 0.0, n), x)
    assert np.allclose(diffusion_step(np.zeros(3), 0.19, n), math.sqrt(0.19) * n)
    assert abs(diffusion_step(1.0, 0.19, 0.0) - 0.9) < 1e-15
    with pytest.raises(InvalidArgumentError):
        diffusion_step(np.zeros(3), 0.1, np.zeros(4))


def test_q_sample_examples():
    identity = DiffusionSchedule(np.zeros(4))
    x = np.array([0.1, 0.7])
    assert np.array_equal(q_sample(x, 3, identity, np.ones(2)), x)
    s = make_schedule(3, 0.1, 0.1)
    assert abs(q_sample(1.0, 3, s, 0.0) - math.sqrt(0.729)) < 1e-15
    assert abs(math.sqrt(0.729) - 0.853815) < 1e-6
    for t in (0, 4):
        with pytest.raises(InvalidArgumentError):
            q_sample(1.0, t, s, 0.0)


def test_q_sample_moments():
    s = make_schedule(20, 1e-3, 0.05)
    rng = np.random.default_rng(0)
    x = q_sample(np.full(10 ** 4, 0.8), 15, s, rng.standard_normal(10 ** 4))
    ab = s.alpha_bars[14]
    assert abs(x.mean() / (0.8 * math.sqrt(ab)) - 1) < 0.02
    assert abs(x.std() / math.sqrt(1 - ab) - 1) < 0.02


class IdentityMean(nn.Module):
    latent_dim = 3

    def reverse_mean(self, x_t, t, sched):
        return x_t


def test_reverse_step_identity_stub():
    s = make_schedule(5)
    x = torch.tensor([[0.2, -0.4, 1.5]])
    out = reverse_step(x, 3, IdentityMean(), s, variance=0.0)
    assert torch.equal(out, x)
    assert reverse_step(torch.zeros(4, 3), 5, IdentityMean(), s).shape == (4, 3)
    with pytest.raises(InvalidArgumentError):
        reverse_step(x, 6, IdentityMean(), s)


class LinearDenoiser(nn.Module):
    def __init__(self, d, bias=True):
        super().__init__()
        self.latent_dim = d
        self.lin = nn.Linear(d, d, bias=bias)

    def predict_noise(self, z_t, t):
        return self.lin(z_t)

    def reverse_mean(self, x_t, t, sched):
        return EmbeddingNet.reverse_mean(self, x_t, t, sched)


class ConstNoise(nn.Module):
    def __init__(self, value):
        super().__init__()
        self.value = value

    def predict_noise(self, z_t, t):
        return self.value.expand_as(z_t) if torch.is_tensor(self.value) else torch.zeros_like(z_t)


def test_loss_variational_examples():
    s = make_schedule(10)
    d = 6
    z0 = torch.randn(1, d)
    eps = torch.ones(1, d)
    assert float(loss_variational(z0, ConstNoise(None), s, t=4, noise=eps)) == pytest.approx(d, abs=1e-6)
    eps = torch.randn(1, d)
    assert float(loss_variational(z0, ConstNoise(None), s, t=4, noise=eps)) == pytest.approx(
        float((eps ** 2).sum()), rel=1e-6)
    assert float(loss_variational(z0, ConstNoise(eps), s, t=7, noise=eps)) == 0.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_loss_variational_nonnegative(seed):
    torch.manual_seed(seed)
    net = EmbeddingNet(latent_dim=8, num_classes=2, image_size=16, base_channels=4, hidden=16)
    with torch.no_grad():
        assert float(loss_variational(torch.randn(5, 8), net, make_schedule(20), seed=seed)) >= 0


def reference_kl(z0, t, noise, eps_hat, sched):
    """KL between the forward posterior and the model reverse step, from Gaussian formulas."""
    b = sched.betas[t - 1]
    a = 1 - b
    ab = np.prod(1 - sched.betas[:t])
    ab_prev = np.prod(1 - sched.betas[:t - 1])
    x_t = math.sqrt(ab) * z0 + math.sqrt(1 - ab) * noise
    mu_q = (math.sqrt(ab_prev) * b * z0 + math.sqrt(a) * (1 - ab_prev) * x_t) / (1 - ab)
    var_q = b * (1 - ab_prev) / (1 - ab)
    mu_p = (x_t - b / math.sqrt(1 - ab) * eps_hat) / math.sqrt(a)
    d = len(z0)
    return 0.5 * (d * (var_q / b - 1 - math.log(var_q / b)) + ((mu_q - mu_p) ** 2).sum() / b)


def test_kl_oracle_and_surrogate_proportionality():
    torch.manual_seed(0)
    sched = make_schedule(8, 1e-3, 0.2)
    d = 4
    net = LinearDenoiser(d).double()
    rng = np.random.default_rng(1)
    for t in (2, 5, 8):
        b = sched.betas[t - 1]
        ab = sched.alpha_bars[t - 1]
        weight = b / (2 * (1 - b) * (1 - ab))
        ab_prev = sched.alpha_bars[t - 2]
        var_ratio = (1 - ab_prev) / (1 - ab)
        const = 0.5 * d * (var_ratio - 1 - math.log(var_ratio))
        for _ in range(5):
            z0, noise = rng.standard_normal(d), rng.standard_normal(d)
            x_t = math.sqrt(ab) * z0 + math.sqrt(1 - ab) * noise
            with torch.no_grad():
                eps_hat = net.predict_noise(torch.from_numpy(x_t)[None], None)[0].numpy()
            kl = float(kl_term(torch.from_numpy(z0)[None], t, torch.from_numpy(noise)[None], net, sched).detach())
            assert kl == pytest.approx(reference_kl(z0, t, noise, eps_hat, sched), rel=1e-10)
            with torch.no_grad():
                sur = float(loss_variational(torch.from_numpy(z0)[None], net, sched, t=t,
                                             noise=torch.from_numpy(noise)[None]))
            assert kl - const == pytest.approx(weight * sur, rel=1e-9)


def test_gradient_loss_variational():
    torch.manual_seed(0)
    net = LinearDenoiser(5).double()  # 30 parameters
    sched = make_schedule(10)
    z0 = torch.randn(3, 5, dtype=torch.float64)
    noise = torch.randn(3, 5, dtype=torch.float64)
    t = torch.tensor([2, 5, 9])

    def fn():
        return torch.stack([loss_variational(z0[i:i + 1], net, sched, t=int(t[i]), noise=noise[i:i + 1])
                            for i in range(3)]).sum()

    assert max_relative_error(fn, list(net.parameters())) < 1e-3


# ---- adversarial reconstruction ----------------------------------------------

class StubEncoder(nn.Module):
    """E(x) = w * mean(x) + b over a 2-d latent (2 parameters)."""

    def __init__(self):
        super().__init__()
        self.w = nn.Parameter(torch.tensor(0.7, dtype=torch.float64))
        self.b = nn.Parameter(torch.tensor(-0.2, dtype=torch.float64))

    def encode(self, x, c):
        m = x.mean(dim=(1, 2, 3))
        return torch.stack([self.w * m + self.b, self.w * m - self.b], dim=1)


class StubGenerator(nn.Module):
    def __init__(self, trained=True):
        super().__init__()
        self.register_buffer("trained", torch.tensor(trained))
        self.basis = torch.linspace(-1, 1, 2 * 3 * 4 * 4, dtype=torch.float64).view(2, 3, 4, 4)

    def forward(self, z, c):
        img = torch.sigmoid(torch.einsum("nk,kchw->nchw", z, self.basis))
        return img, [img]


class StubDiscriminator(nn.Module):
    def __init__(self, zero=False):
        super().__init__()
        self.w = nn.Parameter(torch.zeros(3, dtype=torch.float64) if zero else
                              torch.tensor([0.5, -0.3, 0.8], dtype=torch.float64))
        self.b = nn.Parameter(torch.tensor(0.0 if zero else 0.1, dtype=torch.float64))

    def forward(self, x, c):
        return x.mean(dim=(2, 3)) @ self.w + self.b


def _batch():
    torch.manual_seed(3)
    return torch.rand(4, 3, 4, 4, dtype=torch.float64), torch.zeros(4, dtype=torch.long)


def test_adversarial_recon_constant_discriminator():
    x, c = _batch()
    d_loss, den_loss = loss_adversarial_recon(StubEncoder(), StubGenerator(), StubDiscriminator(zero=True), x, c)
    assert d_loss.detach().item() == pytest.approx(2 * math.log(2), abs=1e-12)
    assert den_loss.detach().item() == pytest.approx(math.log(2), abs=1e-12)


def test_adversarial_recon_requires_trained_generator():
    x, c = _batch()
    with pytest.raises(InvalidArgumentError):
        loss_adversarial_recon(StubEncoder(), StubGenerator(False), StubDiscriminator(), x, c)


def test_gradient_den_loss():
    x, c = _batch()
    enc, g, d = StubEncoder(), StubGenerator(), StubDiscriminator()
    err = max_relative_error(lambda: loss_adversarial_recon(enc, g, d, x, c)[1], list(enc.parameters()))
    assert err < 1e-3
    assert float(loss_adversarial_recon(enc, g, d, x, c)[1].detach()) >= 0


def test_gradient_d_r_loss():
    x, c = _batch()
    enc, g, d = StubEncoder(), StubGenerator(), StubDiscriminator()
    err = max_relative_error(lambda: loss_adversarial_recon(enc, g, d, x, c)[0], list(d.parameters()))
    assert err < 1e-3


# ---- training and few-shot set -----------------------------------------------

@pytest.fixture(scope="module")
def tiny_setup():
    corpus = build_corpus(4, 3, seed=0, size=16)
    torch.manual_seed(0)
    g = GeneratorNet(latent_dim=8, num_classes=3, image_size=16, base_channels=16)
    g.trained.fill_(True)
    g.eval()
    d = ReconDiscriminator(num_classes=3, image_size=16, base_channels=8)
    return corpus, g, d


def test_train_den_log_and_determinism(tiny_setup):
    corpus, g, d = tiny_setup
    sched = make_schedule(10)
    before = {k: v.clone() for k, v in g.state_dict().items()}
    den, log = train_den(corpus, g, d, sched, epochs=15, seed=0, batch_size=4, lr=3e-3)
    assert log[0]["epoch"] == 0 and log[-1]["epoch"] == 15
    assert log[-1]["heldout_recon_l1"] < log[0]["heldout_recon_l1"]
    for k, v in g.state_dict().items():
        assert torch.equal(v, before[k])
    z = embed_images(den, [e.image for e in corpus.test], [e.class_id for e in corpus.test])
    assert z.shape == (len(corpus.test), 8)
    den2, _ = train_den(corpus, g, d, sched, epochs=15, seed=0, batch_size=4, lr=3e-3)
    for (k, v), v2 in zip(den.state_dict().items(), den2.state_dict().values()):
        assert torch.equal(v, v2), k


def test_train_den_rejects(tiny_setup):
    corpus, g, d = tiny_setup
    with pytest.raises(EmptyInputError):
        train_den(Corpus([], 3, 16), g, d, make_schedule(5), 1)
    with pytest.raises(InvalidArgumentError):
        train_den(corpus, g, d, make_schedule(5), 0)
    fresh = GeneratorNet(latent_dim=8, num_classes=3, image_size=16, base_channels=16)
    with pytest.raises(InvalidArgumentError):
        train_den(corpus, fresh, d, make_schedule(5), 1)


def test_fewshot_set(tiny_setup, tmp_path):
    corpus, g, d = tiny_setup
    torch.manual_seed(0)
    den = EmbeddingNet(8, 3, 16, 4, 16).eval()
    fs = build_fewshot_set(corpus, den, seed=4)
    assert len(fs) == 3 and sorted(p.class_id for p in fs) == [0, 1, 2]
    again = build_fewshot_set(corpus, den, seed=4)
    assert [p.source_id for p in fs] == [p.source_id for p in again]
    by_id = {e.id: e for e in corpus}
    for p in fs:
        assert by_id[p.source_id].split == "train"
        z = embed_images(den, [by_id[p.source_id].image], [p.class_id])[0]
        assert np.array_equal(z, p.latent)
    save_fewshot(fs, tmp_path)
    back = load_fewshot(tmp_path)
    for a, b in zip(fs, back):
        assert np.array_equal(a.latent, b.latent) and np.array_equal(a.mask, b.mask)
        assert (a.class_id, a.source_id) == (b.class_id, b.source_id)


def test_fewshot_missing_class():
    corpus = build_corpus(3, 3, seed=0, size=16)
    corpus = Corpus([e for e in corpus if e.class_id != 1], 3, 16)
    den = EmbeddingNet(8, 3, 16, 4, 16).eval()
    with pytest.raises(MissingClassError):
        build_fewshot_set(corpus, den)


def test_reverse_chain_with_trained_denoiser():
    torch.manual_seed(0)
    d = 4
    net = EmbeddingNet(latent_dim=d, num_classes=2, image_size=16, base_channels=4, hidden=64)
    sched = make_schedule(50)
    opt = torch.optim.Adam(net.denoiser.parameters(), lr=2e-3)
    for step in range(1500):
        loss = loss_variational(torch.randn(256, d), net, sched, seed=step)
        opt.zero_grad()
        loss.backward()
        opt.step()
    z = sample_prior(net.eval(), sched, 1000, seed=1)
    assert abs(float(z.mean())) < 0.1
    assert abs(float(z.std()) - 1) < 0.1
