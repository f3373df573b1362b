import hashlib

import numpy as np
import pytest
import torch
from scipy import stats

from sodgan.corpus import Corpus, build_corpus
from sodgan.errors import EmptyInputError, InvalidArgumentError
from sodgan.generator import (GeneratorNet, ReconDiscriminator, discriminate_real, generate, sample_latent,
                              sample_latents, train_generator)


def test_truncation_bound():
    z = sample_latents(range(200), 0.4)
    assert np.abs(z).max() <= 0.4


def test_truncation_rejects_nonpositive():
    for bad in (0.0, -1.0):
        with pytest.raises(InvalidArgumentError):
            sample_latent(0, bad)


def test_sample_determinism():
    assert np.array_equal(sample_latent(3, 0.7), sample_latent(3, 0.7))
    assert not np.array_equal(sample_latent(3, 0.7), sample_latent(4, 0.7))


def test_huge_truncation_matches_normal():
    ours = sample_latents(range(160), 1e6, dim=64).ravel()[:10_000]
    assert stats.kstest(ours, "norm").pvalue > 0.01


def test_variance_monotone_in_truncation():
    variances = [sample_latents(range(1600), lam, dim=64).var() for lam in (0.2, 0.4, 0.6, 0.8, 1.0)]
    assert all(a <= b for a, b in zip(variances, variances[1:]))


def test_pyramid_ladder():
    net = GeneratorNet()
    img, pyr = generate(net, sample_latent(0), 2)
    assert img.shape == (64, 64, 3) and 0 <= img.min() and img.max() <= 1
    assert len(pyr) == 4
    assert [tuple(f.shape) for f in pyr] == [(64, 8, 8), (32, 16, 16), (16, 32, 32), (8, 64, 64)]
    assert net.pyramid_channels == [64, 32, 16, 8] and net.pyramid_sizes == [8, 16, 32, 64]


def test_generate_deterministic():
    torch.manual_seed(0)
    net = GeneratorNet()
    a, pa = generate(net, sample_latent(1), 5)
    b, pb = generate(net, sample_latent(1), 5)
    assert np.array_equal(a, b)
    assert all(torch.equal(x, y) for x, y in zip(pa, pb))


def test_generate_dimension_mismatch():
    with pytest.raises(InvalidArgumentError):
        generate(GeneratorNet(), np.zeros(10), 0)


def test_image_size_must_be_power_ladder():
    with pytest.raises(InvalidArgumentError):
        GeneratorNet(image_size=48)


def test_zero_logit_discriminator():
    d = ReconDiscriminator().zero_logits_()
    p = discriminate_real(d, np.random.default_rng(0).random((3, 64, 64, 3)), [0, 1, 2])
    assert np.allclose(p, 0.5)


def test_discriminator_bounded():
    torch.manual_seed(1)
    d = ReconDiscriminator()
    p = discriminate_real(d, np.random.default_rng(1).random((64, 64, 3)) * 50, 3)
    assert 0 < p < 1


def test_discriminator_shape_mismatch():
    with pytest.raises(InvalidArgumentError):
        discriminate_real(ReconDiscriminator(), np.zeros((64, 64)), 0)


def _checksum(module):
    h = hashlib.sha256()
    for k, v in sorted(module.state_dict().items()):
        h.update(k.encode())
        h.update(v.detach().cpu().numpy().tobytes())
    return h.hexdigest()


SMALL = dict(latent_dim=16, base_channels=32, batch_size=8, d_channels=8)


def test_train_generator_validation():
    corpus = build_corpus(2, 2, seed=0, size=16)
    with pytest.raises(InvalidArgumentError):
        train_generator(corpus, 0)
    with pytest.raises(EmptyInputError):
        train_generator(Corpus([], 2, 16), 1)


def test_train_generator_deterministic():
    corpus = build_corpus(4, 2, seed=0, size=16)
    g1, d1, h1 = train_generator(corpus, 2, seed=3, **SMALL)
    g2, d2, h2 = train_generator(corpus, 2, seed=3, **SMALL)
    assert _checksum(g1) == _checksum(g2) and _checksum(d1) == _checksum(d2)
    assert h1 == h2
    assert bool(g1.trained)


def test_training_log_real_above_fake():
    corpus = build_corpus(20, 4, seed=0, size=32)
    g, d, history = train_generator(corpus, 4, seed=0, **SMALL)
    assert len(history) == 4
    for row in history[1:]:
        assert row["d_real"] > row["d_fake"]


def test_train_generator_returns_encoder():
    corpus = build_corpus(2, 2, seed=0, size=16)
    out = train_generator(corpus, 1, return_encoder=True, **SMALL)
    assert len(out) == 4
    mu = out[3].encode(torch.rand(2, 3, 16, 16), torch.tensor([0, 1]))
    assert mu.shape == (2, 16)
