"""Class-conditional image generator with a recorded feature pyramid, plus its
real/fake discriminator and truncated latent sampling."""
import logging
import math

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.utils.parametrizations import spectral_norm

from .errors import EmptyInputError, InvalidArgumentError

log = logging.getLogger(__name__)


def sample_latent(seed, truncation=1.0, dim=64):
    """Draw a latent code whose coordinates are standard normal, resampled until |v| <= truncation."""
    if not truncation > 0:
        raise InvalidArgumentError(f"truncation must be > 0, got {truncation}")
    rng = np.random.default_rng(seed)
    z = rng.standard_normal(dim)
    bad = np.abs(z) > truncation
    while bad.any():
        z[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(z) > truncation
    return z.astype(np.float32)


def sample_latents(seeds, truncation=1.0, dim=64):
    return np.stack([sample_latent(s, truncation, dim) for s in seeds])


class UpBlock(nn.Module):
    def __init__(self, in_ch, out_ch):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.bn = nn.BatchNorm2d(out_ch)

    def forward(self, x):
        x = F.interpolate(x, scale_factor=2, mode="nearest")
        return F.relu(self.bn(self.conv(x)))


class GeneratorNet(nn.Module):
    """G(z, c): class embedding concatenated to z, then doubling blocks from 4x4 to the output size.

    Each block's post-activation output is one pyramid level; channels halve per block.
    """

    def __init__(self, latent_dim=64, num_classes=8, image_size=64, base_channels=128):
        super().__init__()
        n_blocks = int(math.log2(image_size // 4))
        if 4 * 2 ** n_blocks != image_size:
            raise InvalidArgumentError(f"image_size must be 4 * 2^L, got {image_size}")
        self.config = {"latent_dim": latent_dim, "num_classes": num_classes, "image_size": image_size,
                       "base_channels": base_channels}
        self.latent_dim = latent_dim
        self.num_classes = num_classes
        self.image_size = image_size
        self.base_channels = base_channels
        self.embed = nn.Embedding(num_classes, latent_dim)
        self.fc = nn.Linear(2 * latent_dim, base_channels * 16)
        self.bn0 = nn.BatchNorm2d(base_channels)
        chans = [base_channels // 2 ** i for i in range(n_blocks + 1)]
        self.blocks = nn.ModuleList(UpBlock(a, b) for a, b in zip(chans[:-1], chans[1:]))
        self.to_rgb = nn.Conv2d(chans[-1], 3, 3, padding=1)
        self.register_buffer("trained", torch.tensor(False))

    @property
    def pyramid_channels(self):
        return [b.conv.out_channels for b in self.blocks]

    @property
    def pyramid_sizes(self):
        return [4 * 2 ** (i + 1) for i in range(len(self.blocks))]

    def forward(self, z, c):
        if z.shape[-1] != self.latent_dim:
            raise InvalidArgumentError(f"latent dim {z.shape[-1]} != generator dim {self.latent_dim}")
        h = self.fc(torch.cat([z, self.embed(c)], dim=1)).view(-1, self.base_channels, 4, 4)
        h = F.relu(self.bn0(h))
        pyramid = []
        for block in self.blocks:
            h = block(h)
            pyramid.append(h)
        return torch.sigmoid(self.to_rgb(h)), pyramid


class ReconDiscriminator(nn.Module):
    """Conditional real/fake classifier with a projection class term."""

    def __init__(self, num_classes=8, image_size=64, base_channels=32, in_channels=3):
        super().__init__()
        self.config = {"num_classes": num_classes, "image_size": image_size, "base_channels": base_channels,
                       "in_channels": in_channels}
        n_blocks = int(math.log2(image_size // 4))
        chans = [in_channels] + [base_channels * 2 ** i for i in range(n_blocks)]
        self.convs = nn.ModuleList(
            spectral_norm(nn.Conv2d(a, b, 4, stride=2, padding=1)) for a, b in zip(chans[:-1], chans[1:]))
        self.linear = spectral_norm(nn.Linear(chans[-1], 1))
        self.embed = spectral_norm(nn.Embedding(num_classes, chans[-1]))
        # spectral norm divides by sigma, so zero weights are not representable; scale the logit instead
        self.register_buffer("logit_scale", torch.tensor(1.0))

    def forward(self, x, c):
        """Return logits; ``discriminate_real`` applies the sigmoid."""
        h = x
        for conv in self.convs:
            h = F.leaky_relu(conv(h), 0.2)
        h = h.sum(dim=(2, 3))
        return self.logit_scale * (self.linear(h).squeeze(1) + (self.embed(c) * h).sum(dim=1))

    def zero_logits_(self):
        self.logit_scale.fill_(0.0)
        return self


class ImageEncoder(nn.Module):
    def __init__(self, out_dim, num_classes=8, image_size=64, base_channels=32):
        super().__init__()
        n_blocks = int(math.log2(image_size // 4))
        chans = [3] + [min(base_channels * 2 ** i, 128) for i in range(n_blocks)]
        layers = []
        for a, b in zip(chans[:-1], chans[1:]):
            layers += [nn.Conv2d(a, b, 4, stride=2, padding=1), nn.BatchNorm2d(b), nn.LeakyReLU(0.2)]
        self.features = nn.Sequential(*layers)
        self.embed = nn.Embedding(num_classes, 32)
        self.head = nn.Sequential(nn.Linear(chans[-1] * 16 + 32, 256), nn.LeakyReLU(0.2), nn.Linear(256, out_dim))

    def forward(self, x, c):
        h = self.features(x).flatten(1)
        return self.head(torch.cat([h, self.embed(c)], dim=1))


class VAEEncoder(nn.Module):
    """Gaussian-prior baseline encoder: outputs (mu, logvar); ``encode`` returns mu."""

    def __init__(self, latent_dim=64, num_classes=8, image_size=64, base_channels=32):
        super().__init__()
        self.config = {"latent_dim": latent_dim, "num_classes": num_classes, "image_size": image_size,
                       "base_channels": base_channels}
        self.latent_dim = latent_dim
        self.encoder = ImageEncoder(2 * latent_dim, num_classes, image_size, base_channels)

    def forward(self, x, c):
        mu, logvar = self.encoder(x, c).chunk(2, dim=1)
        return mu, logvar

    def encode(self, x, c):
        return self(x, c)[0]


def _to_batch(x, channels):
    x = torch.as_tensor(x, dtype=torch.float32)
    if x.dim() == 3 and x.shape[-1] == channels:
        x = x.permute(2, 0, 1).unsqueeze(0)
    elif x.dim() == 4 and x.shape[-1] == channels and x.shape[1] != channels:
        x = x.permute(0, 3, 1, 2)
    return x


def generate(net, z, c):
    """Run G on one latent; returns the image (H, W, 3) and the pyramid as (C, H, W) tensors."""
    z = torch.as_tensor(np.asarray(z, dtype=np.float32)).reshape(1, -1)
    if z.shape[1] != net.latent_dim:
        raise InvalidArgumentError(f"latent dim {z.shape[1]} != generator dim {net.latent_dim}")
    net.eval()
    with torch.no_grad():
        image, pyramid = net(z, torch.tensor([int(c)]))
    return image[0].permute(1, 2, 0).numpy(), [f[0] for f in pyramid]


def discriminate_real(d, x, c):
    x = _to_batch(x, 3)
    if x.dim() != 4 or x.shape[1] != 3:
        raise InvalidArgumentError(f"expected RGB image(s), got shape {tuple(x.shape)}")
    c = torch.as_tensor(c).reshape(-1).long()
    d.eval()
    with torch.no_grad():
        p = torch.sigmoid(d(x, c))
    return p.numpy() if p.numel() > 1 else float(p)


def images_to_tensor(items):
    return torch.from_numpy(np.stack([np.asarray(i, dtype=np.float32) for i in items])).permute(0, 3, 1, 2)


def train_generator(corpus, epochs, seed=0, latent_dim=64, base_channels=128, batch_size=16,
                    lr=1e-3, d_lr=2e-4, kl_weight=1e-4, adv_weight=0.01, d_channels=32, return_encoder=False):
    """Conditional VAE-GAN on the corpus train split.

    An auxiliary Gaussian encoder ties G's latent space to images:
    G minimizes ``L1(G(z_q), x) + kl_weight * KL(q || N(0, I)) + adv_weight * adv``
    where ``adv`` is the non-saturating loss on both prior samples and
    reconstructions; D sees real versus an even mix of the two.
    Returns ``(generator, discriminator, log)``, plus the encoder when
    ``return_encoder`` is set. ``log`` holds per-epoch means.
    """
    if epochs < 1:
        raise InvalidArgumentError("epochs must be >= 1")
    entries = corpus.train or corpus.entries
    if not entries:
        raise EmptyInputError("corpus is empty")
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    g = GeneratorNet(latent_dim, corpus.num_classes, corpus.size, base_channels)
    d = ReconDiscriminator(corpus.num_classes, corpus.size, d_channels)
    enc = VAEEncoder(latent_dim, corpus.num_classes, corpus.size)
    images = images_to_tensor([e.image for e in entries])
    labels = torch.tensor([e.class_id for e in entries])
    opt_g = torch.optim.Adam(list(g.parameters()) + list(enc.parameters()), lr=lr, betas=(0.5, 0.999))
    opt_d = torch.optim.Adam(d.parameters(), lr=d_lr, betas=(0.5, 0.999))
    history = []
    n = len(entries)
    bs = min(batch_size, n)
    for epoch in range(epochs):
        g.train()
        d.train()
        enc.train()
        order = rng.permutation(n)
        sums = np.zeros(6)
        steps = 0
        for start in range(0, n - bs + 1, bs):
            idx = torch.from_numpy(order[start:start + bs])
            real, c = images[idx], labels[idx]
            mu, logvar = enc(real, c)
            logvar = logvar.clamp(-8.0, 4.0)
            z_q = mu + torch.randn_like(mu) * (0.5 * logvar).exp()
            recon, _ = g(z_q, c)
            fake, _ = g(torch.randn_like(mu), c)

            real_logit = d(real, c)
            fake_logit = d(fake.detach(), c)
            loss_d = (F.softplus(-real_logit).mean() + 0.5 * F.softplus(fake_logit).mean()
                      + 0.5 * F.softplus(d(recon.detach(), c)).mean())
            opt_d.zero_grad()
            loss_d.backward()
            opt_d.step()

            l1 = (recon - real).abs().mean()
            kl = 0.5 * (mu ** 2 + logvar.exp() - 1 - logvar).sum(dim=1).mean()
            adv = 0.5 * (F.softplus(-d(fake, c)).mean() + F.softplus(-d(recon, c)).mean())
            loss_g = l1 + kl_weight * kl + adv_weight * adv
            opt_g.zero_grad()
            loss_g.backward()
            opt_g.step()

            sums += [l1.item(), kl.item(), adv.item(), loss_d.item(), torch.sigmoid(real_logit).mean().item(),
                     torch.sigmoid(fake_logit).mean().item()]
            steps += 1
        l1, kl, adv, d_loss, p_real, p_fake = sums / steps
        history.append({"epoch": epoch + 1, "recon_l1": l1, "kl": kl, "loss_g_adv": adv, "loss_d": d_loss,
                        "d_real": p_real, "d_fake": p_fake})
        log.info("gan epoch %d: l1=%.4f kl=%.2f adv=%.4f loss_d=%.4f D(real)=%.3f D(fake)=%.3f",
                 epoch + 1, l1, kl, adv, d_loss, p_real, p_fake)
    g.trained.fill_(True)
    g.eval()
    d.eval()
    enc.eval()
    if return_encoder:
        return g, d, history, enc
    return g, d, history
