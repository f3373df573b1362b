"""Diffusion embedding network: an image encoder E(x, c) -> z+ whose latents are
regularized by a learned diffusion prior and trained to reconstruct through the
frozen generator, plus the few-shot set built from it."""
import copy
import json
import logging
import math
import os
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .corpus import load_png, save_png_gray
from .errors import CorruptDatasetError, EmptyInputError, InvalidArgumentError, MissingClassError
from .generator import ImageEncoder, VAEEncoder, images_to_tensor  # noqa: F401

log = logging.getLogger(__name__)

PROB_EPS = 1e-7


@dataclass(frozen=True)
class DiffusionSchedule:
    betas: np.ndarray

    @property
    def T(self):
        return len(self.betas)

    @property
    def alphas(self):
        return 1.0 - self.betas

    @property
    def alpha_bars(self):
        return np.cumprod(self.alphas)


def make_schedule(T, beta_start=1e-4, beta_end=0.02):
    """Linear variance schedule from ``beta_start`` to ``beta_end`` over T steps."""
    if T < 1:
        raise InvalidArgumentError(f"T must be >= 1, got {T}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise InvalidArgumentError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    return DiffusionSchedule(np.linspace(beta_start, beta_end, T, dtype=np.float64))


def _check_same_shape(a, b, what):
    if tuple(np.shape(a)) != tuple(np.shape(b)):
        raise InvalidArgumentError(f"{what}: shape {tuple(np.shape(a))} != {tuple(np.shape(b))}")


def _check_t(t, sched):
    if not 1 <= int(t) <= sched.T:
        raise InvalidArgumentError(f"timestep {t} outside [1, {sched.T}]")


def diffusion_step(x_prev, beta_t, noise):
    """One forward noising step: x_prev * sqrt(1 - beta) + sqrt(beta) * noise."""
    if not 0.0 <= beta_t < 1.0:
        raise InvalidArgumentError(f"beta_t must be in [0, 1), got {beta_t}")
    _check_same_shape(x_prev, noise, "diffusion_step")
    return x_prev * math.sqrt(1.0 - beta_t) + math.sqrt(beta_t) * noise


def q_sample(x0, t, sched, noise):
    """Closed-form sample of x_t given x0 (t is 1-based)."""
    _check_t(t, sched)
    _check_same_shape(x0, noise, "q_sample")
    ab = float(sched.alpha_bars[int(t) - 1])
    return x0 * math.sqrt(ab) + math.sqrt(1.0 - ab) * noise


def _q_sample_batch(x0, t, sched, noise):
    ab = torch.as_tensor(sched.alpha_bars, dtype=x0.dtype)[t - 1].unsqueeze(1)
    return x0 * ab.sqrt() + (1.0 - ab).sqrt() * noise


def timestep_embedding(t, dim=32):
    half = dim // 2
    freqs = torch.exp(-math.log(1000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float().unsqueeze(1) * freqs.unsqueeze(0)
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class EmbeddingNet(nn.Module):
    """Encoder E(x, c) -> z+ and a latent-space noise predictor eps(z_t, t)."""

    def __init__(self, latent_dim=64, num_classes=8, image_size=64, base_channels=32, hidden=256):
        super().__init__()
        self.config = {"latent_dim": latent_dim, "num_classes": num_classes, "image_size": image_size,
                       "base_channels": base_channels, "hidden": hidden}
        self.latent_dim = latent_dim
        self.encoder = ImageEncoder(latent_dim, num_classes, image_size, base_channels)
        self.denoiser = nn.Sequential(
            nn.Linear(latent_dim + 32, hidden), nn.SiLU(),
            nn.Linear(hidden, hidden), nn.SiLU(),
            nn.Linear(hidden, latent_dim))

    def encode(self, x, c):
        return self.encoder(x, c)

    def predict_noise(self, z_t, t):
        return self.denoiser(torch.cat([z_t, timestep_embedding(t)], dim=1))

    def reverse_mean(self, x_t, t, sched):
        """Mean of p(x_{t-1} | x_t) from the predicted noise."""
        beta = float(sched.betas[t - 1])
        ab = float(sched.alpha_bars[t - 1])
        tt = torch.full((x_t.shape[0],), t, dtype=torch.long)
        eps = self.predict_noise(x_t, tt)
        return (x_t - beta / math.sqrt(1.0 - ab) * eps) / math.sqrt(1.0 - beta)


def reverse_step(x_t, t, net, sched, noise=None, variance=None):
    """Sample x_{t-1} ~ N(mean(x_t, t), variance * I); variance defaults to beta_t."""
    _check_t(t, sched)
    x_t = torch.as_tensor(x_t, dtype=torch.float32)
    squeeze = x_t.dim() == 1
    if squeeze:
        x_t = x_t.unsqueeze(0)
    var = float(sched.betas[t - 1]) if variance is None else float(variance)
    if noise is None:
        noise = torch.randn_like(x_t)
    noise = torch.as_tensor(noise, dtype=torch.float32).reshape(x_t.shape)
    with torch.no_grad():
        out = net.reverse_mean(x_t, t, sched) + math.sqrt(var) * noise
    return out[0] if squeeze else out


def sample_prior(net, sched, n, seed=0):
    """Run the reverse chain from N(0, I) for n latents."""
    gen = torch.Generator().manual_seed(seed)
    x = torch.randn(n, net.latent_dim, generator=gen)
    for t in range(sched.T, 0, -1):
        x = reverse_step(x, t, net, sched, noise=torch.randn(x.shape, generator=gen))
    return x


def loss_variational(z0, net, sched, seed=None, t=None, noise=None):
    """Single-timestep estimate of the noise-prediction surrogate, averaged over the batch.

    Per sample: ||eps - eps_hat(q_sample(z0, t, eps), t)||^2 with t uniform on 1..T.
    ``t`` and ``noise`` may be given explicitly (tests, oracles).
    """
    z0 = torch.as_tensor(z0)
    if z0.dim() == 1:
        z0 = z0.unsqueeze(0)
    gen = torch.Generator().manual_seed(seed) if seed is not None else None
    if t is None:
        t = torch.randint(1, sched.T + 1, (z0.shape[0],), generator=gen)
    else:
        t = torch.as_tensor(t, dtype=torch.long).reshape(-1).expand(z0.shape[0])
    if noise is None:
        noise = torch.randn(z0.shape, generator=gen, dtype=z0.dtype)
    noise = torch.as_tensor(noise, dtype=z0.dtype).reshape(z0.shape)
    z_t = _q_sample_batch(z0, t, sched, noise)
    return ((noise - net.predict_noise(z_t, t)) ** 2).sum(dim=1).mean()


def kl_term(z0, t, noise, net, sched):
    """Exact KL( q(x_{t-1} | x_t, x0) || p(x_{t-1} | x_t) ) for t >= 2, per sample.

    Reference for the surrogate: with the reverse variance fixed at beta_t, the
    noise-dependent part equals beta_t / (2 alpha_t (1 - abar_t)) * ||eps - eps_hat||^2.
    """
    if not 2 <= t <= sched.T:
        raise InvalidArgumentError("kl_term needs 2 <= t <= T")
    z0 = torch.as_tensor(z0, dtype=torch.float64)
    noise = torch.as_tensor(noise, dtype=torch.float64)
    beta, alpha = sched.betas[t - 1], sched.alphas[t - 1]
    ab, ab_prev = sched.alpha_bars[t - 1], sched.alpha_bars[t - 2]
    x_t = z0 * math.sqrt(ab) + math.sqrt(1 - ab) * noise
    post_mean = (math.sqrt(ab_prev) * beta / (1 - ab)) * z0 + (math.sqrt(alpha) * (1 - ab_prev) / (1 - ab)) * x_t
    post_var = (1 - ab_prev) / (1 - ab) * beta
    net64 = copy.deepcopy(net).double()
    model_mean = net64.reverse_mean(x_t, t, sched)
    d = z0.shape[-1]
    return 0.5 * (d * (post_var / beta - 1 - math.log(post_var / beta))
                  + ((post_mean - model_mean) ** 2).sum(dim=-1) / beta)


def _bce_logits_clamped(logits, target_one):
    p = torch.sigmoid(logits).clamp(PROB_EPS, 1 - PROB_EPS)
    return -torch.log(p) if target_one else -torch.log1p(-p)


def _require_trained(g):
    if not bool(getattr(g, "trained", torch.tensor(False))):
        raise InvalidArgumentError("generator is not trained")


def loss_adversarial_recon(den, g, d_r, images, classes):
    """Return ``(d_r_loss, den_loss)`` for reconstructions G(E(x, c), c).

    ``d_r_loss = -[log D(x) + log(1 - D(G(E(x))))]``; ``den_loss = -log D(G(E(x)))``.
    The generator is not updated; gradients of ``den_loss`` reach E only.
    """
    _require_trained(g)
    z = den.encode(images, classes)
    recon, _ = g(z, classes)
    d_r_loss = (_bce_logits_clamped(d_r(images, classes), True)
                + _bce_logits_clamped(d_r(recon.detach(), classes), False)).mean()
    den_loss = _bce_logits_clamped(d_r(recon, classes), True).mean()
    return d_r_loss, den_loss


def reconstruction_error(den, g, images, classes, batch_size=64):
    den.eval()
    errs = []
    with torch.no_grad():
        for s in range(0, len(images), batch_size):
            x, c = images[s:s + batch_size], classes[s:s + batch_size]
            recon, _ = g(den.encode(x, c), c)
            errs.append((recon - x).abs().mean(dim=(1, 2, 3)))
    return float(torch.cat(errs).mean())


class _FrozenGenerator:
    def __init__(self, g):
        self.g = g

    def __enter__(self):
        self.flags = [p.requires_grad for p in self.g.parameters()]
        self.was_training = self.g.training
        self.g.eval()
        for p in self.g.parameters():
            p.requires_grad_(False)
        return self.g

    def __exit__(self, *exc):
        for p, f in zip(self.g.parameters(), self.flags):
            p.requires_grad_(f)
        self.g.train(self.was_training)


def _warm_start(den, init_encoder):
    """Copy a Gaussian encoder's weights into E, keeping only the mean rows of its last layer."""
    state = {k: v.clone() for k, v in init_encoder.encoder.state_dict().items()}
    last = [k for k in state if k.startswith("head.") and k.endswith("weight")][-1]
    bias = last[:-len("weight")] + "bias"
    state[last] = state[last][:den.latent_dim]
    state[bias] = state[bias][:den.latent_dim]
    den.encoder.load_state_dict(state)


def train_den(corpus, g, d_r, sched, epochs, seed=0, batch_size=32, lr=1e-3, d_lr=2e-4,
              recon_weight=1.0, adv_weight=0.05, var_weight=0.01, base_channels=32, init_encoder=None):
    """Fit the embedding network against a frozen generator.

    The encoder minimizes pixel L1 reconstruction + adversarial loss against D_r
    + the diffusion surrogate on its own latents; the denoiser minimizes the
    surrogate; D_r (a copy of the given one) is updated on real vs reconstructed.
    ``init_encoder`` (a ``VAEEncoder``) warm-starts E from its mean branch.
    Returns ``(den, log)``; the log starts with the initial held-out error at epoch 0.
    """
    _require_trained(g)
    if epochs < 1:
        raise InvalidArgumentError("epochs must be >= 1")
    train = corpus.train or corpus.entries
    test = corpus.test or train
    if not train:
        raise EmptyInputError("corpus is empty")
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    den = EmbeddingNet(g.latent_dim, corpus.num_classes, corpus.size, base_channels)
    if init_encoder is not None:
        _warm_start(den, init_encoder)
    d_r = copy.deepcopy(d_r).train()
    x_train = images_to_tensor([e.image for e in train])
    c_train = torch.tensor([e.class_id for e in train])
    x_test = images_to_tensor([e.image for e in test])
    c_test = torch.tensor([e.class_id for e in test])
    opt = torch.optim.Adam(den.parameters(), lr=lr)
    opt_d = torch.optim.Adam(d_r.parameters(), lr=d_lr, betas=(0.5, 0.999))
    history = []
    with _FrozenGenerator(g):
        history.append({"epoch": 0, "heldout_recon_l1": reconstruction_error(den, g, x_test, c_test)})
        n = len(train)
        for epoch in range(epochs):
            den.train()
            order = rng.permutation(n)
            sums = np.zeros(4)
            steps = 0
            for s in range(0, n, batch_size):
                idx = torch.from_numpy(order[s:s + batch_size])
                if len(idx) < 2:
                    continue
                x, c = x_train[idx], c_train[idx]
                z = den.encode(x, c)
                recon, _ = g(z, c)
                d_r_loss = (_bce_logits_clamped(d_r(x, c), True)
                            + _bce_logits_clamped(d_r(recon.detach(), c), False)).mean()
                opt_d.zero_grad()
                d_r_loss.backward()
                opt_d.step()

                adv = _bce_logits_clamped(d_r(recon, c), True).mean()
                l1 = (recon - x).abs().mean()
                var = loss_variational(z, den, sched, seed=int(rng.integers(2 ** 31)))
                loss = recon_weight * l1 + adv_weight * adv + var_weight * var
                opt.zero_grad()
                loss.backward()
                opt.step()
                sums += [l1.item(), adv.item(), var.item(), d_r_loss.item()]
                steps += 1
            l1, adv, var, dl = sums / max(steps, 1)
            err = reconstruction_error(den, g, x_test, c_test)
            history.append({"epoch": epoch + 1, "recon_l1": l1, "loss_adv": adv, "loss_var": var,
                            "loss_d_r": dl, "heldout_recon_l1": err})
            log.info("den epoch %d: l1=%.4f adv=%.4f var=%.4f d_r=%.4f heldout=%.4f",
                     epoch + 1, l1, adv, var, dl, err)
    den.eval()
    return den, history


def train_vae_encoder(corpus, g, epochs, seed=0, batch_size=32, lr=1e-3, kl_weight=1e-3,
                      base_channels=32):
    """KL-to-unit-normal plus L1 reconstruction through the frozen generator."""
    _require_trained(g)
    train = corpus.train or corpus.entries
    if not train:
        raise EmptyInputError("corpus is empty")
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    enc = VAEEncoder(g.latent_dim, corpus.num_classes, corpus.size, base_channels)
    x_train = images_to_tensor([e.image for e in train])
    c_train = torch.tensor([e.class_id for e in train])
    opt = torch.optim.Adam(enc.parameters(), lr=lr)
    history = []
    with _FrozenGenerator(g):
        for epoch in range(epochs):
            enc.train()
            order = rng.permutation(len(train))
            sums, steps = np.zeros(2), 0
            for s in range(0, len(train), batch_size):
                idx = torch.from_numpy(order[s:s + batch_size])
                if len(idx) < 2:
                    continue
                x, c = x_train[idx], c_train[idx]
                mu, logvar = enc(x, c)
                z = mu + torch.randn_like(mu) * (0.5 * logvar).exp()
                recon, _ = g(z, c)
                l1 = (recon - x).abs().mean()
                kl = 0.5 * (mu ** 2 + logvar.exp() - 1 - logvar).sum(dim=1).mean()
                loss = l1 + kl_weight * kl
                opt.zero_grad()
                loss.backward()
                opt.step()
                sums += [l1.item(), kl.item()]
                steps += 1
            l1, kl = sums / max(steps, 1)
            history.append({"epoch": epoch + 1, "recon_l1": l1, "kl": kl})
            log.info("vae epoch %d: l1=%.4f kl=%.4f", epoch + 1, l1, kl)
    enc.eval()
    return enc, history


@dataclass
class FewShotPair:
    latent: np.ndarray
    mask: np.ndarray
    class_id: int
    source_id: str


@dataclass
class FewShotSet:
    pairs: list

    def __len__(self):
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)


def embed_images(den, images, classes, batch_size=64):
    """z+ = E(x, c) for a list of (H, W, 3) images."""
    x = images_to_tensor(images)
    c = torch.as_tensor(classes, dtype=torch.long).reshape(-1)
    den.eval()
    out = []
    with torch.no_grad():
        for s in range(0, len(x), batch_size):
            out.append(den.encode(x[s:s + batch_size], c[s:s + batch_size]))
    return torch.cat(out).numpy()


def build_fewshot_set(corpus, den, seed=0, shots=1):
    """Pick ``shots`` uniformly random training entries per class and embed them."""
    rng = np.random.default_rng(seed)
    by_class = {c: [] for c in range(corpus.num_classes)}
    for e in corpus.train or corpus.entries:
        by_class[e.class_id].append(e)
    chosen = []
    for c in range(corpus.num_classes):
        if not by_class[c]:
            raise MissingClassError(f"class {c} has no training entries")
        picks = rng.choice(len(by_class[c]), size=min(shots, len(by_class[c])), replace=False)
        chosen += [by_class[c][int(i)] for i in picks]
    # one image per call so each stored code is exactly E(x, c) for that image
    latents = [embed_images(den, [e.image], [e.class_id])[0] for e in chosen]
    return FewShotSet([FewShotPair(z, e.mask, e.class_id, e.id) for z, e in zip(latents, chosen)])


def save_fewshot(fs, root):
    """Write ``fewshot.jsonl`` plus one mask PNG per pair under ``root``."""
    os.makedirs(os.path.join(root, "fewshot_masks"), exist_ok=True)
    with open(os.path.join(root, "fewshot.jsonl"), "w", encoding="utf-8", newline="\n") as fh:
        for p in fs:
            mask_path = f"fewshot_masks/{p.source_id}.png"
            save_png_gray(os.path.join(root, mask_path), p.mask)
            rec = {"class": int(p.class_id), "source_id": p.source_id,
                   "latent": [float(v) for v in np.asarray(p.latent, dtype=np.float32)], "mask_path": mask_path}
            fh.write(json.dumps(rec) + "\n")


def load_fewshot(root):
    path = os.path.join(root, "fewshot.jsonl")
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            rec = json.loads(line)
            mask_file = os.path.join(root, rec["mask_path"])
            if not os.path.exists(mask_file):
                raise CorruptDatasetError(f"few-shot mask missing: {mask_file}")
            pairs.append(FewShotPair(np.asarray(rec["latent"], dtype=np.float32), load_png(mask_file),
                                     rec["class"], rec["source_id"]))
    return FewShotSet(pairs)
