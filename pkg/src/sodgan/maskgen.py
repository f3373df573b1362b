"""Few-shot saliency mask branch: omni-attentive fusion of the generator's
feature pyramid followed by a per-pixel foreground/background head."""
import logging

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import EmptyInputError, InvalidArgumentError
from .generator import sample_latents

log = logging.getLogger(__name__)

PROB_EPS = 1e-7

HEAD_WIDTHS = {
    "cnn-s": (128, 32, 2),
    "cnn-m": (128, 64, 64, 32, 2),
    "cnn-l": (128, 64, 64, 64, 64, 32, 2),
    "mlp-s": (128, 32, 2),
    "mlp-m": (128, 64, 32, 2),
    "mlp-l": (128, 64, 64, 32, 2),
}
OAFF_MODES = ("oaff", "ga", "none")


def _attention_stack(channels, hidden):
    return nn.Sequential(nn.Conv2d(channels, hidden, 1), nn.BatchNorm2d(hidden), nn.ReLU(),
                         nn.Conv2d(hidden, channels, 1))


class OAFFModule(nn.Module):
    """Per-level 1x1 reducers plus local (pointwise) and global (pooled) attention.

    ``mode`` selects the ablation: "oaff" uses LA + GA, "ga" uses GA alone,
    "none" skips attention so the fused features pass through unchanged.
    """

    def __init__(self, level_channels, reduced_channels=8, mode="oaff", hidden=None):
        super().__init__()
        if mode not in OAFF_MODES:
            raise InvalidArgumentError(f"unknown OAFF mode {mode!r}")
        self.mode = mode
        self.level_channels = list(level_channels)
        self.reduced_channels = reduced_channels
        self.reducers = nn.ModuleList(nn.Conv2d(c, reduced_channels, 1) for c in level_channels)
        channels = reduced_channels * len(self.level_channels)
        hidden = hidden or max(channels // 2, 1)
        self.local_att = _attention_stack(channels, hidden)
        self.global_att = _attention_stack(channels, hidden)

    @property
    def out_channels(self):
        return self.reduced_channels * len(self.level_channels)


def _as_batched(f):
    f = torch.as_tensor(f)
    return f.unsqueeze(0) if f.dim() == 3 else f


def fuse_features(pyramid, oaff, out_size=None):
    """Upsample every level to ``out_size``, reduce to C' channels, concatenate in level order.

    The 1x1 reduction is applied before the bilinear upsampling: both are affine
    per pixel and the interpolation weights sum to one, so the order does not
    change the result but the reduction runs at the native level resolution.
    """
    levels = [_as_batched(f) for f in pyramid]
    if len(levels) != len(oaff.reducers):
        raise InvalidArgumentError(f"pyramid has {len(levels)} levels, module expects {len(oaff.reducers)}")
    if out_size is None:
        out_size = max(f.shape[-1] for f in levels)
    parts = []
    for f, reduce in zip(levels, oaff.reducers):
        if f.shape[1] != reduce.in_channels:
            raise InvalidArgumentError(f"level has {f.shape[1]} channels, reducer expects {reduce.in_channels}")
        r = reduce(f)
        if r.shape[-2:] != (out_size, out_size):
            r = F.interpolate(r, size=(out_size, out_size), mode="bilinear", align_corners=False)
        parts.append(r)
    return torch.cat(parts, dim=1)


def local_attention(f, oaff):
    return oaff.local_att(f)


def global_attention(f, oaff):
    return oaff.global_att(f.mean(dim=(2, 3), keepdim=True))


def omni_attention(f, oaff):
    """OA(f*) = LA(f*) + GA(f*), the pooled branch broadcast over positions."""
    f = _as_batched(f)
    if f.shape[1] != oaff.out_channels:
        raise InvalidArgumentError(f"fused features have {f.shape[1]} channels, expected {oaff.out_channels}")
    if oaff.mode == "none":
        return torch.ones_like(f)
    ga = global_attention(f, oaff)
    if oaff.mode == "ga":
        return ga.expand_as(f)
    return local_attention(f, oaff) + ga


def apply_attention(f, oa):
    if tuple(f.shape) != tuple(oa.shape):
        raise InvalidArgumentError(f"attention shape {tuple(oa.shape)} != feature shape {tuple(f.shape)}")
    return f * oa


class ClassificationHead(nn.Module):
    """Pixel classifier. MLP variants act on flattened pixel vectors; CNN variants
    stack 3x3 convolutions with the same widths on the unflattened raster."""

    def __init__(self, variant, in_channels):
        super().__init__()
        if variant not in HEAD_WIDTHS:
            raise InvalidArgumentError(f"unknown head {variant!r}; choose from {sorted(HEAD_WIDTHS)}")
        self.variant = variant
        self.in_channels = in_channels
        widths = HEAD_WIDTHS[variant]
        layers = []
        if variant.startswith("mlp"):
            prev = in_channels
            for i, w in enumerate(widths):
                layers.append(nn.Linear(prev, w))
                if i < len(widths) - 1:
                    # affine=False: the following linear layer already supplies scale and shift
                    layers += [nn.BatchNorm1d(w, affine=False), nn.ReLU()]
                prev = w
        else:
            prev = in_channels
            for i, w in enumerate(widths):
                layers.append(nn.Conv2d(prev, w, 3, padding=1))
                if i < len(widths) - 1:
                    layers.append(nn.LeakyReLU(0.01))
                prev = w
        self.net = nn.Sequential(*layers)

    def forward(self, f):
        if self.variant.startswith("mlp"):
            n, c, h, w = f.shape
            x = f.permute(0, 2, 3, 1).reshape(-1, c)
            return self.net(x).reshape(n, h, w, 2).permute(0, 3, 1, 2)
        return self.net(f)


def classify_pixels(f, head):
    """Return 2-way logits (N, 2, H, W)."""
    f = _as_batched(f)
    if f.shape[1] != head.in_channels:
        raise InvalidArgumentError(f"features have {f.shape[1]} channels, head expects {head.in_channels}")
    return head(f)


def count_parameters(module):
    return sum(p.numel() for p in module.parameters())


class MaskGeneratorNet(nn.Module):
    def __init__(self, level_channels, out_size=64, head="mlp-s", reduced_channels=8, oaff_mode="oaff"):
        super().__init__()
        self.out_size = out_size
        self.oaff = OAFFModule(level_channels, reduced_channels, oaff_mode)
        self.head = ClassificationHead(head, self.oaff.out_channels)

    def forward(self, pyramid):
        f = fuse_features(pyramid, self.oaff, self.out_size)
        f = apply_attention(f, omni_attention(f, self.oaff))
        return classify_pixels(f, self.head)

    def predict_proba(self, pyramid):
        return torch.softmax(self(pyramid), dim=1)[:, 1]

    @property
    def config(self):
        return {"level_channels": self.oaff.level_channels, "out_size": self.out_size,
                "head": self.head.variant, "reduced_channels": self.oaff.reduced_channels,
                "oaff_mode": self.oaff.mode}


def _check_binary(gt):
    if not bool(((gt == 0) | (gt == 1)).all()):
        raise InvalidArgumentError("ground-truth mask must be binary")


def loss_supervised(pred, gt):
    """Pixel BCE plus dice loss, per image, averaged over the batch.

    ``pred`` holds foreground probabilities (clamped to [1e-7, 1 - 1e-7]);
    ``gt`` must be binary.
    """
    pred = torch.as_tensor(pred)
    gt = torch.as_tensor(gt, dtype=pred.dtype)
    if pred.shape != gt.shape:
        raise InvalidArgumentError(f"prediction shape {tuple(pred.shape)} != mask shape {tuple(gt.shape)}")
    _check_binary(gt)
    if pred.dim() == 2:
        pred, gt = pred.unsqueeze(0), gt.unsqueeze(0)
    p = pred.clamp(PROB_EPS, 1 - PROB_EPS).flatten(1)
    y = gt.flatten(1)
    bce = -(y * torch.log(p) + (1 - y) * torch.log1p(-p)).mean(dim=1)
    dice = 1 - 2 * (y * p).sum(dim=1) / (y + p).sum(dim=1)
    return (bce + dice).mean()


def loss_adversarial_g(dq, images, masks):
    """Non-saturating generator-side quality loss: mean of -log D_q(x_syn, y_syn)."""
    p = torch.sigmoid(dq(images, masks)).clamp(PROB_EPS, 1 - PROB_EPS)
    return -torch.log(p).mean()


def _pyramids(g, latents, classes, batch_size=64):
    """Frozen-generator forward over many latents; returns (images, [level tensors])."""
    g.eval()
    imgs, levels = [], None
    with torch.no_grad():
        for s in range(0, len(latents), batch_size):
            img, pyr = g(latents[s:s + batch_size], classes[s:s + batch_size])
            imgs.append(img)
            levels = [[f] for f in pyr] if levels is None else [acc + [f] for acc, f in zip(levels, pyr)]
    return torch.cat(imgs), [torch.cat(parts) for parts in levels]


def train_maskgen(fewshot, g, dq=None, epochs=100, seed=0, head="mlp-s", reduced_channels=8,
                  oaff_mode="oaff", lr=1e-3, adv_weight=0.1, synth_batch=8, truncation=1.0,
                  real_pairs=None, dq_lr=2e-4):
    """Fit OAFF + head on the few-shot set against the frozen generator.

    With ``dq`` given, each step also draws ``synth_batch`` fresh latents,
    adds ``adv_weight * loss_adversarial_g`` and then updates ``dq`` in place on
    real pairs (``real_pairs`` as (images, masks) arrays, defaulting to the
    few-shot pairs) versus the synthetic pairs.
    Returns ``(mask_generator, log)``.
    """
    pairs = list(fewshot)
    if not pairs:
        raise EmptyInputError("few-shot set is empty")
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    latents = torch.from_numpy(np.stack([p.latent for p in pairs]).astype(np.float32))
    classes = torch.tensor([p.class_id for p in pairs])
    masks = torch.from_numpy(np.stack([(p.mask > 0.5) for p in pairs]).astype(np.float32))
    fs_images, fs_pyramid = _pyramids(g, latents, classes)
    mg = MaskGeneratorNet(g.pyramid_channels, g.image_size, head, reduced_channels, oaff_mode)
    opt = torch.optim.Adam(mg.parameters(), lr=lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=epochs)
    if dq is not None:
        from .quality import dq_step
        opt_dq = torch.optim.Adam(dq.parameters(), lr=dq_lr, betas=(0.5, 0.999))
        if real_pairs is None:
            real_images, real_masks = fs_images, masks
        else:
            real_images = torch.from_numpy(np.asarray(real_pairs[0], dtype=np.float32)).permute(0, 3, 1, 2)
            real_masks = torch.from_numpy(np.asarray(real_pairs[1], dtype=np.float32))
    history = []
    for epoch in range(epochs):
        mg.train()
        prob = torch.softmax(mg(fs_pyramid), dim=1)[:, 1]
        loss_s = loss_supervised(prob, masks)
        loss = loss_s
        entry = {"epoch": epoch + 1, "loss_s": loss_s.item()}
        if dq is not None:
            seeds = rng.integers(0, 2 ** 31, size=synth_batch)
            z = torch.from_numpy(sample_latents(seeds, truncation, g.latent_dim))
            c = torch.from_numpy(rng.integers(0, g.num_classes, size=synth_batch))
            syn_images, syn_pyr = _pyramids(g, z, c)
            syn_prob = mg.predict_proba(syn_pyr)
            dq.eval()
            loss_g = loss_adversarial_g(dq, syn_images, syn_prob)
            loss = loss + adv_weight * loss_g
            entry["loss_dq_g"] = loss_g.item()
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        if dq is not None:
            pick = torch.from_numpy(rng.integers(0, len(real_images), size=synth_batch))
            entry["loss_dq"] = dq_step(dq, opt_dq, real_images[pick], real_masks[pick],
                                       syn_images, syn_prob.detach())
        history.append(entry)
        if (epoch + 1) % 50 == 0 or epoch == 0:
            log.info("maskgen epoch %d: %s", epoch + 1,
                     " ".join(f"{k}={v:.4f}" for k, v in entry.items() if k != "epoch"))
    mg.eval()
    if dq is not None:
        dq.eval()
    return mg, history


def generate_mask(g, mg, z, c):
    """One forward pass: the image (H, W, 3) and its foreground probability map (H, W)."""
    images, probs = generate_masks(g, mg, np.asarray(z, dtype=np.float32).reshape(1, -1), [c])
    return images[0], probs[0]


def generate_masks(g, mg, latents, classes, batch_size=64):
    latents = torch.as_tensor(np.asarray(latents, dtype=np.float32))
    if latents.shape[1] != g.latent_dim:
        raise InvalidArgumentError(f"latent dim {latents.shape[1]} != generator dim {g.latent_dim}")
    classes = torch.as_tensor(np.asarray(classes), dtype=torch.long).reshape(-1)
    g.eval()
    mg.eval()
    imgs, probs = [], []
    with torch.no_grad():
        for s in range(0, len(latents), batch_size):
            img, pyr = g(latents[s:s + batch_size], classes[s:s + batch_size])
            imgs.append(img.permute(0, 2, 3, 1))
            probs.append(mg.predict_proba(pyr))
    return torch.cat(imgs).numpy(), torch.cat(probs).numpy()


def binarize(prob, threshold=0.5):
    return (np.asarray(prob) >= threshold).astype(np.float32)
