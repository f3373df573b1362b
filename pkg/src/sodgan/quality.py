"""Quality-aware discriminator over image-mask pairs and pool filtering."""
import logging
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import EmptyInputError, InvalidArgumentError

log = logging.getLogger(__name__)

PROB_EPS = 1e-7


class QualityNet(nn.Module):
    """Strided conv classifier over the 4-channel stack image + mask."""

    def __init__(self, base_channels=16, n_blocks=4):
        super().__init__()
        self.config = {"base_channels": base_channels, "n_blocks": n_blocks}
        chans = [4] + [base_channels * 2 ** min(i, 2) for i in range(n_blocks)]
        self.convs = nn.ModuleList(nn.Conv2d(a, b, 4, stride=2, padding=1) for a, b in zip(chans[:-1], chans[1:]))
        self.out = nn.Linear(chans[-1], 1)

    def forward(self, images, masks):
        if masks.dim() == 3:
            masks = masks.unsqueeze(1)
        if images.shape[-2:] != masks.shape[-2:]:
            raise InvalidArgumentError(f"image {tuple(images.shape)} and mask {tuple(masks.shape)} sizes differ")
        h = torch.cat([images, masks], dim=1)
        for conv in self.convs:
            h = F.leaky_relu(conv(h), 0.2)
        return self.out(h.mean(dim=(2, 3))).squeeze(1)

    def zero_logits_(self):
        self.out.weight.data.zero_()
        self.out.bias.data.zero_()
        return self


def _pair_tensors(images, masks):
    images = torch.as_tensor(np.asarray(images, dtype=np.float32))
    masks = torch.as_tensor(np.asarray(masks, dtype=np.float32))
    if images.dim() == 3:
        images, masks = images.unsqueeze(0), masks.unsqueeze(0)
    if images.shape[:3] != masks.shape[:3]:
        raise InvalidArgumentError(f"image {tuple(images.shape)} and mask {tuple(masks.shape)} shapes differ")
    return images.permute(0, 3, 1, 2), masks


def score_pair(dq, image, mask):
    """D_q probability that (image, mask) is a high-quality pair."""
    return float(score_pairs(dq, image, mask)[0])


def score_pairs(dq, images, masks, batch_size=64):
    x, m = _pair_tensors(images, masks)
    dq.eval()
    out = []
    with torch.no_grad():
        for s in range(0, len(x), batch_size):
            out.append(torch.sigmoid(dq(x[s:s + batch_size], m[s:s + batch_size])))
    # keep scores strictly inside (0, 1) even where float32 sigmoid saturates
    return np.clip(torch.cat(out).numpy().astype(np.float64), 1e-12, 1 - 1e-12)


def dq_objective(real_logits, synth_logits):
    """Mean of log D(real) + log(1 - D(synth)); D_q ascends this."""
    p_real = torch.sigmoid(real_logits).clamp(PROB_EPS, 1 - PROB_EPS)
    p_syn = torch.sigmoid(synth_logits).clamp(PROB_EPS, 1 - PROB_EPS)
    return (torch.log(p_real) + torch.log1p(-p_syn)).mean()


def _roll_masks(masks):
    return torch.roll(masks, shifts=1, dims=0)


def dq_step(dq, opt, real_images, real_masks, syn_images, syn_masks, mismatch=True):
    """One ascent step on the D_q objective; returns the minimized loss (negated objective).

    With ``mismatch`` the real images paired with another sample's mask count as
    extra negatives, so the score depends on image-mask agreement.
    """
    dq.train()
    real_logits = dq(real_images, real_masks)
    syn_logits = dq(syn_images, syn_masks)
    loss = -dq_objective(real_logits, syn_logits)
    if mismatch and len(real_masks) > 1:
        wrong = dq(real_images, _roll_masks(real_masks))
        loss = loss - torch.log1p(-torch.sigmoid(wrong).clamp(PROB_EPS, 1 - PROB_EPS)).mean()
    opt.zero_grad()
    loss.backward()
    opt.step()
    return loss.item()


def train_dq(real_images, real_masks, synth, epochs, seed=0, dq=None, batch_size=16, lr=2e-4,
             steps_per_epoch=20, mismatch=True):
    """Train D_q on real (image, mask) pairs against a synthetic stream.

    ``synth(n, rng)`` returns ``(images[n, H, W, 3], masks[n, H, W])`` drawn from
    the mask generator. Returns ``(dq, log)``.
    """
    if len(real_images) == 0:
        raise EmptyInputError("no real pairs")
    if epochs < 1:
        raise InvalidArgumentError("epochs must be >= 1")
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    dq = dq if dq is not None else QualityNet()
    real_x, real_m = _pair_tensors(real_images, real_masks)
    opt = torch.optim.Adam(dq.parameters(), lr=lr, betas=(0.5, 0.999))
    history = []
    for epoch in range(epochs):
        losses = []
        for _ in range(steps_per_epoch):
            syn = synth(batch_size, rng)
            if len(syn[0]) == 0:
                raise EmptyInputError("synthetic stream produced no pairs")
            syn_x, syn_m = _pair_tensors(*syn)
            pick = torch.from_numpy(rng.integers(0, len(real_x), size=batch_size))
            losses.append(dq_step(dq, opt, real_x[pick], real_m[pick], syn_x, syn_m, mismatch))
        history.append({"epoch": epoch + 1, "loss_dq": float(np.mean(losses))})
        log.info("dq epoch %d: loss=%.4f", epoch + 1, history[-1]["loss_dq"])
    dq.eval()
    return dq, history


@dataclass(frozen=True)
class FilterPolicy:
    mode: str = "threshold"
    value: float = 0.5

    def __post_init__(self):
        if self.mode == "threshold":
            if not 0.0 <= self.value <= 1.0:
                raise InvalidArgumentError(f"threshold must be in [0, 1], got {self.value}")
        elif self.mode == "top-fraction":
            if not 0.0 < self.value <= 1.0:
                raise InvalidArgumentError(f"top fraction must be in (0, 1], got {self.value}")
        else:
            raise InvalidArgumentError(f"unknown filter mode {self.mode!r}")

    def to_dict(self):
        return {"mode": self.mode, "value": self.value}


def filter_pool(pool, policy):
    """Filter ``(item, score)`` pairs, preserving the pool order."""
    if policy.mode == "threshold":
        return [p for p in pool if p[1] >= policy.value]
    keep = math.ceil(policy.value * len(pool))
    ranked = sorted(range(len(pool)), key=lambda i: (-pool[i][1], i))[:keep]
    return [pool[i] for i in sorted(ranked)]
