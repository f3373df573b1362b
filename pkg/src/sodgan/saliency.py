"""Generic U-shaped saliency network trained on any (image, mask) dataset."""
import logging

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .corpus import Corpus, Entry
from .errors import EmptyInputError, InvalidArgumentError
from .maskgen import loss_supervised

log = logging.getLogger(__name__)


def _double_conv(a, b):
    return nn.Sequential(nn.Conv2d(a, b, 3, padding=1), nn.BatchNorm2d(b), nn.ReLU(),
                         nn.Conv2d(b, b, 3, padding=1), nn.BatchNorm2d(b), nn.ReLU())


class SaliencyNet(nn.Module):
    """Three-level encoder-decoder with skip connections; image -> probability map."""

    def __init__(self, width=16):
        super().__init__()
        self.config = {"width": width}
        self.enc1 = _double_conv(3, width)
        self.enc2 = _double_conv(width, 2 * width)
        self.mid = _double_conv(2 * width, 4 * width)
        self.dec2 = _double_conv(6 * width, 2 * width)
        self.dec1 = _double_conv(3 * width, width)
        self.out = nn.Conv2d(width, 1, 1)

    def forward(self, x):
        e1 = self.enc1(x)
        e2 = self.enc2(F.max_pool2d(e1, 2))
        m = self.mid(F.max_pool2d(e2, 2))
        d2 = self.dec2(torch.cat([F.interpolate(m, size=e2.shape[-2:], mode="bilinear", align_corners=False), e2], 1))
        d1 = self.dec1(torch.cat([F.interpolate(d2, size=e1.shape[-2:], mode="bilinear", align_corners=False), e1], 1))
        return torch.sigmoid(self.out(d1)).squeeze(1)


def as_pairs(ds):
    """Normalize a Corpus (train split), SynthDataset, or iterable of tuples to (image, mask) pairs."""
    if isinstance(ds, Corpus):
        ds = ds.train or ds.entries
    pairs = []
    for item in ds:
        if isinstance(item, Entry):
            pairs.append((item.image, item.mask))
        else:
            pairs.append((item[0], item[1]))
    return pairs


def train_saliency(ds, epochs, seed=0, batch_size=16, lr=1e-2, width=16):
    """Minimize BCE + dice on the dataset (masks binarized at 0.5). Returns ``(net, log)``."""
    pairs = as_pairs(ds)
    if not pairs:
        raise EmptyInputError("dataset is empty")
    if epochs < 1:
        raise InvalidArgumentError("epochs must be >= 1")
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    x = torch.from_numpy(np.stack([np.asarray(p[0], dtype=np.float32) for p in pairs])).permute(0, 3, 1, 2)
    y = torch.from_numpy(np.stack([(np.asarray(p[1]) >= 0.5) for p in pairs]).astype(np.float32))
    net = SaliencyNet(width)
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    steps_total = epochs * max(1, -(-len(pairs) // batch_size))
    sched = torch.optim.lr_scheduler.OneCycleLR(opt, max_lr=lr, total_steps=steps_total)
    history = []
    for epoch in range(epochs):
        net.train()
        order = rng.permutation(len(pairs))
        losses = []
        for s in range(0, len(pairs), batch_size):
            idx = torch.from_numpy(order[s:s + batch_size])
            xb, yb = x[idx], y[idx]
            if len(idx) < 2:
                # BatchNorm needs two samples; pad with a flipped copy
                xb, yb = torch.cat([xb, xb.flip(-1)]), torch.cat([yb, yb.flip(-1)])
            loss = loss_supervised(net(xb), yb)
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            losses.append(loss.item())
        history.append({"epoch": epoch + 1, "loss": float(np.mean(losses))})
        log.info("saliency epoch %d: loss=%.4f", epoch + 1, history[-1]["loss"])
    net.eval()
    return net, history


def predict_saliency(net, images, batch_size=64):
    x = torch.from_numpy(np.stack([np.asarray(i, dtype=np.float32) for i in images])).permute(0, 3, 1, 2)
    net.eval()
    out = []
    with torch.no_grad():
        for s in range(0, len(x), batch_size):
            out.append(net(x[s:s + batch_size]))
    return torch.cat(out).numpy()
