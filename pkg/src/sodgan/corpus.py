"""Procedural labeled scenes: the stand-in for a real saliency training corpus.

Every scene is a textured background with one to three foreground shapes.
The shape family and hue range are tied to the class id, so a small
conditional generator can learn the classes, and the mask is the exact union
of painted foreground pixels.
"""
import colorsys
import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image as PILImage

from .errors import EmptyInputError, InvalidArgumentError

SHAPE_FAMILIES = ("ellipse", "rectangle", "triangle", "ring", "cross", "diamond", "star", "halfdisk")
MIN_FG_FRACTION = 0.05
MAX_FG_FRACTION = 0.5
SIZE_BINS = 20
COLOR_BINS = 8


def _value_noise(rng, size, octaves=(4, 8, 16)):
    out = np.zeros((size, size), dtype=np.float64)
    amp, total = 1.0, 0.0
    for cells in octaves:
        grid = rng.random((cells + 1, cells + 1))
        # bilinear upsample of the lattice onto pixel centers
        pos = (np.arange(size) + 0.5) * cells / size
        i0 = np.floor(pos).astype(int)
        frac = pos - i0
        top = grid[i0][:, i0] * (1 - frac)[None, :] + grid[i0][:, i0 + 1] * frac[None, :]
        bot = grid[i0 + 1][:, i0] * (1 - frac)[None, :] + grid[i0 + 1][:, i0 + 1] * frac[None, :]
        out += amp * (top * (1 - frac)[:, None] + bot * frac[:, None])
        total += amp
        amp *= 0.5
    return out / total


def _background(rng, size):
    base = rng.uniform(0.25, 0.6)
    tint = rng.uniform(-0.08, 0.08, size=3)
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    angle = rng.uniform(0, 2 * np.pi)
    ramp = (np.cos(angle) * xx + np.sin(angle) * yy) * rng.uniform(0.1, 0.25)
    img = np.empty((size, size, 3))
    for ch in range(3):
        img[..., ch] = base + tint[ch] + ramp + 0.3 * (_value_noise(rng, size) - 0.5)
    return np.clip(img, 0.0, 1.0)


def _polygon(u, v, n_vertices, radius, phase=np.pi / 2):
    ang = phase + 2 * np.pi * np.arange(n_vertices) / n_vertices
    vx, vy = radius * np.cos(ang), radius * np.sin(ang)
    inside = np.ones_like(u, dtype=bool)
    for k in range(n_vertices):
        x0, y0 = vx[k], vy[k]
        x1, y1 = vx[(k + 1) % n_vertices], vy[(k + 1) % n_vertices]
        inside &= (x1 - x0) * (v - y0) - (y1 - y0) * (u - x0) >= 0
    return inside


def _shape_mask(family, rng, size):
    cx, cy = rng.uniform(0.25, 0.75, size=2) * size
    r = rng.uniform(0.12, 0.28) * size
    theta = rng.uniform(0, np.pi)
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    dx, dy = xx - cx, yy - cy
    u = np.cos(theta) * dx + np.sin(theta) * dy
    v = -np.sin(theta) * dx + np.cos(theta) * dy
    dist = np.hypot(u, v)
    if family == "ellipse":
        aspect = rng.uniform(0.55, 1.0)
        return (u / r) ** 2 + (v / (r * aspect)) ** 2 <= 1.0
    if family == "rectangle":
        aspect = rng.uniform(0.5, 1.0)
        return (np.abs(u) <= r * 0.9) & (np.abs(v) <= r * 0.9 * aspect)
    if family == "triangle":
        return _polygon(u, v, 3, r * 1.15)
    if family == "ring":
        return (dist <= r) & (dist >= 0.55 * r)
    if family == "cross":
        arm = 0.32 * r
        return ((np.abs(u) <= arm) & (np.abs(v) <= r)) | ((np.abs(v) <= arm) & (np.abs(u) <= r))
    if family == "diamond":
        return np.abs(u) / r + np.abs(v) / (0.6 * r) <= 1.0
    if family == "star":
        ang = np.arctan2(v, u)
        return dist <= r * (0.6 + 0.4 * np.cos(5 * ang))
    if family == "halfdisk":
        return (dist <= r * 1.1) & (v >= 0)
    raise InvalidArgumentError(f"unknown shape family {family!r}")


def _shape_color(rng, class_id, num_classes):
    hue = (class_id / num_classes + rng.uniform(-0.25, 0.25) / num_classes) % 1.0
    sat = rng.uniform(0.7, 1.0)
    val = rng.uniform(0.75, 1.0)
    return np.array(colorsys.hsv_to_rgb(hue, sat, val))


def render_layers(seed, class_id, size=64, num_classes=8):
    """Return (background, foreground, mask) before compositing.

    The composed image is ``where(mask, foreground, background)``; callers that
    need to check mask exactness can use the separate layers.
    """
    if size < 16:
        raise InvalidArgumentError(f"scene size must be >= 16, got {size}")
    if not 0 <= class_id < num_classes:
        raise InvalidArgumentError(f"class id {class_id} outside [0, {num_classes})")
    rng = np.random.default_rng([seed, class_id, size, num_classes])
    background = _background(rng, size)
    family = SHAPE_FAMILIES[class_id % len(SHAPE_FAMILIES)]
    yy = (np.arange(size)[:, None] + 0.5) / size
    while True:
        n_shapes = int(rng.integers(1, 4))
        mask = np.zeros((size, size), dtype=bool)
        foreground = np.zeros((size, size, 3))
        for _ in range(n_shapes):
            m = _shape_mask(family, rng, size)
            color = _shape_color(rng, class_id, num_classes)
            shade = 0.8 + 0.2 * (1 - yy)
            foreground[m] = (color[None, None, :] * shade[..., None] * np.ones((1, size, 1)))[m]
            mask |= m
        if MIN_FG_FRACTION <= mask.mean() <= MAX_FG_FRACTION:
            break
    foreground = np.clip(foreground, 0.0, 1.0)
    return _quantize(background), _quantize(foreground), mask.astype(np.float32)


def _quantize(x):
    return (np.round(x * 255.0) / 255.0).astype(np.float32)


def generate_scene(seed, class_id, size=64, num_classes=8):
    """Render one labeled scene; returns ``(image[H,W,3], mask[H,W])`` in [0, 1]."""
    background, foreground, mask = render_layers(seed, class_id, size, num_classes)
    image = np.where(mask[..., None] > 0, foreground, background)
    return image.astype(np.float32), mask


@dataclass
class Entry:
    id: str
    image: np.ndarray
    mask: np.ndarray
    class_id: int
    seed: int
    split: str


@dataclass
class Corpus:
    entries: list
    num_classes: int
    size: int
    seed: int = 0

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def split(self, name):
        return [e for e in self.entries if e.split == name]

    @property
    def train(self):
        return self.split("train")

    @property
    def test(self):
        return self.split("test")


def _scene_seed(seed, class_id, index):
    return int(np.random.SeedSequence([seed, class_id, index]).generate_state(1)[0])


def _split_rank(scene_seed):
    return hashlib.sha256(str(scene_seed).encode()).hexdigest()


def build_corpus(n_per_class, num_classes=8, seed=0, size=64, test_fraction=0.2):
    if n_per_class < 1:
        raise InvalidArgumentError("n_per_class must be >= 1")
    if num_classes < 2:
        raise InvalidArgumentError("num_classes must be >= 2")
    if not 0.0 <= test_fraction < 1.0:
        raise InvalidArgumentError("test_fraction must be in [0, 1)")
    n_test = int(round(n_per_class * test_fraction))
    entries = []
    for c in range(num_classes):
        seeds = [_scene_seed(seed, c, i) for i in range(n_per_class)]
        test_idx = set(sorted(range(n_per_class), key=lambda i: _split_rank(seeds[i]))[:n_test])
        for i, s in enumerate(seeds):
            image, mask = generate_scene(s, c, size, num_classes)
            entries.append(Entry(f"{c:03d}_{i:05d}", image, mask, c, s,
                                 "test" if i in test_idx else "train"))
    return Corpus(entries, num_classes, size, seed)


def save_png_rgb(path, image):
    PILImage.fromarray(np.round(np.clip(image, 0, 1) * 255).astype(np.uint8), "RGB").save(path)


def save_png_gray(path, mask):
    PILImage.fromarray(np.round(np.clip(mask, 0, 1) * 255).astype(np.uint8), "L").save(path)


def load_png(path):
    with PILImage.open(path) as im:
        return np.asarray(im, dtype=np.float32) / 255.0


def save_corpus(corpus, root):
    os.makedirs(os.path.join(root, "images"), exist_ok=True)
    os.makedirs(os.path.join(root, "masks"), exist_ok=True)
    with open(os.path.join(root, "corpus.jsonl"), "w", encoding="utf-8", newline="\n") as fh:
        for e in corpus.entries:
            save_png_rgb(os.path.join(root, "images", f"{e.id}.png"), e.image)
            save_png_gray(os.path.join(root, "masks", f"{e.id}.png"), e.mask)
            fh.write(json.dumps({"id": e.id, "class": e.class_id, "seed": e.seed, "split": e.split}) + "\n")
    with open(os.path.join(root, "corpus.json"), "w", encoding="utf-8") as fh:
        json.dump({"num_classes": corpus.num_classes, "size": corpus.size, "seed": corpus.seed}, fh)


def load_corpus(root):
    with open(os.path.join(root, "corpus.json"), encoding="utf-8") as fh:
        meta = json.load(fh)
    entries = []
    with open(os.path.join(root, "corpus.jsonl"), encoding="utf-8") as fh:
        for line in fh:
            rec = json.loads(line)
            image = load_png(os.path.join(root, "images", f"{rec['id']}.png"))
            mask = load_png(os.path.join(root, "masks", f"{rec['id']}.png"))
            entries.append(Entry(rec["id"], image, mask, rec["class"], rec["seed"], rec["split"]))
    return Corpus(entries, meta["num_classes"], meta["size"], meta["seed"])


@dataclass
class StatsReport:
    """Dataset statistics: center bias, class counts, color contrast, object size."""
    center_bias: np.ndarray
    class_counts: dict
    color_contrast: list
    object_sizes: list
    size_hist: list = field(default_factory=list)
    size_bin_edges: list = field(default_factory=list)

    def to_dict(self):
        return {
            "center_bias": self.center_bias.tolist(),
            "class_counts": {str(k): v for k, v in sorted(self.class_counts.items())},
            "color_contrast": list(self.color_contrast),
            "object_sizes": list(self.object_sizes),
            "size_hist": list(self.size_hist),
            "size_bin_edges": list(self.size_bin_edges),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["center_bias"], dtype=np.float64),
                   {int(k): v for k, v in d["class_counts"].items()},
                   list(d["color_contrast"]), list(d["object_sizes"]),
                   list(d["size_hist"]), list(d["size_bin_edges"]))

    def to_json(self):
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def color_histogram(pixels, bins=COLOR_BINS):
    idx = np.minimum((np.asarray(pixels) * bins).astype(int), bins - 1)
    flat = (idx[:, 0] * bins + idx[:, 1]) * bins + idx[:, 2]
    hist = np.bincount(flat, minlength=bins ** 3).astype(np.float64)
    total = hist.sum()
    return hist / total if total > 0 else hist


def chi_square_distance(p, q):
    denom = p + q
    nz = denom > 0
    return float(0.5 * np.sum((p[nz] - q[nz]) ** 2 / denom[nz]))


def color_contrast(image, mask):
    """Chi-square distance between foreground and background RGB histograms."""
    fg = mask > 0.5
    if not fg.any() or fg.all():
        return 0.0
    return chi_square_distance(color_histogram(image[fg]), color_histogram(image[~fg]))


def corpus_stats(items):
    """Compute a StatsReport over (image, mask, class) triples, a Corpus, or a dataset."""
    if isinstance(items, Corpus):
        items = [(e.image, e.mask, e.class_id) for e in items.entries]
    heat = None
    counts, contrasts, sizes = {}, [], []
    n = 0
    for image, mask, class_id in items:
        binary = (np.asarray(mask) > 0.5).astype(np.float64)
        heat = binary.copy() if heat is None else heat + binary
        counts[int(class_id)] = counts.get(int(class_id), 0) + 1
        contrasts.append(color_contrast(np.asarray(image), binary))
        sizes.append(float(binary.mean()))
        n += 1
    if n == 0:
        raise EmptyInputError("cannot compute statistics of an empty dataset")
    hist, edges = np.histogram(sizes, bins=SIZE_BINS, range=(0.0, 1.0))
    return StatsReport(heat / n, counts, contrasts, sizes, hist.tolist(), edges.tolist())
