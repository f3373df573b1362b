"""Synthetic dataset factory: sample, generate, score, filter, persist with a manifest.

Attempt ``i`` is fully defined by ``(seed, i)``: its latent seed is derived from
both and its class is ``classes[i % len(classes)]``. Attempts are evaluated in
fixed, index-aligned chunks, so any number of workers yields the same records.
"""
import datetime
import hashlib
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .corpus import corpus_stats, load_png, save_png_gray, save_png_rgb
from .errors import CorruptDatasetError, EmptyInputError, FilterTooStrictError, InvalidArgumentError
from .generator import sample_latents
from .maskgen import generate_masks
from .quality import FilterPolicy, filter_pool, score_pairs

CHUNK = 16
MAX_ATTEMPT_FACTOR = 20
SCORE_FLOOR = 1e-6


def attempt_seed(seed, index):
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def _fixed(score):
    """Round a probability to 6 decimals, kept inside the open interval (0, 1)."""
    return float(f"{min(max(score, SCORE_FLOOR), 1 - SCORE_FLOOR):.6f}")


@dataclass
class Attempt:
    index: int
    class_id: int
    latent_seed: int
    image: np.ndarray
    mask: np.ndarray
    score: float


def run_chunk(g, mg, dq, chunk_index, seed, truncation, classes, chunk=CHUNK):
    indices = range(chunk_index * chunk, (chunk_index + 1) * chunk)
    seeds = [attempt_seed(seed, i) for i in indices]
    cls = [classes[i % len(classes)] for i in indices]
    latents = sample_latents(seeds, truncation, g.latent_dim)
    images, masks = generate_masks(g, mg, latents, cls)
    scores = score_pairs(dq, images, masks)
    return [Attempt(i, c, s, img, m, _fixed(sc))
            for i, c, s, img, m, sc in zip(indices, cls, seeds, images, masks, scores)]


def _canonical(obj):
    return json.dumps(obj, sort_keys=True, ensure_ascii=False, separators=(", ", ": "))


def _record_line(rec):
    text = _canonical({k: v for k, v in rec.items() if k != "quality_score"})
    return text[:-1] + f', "quality_score": {rec["quality_score"]:.6f}}}'


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        h.update(fh.read())
    return h.hexdigest()


def _select(attempts, n_keep, policy):
    if policy.mode == "threshold":
        kept, used = [], 0
        for a in attempts:
            used += 1
            if a.score >= policy.value:
                kept.append(a.index)
                if len(kept) == n_keep:
                    break
        return set(kept), attempts[:used]
    pool = [(a.index, a.score) for a in attempts]
    chosen = filter_pool(pool, policy)
    chosen = sorted(chosen, key=lambda p: (-p[1], p[0]))[:n_keep]
    return {i for i, _ in chosen}, attempts


def synthesize_dataset(g, mg, dq, out_dir, n_keep=1000, truncation=1.0, policy=None, classes=None,
                       seed=0, workers=1, checksums=None, created_at=None):
    """Generate until ``n_keep`` pairs pass ``policy``; write rasters + manifest under ``out_dir``.

    Threshold policies stop at the ``n_keep``-th accepted attempt and give up after
    ``20 * n_keep`` attempts; top-fraction policies score ``ceil(n_keep / rho)``
    attempts and keep the ``n_keep`` best. Returns ``(SynthDataset, header)``.
    """
    if n_keep < 1:
        raise InvalidArgumentError("n_keep must be >= 1")
    policy = policy or FilterPolicy()
    classes = list(range(g.num_classes)) if classes is None else [int(c) for c in classes]
    if not classes:
        raise InvalidArgumentError("class set is empty")
    if policy.mode == "threshold":
        cap = MAX_ATTEMPT_FACTOR * n_keep
    else:
        cap = math.ceil(n_keep / policy.value)
    n_chunks = math.ceil(cap / CHUNK)

    attempts = []
    kept = set()
    next_chunk = 0
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        while next_chunk < n_chunks:
            batch = list(range(next_chunk, min(next_chunk + max(1, workers), n_chunks)))
            next_chunk = batch[-1] + 1
            for result in pool.map(lambda k: run_chunk(g, mg, dq, k, seed, truncation, classes), batch):
                attempts.extend(result)
            attempts = attempts[:cap]
            if policy.mode == "threshold":
                kept, used = _select(attempts, n_keep, policy)
                if len(kept) == n_keep:
                    attempts = used
                    break
    if policy.mode != "threshold":
        kept, attempts = _select(attempts, n_keep, policy)
    if len(kept) < n_keep:
        raise FilterTooStrictError(len(kept), len(attempts), len(kept) / max(len(attempts), 1))

    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "masks"), exist_ok=True)
    lines = []
    for a in attempts:
        rid = f"{a.index:07d}"
        rec = {"id": rid, "class": a.class_id, "latent_seed": a.latent_seed, "lambda": float(truncation),
               "quality_score": a.score, "kept": a.index in kept, "image_path": None, "mask_path": None}
        if rec["kept"]:
            rec["image_path"] = f"images/{rid}.png"
            rec["mask_path"] = f"masks/{rid}.png"
            save_png_rgb(os.path.join(out_dir, rec["image_path"]), a.image)
            save_png_gray(os.path.join(out_dir, rec["mask_path"]), a.mask)
            rec["image_sha256"] = _sha256(os.path.join(out_dir, rec["image_path"]))
            rec["mask_sha256"] = _sha256(os.path.join(out_dir, rec["mask_path"]))
        lines.append(_record_line(rec))
    manifest_path = os.path.join(out_dir, "manifest.jsonl")
    with open(manifest_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("".join(line + "\n" for line in lines))
    header = {
        "checksums": dict(checksums or {}),
        "policy": policy.to_dict(),
        "created_at": created_at or datetime.datetime.now(datetime.timezone.utc).isoformat(),
        "n_keep": n_keep,
        "attempts": len(attempts),
        "kept": len(kept),
        "acceptance_rate": round(len(kept) / len(attempts), 6),
        "lambda": float(truncation),
        "classes": classes,
        "seed": seed,
        "manifest_sha256": _sha256(manifest_path),
    }
    with open(os.path.join(out_dir, "header.json"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(header, indent=2, sort_keys=True) + "\n")
    return read_dataset(out_dir), header


class SynthDataset:
    """Lazy handle over the kept records of a synthesized dataset.

    Items are ``(image, mask_probability, class_id)``.
    """

    def __init__(self, root, header, records):
        self.root = root
        self.header = header
        self.records = records

    def __len__(self):
        return len(self.records)

    def __getitem__(self, i):
        rec = self.records[i]
        return (load_png(os.path.join(self.root, rec["image_path"])),
                load_png(os.path.join(self.root, rec["mask_path"])),
                rec["class"])

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]


def read_dataset(path):
    header_path = os.path.join(path, "header.json")
    manifest_path = os.path.join(path, "manifest.jsonl")
    for p in (header_path, manifest_path):
        if not os.path.exists(p):
            raise CorruptDatasetError(f"missing {p}")
    with open(header_path, encoding="utf-8") as fh:
        header = json.load(fh)
    if header.get("manifest_sha256") and _sha256(manifest_path) != header["manifest_sha256"]:
        raise CorruptDatasetError("manifest checksum does not match header")
    records = []
    ids = set()
    with open(manifest_path, encoding="utf-8") as fh:
        for line in fh:
            rec = json.loads(line)
            if rec["id"] in ids:
                raise CorruptDatasetError(f"duplicate record id {rec['id']}")
            ids.add(rec["id"])
            if not rec["kept"]:
                continue
            for key in ("image", "mask"):
                file = os.path.join(path, rec[f"{key}_path"])
                if not os.path.exists(file):
                    raise CorruptDatasetError(f"record {rec['id']}: missing {key} file {file}")
                if f"{key}_sha256" in rec and _sha256(file) != rec[f"{key}_sha256"]:
                    raise CorruptDatasetError(f"record {rec['id']}: {key} checksum mismatch")
            records.append(rec)
    return SynthDataset(path, header, records)


def dataset_stats(ds):
    if len(ds) == 0:
        raise EmptyInputError("dataset is empty")
    return corpus_stats(iter(ds))
