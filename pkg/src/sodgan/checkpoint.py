"""Checkpoints: a torch state-dict blob per net plus a JSON sidecar.

The sidecar records the constructor arguments (so the net can be rebuilt),
an architecture hash, the parameter checksum, and the training seed.
Loading verifies the checksum, so a round trip is bit-exact or fails.
"""
import hashlib
import json
import os

import torch

from .errors import CorruptDatasetError, DependencyError


def _builders():
    from .diffusion import EmbeddingNet, VAEEncoder
    from .generator import GeneratorNet, ReconDiscriminator
    from .maskgen import MaskGeneratorNet
    from .quality import QualityNet
    from .saliency import SaliencyNet

    return {
        "generator": GeneratorNet,
        "discriminator": ReconDiscriminator,
        "den": EmbeddingNet,
        "vae": VAEEncoder,
        "maskgen": MaskGeneratorNet,
        "quality": QualityNet,
        "saliency": SaliencyNet,
    }


def state_checksum(module):
    h = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        t = tensor.detach().cpu().contiguous()
        h.update(name.encode())
        h.update(str(t.dtype).encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(t.numpy().tobytes() if t.dtype != torch.bool else t.to(torch.uint8).numpy().tobytes())
    return h.hexdigest()


def architecture_hash(kind, config):
    return hashlib.sha256(json.dumps([kind, config], sort_keys=True).encode()).hexdigest()[:16]


def sidecar_path(path):
    return os.path.splitext(path)[0] + ".json"


def save_checkpoint(module, path, kind, config, seed=None, extra=None):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    torch.save(module.state_dict(), path)
    meta = {"kind": kind, "config": config, "architecture_hash": architecture_hash(kind, config),
            "checksum": state_checksum(module), "seed": seed}
    if extra:
        meta.update(extra)
    with open(sidecar_path(path), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return meta


def read_meta(path):
    with open(sidecar_path(path), encoding="utf-8") as fh:
        return json.load(fh)


def load_checkpoint(path, stage=None):
    """Rebuild and load a net; ``stage`` names the CLI step to blame when it is missing."""
    if not os.path.exists(path) or not os.path.exists(sidecar_path(path)):
        raise DependencyError(stage or "unknown", path)
    meta = read_meta(path)
    module = _builders()[meta["kind"]](**meta["config"])
    module.load_state_dict(torch.load(path, weights_only=True))
    module.eval()
    if state_checksum(module) != meta["checksum"]:
        raise CorruptDatasetError(f"checksum mismatch for {path}")
    return module
