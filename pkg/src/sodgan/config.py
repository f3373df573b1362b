"""Run configuration: one JSON document covering every stage, validated strictly."""
import dataclasses
import json
import typing
from dataclasses import dataclass, field

from .errors import ConfigError
from .maskgen import HEAD_WIDTHS, OAFF_MODES


@dataclass
class CorpusConfig:
    n_per_class: int = 100
    num_classes: int = 8
    size: int = 64
    seed: int = 0
    test_fraction: float = 0.2


@dataclass
class GeneratorConfig:
    latent_dim: int = 64
    base_channels: int = 128
    epochs: int = 30
    batch_size: int = 16
    lr: float = 1e-3
    d_lr: float = 2e-4
    kl_weight: float = 1e-4
    adv_weight: float = 0.01
    seed: int = 0


@dataclass
class DiffusionConfig:
    T: int = 50
    beta_start: float = 1e-4
    beta_end: float = 0.02
    epochs: int = 20
    batch_size: int = 32
    lr: float = 1e-3
    recon_weight: float = 1.0
    adv_weight: float = 0.05
    var_weight: float = 0.01
    seed: int = 0


@dataclass
class MaskGenConfig:
    head: str = "mlp-s"
    reduced_channels: int = 8
    oaff_mode: str = "oaff"
    epochs: int = 100
    lr: float = 1e-3
    adv_weight: float = 0.1
    synth_batch: int = 8
    shots: int = 1
    fewshot_seed: int = 0
    seed: int = 0


@dataclass
class QualityConfig:
    # extra epochs against the frozen mask branch; 0 keeps the D_q from the joint game
    epochs: int = 0
    steps_per_epoch: int = 20
    batch_size: int = 16
    lr: float = 2e-4
    mismatch: bool = True
    policy: str = "threshold"
    policy_value: float = 0.5
    seed: int = 0


@dataclass
class SynthConfig:
    n_keep: int = 1000
    truncation: float = 1.0
    workers: int = 1
    classes: typing.Optional[typing.List[int]] = None
    seed: int = 0


@dataclass
class SaliencyConfig:
    epochs: int = 10
    batch_size: int = 16
    lr: float = 1e-2
    width: int = 16
    seed: int = 0


@dataclass
class RunConfig:
    home: typing.Optional[str] = None
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    maskgen: MaskGenConfig = field(default_factory=MaskGenConfig)
    quality: QualityConfig = field(default_factory=QualityConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    saliency: SaliencyConfig = field(default_factory=SaliencyConfig)

    def to_dict(self):
        return dataclasses.asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def copy(self):
        return from_dict(self.to_dict())


_CHOICES = {
    "maskgen.head": tuple(HEAD_WIDTHS),
    "maskgen.oaff_mode": OAFF_MODES,
    "quality.policy": ("threshold", "top-fraction"),
}
_POSITIVE = {"corpus.n_per_class", "corpus.size", "generator.epochs", "diffusion.T", "diffusion.epochs",
             "maskgen.epochs", "synth.n_keep", "synth.workers", "saliency.epochs",
             "synth.truncation"}
_NON_NEGATIVE = {"quality.epochs"}


def _coerce(value, annotation, key):
    origin = typing.get_origin(annotation)
    if origin is typing.Union:
        args = [a for a in typing.get_args(annotation) if a is not type(None)]
        if value is None:
            return None
        return _coerce(value, args[0], key)
    if origin in (list, typing.List):
        if not isinstance(value, list):
            raise ConfigError(key, f"expected a list, got {type(value).__name__}")
        (item,) = typing.get_args(annotation)
        return [_coerce(v, item, key) for v in value]
    if annotation is bool:
        if not isinstance(value, bool):
            raise ConfigError(key, f"expected a boolean, got {value!r}")
        return value
    if annotation is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(key, f"expected an integer, got {value!r}")
        return value
    if annotation is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(key, f"expected a number, got {value!r}")
        return float(value)
    if annotation is str:
        if not isinstance(value, str):
            raise ConfigError(key, f"expected a string, got {value!r}")
        return value
    raise ConfigError(key, f"unsupported type {annotation}")


def _build(cls, data, prefix):
    if not isinstance(data, dict):
        raise ConfigError(prefix or "<root>", "expected an object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in names:
            raise ConfigError(f"{prefix}{key}", "unknown key")
    kwargs = {}
    for name in names:
        if name not in data:
            continue
        key = f"{prefix}{name}"
        hint = hints[name]
        if dataclasses.is_dataclass(hint):
            kwargs[name] = _build(hint, data[name], key + ".")
        else:
            value = _coerce(data[name], hint, key)
            if key in _CHOICES and value not in _CHOICES[key]:
                raise ConfigError(key, f"must be one of {list(_CHOICES[key])}, got {value!r}")
            if key in _POSITIVE and not value > 0:
                raise ConfigError(key, f"must be > 0, got {value!r}")
            if key in _NON_NEGATIVE and value < 0:
                raise ConfigError(key, f"must be >= 0, got {value!r}")
            kwargs[name] = value
    return cls(**kwargs)


def from_dict(data):
    return _build(RunConfig, data, "")


def load(path):
    """Read a config file; a stage's ``run.json`` (config nested under ``config``) is accepted too."""
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError("<file>", f"invalid JSON in {path}: {exc}") from exc
    if isinstance(data, dict) and "stage" in data and isinstance(data.get("config"), dict):
        data = data["config"]
    return from_dict(data)


def parse_override(text):
    """``a.b=value`` -> (["a", "b"], value); the value is JSON when it parses, else a string."""
    if "=" not in text:
        raise ConfigError(text, "override must look like key.path=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip().split("."), value


def apply_overrides(cfg, overrides):
    data = cfg.to_dict()
    for text in overrides:
        path, value = parse_override(text)
        node = data
        for i, part in enumerate(path[:-1]):
            if not isinstance(node, dict) or part not in node:
                raise ConfigError(".".join(path[:i + 1]), "unknown key")
            node = node[part]
        if not isinstance(node, dict) or path[-1] not in node:
            raise ConfigError(".".join(path), "unknown key")
        node[path[-1]] = value
    return from_dict(data)
