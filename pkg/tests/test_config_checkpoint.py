import json

import pytest
import torch

from sodgan import config
from sodgan.checkpoint import load_checkpoint, read_meta, save_checkpoint, state_checksum
from sodgan.errors import ConfigError, CorruptDatasetError, DependencyError
from sodgan.generator import GeneratorNet, ReconDiscriminator
from sodgan.maskgen import MaskGeneratorNet
from sodgan.quality import QualityNet


def test_defaults_round_trip(tmp_path):
    cfg = config.RunConfig()
    path = tmp_path / "c.json"
    path.write_text(cfg.to_json())
    assert config.load(path) == cfg


def test_run_json_is_accepted(tmp_path):
    cfg = config.apply_overrides(config.RunConfig(), ["synth.n_keep=7"])
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"stage": "synth", "config": cfg.to_dict()}))
    assert config.load(path).synth.n_keep == 7


@pytest.mark.parametrize("data, key", [
    ({"generator": {"epochs": 0}}, "generator.epochs"),
    ({"generator": {"epochs": "ten"}}, "generator.epochs"),
    ({"maskgen": {"head": "mlp-xl"}}, "maskgen.head"),
    ({"quality": {"policy": "median"}}, "quality.policy"),
    ({"bogus": 1}, "bogus"),
    ({"corpus": {"n_per_class": True}}, "corpus.n_per_class"),
    ({"quality": {"epochs": -1}}, "quality.epochs"),
])
def test_invalid_configs(data, key):
    with pytest.raises(ConfigError) as info:
        config.from_dict(data)
    assert key in str(info.value)
    assert info.value.exit_code == 2


def test_zero_refinement_epochs_allowed():
    assert config.from_dict({"quality": {"epochs": 0}}).quality.epochs == 0


def test_bad_json(tmp_path):
    path = tmp_path / "c.json"
    path.write_text("{not json")
    with pytest.raises(ConfigError):
        config.load(path)


def test_overrides():
    cfg = config.apply_overrides(config.RunConfig(), ["maskgen.head=cnn-m", "synth.truncation=0.4",
                                                      "synth.classes=[1,2]"])
    assert cfg.maskgen.head == "cnn-m" and cfg.synth.truncation == 0.4 and cfg.synth.classes == [1, 2]
    with pytest.raises(ConfigError):
        config.apply_overrides(cfg, ["synth.nope=1"])
    with pytest.raises(ConfigError):
        config.apply_overrides(cfg, ["no-equals-sign"])


def test_copy_is_independent():
    cfg = config.RunConfig()
    other = cfg.copy()
    other.synth.n_keep = 3
    assert cfg.synth.n_keep != 3


@pytest.mark.parametrize("kind, build", [
    ("generator", lambda: GeneratorNet(latent_dim=8, num_classes=2, image_size=16, base_channels=16)),
    ("discriminator", lambda: ReconDiscriminator(2, 16, 4)),
    ("maskgen", lambda: MaskGeneratorNet([16, 8], 16, "cnn-s", 2)),
    ("quality", lambda: QualityNet(4, 2)),
])
def test_checkpoint_round_trip(tmp_path, kind, build):
    torch.manual_seed(0)
    net = build()
    meta = save_checkpoint(net, str(tmp_path / f"{kind}.pt"), kind, net.config, seed=5)
    back = load_checkpoint(str(tmp_path / f"{kind}.pt"))
    assert state_checksum(back) == state_checksum(net) == meta["checksum"]
    assert read_meta(str(tmp_path / f"{kind}.pt"))["seed"] == 5
    for (k, a), (_, b) in zip(net.state_dict().items(), back.state_dict().items()):
        assert torch.equal(a, b), k


def test_missing_checkpoint_names_stage(tmp_path):
    with pytest.raises(DependencyError) as info:
        load_checkpoint(str(tmp_path / "absent.pt"), stage="train-gan")
    assert "train-gan" in str(info.value) and info.value.exit_code == 3


def test_tampered_checkpoint(tmp_path):
    net = QualityNet(4, 2)
    path = str(tmp_path / "q.pt")
    save_checkpoint(net, path, "quality", net.config)
    meta = read_meta(path)
    meta["checksum"] = "0" * 64
    (tmp_path / "q.json").write_text(json.dumps(meta))
    with pytest.raises(CorruptDatasetError):
        load_checkpoint(path)
