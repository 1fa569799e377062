import dataclasses

import pytest

from polypvs.config import (
    ConfigError,
    EncoderConfig,
    ModelConfig,
    TrainConfig,
    apply_overrides,
    load_config,
    save_config,
    structural_fingerprint,
    validate_config,
)


def test_defaults_validate():
    cfg = ModelConfig()
    validate_config(cfg)
    assert cfg.feature_channels == 32
    assert cfg.memory_capacity == 35
    assert cfg.memory_stride == 5
    assert cfg.key_channels == 8
    assert cfg.value_channels == 16
    assert cfg.attention_pool_window == 4
    assert cfg.input_size == (352, 352)


def test_train_defaults():
    t = TrainConfig()
    assert t.lr == 1e-4
    assert t.weight_decay == 1e-4
    assert t.clip_length >= 2
    assert t.deep_supervision is True
    assert t.detach_previous is False


def test_round_trip_dict():
    cfg = ModelConfig()
    cfg.train.lr = 3e-4
    cfg.encoder.backbone = "pvt_like"
    again = ModelConfig.from_dict(cfg.to_dict())
    assert again == cfg


def test_round_trip_yaml(tmp_path):
    cfg = ModelConfig(input_size=(64, 64))
    cfg.train.seed = 7
    path = tmp_path / "cfg.yaml"
    save_config(cfg, path)
    assert load_config(path) == cfg


def test_unknown_key_rejected():
    payload = ModelConfig().to_dict()
    payload["bogus"] = 1
    with pytest.raises(ConfigError):
        ModelConfig.from_dict(payload)


def test_nested_unknown_key_rejected():
    payload = ModelConfig().to_dict()
    payload["train"]["bogus"] = 1
    with pytest.raises(ConfigError):
        ModelConfig.from_dict(payload)


@pytest.mark.parametrize(
    "mutate",
    [
        lambda c: setattr(c, "input_size", (100, 100)),  # not divisible by 32
        lambda c: setattr(c, "input_size", (32, 64)),  # /32 level would be 1x1
        lambda c: setattr(c, "value_channels", 10),  # 2*value != feature
        lambda c: setattr(c, "memory_capacity", 0),
        lambda c: setattr(c, "memory_stride", 0),
        lambda c: setattr(c.train, "clip_length", 1),
        lambda c: setattr(c.encoder, "backbone", "resnet"),
    ],
)
def test_invalid_configs_rejected(mutate):
    cfg = ModelConfig(input_size=(64, 64))
    mutate(cfg)
    with pytest.raises(ConfigError):
        validate_config(cfg)


def test_overrides_parse_types():
    base = ModelConfig()
    cfg = apply_overrides(
        base, ["train.lr=0.001", "memory_capacity=10", "use_short_term=false"]
    )
    assert cfg.train.lr == 0.001
    assert cfg.memory_capacity == 10
    assert cfg.use_short_term is False
    assert base.train.lr == 1e-4  # overrides never mutate the input


def test_overrides_accept_bare_scientific_notation():
    # YAML reads 5e-4 (no dot) as a string; numeric fields must coerce it
    cfg = apply_overrides(ModelConfig(), ["train.lr=5e-4"])
    assert cfg.train.lr == pytest.approx(5e-4)
    assert isinstance(cfg.train.lr, float)
    with pytest.raises(ConfigError):
        apply_overrides(ModelConfig(), ["train.lr=fast"])


def test_override_unknown_field_rejected():
    cfg = ModelConfig()
    with pytest.raises(ConfigError):
        apply_overrides(cfg, ["no_such_field=1"])


def test_override_requires_equals():
    cfg = ModelConfig()
    with pytest.raises(ConfigError):
        apply_overrides(cfg, ["train.lr"])


def test_fingerprint_tracks_structure_only():
    a = ModelConfig()
    b = ModelConfig()
    b.train.lr = 99.0  # optimizer settings do not change the weight layout
    assert structural_fingerprint(a) == structural_fingerprint(b)
    c = ModelConfig(feature_channels=64, value_channels=32)
    assert structural_fingerprint(a) != structural_fingerprint(c)
    d = ModelConfig()
    d.encoder.backbone = "pvt_like"
    assert structural_fingerprint(a) != structural_fingerprint(d)


def test_encoder_config_fields():
    e = EncoderConfig()
    assert e.backbone == "tiny_conv"
    assert len(e.tiny_channels) == 5
    assert dataclasses.is_dataclass(e)
