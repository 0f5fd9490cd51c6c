import pytest

from app.models.config import (
    PRESETS,
    RunConfig,
    build_config,
    config_hash,
    dump_config_file,
    load_config_file,
)
from app.validators.errors import ConfigValidationError


def test_desk_defaults():
    config = build_config()
    assert (config.backbone.num_blocks, config.backbone.embed_dim, config.backbone.token_count) == (6, 64, 8)
    assert (config.mea.num_experts, config.mea.bottleneck_dim, config.mea.adapted_blocks) == (4, 16, 3)
    assert (config.data.num_classes, config.data.num_old_classes) == (10, 5)
    assert config.mea.old_group == (0, 1)
    assert config.mea.new_group == (2, 3)


@pytest.mark.parametrize("preset", sorted(PRESETS))
def test_every_preset_validates(preset):
    assert isinstance(build_config(preset), RunConfig)


def test_overrides_take_precedence_over_preset():
    config = build_config("tiny", {"mea.scale": "0.25", "mea.num_old_experts": "none"})
    assert config.mea.scale == 0.25
    assert config.mea.num_old_experts is None
    assert config.backbone.embed_dim == 8


@pytest.mark.parametrize("key", ["mea.unknown", "nosection.scale", "mea"])
def test_unknown_keys_are_rejected(key):
    with pytest.raises(ConfigValidationError, match="Unknown config key"):
        build_config("tiny", {key: 1})


def test_unknown_preset():
    with pytest.raises(ConfigValidationError, match="Unknown preset"):
        build_config("imagenet-1k")


def test_config_is_frozen():
    config = build_config("tiny")
    with pytest.raises(Exception):
        config.mea.scale = 1.0


def test_updated_returns_validated_copy():
    base = build_config("tiny")
    changed = base.updated({"constraint.alpha": 0.5})
    assert changed.constraint.alpha == 0.5
    assert base.constraint.alpha == 0.1
    with pytest.raises(ConfigValidationError):
        base.updated({"loss.lam": -1})


def test_config_file_round_trip(tmp_path):
    config = build_config("tiny", {"run.seed": 3})
    path = tmp_path / "run.cfg"
    path.write_text(dump_config_file(config))
    assert build_config("desk", load_config_file(path)) == config


def test_config_file_comments_and_errors(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# adapter\nmea.scale = 0.3  # s\n\n")
    assert load_config_file(path) == {"mea.scale": "0.3"}

    path.write_text("mea.scale = 0.3\nmea.scale = 0.4\n")
    with pytest.raises(ConfigValidationError, match="duplicate"):
        load_config_file(path)

    path.write_text("mea.scale 0.3\n")
    with pytest.raises(ConfigValidationError, match="expected"):
        load_config_file(path)


def test_config_hash_tracks_content():
    assert config_hash(build_config("tiny")) == config_hash(build_config("tiny"))
    assert config_hash(build_config("tiny")) != config_hash(build_config("tiny", {"run.seed": 1}))
