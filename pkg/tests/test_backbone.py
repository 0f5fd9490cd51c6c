import numpy as np
import pytest

from app.core import backbone as bb
from app.core.mea import MultiExpertAdapter
from app.models.config import BackboneConfig, MeaConfig, build_config
from app.validators.errors import ConfigValidationError, GcdValidationError, ShapeMismatchError


@pytest.fixture
def tiny():
    return build_config("tiny")


def random_tokens(cfg: BackboneConfig, n: int, seed: int = 0) -> np.ndarray:
    return np.random.default_rng(seed).normal(size=(n, cfg.token_count, cfg.input_dim))


def test_init_builds_one_block_per_layer():
    cfg = BackboneConfig(num_blocks=6, embed_dim=64, num_heads=4)
    params = bb.init_backbone(cfg)
    assert len(params.blocks) == 6
    assert params.embedding.patch_weight.shape == (64, cfg.input_dim)
    assert params.embedding.pos_embed.shape == (cfg.token_count + 1, 64)


@pytest.mark.parametrize("overrides", [
    {"num_blocks": 0},
    {"embed_dim": 10, "num_heads": 4},
])
def test_init_rejects_bad_shapes(overrides):
    with pytest.raises(ConfigValidationError):
        bb.init_backbone(BackboneConfig(**overrides))


def test_backbone_is_frozen_by_default():
    params = bb.init_backbone(BackboneConfig(num_blocks=2, embed_dim=8, num_heads=2))
    assert not any(t.requires_grad for t in params.named_parameters().values())


def test_unfreeze_last_block_only_touches_last_block():
    params = bb.init_backbone(BackboneConfig(num_blocks=3, embed_dim=8, num_heads=2, unfreeze_last_block=True))
    trainable = {name for name, t in params.named_parameters().items() if t.requires_grad}
    assert trainable
    assert all(name.startswith("backbone.block2.") for name in trainable)


def test_init_is_deterministic():
    cfg = BackboneConfig(num_blocks=2, embed_dim=8, num_heads=2, seed=7)
    first, second = bb.init_backbone(cfg), bb.init_backbone(cfg)
    for name, tensor in first.named_parameters().items():
        np.testing.assert_array_equal(tensor.data, second.named_parameters()[name].data)


def test_encode_desk_scale_is_finite():
    cfg = BackboneConfig()
    trace = bb.encode(random_tokens(cfg, 4), bb.init_backbone(cfg), cfg)
    assert trace.features.shape == (4, cfg.embed_dim)
    assert np.all(np.isfinite(trace.features.data))
    assert len(trace) == cfg.num_blocks
    assert trace.pre_ffn_tokens[0].shape == (4, cfg.token_count + 1, cfg.embed_dim)


def test_encode_rejects_wrong_token_layout(tiny):
    cfg = tiny.backbone
    bad = np.zeros((2, cfg.token_count + 1, cfg.input_dim))
    with pytest.raises(ShapeMismatchError):
        bb.encode(bad, bb.init_backbone(cfg), cfg)


def test_encode_rejects_adapter_deeper_than_backbone(tiny):
    cfg = tiny.backbone
    adapters = MultiExpertAdapter(MeaConfig(adapted_blocks=cfg.num_blocks + 1), {})
    with pytest.raises(GcdValidationError):
        bb.encode(random_tokens(cfg, 2), bb.init_backbone(cfg), cfg, adapters)


def test_zero_scale_adapter_is_bitwise_invisible(tiny):
    cfg = tiny.backbone
    mea = tiny.mea.model_copy(update={"scale": 0.0})
    params = bb.init_backbone(cfg)
    adapters = MultiExpertAdapter.init(mea, cfg.embed_dim, cfg.num_blocks, seed=3)
    rng = np.random.default_rng(1)
    for adapter in adapters:
        for expert in adapter.experts:
            expert.up_weight.data[...] = rng.normal(size=expert.up_weight.shape)

    for seed in range(100):
        tokens = random_tokens(cfg, 3, seed=seed)
        plain = bb.encode(tokens, params, cfg)
        adapted = bb.encode(tokens, params, cfg, adapters)
        assert np.array_equal(plain.features.data, adapted.features.data)
        assert sorted(adapted.route_weights) == adapters.adapted_indices


def test_route_weights_cover_every_token(tiny):
    cfg = tiny.backbone
    adapters = MultiExpertAdapter.init(tiny.mea, cfg.embed_dim, cfg.num_blocks, seed=0)
    trace = bb.encode(random_tokens(cfg, 2), bb.init_backbone(cfg), cfg, adapters)
    for weights in trace.route_weights.values():
        assert weights.shape == (2, cfg.token_count + 1, tiny.mea.num_experts)
        np.testing.assert_allclose(weights.data.sum(axis=-1), 1.0, atol=1e-9)


def test_recorded_attention_is_class_token_distribution(tiny):
    cfg = tiny.backbone
    trace = bb.encode(random_tokens(cfg, 2), bb.init_backbone(cfg), cfg, record_attention=True)
    assert trace.attention.shape == (2, cfg.num_heads, cfg.token_count + 1)
    np.testing.assert_allclose(trace.attention.sum(axis=-1), 1.0, atol=1e-9)


def test_patchify_splits_images_into_token_rows():
    images = np.arange(2 * 4 * 4 * 3, dtype=float).reshape(2, 4, 4, 3)
    tokens = bb.patchify(images, 2)
    assert tokens.shape == (2, 4, 12)
    np.testing.assert_array_equal(tokens[0, 0], images[0, :2, :2, :].reshape(-1))
    np.testing.assert_array_equal(tokens[1, 3], images[1, 2:, 2:, :].reshape(-1))


def test_patchify_rejects_indivisible_size():
    with pytest.raises(ShapeMismatchError):
        bb.patchify(np.zeros((1, 5, 4, 3)), 2)
