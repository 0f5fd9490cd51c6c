import copy

import numpy as np
import pytest

from app.core import numkernel as nk
from app.core.backbone import feed_forward, init_backbone, pre_ffn_norm
from app.core.mea import (
    ExpertParams,
    MultiExpertAdapter,
    RouterParams,
    adapted_ffn,
    count_tunable_params,
    expert_forward,
    route,
)
from app.core.optim import SGD
from app.models.config import MeaConfig, build_config
from app.validators.errors import GcdValidationError, ShapeMismatchError


@pytest.fixture
def tiny():
    return build_config("tiny")


@pytest.fixture
def block(tiny):
    return init_backbone(tiny.backbone).blocks[0]


def random_x_tilde(tiny, seed=0):
    cfg = tiny.backbone
    return nk.Tensor(np.random.default_rng(seed).normal(size=(2, cfg.token_count + 1, cfg.embed_dim)))


def randomize_experts(adapters, seed=0):
    rng = np.random.default_rng(seed)
    for adapter in adapters:
        for expert in adapter.experts:
            expert.up_weight.data[...] = rng.normal(size=expert.up_weight.shape)


def test_zero_router_routes_uniformly():
    router = RouterParams(weight=nk.zeros((4, 6)))
    weights = route(nk.Tensor(np.random.default_rng(0).normal(size=(3, 5, 6))), router, temperature=5.0)
    np.testing.assert_allclose(weights.data, 0.25)


def test_route_scalar_example():
    router = RouterParams(weight=nk.Tensor([[1.0, 0.0, 0.0, 0.0], [0.0, 0.0, 0.0, 0.0]]))
    weights = route(nk.Tensor([[1.0, 0.0, 0.0, 0.0]]), router, temperature=1.0)
    np.testing.assert_allclose(weights.data, [[0.73106, 0.26894]], atol=1e-4)


def test_route_rejects_bad_temperature():
    with pytest.raises(GcdValidationError):
        route(nk.zeros((1, 4)), RouterParams(weight=nk.zeros((2, 4))), temperature=0.0)


def test_all_zero_expert_outputs_zero():
    expert = ExpertParams(down_weight=nk.zeros((2, 4)), down_bias=nk.zeros((2,)),
                          up_weight=nk.zeros((4, 2)), up_bias=nk.zeros((4,)))
    out = expert_forward(nk.Tensor(np.ones((3, 4))), expert)
    np.testing.assert_array_equal(out.data, np.zeros((3, 4)))


def test_expert_hand_example():
    expert = ExpertParams(
        down_weight=nk.zeros((2, 4)),
        down_bias=nk.Tensor([1.0, 2.0]),
        up_weight=nk.Tensor([[1.0, 0.0], [0.0, 1.0], [0.0, 0.0], [0.0, 0.0]]),
        up_bias=nk.Tensor([0.5, 0.0, 0.0, 0.0]),
    )
    out = expert_forward(nk.zeros((1, 4)), expert)
    np.testing.assert_allclose(out.data, [[1.5, 2.0, 0.0, 0.0]])


def test_expert_rejects_wrong_width():
    expert = ExpertParams(down_weight=nk.zeros((2, 4)), down_bias=nk.zeros((2,)),
                          up_weight=nk.zeros((4, 2)), up_bias=nk.zeros((4,)))
    with pytest.raises(ShapeMismatchError):
        expert_forward(nk.zeros((1, 5)), expert)


def test_zero_scale_keeps_frozen_path_and_records_routes(tiny, block):
    mea = tiny.mea.model_copy(update={"scale": 0.0})
    adapters = MultiExpertAdapter.init(mea, tiny.backbone.embed_dim, tiny.backbone.num_blocks, seed=0)
    randomize_experts(adapters)
    x_tilde = random_x_tilde(tiny)

    out, weights = adapted_ffn(x_tilde, block, adapters.blocks[0], mea)
    frozen = nk.add(x_tilde, feed_forward(pre_ffn_norm(x_tilde, block), block))
    np.testing.assert_array_equal(out.data, frozen.data)
    assert weights.shape == x_tilde.shape[:-1] + (mea.num_experts,)


def test_single_expert_is_plain_adapter(tiny, block):
    mea = tiny.mea.model_copy(update={"num_experts": 1, "num_old_experts": None})
    adapters = MultiExpertAdapter.init(mea, tiny.backbone.embed_dim, tiny.backbone.num_blocks, seed=0)
    randomize_experts(adapters)
    adapter = adapters.blocks[0]
    assert adapter.router is None
    x_tilde = random_x_tilde(tiny)

    out, weights = adapted_ffn(x_tilde, block, adapter, mea)
    normed = pre_ffn_norm(x_tilde, block)
    expected = (x_tilde.data + feed_forward(normed, block).data
                + mea.scale * expert_forward(normed, adapter.experts[0]).data)
    np.testing.assert_array_equal(weights.data, np.ones(x_tilde.shape[:-1] + (1,)))
    np.testing.assert_allclose(out.data, expected, atol=1e-12)


def test_identical_experts_hide_the_router(tiny, block):
    adapters = MultiExpertAdapter.init(tiny.mea, tiny.backbone.embed_dim, tiny.backbone.num_blocks, seed=0)
    randomize_experts(adapters)
    adapter = adapters.blocks[0]
    adapter.experts = [copy.deepcopy(adapter.experts[0]) for _ in adapter.experts]
    x_tilde = random_x_tilde(tiny)

    first, _ = adapted_ffn(x_tilde, block, adapter, tiny.mea)
    adapter.router.weight.data[...] = np.random.default_rng(5).normal(size=adapter.router.weight.shape)
    second, _ = adapted_ffn(x_tilde, block, adapter, tiny.mea)
    np.testing.assert_allclose(first.data, second.data, atol=1e-12)


def test_expert_count_must_match_config(tiny, block):
    adapters = MultiExpertAdapter.init(tiny.mea, tiny.backbone.embed_dim, tiny.backbone.num_blocks, seed=0)
    adapter = adapters.blocks[0]
    adapter.experts = adapter.experts[:-1]
    with pytest.raises(GcdValidationError):
        adapted_ffn(random_x_tilde(tiny), block, adapter, tiny.mea)


@pytest.mark.parametrize("experts,blocks,expected", [
    (1, 6, 594_816),
    (8, 6, 4_795_392),
    (8, 8, 6_393_856),
])
def test_tunable_parameter_budget(experts, blocks, expected):
    cfg = MeaConfig(num_experts=experts, adapted_blocks=blocks, bottleneck_dim=64)
    assert count_tunable_params(cfg, 768) == expected


@pytest.mark.parametrize("experts", [1, 4])
def test_enumerated_parameters_match_budget(experts):
    cfg = MeaConfig(num_experts=experts, bottleneck_dim=4, adapted_blocks=2)
    adapters = MultiExpertAdapter.init(cfg, embed_dim=8, num_blocks=3, seed=0)
    assert adapters.adapted_indices == [1, 2]
    assert adapters.num_parameters() == count_tunable_params(cfg, 8)
    has_router = any(".router." in name for name in adapters.named_parameters())
    assert has_router == (experts > 1)
    assert all(t.requires_grad for t in adapters.named_parameters().values())


def test_up_projection_starts_at_zero():
    adapters = MultiExpertAdapter.init(MeaConfig(bottleneck_dim=4, adapted_blocks=1), 8, 2, seed=0)
    for adapter in adapters:
        for expert in adapter.experts:
            assert not expert.up_weight.data.any()


@pytest.mark.parametrize("adapted_blocks", [0, 4])
def test_placement_must_fit_backbone(adapted_blocks):
    with pytest.raises(GcdValidationError):
        MultiExpertAdapter.init(MeaConfig(adapted_blocks=adapted_blocks, bottleneck_dim=4), 8, 3, seed=0)


def test_gradient_reaches_every_expert(tiny, block):
    adapters = MultiExpertAdapter.init(tiny.mea, tiny.backbone.embed_dim, tiny.backbone.num_blocks, seed=0)
    adapter = adapters.blocks[0]
    optimizer = SGD(adapters.named_parameters(), momentum=0.0)
    x_tilde = random_x_tilde(tiny)
    projection = np.random.default_rng(1).normal(size=x_tilde.shape)

    def backward_once():
        optimizer.zero_grad()
        out, _ = adapted_ffn(x_tilde, block, adapter, tiny.mea)
        nk.backward(nk.sum_(nk.mul(out, projection)))

    backward_once()
    for t, expert in enumerate(adapter.experts):
        assert np.any(expert.up_weight.grad != 0), f"expert {t} up projection"
        # zero-initialised up projection blocks the down gradient on the first pass
        assert not np.any(expert.down_weight.grad)

    optimizer.step(0.1)
    backward_once()
    for t, expert in enumerate(adapter.experts):
        assert np.any(expert.up_weight.grad != 0), f"expert {t} up projection"
        assert np.any(expert.down_weight.grad != 0), f"expert {t} down projection"
    assert np.any(adapter.router.weight.grad != 0)
