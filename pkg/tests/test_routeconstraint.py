import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from app.core import numkernel as nk
from app.core.mea import RouterParams, route
from app.core.optim import SGD
from app.core.routeconstraint import (
    RouteStats,
    BlockRouteStats,
    TargetDistributions,
    balanced_assignment_loss,
    category_balanced_loss,
    conditioned_route_means,
    pool_sample_route,
    pseudo_labels,
    route_assignment_loss,
)
from app.models.config import ConstraintWeights
from app.validators.errors import GcdValidationError

OLD_GROUP, NEW_GROUP = (0, 1, 2, 3), (4, 5, 6, 7)


def test_uniform_tokens_pool_to_uniform():
    pooled = pool_sample_route(nk.Tensor(np.full((3, 5, 2), 0.5)), tau_g=0.1)
    np.testing.assert_allclose(pooled.data, 0.5)


def test_pooling_sharpens_token_mean():
    tokens = nk.Tensor([[[0.73, 0.27], [0.73, 0.27]]])
    pooled = pool_sample_route(tokens, tau_g=0.1)
    np.testing.assert_allclose(pooled.data, [[0.9900, 0.0100]], atol=1e-4)


def test_single_token_pooling_is_plain_softmax():
    token = np.array([[[0.2, 0.5, 0.3]]])
    pooled = pool_sample_route(nk.Tensor(token), tau_g=0.5)
    np.testing.assert_allclose(pooled.data, nk.softmax(token[:, 0, :], temperature=0.5).data)


def test_pooling_rejects_bad_temperature():
    with pytest.raises(GcdValidationError):
        pool_sample_route(nk.Tensor(np.full((1, 2, 2), 0.5)), tau_g=0.0)


def test_balanced_loss_with_collapsed_routes():
    pooled = {0: nk.Tensor(np.tile(np.eye(8)[0], (4, 1)))}
    assert balanced_assignment_loss(pooled).item() == pytest.approx(np.log(8))


def test_balanced_loss_constrains_the_mean_only():
    pooled = {0: nk.Tensor([[1.0, 0.0], [0.0, 1.0]])}
    assert balanced_assignment_loss(pooled).item() == pytest.approx(0.0)


def test_balanced_loss_sums_over_blocks():
    collapsed = nk.Tensor(np.tile(np.eye(4)[1], (2, 1)))
    assert balanced_assignment_loss({2: collapsed, 3: collapsed}).item() == pytest.approx(2 * np.log(4))


def test_zero_router_gives_zero_balanced_loss():
    features = nk.Tensor(np.random.default_rng(0).normal(size=(6, 5, 4)))
    weights = route(features, RouterParams(weight=nk.zeros((8, 4))), temperature=5.0)
    assert balanced_assignment_loss({0: pool_sample_route(weights, 0.1)}).item() < 1e-6


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (5, 3, 4), elements=st.floats(-5, 5)))
def test_balanced_loss_is_non_negative(logits):
    pooled = pool_sample_route(nk.softmax(logits), tau_g=0.1)
    assert balanced_assignment_loss({0: pooled}).item() >= -1e-12


@pytest.mark.parametrize("predictions,labels,mask,expected", [
    ([[0.9, 0.05, 0.05, 0.0]], [3], [True], 3),
    ([[0.1, 0.7, 0.2]], [-1], [False], 1),
    ([[0.5, 0.5]], [-1], [False], 0),
])
def test_pseudo_labels(predictions, labels, mask, expected):
    assert pseudo_labels(np.array(predictions), np.array(labels), np.array(mask)).tolist() == [expected]


def test_all_pseudo_old_leaves_new_mean_absent():
    probs = nk.Tensor([[0.6, 0.4], [0.2, 0.8]])
    stats = conditioned_route_means({0: probs}, np.array([0, 1]), old_classes=(0, 1))
    block = stats.blocks[0]
    np.testing.assert_allclose(block.old.data, block.mean.data)
    assert block.new is None
    assert (stats.n_old, stats.n_new) == (2, 0)


def test_singleton_group_means():
    probs = nk.Tensor([[1.0, 0.0], [0.0, 1.0]])
    block = conditioned_route_means({0: probs}, np.array([0, 5]), old_classes=(0,)).blocks[0]
    np.testing.assert_allclose(block.old.data, [1.0, 0.0])
    np.testing.assert_allclose(block.new.data, [0.0, 1.0])


@settings(max_examples=50, deadline=None)
@given(st.integers(min_value=0, max_value=2 ** 32 - 1))
def test_group_means_reaggregate_to_batch_mean(seed):
    rng = np.random.default_rng(seed)
    probs = nk.softmax(rng.normal(size=(9, 4)))
    pseudo = rng.integers(0, 6, size=9)
    stats = conditioned_route_means({0: probs}, pseudo, old_classes=(0, 1, 2))
    block = stats.blocks[0]
    total = np.zeros(4)
    if block.old is not None:
        total += stats.n_old * block.old.data
    if block.new is not None:
        total += stats.n_new * block.new.data
    np.testing.assert_allclose(total / 9, block.mean.data, atol=1e-12)


def test_targets_are_smoothed_group_uniforms():
    targets = TargetDistributions.build(8, OLD_GROUP, NEW_GROUP, smoothing=1e-6)
    np.testing.assert_allclose(targets.old.sum(), 1.0)
    assert targets.old[0] == pytest.approx((1 - 1e-6) / 4 + 1e-6 / 8)
    assert targets.old[7] == pytest.approx(1e-6 / 8)
    np.testing.assert_allclose(targets.new[::-1], targets.old)


@pytest.mark.parametrize("old_group,new_group", [
    ((), (0, 1)),
    ((0, 1), ()),
    ((0, 1), (1, 2)),
])
def test_targets_need_disjoint_nonempty_groups(old_group, new_group):
    with pytest.raises(GcdValidationError):
        TargetDistributions.build(4, old_group, new_group, smoothing=1e-6)


def test_category_loss_for_uniform_old_mean():
    smoothing = 1e-6
    targets = TargetDistributions.build(8, OLD_GROUP, NEW_GROUP, smoothing)
    stats = RouteStats(blocks=[BlockRouteStats(block=0, mean=nk.Tensor(np.full(8, 1 / 8)),
                                               old=nk.Tensor(np.full(8, 1 / 8)))], n_old=4, n_new=0)
    on_group = (1 - smoothing) / 4 + smoothing / 8
    off_group = smoothing / 8
    expected = 0.5 * np.log((1 / 8) / on_group) + 0.5 * np.log((1 / 8) / off_group)
    assert category_balanced_loss(stats, targets).item() == pytest.approx(expected, rel=1e-9)


def test_category_loss_vanishes_at_targets():
    targets = TargetDistributions.build(8, OLD_GROUP, NEW_GROUP, smoothing=1e-6)
    stats = RouteStats(blocks=[BlockRouteStats(block=0, mean=nk.Tensor(np.full(8, 1 / 8)),
                                               old=nk.Tensor(targets.old), new=nk.Tensor(targets.new))],
                       n_old=1, n_new=1)
    assert category_balanced_loss(stats, targets).item() == pytest.approx(0.0, abs=1e-12)


def random_pooled(seed=0, n=6, experts=8):
    return {0: nk.softmax(np.random.default_rng(seed).normal(size=(n, experts)))}


@pytest.mark.parametrize("alpha,beta", [(0.0, 0.0), (0.0, 0.3), (0.2, 0.0), (0.2, 0.3)])
def test_route_loss_weights(alpha, beta):
    pooled = random_pooled()
    pseudo = np.array([0, 1, 2, 3, 4, 5])
    targets = TargetDistributions.build(8, OLD_GROUP, NEW_GROUP, smoothing=1e-6)
    loss = route_assignment_loss(pooled, pseudo, (0, 1, 2), targets, ConstraintWeights(alpha=alpha, beta=beta))
    expected = beta * loss.balanced.item() + alpha * loss.category.item()
    assert loss.total.item() == pytest.approx(expected)
    assert loss.skipped == []


def test_route_loss_skips_missing_group(caplog):
    targets = TargetDistributions.build(8, OLD_GROUP, NEW_GROUP, smoothing=1e-6)
    with caplog.at_level(logging.DEBUG, logger="app.core.routeconstraint"):
        loss = route_assignment_loss(random_pooled(), np.zeros(6, dtype=int), (0,), targets, ConstraintWeights())
    assert loss.skipped == ["new"]
    assert "skipping" in caplog.text


def test_balancing_drives_free_router_to_uniform():
    rng = np.random.default_rng(0)
    features = nk.Tensor(1.0 + 0.1 * rng.normal(size=(16, 4, 6)))
    router = RouterParams(weight=nk.gaussian(rng, (8, 6), 0.5, requires_grad=True))
    optimizer = SGD({"router": router.weight}, momentum=0.0)

    for _ in range(500):
        optimizer.zero_grad()
        pooled = pool_sample_route(route(features, router, temperature=1.0), tau_g=0.1)
        nk.backward(balanced_assignment_loss({0: pooled}))
        optimizer.step(0.5)

    with nk.no_grad():
        mean = pool_sample_route(route(features, router, temperature=1.0), tau_g=0.1).data.mean(axis=0)
    assert np.max(np.abs(mean - 1 / 8)) < 1e-2


def test_category_constraint_separates_expert_groups():
    rng = np.random.default_rng(1)
    is_old = np.repeat([True, False], 8)
    base = np.where(is_old[:, None], np.eye(6)[0], np.eye(6)[1])
    features = nk.Tensor(base[:, None, :] + 0.05 * rng.normal(size=(16, 4, 6)))
    pseudo = np.where(is_old, 0, 1)
    targets = TargetDistributions.build(8, OLD_GROUP, NEW_GROUP, smoothing=1e-6)
    router = RouterParams(weight=nk.gaussian(rng, (8, 6), 0.1, requires_grad=True))
    optimizer = SGD({"router": router.weight}, momentum=0.0)
    weights = ConstraintWeights(alpha=1.0, beta=0.0)

    for _ in range(500):
        optimizer.zero_grad()
        pooled = {0: pool_sample_route(route(features, router, temperature=1.0), tau_g=0.1)}
        nk.backward(route_assignment_loss(pooled, pseudo, (0,), targets, weights).total)
        optimizer.step(0.2)

    with nk.no_grad():
        pooled = {0: pool_sample_route(route(features, router, temperature=1.0), tau_g=0.1)}
        block = conditioned_route_means(pooled, pseudo, (0,)).blocks[0]
    assert block.old.data[list(OLD_GROUP)].sum() >= 0.9
    assert block.new.data[list(NEW_GROUP)].sum() >= 0.9
