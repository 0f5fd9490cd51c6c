"""
Route assignment constraint: balanced assignment over all experts plus a
category-aware split that sends pseudo-old samples to the old expert group
and pseudo-new samples to the new group.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from app.core import numkernel as nk
from app.core.numkernel import Tensor
from app.models.config import ConstraintWeights
from app.validators.errors import GcdValidationError

logger = logging.getLogger(__name__)


@dataclass
class BlockRouteStats:
    # Batch-mean route distribution of one adapted block, overall and per pseudo group
    block: int
    mean: Tensor
    old: Optional[Tensor] = None
    new: Optional[Tensor] = None


@dataclass
class RouteStats:
    blocks: List[BlockRouteStats]
    n_old: int
    n_new: int


@dataclass
class TargetDistributions:
    uniform: np.ndarray
    old: np.ndarray
    new: np.ndarray

    @classmethod
    def build(cls, num_experts: int, old_group: Sequence[int], new_group: Sequence[int],
              smoothing: float) -> "TargetDistributions":
        """Uniform targets over each expert group, mixed with delta of the full uniform."""
        if not old_group or not new_group:
            raise GcdValidationError("category-aware targets need nonempty old and new expert groups")
        if set(old_group) & set(new_group):
            raise GcdValidationError("expert groups must be disjoint")
        if not 0.0 <= smoothing < 1.0:
            raise GcdValidationError(f"smoothing must lie in [0, 1), got {smoothing}")

        uniform = np.full(num_experts, 1.0 / num_experts)

        def group_target(group: Sequence[int]) -> np.ndarray:
            target = np.zeros(num_experts)
            target[list(group)] = 1.0 / len(group)
            return (1.0 - smoothing) * target + smoothing * uniform

        return cls(uniform=uniform, old=group_target(old_group), new=group_target(new_group))


@dataclass
class RouteLoss:
    total: Tensor
    balanced: Tensor
    category: Tensor
    stats: RouteStats
    skipped: List[str] = field(default_factory=list)


def pool_sample_route(token_weights: Tensor, tau_g: float) -> Tensor:
    """Token-mean gate vector sharpened by softmax; (..., V, T) -> (..., T)."""
    if tau_g <= 0:
        raise GcdValidationError(f"tau_g must be > 0, got {tau_g}")
    if token_weights.ndim < 2 or token_weights.shape[-2] < 1:
        raise GcdValidationError(f"expected (..., V, T) token route weights, got {token_weights.shape}")
    return nk.softmax(nk.mean(token_weights, axis=-2), temperature=tau_g)


def _uniform(num_experts: int) -> np.ndarray:
    return np.full(num_experts, 1.0 / num_experts)


def balanced_assignment_loss(pooled: Mapping[int, Tensor]) -> Tensor:
    """Sum over adapted blocks of KL(batch-mean route || uniform)."""
    if not pooled:
        raise GcdValidationError("balanced assignment loss needs at least one adapted block")
    total = None
    for block in sorted(pooled):
        probs = pooled[block]
        if probs.shape[0] == 0:
            raise GcdValidationError("balanced assignment loss needs a nonempty batch")
        term = nk.kl_divergence(nk.mean(probs, axis=0), _uniform(probs.shape[-1]))
        total = term if total is None else nk.add(total, term)
    return total


def pseudo_labels(predictions: np.ndarray, labels: np.ndarray, labeled_mask: np.ndarray) -> np.ndarray:
    """Ground truth where labeled, otherwise argmax (lowest index on ties)."""
    pseudo = np.argmax(np.asarray(predictions), axis=1)
    mask = np.asarray(labeled_mask, dtype=bool)
    return np.where(mask, np.asarray(labels), pseudo).astype(np.int64)


def conditioned_route_means(pooled: Mapping[int, Tensor], pseudo: np.ndarray,
                            old_classes: Sequence[int]) -> RouteStats:
    """Indicator-weighted mean route per block over pseudo-old and pseudo-new samples."""
    old_mask = np.isin(pseudo, list(old_classes))
    n_old = int(old_mask.sum())
    n_new = int(old_mask.size - n_old)

    blocks = []
    for block in sorted(pooled):
        probs = pooled[block]
        stats = BlockRouteStats(block=block, mean=nk.mean(probs, axis=0))
        if n_old:
            stats.old = nk.div(nk.sum_(nk.mul(probs, old_mask[:, None].astype(nk.DTYPE)), axis=0), n_old)
        if n_new:
            stats.new = nk.div(nk.sum_(nk.mul(probs, (~old_mask)[:, None].astype(nk.DTYPE)), axis=0), n_new)
        blocks.append(stats)
    return RouteStats(blocks=blocks, n_old=n_old, n_new=n_new)


def category_balanced_loss(stats: RouteStats, targets: TargetDistributions) -> Tensor:
    """Sum over blocks of KL(old mean || old target) + KL(new mean || new target)."""
    total: Tensor = nk.Tensor(0.0)
    for block in stats.blocks:
        for mean, target in ((block.old, targets.old), (block.new, targets.new)):
            if mean is not None:
                total = nk.add(total, nk.kl_divergence(mean, target))
    return total


def route_assignment_loss(pooled: Mapping[int, Tensor], pseudo: np.ndarray, old_classes: Sequence[int],
                          targets: Optional[TargetDistributions], weights: ConstraintWeights) -> RouteLoss:
    """beta * L_ba + alpha * L_cba."""
    balanced = balanced_assignment_loss(pooled)
    stats = conditioned_route_means(pooled, pseudo, old_classes)
    skipped = []
    if stats.n_old == 0:
        skipped.append("old")
    if stats.n_new == 0:
        skipped.append("new")
    if skipped:
        logger.debug("no pseudo-%s samples in batch; skipping that L_cba term", "/".join(skipped))

    category = category_balanced_loss(stats, targets) if targets is not None else nk.Tensor(0.0)
    total = nk.add(nk.mul(balanced, weights.beta), nk.mul(category, weights.alpha))
    return RouteLoss(total=total, balanced=balanced, category=category, stats=stats, skipped=skipped)
