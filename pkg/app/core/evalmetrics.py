"""
Clustering accuracy for generalized category discovery: one optimal
cluster-to-class bijection over all unlabeled samples, then the accuracy
decomposed over old-class and new-class subsets.
"""
import logging
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from app.core.routeconstraint import RouteStats
from app.models.models import AccuracyReport, ConfusionMatrix, PermutationAssignment, RouteGroup
from app.validators.errors import ShapeMismatchError

logger = logging.getLogger(__name__)

LEXICOGRAPHIC_LIMIT = 64


def confusion_matrix(preds: Sequence[int], truths: Sequence[int],
                     num_classes: Optional[int] = None) -> ConfusionMatrix:
    """counts[pred][true], zero-padded to a square matrix."""
    preds, truths = np.asarray(preds, dtype=np.int64), np.asarray(truths, dtype=np.int64)
    if preds.shape != truths.shape:
        raise ShapeMismatchError(f"preds {preds.shape} and truths {truths.shape} differ")
    size = num_classes or 0
    if preds.size:
        size = max(size, int(preds.max()) + 1, int(truths.max()) + 1)
    counts = np.zeros((size, size), dtype=np.int64)
    np.add.at(counts, (preds, truths), 1)
    return ConfusionMatrix(counts=counts)


def optimal_permutation(cm: ConfusionMatrix) -> PermutationAssignment:
    """Hungarian matching; among optimal bijections pick the lexicographically smallest."""
    counts = cm.counts
    size = cm.size
    if size == 0:
        return PermutationAssignment(mapping=np.zeros(0, dtype=np.int64), matched=0)

    _, cols = linear_sum_assignment(counts, maximize=True)
    mapping = cols.astype(np.int64)
    best = int(counts[np.arange(size), mapping].sum())
    if size > LEXICOGRAPHIC_LIMIT:
        logger.debug("%d clusters; keeping the solver's assignment among ties", size)
        return PermutationAssignment(mapping=mapping, matched=best)

    # Row by row, move to the smallest column that still admits an optimal completion
    for row in range(size - 1):
        fixed = set(mapping[:row].tolist())
        prefix = int(counts[np.arange(row), mapping[:row]].sum())
        later = np.arange(row + 1, size)
        for col in range(mapping[row]):
            if col in fixed:
                continue
            rest_cols = np.array([c for c in range(size) if c not in fixed and c != col])
            sub = counts[np.ix_(later, rest_cols)]
            _, sub_cols = linear_sum_assignment(sub, maximize=True)
            if prefix + int(counts[row, col]) + int(sub[np.arange(later.size), sub_cols].sum()) == best:
                mapping[row] = col
                mapping[later] = rest_cols[sub_cols]
                break
    return PermutationAssignment(mapping=mapping, matched=best)


def gcd_accuracy(preds: Sequence[int], truths: Sequence[int], old_classes: Sequence[int],
                 num_classes: Optional[int] = None) -> AccuracyReport:
    """acc_all, acc_old, acc_new under a single global permutation."""
    preds, truths = np.asarray(preds, dtype=np.int64), np.asarray(truths, dtype=np.int64)
    cm = confusion_matrix(preds, truths, num_classes)
    assignment = optimal_permutation(cm)
    correct = assignment.mapping[preds] == truths if preds.size else np.zeros(0, dtype=bool)

    old_mask = np.isin(truths, list(old_classes))

    def subset_accuracy(mask: np.ndarray) -> Optional[float]:
        count = int(mask.sum())
        return float(correct[mask].sum()) / count if count else None

    return AccuracyReport(
        acc_all=subset_accuracy(np.ones_like(old_mask)),
        acc_old=subset_accuracy(old_mask),
        acc_new=subset_accuracy(~old_mask),
        n_all=int(preds.size),
        n_old=int(old_mask.sum()),
        n_new=int((~old_mask).sum()),
    )


def route_report(stats: RouteStats, num_experts: int) -> List[Dict[str, Any]]:
    """One row per (block, group, expert); absent groups report mean_weight None."""
    rows = []
    for block in stats.blocks:
        for group, mean in ((RouteGroup.OLD, block.old), (RouteGroup.NEW, block.new),
                            (RouteGroup.ALL, block.mean)):
            for expert in range(num_experts):
                rows.append({
                    "block": block.block,
                    "group": group.value,
                    "expert_id": expert,
                    "mean_weight": None if mean is None else float(mean.data[expert]),
                })
    return rows


def group_mass(stats: RouteStats, old_group: Sequence[int], new_group: Sequence[int]) -> List[Dict[str, Any]]:
    """Per block: route mass old samples put on the old experts, and new samples on the new experts."""
    rows = []
    for block in stats.blocks:
        rows.append({
            "block": block.block,
            "old_mass": None if block.old is None else float(block.old.data[list(old_group)].sum()),
            "new_mass": None if block.new is None else float(block.new.data[list(new_group)].sum()),
        })
    return rows
