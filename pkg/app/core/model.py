"""
GcdModel: frozen backbone + optional multi-expert adapter + projection head +
prototype classifier, and the overall loss L_sgcd + L_ra on one batch.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional, Sequence

import numpy as np

from app.core import numkernel as nk
from app.core.backbone import BackboneParams, ForwardTrace, encode, init_backbone
from app.core.mea import MultiExpertAdapter, count_tunable_params
from app.core.numkernel import Tensor
from app.core.objectives import (
    ProjectionHead,
    Prototypes,
    ViewOutputs,
    cosine_logits,
    simgcd_loss,
    teacher_targets,
)
from app.core.routeconstraint import (
    RouteStats,
    TargetDistributions,
    pool_sample_route,
    pseudo_labels,
    route_assignment_loss,
)
from app.models.config import RunConfig
from app.models.models import BatchViews
from app.validators.errors import GcdValidationError, ShapeMismatchError

logger = logging.getLogger(__name__)

COMPONENT_NAMES = ("L_rep_u", "L_rep_s", "L_cls_u", "L_cls_s", "L_ba", "L_cba")

# Per-token router softmax rows are checked at the looser tolerance
TOKEN_SIMPLEX_TOLERANCE = 1e-6

# Parameter groups reported by grad-check, in report order
GROUP_ORDER = ("experts", "router", "projection_head", "prototypes", "backbone")


def parameter_group(name: str) -> str:
    if name.startswith("mea."):
        return "router" if ".router." in name else "experts"
    if name.startswith("head."):
        return "projection_head"
    if name.startswith("prototypes."):
        return "prototypes"
    return "backbone"


def head_param_count(embed_dim: int, hidden_dim: int, out_dim: int) -> int:
    return embed_dim * hidden_dim + hidden_dim + hidden_dim * out_dim + out_dim


def parameter_budget(config: RunConfig, num_classes: Optional[int] = None) -> Dict[str, int]:
    """Analytic tunable-parameter counts, without building the model."""
    d = config.backbone.embed_dim
    k = num_classes or config.data.num_classes
    budget = {
        "mea": count_tunable_params(config.mea, d) if config.mea.enabled else 0,
        "projection_head": head_param_count(d, config.head.hidden_dim, config.head.out_dim),
        "prototypes": k * d,
        "backbone": 0,
    }
    if config.backbone.unfreeze_last_block:
        mlp = config.backbone.mlp_hidden
        budget["backbone"] = 4 * d + 3 * d * d + 3 * d + d * d + d + mlp * d + mlp + d * mlp + d
    budget["total"] = sum(budget.values())
    return budget


@dataclass
class FrozenTargets:
    # Detached quantities held fixed while finite differences perturb parameters
    teacher: np.ndarray
    pseudo: np.ndarray


@dataclass
class LossBreakdown:
    total: Tensor
    components: Dict[str, float]
    targets: FrozenTargets
    route_stats: Optional[RouteStats] = None
    pooled: Dict[int, np.ndarray] = field(default_factory=dict)
    token_routes: Dict[int, np.ndarray] = field(default_factory=dict)


@dataclass
class GcdModel:
    config: RunConfig
    backbone: BackboneParams
    adapters: Optional[MultiExpertAdapter]
    head: ProjectionHead
    prototypes: Prototypes

    @classmethod
    def from_config(cls, config: RunConfig, num_classes: int) -> "GcdModel":
        backbone = init_backbone(config.backbone)
        adapters = None
        if config.mea.enabled:
            adapters = MultiExpertAdapter.init(config.mea, config.backbone.embed_dim,
                                               config.backbone.num_blocks, seed=config.run.seed)
        rng = np.random.default_rng([config.run.seed, 1])
        head = ProjectionHead.init(config.backbone.embed_dim, config.head, rng)
        prototypes = Prototypes.init(num_classes, config.backbone.embed_dim, rng)
        return cls(config=config, backbone=backbone, adapters=adapters, head=head, prototypes=prototypes)

    @property
    def num_classes(self) -> int:
        return self.prototypes.num_classes

    def named_parameters(self) -> Dict[str, Tensor]:
        named = dict(self.backbone.named_parameters())
        if self.adapters is not None:
            named.update(self.adapters.named_parameters())
        named.update(self.head.named_parameters())
        named.update(self.prototypes.named_parameters())
        return named

    def trainable_parameters(self) -> Dict[str, Tensor]:
        return {name: t for name, t in self.named_parameters().items() if t.requires_grad}

    def parameter_groups(self) -> Dict[str, Dict[str, Tensor]]:
        groups: Dict[str, Dict[str, Tensor]] = {name: {} for name in GROUP_ORDER}
        for name, tensor in self.named_parameters().items():
            groups[parameter_group(name)][name] = tensor
        return {name: members for name, members in groups.items() if members}

    def tunable_counts(self) -> Dict[str, int]:
        """Runtime-enumerated counts of requires_grad values, grouped like parameter_budget."""
        trainable = self.trainable_parameters()

        def count(prefix: str) -> int:
            return sum(t.size for name, t in trainable.items() if name.startswith(prefix))

        counts = {"mea": count("mea."), "projection_head": count("head."),
                  "prototypes": count("prototypes."), "backbone": count("backbone.")}
        counts["total"] = sum(counts.values())
        return counts

    def load_parameters(self, values: Mapping[str, np.ndarray]) -> None:
        named = self.named_parameters()
        missing = sorted(set(named) - set(values))
        if missing:
            raise ShapeMismatchError(f"checkpoint lacks parameters: {missing[:5]}")
        for name, tensor in named.items():
            if values[name].shape != tensor.shape:
                raise ShapeMismatchError(
                    f"parameter {name}: checkpoint shape {values[name].shape} vs model {tensor.shape}"
                )
            tensor.data[...] = values[name]

    def encode(self, tokens: np.ndarray, record_attention: bool = False) -> ForwardTrace:
        return encode(tokens, self.backbone, self.config.backbone, self.adapters,
                      record_attention=record_attention)

    def pooled_routes(self, trace: ForwardTrace) -> Dict[int, Tensor]:
        return {block: pool_sample_route(weights, self.config.constraint.tau_g)
                for block, weights in trace.route_weights.items()}

    def route_targets(self) -> Optional[TargetDistributions]:
        mea = self.config.mea
        if self.adapters is None or not mea.old_group or not mea.new_group:
            return None
        return TargetDistributions.build(mea.num_experts, mea.old_group, mea.new_group,
                                         self.config.constraint.smoothing)


def batch_pseudo_labels(cfg: RunConfig, batch: BatchViews, predictions: np.ndarray,
                        labels: np.ndarray, labeled_mask: np.ndarray) -> np.ndarray:
    """Pseudo-labels for both stacked views; true classes when the oracle flag is set."""
    if not cfg.constraint.oracle_pseudo_labels:
        return pseudo_labels(predictions, labels, labeled_mask)
    if batch.truths is None:
        raise GcdValidationError("constraint.oracle_pseudo_labels needs batches that carry true labels")
    return np.concatenate([batch.truths, batch.truths]).astype(np.int64)


def overall_loss(model: GcdModel, batch: BatchViews, old_classes: Sequence[int],
                 frozen: Optional[FrozenTargets] = None) -> LossBreakdown:
    """L_sgcd + L_ra on both views of one batch."""
    cfg = model.config
    n = batch.size
    trace = model.encode(np.concatenate([batch.views, batch.views_prime]))
    features = trace.features

    embeddings = model.head(features)
    logits = cosine_logits(features, model.prototypes.weight)
    predictions = nk.softmax(logits, temperature=cfg.loss.tau_s)

    labels2 = np.concatenate([batch.labels, batch.labels])
    mask2 = np.concatenate([batch.labeled_mask, batch.labeled_mask])
    if frozen is None:
        frozen = FrozenTargets(teacher=teacher_targets(logits, cfg.loss.tau_teacher),
                               pseudo=batch_pseudo_labels(cfg, batch, predictions.data, labels2, mask2))

    first, second = slice(0, n), slice(n, 2 * n)
    outputs = ViewOutputs(z=embeddings[first], z_prime=embeddings[second],
                          p=predictions[first], p_prime=predictions[second],
                          q=frozen.teacher[first], q_prime=frozen.teacher[second])
    total, parts = simgcd_loss(outputs, batch.labels, batch.labeled_mask, cfg.loss)

    components = {name: float(value.item()) for name, value in parts.items()}
    components.update(L_ba=0.0, L_cba=0.0)
    route_stats = None
    pooled_values: Dict[int, np.ndarray] = {}
    token_values: Dict[int, np.ndarray] = {}
    if model.adapters is not None:
        token_values = {block: weights.data for block, weights in trace.route_weights.items()}
        pooled = model.pooled_routes(trace)
        pooled_values = {block: probs.data for block, probs in pooled.items()}
        route = route_assignment_loss(pooled, frozen.pseudo, old_classes, model.route_targets(), cfg.constraint)
        total = nk.add(total, route.total)
        components.update(L_ba=float(route.balanced.item()), L_cba=float(route.category.item()))
        route_stats = route.stats

    return LossBreakdown(total=total, components=components, targets=frozen,
                         route_stats=route_stats, pooled=pooled_values, token_routes=token_values)


def weighted_total(components: Mapping[str, float], config: RunConfig) -> float:
    """Re-sum reported components with the configured weights."""
    lam, constraint = config.loss.lam, config.constraint
    return ((1.0 - lam) * (components["L_rep_u"] + components["L_cls_u"])
            + lam * (components["L_rep_s"] + components["L_cls_s"])
            + constraint.beta * components["L_ba"] + constraint.alpha * components["L_cba"])


def route_simplex_ok(pooled: Mapping[int, np.ndarray], tolerance: float = nk.SIMPLEX_TOLERANCE) -> bool:
    return all(np.all(np.abs(values.sum(axis=-1) - 1.0) < tolerance) and np.all(values >= 0)
               for values in pooled.values())
