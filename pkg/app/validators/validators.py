import json
import logging
from pathlib import Path
from typing import Any, Dict

from app.models.config import BackboneConfig, DatasetSpec, MeaConfig, RunConfig
from app.models.models import Variant
from app.validators.errors import ConfigValidationError, GcdValidationError

logger = logging.getLogger(__name__)

GRAD_CHECK_MAX_DIM = 8

# Context keys a run request may set; everything else is written by the stages
REQUEST_CONTEXT_KEYS = ("seeds", "variants")


class ConfigValidator:
    """Checks run configurations against every module precondition."""

    @staticmethod
    def validate_backbone(cfg: BackboneConfig) -> None:
        """Check block count, head split and positive extents."""
        if cfg.num_blocks < 1:
            raise ConfigValidationError("backbone.num_blocks must be >= 1")

        for name in ("embed_dim", "num_heads", "token_count", "input_dim", "mlp_hidden"):
            if getattr(cfg, name) < 1:
                raise ConfigValidationError(f"backbone.{name} must be >= 1")

        if cfg.embed_dim % cfg.num_heads != 0:
            raise ConfigValidationError(
                f"backbone.embed_dim ({cfg.embed_dim}) must be divisible by num_heads ({cfg.num_heads})"
            )

        if cfg.init_std < 0:
            raise ConfigValidationError("backbone.init_std must be >= 0")

    @staticmethod
    def validate_mea(cfg: MeaConfig, backbone: BackboneConfig) -> None:
        """Check expert shapes, placement and expert groups."""
        if not cfg.enabled:
            return

        if cfg.num_experts < 1:
            raise ConfigValidationError("mea.num_experts must be >= 1")

        if not 1 <= cfg.bottleneck_dim < backbone.embed_dim:
            raise ConfigValidationError(
                f"mea.bottleneck_dim must satisfy 1 <= d_hat < d ({backbone.embed_dim}), got {cfg.bottleneck_dim}"
            )

        if not 1 <= cfg.adapted_blocks <= backbone.num_blocks:
            raise ConfigValidationError(
                f"mea.adapted_blocks must satisfy 1 <= P <= L ({backbone.num_blocks}), got {cfg.adapted_blocks}"
            )

        if cfg.router_temperature <= 0:
            raise ConfigValidationError("mea.router_temperature must be > 0")

        if cfg.scale < 0:
            raise ConfigValidationError("mea.scale must be >= 0")

        if cfg.num_old_experts is not None and not 0 <= cfg.num_old_experts <= cfg.num_experts:
            raise ConfigValidationError("mea.num_old_experts must lie in [0, num_experts]")

        groups = set(cfg.old_group) | set(cfg.new_group)
        if groups != set(range(cfg.num_experts)) or set(cfg.old_group) & set(cfg.new_group):
            raise ConfigValidationError("expert groups must partition the expert indices")

    @staticmethod
    def validate_losses(config: RunConfig) -> None:
        """Check temperatures, mixing factor and constraint weights."""
        loss = config.loss
        for name in ("tau_u", "tau_c", "tau_s", "tau_teacher"):
            if getattr(loss, name) <= 0:
                raise ConfigValidationError(f"loss.{name} must be > 0")

        if not 0.0 <= loss.lam <= 1.0:
            raise ConfigValidationError(f"loss.lam must lie in [0, 1], got {loss.lam}")

        if loss.entropy_weight < 0:
            raise ConfigValidationError("loss.entropy_weight must be >= 0")

        constraint = config.constraint
        if constraint.alpha < 0 or constraint.beta < 0:
            raise ConfigValidationError("constraint.alpha and constraint.beta must be >= 0")

        if constraint.tau_g <= 0:
            raise ConfigValidationError("constraint.tau_g must be > 0")

        if not 0.0 <= constraint.smoothing < 1.0:
            raise ConfigValidationError("constraint.smoothing must lie in [0, 1)")

        if constraint.alpha > 0 and config.mea.enabled:
            if not config.mea.old_group or not config.mea.new_group:
                raise ConfigValidationError(
                    "constraint.alpha > 0 needs nonempty old and new expert groups (num_experts >= 2)"
                )

    @staticmethod
    def validate_optimizer(config: RunConfig) -> None:
        opt = config.opt
        if opt.batch_size < 2:
            raise ConfigValidationError("opt.batch_size must be >= 2 (contrastive loss needs negatives)")

        if opt.epochs < 1:
            raise ConfigValidationError("opt.epochs must be >= 1")

        if opt.lr < 0 or opt.weight_decay < 0 or not 0.0 <= opt.momentum < 1.0:
            raise ConfigValidationError("opt.lr, opt.weight_decay must be >= 0 and opt.momentum in [0, 1)")

    @staticmethod
    def validate_compatibility(config: RunConfig) -> None:
        """Check that data, backbone and adapter agree with each other."""
        if config.data.path is None:
            if config.data.token_count != config.backbone.token_count:
                raise ConfigValidationError("data.token_count must equal backbone.token_count")
            if config.data.input_dim != config.backbone.input_dim:
                raise ConfigValidationError("data.input_dim must equal backbone.input_dim")

        if config.backbone.unfreeze_last_block and config.mea.enabled:
            raise ConfigValidationError("backbone.unfreeze_last_block is the SimGCD baseline; disable mea")

        if config.head.hidden_dim < 1 or config.head.out_dim < 1:
            raise ConfigValidationError("head dimensions must be >= 1")

    @classmethod
    def validate_run_config(cls, config: RunConfig) -> None:
        """Run full validation: sections, losses, optimizer and cross-section checks."""
        cls.validate_backbone(config.backbone)
        cls.validate_mea(config.mea, config.backbone)
        cls.validate_losses(config)
        cls.validate_optimizer(config)
        DatasetValidator.validate_spec(config.data)
        cls.validate_compatibility(config)

    @staticmethod
    def validate_tiny(config: RunConfig) -> None:
        """Gradient checking runs only on configs whose dimensions are all <= 8."""
        dims = {
            "backbone.embed_dim": config.backbone.embed_dim,
            "backbone.token_count": config.backbone.token_count,
            "backbone.input_dim": config.backbone.input_dim,
            "backbone.mlp_hidden": config.backbone.mlp_hidden,
            "mea.bottleneck_dim": config.mea.bottleneck_dim,
            "mea.num_experts": config.mea.num_experts,
            "head.hidden_dim": config.head.hidden_dim,
            "head.out_dim": config.head.out_dim,
            "data.num_classes": config.data.num_classes,
        }
        too_large = {name: value for name, value in dims.items() if value > GRAD_CHECK_MAX_DIM}
        if too_large:
            raise ConfigValidationError(f"grad-check needs all dims <= {GRAD_CHECK_MAX_DIM}: {too_large}")


class DatasetValidator:
    """Checks synthetic dataset specs."""

    @staticmethod
    def validate_spec(spec: DatasetSpec) -> None:
        if spec.path is not None:
            return

        if spec.num_classes < 2:
            raise GcdValidationError(f"data.num_classes must be >= 2, got {spec.num_classes}")

        if not 1 <= spec.num_old_classes < spec.num_classes:
            raise GcdValidationError("data.num_old_classes must satisfy 1 <= old < num_classes")

        if not 0.0 < spec.labeled_fraction <= 1.0:
            raise GcdValidationError("data.labeled_fraction must lie in (0, 1]")

        if spec.samples_per_class < 2:
            raise GcdValidationError("data.samples_per_class must be >= 2 (labeled and unlabeled per old class)")

        if spec.separation <= 0:
            raise GcdValidationError(f"data.separation must be > 0, got {spec.separation}")

        if spec.noise < 0 or spec.augment_strength < 0:
            raise GcdValidationError("data.noise and data.augment_strength must be >= 0")

        if spec.imbalance_ratio < 1.0:
            raise GcdValidationError("data.imbalance_ratio must be >= 1 (1 = balanced)")

        if spec.token_count < 1 or spec.input_dim < 1:
            raise GcdValidationError("data.token_count and data.input_dim must be >= 1")


class ContextValidator:
    """Basic validation for pipeline execution context."""

    @staticmethod
    def validate_execution_context(context: Dict[str, Any]) -> None:
        """Make sure context is a dict with string keys and reasonable size."""
        if not isinstance(context, dict):
            raise GcdValidationError("Context must be a dictionary")

        for key in context:
            if not isinstance(key, str):
                raise GcdValidationError(f"Context key must be a string. Got: {type(key)}")

        size = len(json.dumps(context, default=str))
        if size > 1024 * 1024:
            raise GcdValidationError(f"Context too large: {size} bytes (max 1MB)")

    @staticmethod
    def validate_request_context(context: Dict[str, Any]) -> None:
        """Client-supplied context may only carry ablation inputs."""
        ContextValidator.validate_execution_context(context)
        unknown = sorted(set(context) - set(REQUEST_CONTEXT_KEYS))
        if unknown:
            raise GcdValidationError(f"Context keys {unknown} are not accepted (allowed: {list(REQUEST_CONTEXT_KEYS)})")

        seeds = context.get("seeds", [0])
        if not isinstance(seeds, list) or not seeds or not all(type(s) is int for s in seeds):
            raise GcdValidationError("Context 'seeds' must be a non-empty list of integers")

        variants = context.get("variants", [Variant.MEA.value])
        known = {v.value for v in Variant}
        if not isinstance(variants, list) or not variants or not all(v in known for v in variants):
            raise GcdValidationError(f"Context 'variants' must be a non-empty list drawn from {sorted(known)}")

    @staticmethod
    def validate_run_dir(runs_root: Path, output_dir: str) -> Path:
        """Resolve a run directory that must stay inside runs_root."""
        relative = Path(output_dir)
        if relative.is_absolute():
            raise GcdValidationError(f"run.output_dir must be relative to the runs root, got '{output_dir}'")
        root = Path(runs_root).resolve()
        resolved = (root / relative).resolve()
        if resolved != root and root not in resolved.parents:
            raise GcdValidationError(f"run.output_dir '{output_dir}' escapes the runs root")
        return resolved
