import hashlib
import json
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple

from pydantic import BaseModel, ConfigDict, ValidationError

from app.validators.errors import ConfigValidationError


class _Section(BaseModel):
    # Unknown keys are errors, not warnings
    model_config = ConfigDict(extra="forbid", frozen=True)


class BackboneConfig(_Section):
    # Frozen toy ViT shape; the full-scale presets use L=12, d=768
    num_blocks: int = 6
    embed_dim: int = 64
    num_heads: int = 4
    token_count: int = 8
    input_dim: int = 16
    mlp_hidden: int = 128
    seed: int = 0
    init_std: float = 0.02
    unfreeze_last_block: bool = False


class MeaConfig(_Section):
    # Multi-expert adapter: T experts of width d_hat in the last P blocks
    enabled: bool = True
    num_experts: int = 4
    bottleneck_dim: int = 16
    scale: float = 0.4
    adapted_blocks: int = 3
    router_temperature: float = 5.0
    num_old_experts: Optional[int] = None
    init_std: float = 0.02

    @property
    def old_group(self) -> Tuple[int, ...]:
        count = self.num_old_experts
        if count is None:
            count = max(1, self.num_experts // 2)
        return tuple(range(min(count, self.num_experts)))

    @property
    def new_group(self) -> Tuple[int, ...]:
        return tuple(range(len(self.old_group), self.num_experts))


class HeadConfig(_Section):
    # Projection head g: d -> hidden -> out
    hidden_dim: int = 64
    out_dim: int = 32


class LossWeights(_Section):
    lam: float = 0.35
    entropy_weight: float = 2.0
    tau_u: float = 0.07
    tau_c: float = 0.07
    tau_s: float = 0.1
    tau_teacher: float = 0.05


class ConstraintWeights(_Section):
    alpha: float = 0.1
    beta: float = 0.1
    tau_g: float = 0.1
    smoothing: float = 1e-6
    # L_cba splits samples by true class instead of predicted class
    oracle_pseudo_labels: bool = False


class OptimConfig(_Section):
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-5
    epochs: int = 20
    batch_size: int = 32
    decay_prototypes: bool = False


class DatasetSpec(_Section):
    # Synthetic token-space GCD data; path loads a .gcd file instead
    num_classes: int = 10
    num_old_classes: int = 5
    labeled_fraction: float = 0.5
    samples_per_class: int = 20
    token_count: int = 8
    input_dim: int = 16
    separation: float = 3.0
    noise: float = 0.3
    imbalance_ratio: float = 1.0
    augment_strength: float = 0.1
    seed: int = 0
    path: Optional[str] = None


class RunSection(_Section):
    seed: int = 0
    output_dir: str = "runs/default"


class RunConfig(_Section):
    backbone: BackboneConfig = BackboneConfig()
    mea: MeaConfig = MeaConfig()
    head: HeadConfig = HeadConfig()
    loss: LossWeights = LossWeights()
    constraint: ConstraintWeights = ConstraintWeights()
    data: DatasetSpec = DatasetSpec()
    opt: OptimConfig = OptimConfig()
    run: RunSection = RunSection()

    def updated(self, overrides: Mapping[str, Any]) -> "RunConfig":
        """Return a copy with flat `section.key` overrides applied and validated."""
        nested = self.model_dump()
        _merge_flat(nested, overrides)
        return _validate(nested)


SECTIONS = tuple(RunConfig.model_fields)


def _full_scale(s, p, t, alpha, beta, tau_r, classes, old, imbalance=1.0) -> Dict[str, Any]:
    # Per-dataset adapter settings on a ViT-B/16-sized toy backbone
    return {
        "backbone.num_blocks": 12, "backbone.embed_dim": 768, "backbone.num_heads": 12,
        "backbone.mlp_hidden": 3072, "backbone.token_count": 196, "backbone.input_dim": 768,
        "mea.scale": s, "mea.adapted_blocks": p, "mea.num_experts": t, "mea.bottleneck_dim": 64,
        "mea.router_temperature": tau_r, "mea.num_old_experts": 4,
        "constraint.alpha": alpha, "constraint.beta": beta, "constraint.tau_g": 0.1,
        "head.hidden_dim": 2048, "head.out_dim": 256,
        "data.num_classes": classes, "data.num_old_classes": old, "data.samples_per_class": 30,
        "data.token_count": 196, "data.input_dim": 768, "data.imbalance_ratio": imbalance,
        "opt.batch_size": 128, "opt.epochs": 200,
    }


PRESETS: Dict[str, Dict[str, Any]] = {
    "desk": {},
    "tiny": {
        "backbone.num_blocks": 2, "backbone.embed_dim": 8, "backbone.num_heads": 2,
        "backbone.token_count": 4, "backbone.input_dim": 6, "backbone.mlp_hidden": 8,
        "mea.num_experts": 4, "mea.bottleneck_dim": 4, "mea.scale": 0.5, "mea.adapted_blocks": 2,
        "mea.router_temperature": 1.0,
        "head.hidden_dim": 8, "head.out_dim": 8,
        "data.num_classes": 4, "data.num_old_classes": 2, "data.samples_per_class": 6,
        "data.token_count": 4, "data.input_dim": 6,
        "opt.batch_size": 8, "opt.epochs": 1,
    },
    "cub": _full_scale(0.4, 6, 8, 0.03, 0.1, 5.0, 200, 100),
    "aircraft": _full_scale(0.4, 8, 8, 0.1, 0.1, 10.0, 100, 50),
    "scars": _full_scale(0.4, 6, 8, 0.1, 0.1, 10.0, 196, 98),
    "cifar10": _full_scale(0.2, 6, 8, 0.05, 0.05, 10.0, 10, 5),
    "cifar100": _full_scale(0.8, 8, 8, 0.05, 0.05, 10.0, 100, 80),
    "imagenet100": _full_scale(0.4, 8, 8, 0.06, 0.2, 10.0, 100, 50),
    "herbarium19": _full_scale(0.4, 8, 8, 0.05, 0.05, 10.0, 683, 341, imbalance=10.0),
}


def _coerce(raw: Any) -> Any:
    if isinstance(raw, str) and raw.strip().lower() in ("none", "null", ""):
        return None
    return raw.strip() if isinstance(raw, str) else raw


def _merge_flat(nested: Dict[str, Any], overrides: Mapping[str, Any]) -> None:
    for key, raw in overrides.items():
        section, _, name = key.partition(".")
        if section not in SECTIONS or not name:
            raise ConfigValidationError(f"Unknown config key: '{key}'")
        fields = RunConfig.model_fields[section].annotation.model_fields
        if name not in fields:
            raise ConfigValidationError(f"Unknown config key: '{key}'")
        nested[section][name] = _coerce(raw)


def _validate(nested: Dict[str, Any]) -> RunConfig:
    from app.validators.validators import ConfigValidator

    try:
        config = RunConfig.model_validate(nested)
    except ValidationError as e:
        raise ConfigValidationError(f"Invalid configuration: {e}") from e
    ConfigValidator.validate_run_config(config)
    return config


def build_config(preset: str = "desk", overrides: Optional[Mapping[str, Any]] = None) -> RunConfig:
    """Resolve preset < overrides into a validated RunConfig."""
    if preset not in PRESETS:
        raise ConfigValidationError(f"Unknown preset: '{preset}' (choose from {sorted(PRESETS)})")
    nested = RunConfig().model_dump()
    _merge_flat(nested, PRESETS[preset])
    _merge_flat(nested, overrides or {})
    return _validate(nested)


def load_config_file(path: Path) -> Dict[str, str]:
    """Parse a flat `section.key = value` file; '#' starts a comment."""
    entries: Dict[str, str] = {}
    for number, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigValidationError(f"{path}:{number}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in entries:
            raise ConfigValidationError(f"{path}:{number}: duplicate key '{key}'")
        entries[key] = value
    return entries


def dump_config_file(config: RunConfig) -> str:
    lines = []
    for section, values in config.model_dump().items():
        for name, value in values.items():
            lines.append(f"{section}.{name} = {'none' if value is None else value}")
    return "\n".join(lines) + "\n"


def config_hash(config: RunConfig) -> str:
    canonical = json.dumps(config.model_dump(mode="json"), sort_keys=True)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()
