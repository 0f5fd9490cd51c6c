"""
Training, evaluation, gradient checking and route dumps for GcdModel.
"""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, NoReturn, Optional, Tuple

import numpy as np

from app.core import numkernel as nk
from app.core.evalmetrics import confusion_matrix, gcd_accuracy, route_report
from app.core.model import (
    GROUP_ORDER,
    TOKEN_SIMPLEX_TOLERANCE,
    FrozenTargets,
    GcdModel,
    LossBreakdown,
    overall_loss,
    parameter_budget,
    route_simplex_ok,
)
from app.core.objectives import predict
from app.core.optim import SGD, CosineSchedule
from app.core.routeconstraint import RouteStats, conditioned_route_means
from app.models.config import RunConfig, config_hash, dump_config_file
from app.models.models import (
    AccuracyReport,
    BatchViews,
    CheckpointRecord,
    ConfusionMatrix,
    GcdSplit,
    GradCheckReport,
    GroupCheck,
    StepMetrics,
)
from app.services import reports
from app.services.checkpoint import load_checkpoint, save_checkpoint
from app.services.gcddata import batch_iter, batch_ranges, generate, load_dataset, unlabeled_arrays
from app.validators.errors import GcdValidationError, NonFiniteError, NumericFailure, ShapeMismatchError
from app.validators.validators import ConfigValidator

logger = logging.getLogger(__name__)

EVAL_CHUNK = 256
CHECKPOINT_STEM = "checkpoint"
GRAD_CHECK_INIT_STD = 0.5
# Lower bound on the relative-error denominator
GRAD_CHECK_FLOOR = 1e-4


@dataclass
class EvaluationResult:
    report: AccuracyReport
    confusion: ConfusionMatrix
    sample_ids: np.ndarray
    labels: np.ndarray
    predictions: np.ndarray
    features: np.ndarray
    pooled: Dict[int, np.ndarray] = field(default_factory=dict)
    route_stats: Optional[RouteStats] = None
    route_rows: List[Dict[str, Any]] = field(default_factory=list)
    attention: Optional[np.ndarray] = None


@dataclass
class TrainOutcome:
    checkpoint: CheckpointRecord
    evaluation: EvaluationResult
    output_dir: Path
    steps: int


def load_or_generate(config: RunConfig) -> GcdSplit:
    spec = config.data
    return load_dataset(Path(spec.path)) if spec.path else generate(spec)


def epoch_seed(run_seed: int, epoch: int) -> int:
    return run_seed * 1_000_003 + epoch


def check_compatibility(model: GcdModel, split: GcdSplit) -> None:
    """Reject datasets whose class count or token layout does not fit the model."""
    if split.num_classes != model.num_classes:
        raise GcdValidationError(
            f"dataset has {split.num_classes} classes but the model has {model.num_classes} prototypes"
        )
    backbone = model.config.backbone
    tokens = split.samples[0].tokens.shape if split.samples else None
    if tokens is not None and tokens != (backbone.token_count, backbone.input_dim):
        raise ShapeMismatchError(
            f"dataset tokens {tokens} vs backbone ({backbone.token_count}, {backbone.input_dim})"
        )


def log_budget(model: GcdModel) -> Dict[str, int]:
    counts = model.tunable_counts()
    expected = parameter_budget(model.config, model.num_classes)
    if counts != expected:
        raise NumericFailure(f"tunable parameter count {counts} disagrees with budget {expected}")
    logger.info("tunable parameters: mea=%d projection_head=%d prototypes=%d backbone=%d total=%d",
                counts["mea"], counts["projection_head"], counts["prototypes"], counts["backbone"],
                counts["total"])
    return counts


def evaluate_model(model: GcdModel, split: GcdSplit, record_attention: bool = False) -> EvaluationResult:
    """Argmax prototype prediction over the unlabeled set, scored by gcd_accuracy."""
    check_compatibility(model, split)
    ids, tokens, truths = unlabeled_arrays(split)
    predictions, features, attention = [], [], []
    pooled: Dict[int, List[np.ndarray]] = {}

    with nk.no_grad():
        for start in range(0, len(ids), EVAL_CHUNK):
            trace = model.encode(tokens[start:start + EVAL_CHUNK], record_attention=record_attention)
            probs = predict(trace.features, model.prototypes.weight, model.config.loss.tau_s)
            predictions.append(np.argmax(probs.data, axis=1))
            features.append(trace.features.data.copy())
            if trace.attention is not None:
                attention.append(trace.attention)
            for block, values in model.pooled_routes(trace).items():
                pooled.setdefault(block, []).append(values.data)

    preds = np.concatenate(predictions)
    merged = {block: np.concatenate(chunks) for block, chunks in pooled.items()}
    stats, rows = None, []
    if merged:
        stats = conditioned_route_means({b: nk.Tensor(v) for b, v in merged.items()}, preds, split.old_classes)
        rows = route_report(stats, model.config.mea.num_experts)

    return EvaluationResult(
        report=gcd_accuracy(preds, truths, split.old_classes, model.num_classes),
        confusion=confusion_matrix(preds, truths, model.num_classes),
        sample_ids=ids, labels=truths, predictions=preds,
        features=np.concatenate(features), pooled=merged,
        route_stats=stats, route_rows=rows,
        attention=np.concatenate(attention) if attention else None,
    )


def write_evaluation(output_dir: Path, evaluation: EvaluationResult, config: RunConfig) -> None:
    output_dir = Path(output_dir)
    payload = evaluation.report.to_dict()
    payload["config_hash"] = config_hash(config)
    reports.write_json(output_dir / "report.json", payload)
    reports.write_confusion(output_dir / "confusion.csv", evaluation.confusion)
    if evaluation.route_rows:
        reports.write_route_stats(output_dir / "routes.csv", evaluation.route_rows)


def make_checkpoint(model: GcdModel, step: int, metrics: Dict[str, Any]) -> CheckpointRecord:
    named = model.named_parameters()
    return CheckpointRecord(
        step=step,
        parameters={name: tensor.data.copy() for name, tensor in named.items()},
        frozen={name: not tensor.requires_grad for name, tensor in named.items()},
        config_json=model.config.model_dump_json(),
        config_hash=config_hash(model.config),
        metrics=metrics,
    )


def load_model(stem: Path) -> Tuple[GcdModel, CheckpointRecord]:
    record = load_checkpoint(stem)
    config = RunConfig.model_validate_json(record.config_json)
    prototypes = record.parameters.get("prototypes.weight")
    if prototypes is None:
        raise ShapeMismatchError("checkpoint has no prototypes.weight")
    model = GcdModel.from_config(config, prototypes.shape[0])
    model.load_parameters(record.parameters)
    return model, record


def _dump_and_fail(output_dir: Path, batch: BatchViews, step: int, epoch: int,
                   components: Dict[str, float], reason: str) -> NoReturn:
    dump = {"step": step, "epoch": epoch, "sample_ids": batch.ids.tolist(),
            "components": {k: repr(v) for k, v in components.items()}, "reason": reason}
    path = reports.write_json(Path(output_dir) / "nan_dump.json", dump)
    logger.error("numeric failure at step %d (epoch %d): %s; diagnostics in %s", step, epoch, reason, path)
    raise NumericFailure(f"{reason} at step {step}; see {path}")


def _train_step(model: GcdModel, batch: BatchViews, split: GcdSplit, step: int, epoch: int,
                output_dir: Path) -> LossBreakdown:
    try:
        breakdown = overall_loss(model, batch, split.old_classes)
    except NonFiniteError as e:
        _dump_and_fail(output_dir, batch, step, epoch, {}, str(e))
    total = breakdown.total.item()
    if not all(np.isfinite(v) for v in breakdown.components.values()) or not np.isfinite(total):
        _dump_and_fail(output_dir, batch, step, epoch, {**breakdown.components, "total": total},
                       "non-finite loss")
    if not route_simplex_ok(breakdown.pooled):
        _dump_and_fail(output_dir, batch, step, epoch, breakdown.components, "route weights left the simplex")
    if not route_simplex_ok(breakdown.token_routes, TOKEN_SIMPLEX_TOLERANCE):
        _dump_and_fail(output_dir, batch, step, epoch, breakdown.components,
                       "token route weights left the simplex")
    return breakdown


def train(config: RunConfig, split: Optional[GcdSplit] = None,
          output_dir: Optional[Path] = None) -> TrainOutcome:
    """SGD on L_sgcd + L_ra with per-epoch evaluation; writes logs, reports and a checkpoint."""
    out = Path(output_dir or config.run.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    split = split if split is not None else load_or_generate(config)
    model = GcdModel.from_config(config, split.num_classes)
    check_compatibility(model, split)
    log_budget(model)
    (out / "config.txt").write_text(dump_config_file(config))

    prototypes = frozenset() if config.opt.decay_prototypes else frozenset(model.prototypes.named_parameters())
    optimizer = SGD(model.trainable_parameters(), momentum=config.opt.momentum,
                    weight_decay=config.opt.weight_decay, no_decay=prototypes)
    steps_per_epoch = len(batch_ranges(len(split.samples), config.opt.batch_size))
    schedule = CosineSchedule(config.opt.lr, config.opt.epochs * steps_per_epoch)

    step = 0
    evaluation = None
    with open(out / "metrics.jsonl", "w") as metrics:
        for epoch in range(config.opt.epochs):
            for batch in batch_iter(split, config.opt.batch_size, epoch_seed(config.run.seed, epoch)):
                optimizer.zero_grad()
                breakdown = _train_step(model, batch, split, step, epoch, out)
                nk.backward(breakdown.total)
                lr = schedule(step)
                optimizer.step(lr)
                record = StepMetrics(step=step, epoch=epoch, lr=lr, total=breakdown.total.item(),
                                     **breakdown.components)
                reports.append_jsonl(metrics, record.to_record())
                step += 1

            evaluation = evaluate_model(model, split)
            reports.append_jsonl(metrics, {"kind": "epoch", "epoch": epoch, "step": step,
                                           **evaluation.report.to_dict()})
            if evaluation.route_rows:
                reports.write_route_stats(out / "route_stats" / f"epoch_{epoch:03d}.csv", evaluation.route_rows)
            report = evaluation.report
            logger.info("epoch %d/%d: acc_all=%s acc_old=%s acc_new=%s", epoch + 1, config.opt.epochs,
                        report.acc_all, report.acc_old, report.acc_new)

    checkpoint = make_checkpoint(model, step, evaluation.report.to_dict())
    save_checkpoint(checkpoint, out / CHECKPOINT_STEM)
    write_evaluation(out, evaluation, config)
    return TrainOutcome(checkpoint=checkpoint, evaluation=evaluation, output_dir=out, steps=step)


def evaluate(stem: Path, split: GcdSplit, output_dir: Optional[Path] = None,
             expected: Optional[RunConfig] = None) -> EvaluationResult:
    """Reload a checkpoint and score it on the unlabeled set of split."""
    model, record = load_model(stem)
    if expected is not None and config_hash(expected) != record.config_hash:
        logger.warning("config hash mismatch: checkpoint %s vs current %s",
                       record.config_hash[:12], config_hash(expected)[:12])
    evaluation = evaluate_model(model, split)
    if output_dir is not None:
        write_evaluation(Path(output_dir), evaluation, model.config)
    logger.info("evaluated checkpoint step %d: acc_all=%s acc_old=%s acc_new=%s", record.step,
                evaluation.report.acc_all, evaluation.report.acc_old, evaluation.report.acc_new)
    return evaluation


def grad_check(config: RunConfig, tolerance: float = 1e-4, step: float = 1e-5,
               output_dir: Optional[Path] = None) -> GradCheckReport:
    """Analytic vs central-difference gradients of the overall loss, per parameter group."""
    ConfigValidator.validate_tiny(config)
    split = load_or_generate(config)
    model = GcdModel.from_config(config, split.num_classes)

    # Move trainable values off their zero init so every path carries gradient
    rng = np.random.default_rng([config.run.seed, 2])
    for tensor in model.trainable_parameters().values():
        tensor.data[...] = rng.normal(0.0, GRAD_CHECK_INIT_STD, size=tensor.shape)

    batch = next(batch_iter(split, config.opt.batch_size, epoch_seed(config.run.seed, 0)))
    breakdown = overall_loss(model, batch, split.old_classes)
    nk.backward(breakdown.total)
    frozen: FrozenTargets = breakdown.targets

    def loss_fn() -> nk.Tensor:
        return overall_loss(model, batch, split.old_classes, frozen).total

    groups = model.parameter_groups()
    checks = []
    for name in GROUP_ORDER:
        members = groups.get(name)
        if not members:
            continue
        trainable = {key: t for key, t in members.items() if t.requires_grad}
        if not trainable:
            checks.append(GroupCheck(name=name, status="skipped"))
            continue
        worst, count = 0.0, 0
        for tensor in trainable.values():
            numeric = nk.numerical_gradient(loss_fn, tensor, step=step)
            worst = max(worst, nk.relative_error(tensor.grad, numeric, floor=GRAD_CHECK_FLOOR))
            count += tensor.size
        status = "pass" if worst < tolerance else "fail"
        checks.append(GroupCheck(name=name, status=status, max_rel_error=worst, num_values=count))
        logger.info("grad-check %-16s %s (max rel error %.3e over %d values)", name, status, worst, count)

    report = GradCheckReport(groups=checks, tolerance=tolerance)
    if output_dir is not None:
        reports.write_json(Path(output_dir) / "grad_check.json", report.to_dict())
    return report


def dump_routes(stem: Path, split: GcdSplit, output_dir: Path, features: bool = False,
                attention: bool = False) -> EvaluationResult:
    """Per-sample pooled routes, plus optional class-token features and attention."""
    model, _ = load_model(stem)
    if model.adapters is None:
        raise GcdValidationError("checkpoint has no multi-expert adapter; nothing to dump")
    output_dir = Path(output_dir)
    evaluation = evaluate_model(model, split, record_attention=attention)
    reports.write_route_dump(output_dir / "route_dump.csv", evaluation.sample_ids, evaluation.pooled)
    if features:
        reports.write_features(output_dir / "features.csv", evaluation.sample_ids, evaluation.labels,
                               split.old_classes, evaluation.features)
    if attention:
        reports.write_attention(output_dir / "attention.csv", evaluation.sample_ids, evaluation.attention)
    return evaluation
