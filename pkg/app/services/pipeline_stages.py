"""
Async pipeline stages. Each stage reads the run config from context["config"]
(a RunConfig JSON dump) and earlier results from context["<stage>_result"].
Heavy numeric work runs in a worker thread so the event loop stays free.
"""
import asyncio
import uuid
from pathlib import Path
from typing import Any, Dict, Optional, Sequence

from app.core.experiments import ablate
from app.core.trainer import evaluate, load_or_generate, train
from app.models.config import RunConfig
from app.models.models import Pipeline, Stage, Variant
from app.services.gcddata import load_dataset, save_dataset
from app.validators.errors import GcdValidationError


def _config(context: Dict[str, Any]) -> RunConfig:
    raw = context.get("config")
    if raw is None:
        raise GcdValidationError("Pipeline context has no 'config'")
    return RunConfig.model_validate_json(raw) if isinstance(raw, str) else RunConfig.model_validate(raw)


def _output_dir(config: RunConfig) -> Path:
    return Path(config.run.output_dir)


async def generate_stage(context: Dict[str, Any]) -> Any:
    config = _config(context)
    path = _output_dir(config) / "data.gcd"
    split = await asyncio.to_thread(load_or_generate, config)
    await asyncio.to_thread(save_dataset, split, path)
    return {"dataset": str(path), "labeled": len(split.labeled), "unlabeled": len(split.unlabeled)}


async def train_stage(context: Dict[str, Any]) -> Any:
    generated = context.get("generate_result")
    if not generated:
        raise ValueError("No dataset to train on")

    config = _config(context)
    split = await asyncio.to_thread(load_dataset, Path(generated["dataset"]))
    outcome = await asyncio.to_thread(train, config, split, _output_dir(config))
    return {"checkpoint": str(outcome.output_dir / "checkpoint"), "steps": outcome.steps,
            **outcome.evaluation.report.to_dict()}


async def evaluate_stage(context: Dict[str, Any]) -> Any:
    trained = context.get("train_result")
    generated = context.get("generate_result")
    if not trained or not generated:
        raise ValueError("No checkpoint to evaluate")

    config = _config(context)
    split = await asyncio.to_thread(load_dataset, Path(generated["dataset"]))
    out = _output_dir(config) / "evaluation"
    evaluation = await asyncio.to_thread(evaluate, Path(trained["checkpoint"]), split, out, config)
    return evaluation.report.to_dict()


async def ablate_stage(context: Dict[str, Any]) -> Any:
    config = _config(context)
    variants = [Variant(v) for v in context.get("variants", [v.value for v in Variant])]
    seeds = context.get("seeds", [config.run.seed])
    rows = await asyncio.to_thread(ablate, config, variants, seeds, 1, _output_dir(config) / "ablation")
    return [vars(row) for row in rows]


# Registry mapping stage names to their implementation functions
STAGE_FUNCTIONS = {
    "generate": generate_stage,
    "train": train_stage,
    "evaluate": evaluate_stage,
    "ablate": ablate_stage,
}

STAGE_DESCRIPTIONS = {
    "generate": "Synthesize (or load) the GCD split and write data.gcd",
    "train": "Train the model and write metrics, reports and a checkpoint",
    "evaluate": "Reload the checkpoint and score the unlabeled set",
    "ablate": "Train every ablation variant and write ablation.csv",
}

DEFAULT_STAGES = ("generate", "train", "evaluate")


def build_pipeline(stage_names: Sequence[str] = DEFAULT_STAGES, name: Optional[str] = None) -> Pipeline:
    """Resolve stage names against the registry into a runnable Pipeline."""
    if not stage_names:
        raise GcdValidationError("Pipeline must contain at least one stage")
    unknown = [s for s in stage_names if s not in STAGE_FUNCTIONS]
    if unknown:
        raise GcdValidationError(f"Unknown stages: {unknown} (choose from {sorted(STAGE_FUNCTIONS)})")
    if len(set(stage_names)) != len(stage_names):
        raise GcdValidationError("Stage names must be unique within a pipeline")

    stages = [Stage(name=s, description=STAGE_DESCRIPTIONS[s], function=STAGE_FUNCTIONS[s]) for s in stage_names]
    pipeline_id = str(uuid.uuid4())
    return Pipeline(id=pipeline_id, name=name or "-".join(stage_names), stages=stages)
