from pathlib import Path
from typing import Dict, List, Tuple

from fastapi import FastAPI, HTTPException

from app.core.model import parameter_budget
from app.core.run_manager import RunManager
from app.models.api_models import (
    HealthResponse,
    PresetInfo,
    RunExecutionResponse,
    RunRequest,
    StageResultResponse,
)
from app.models.config import PRESETS, build_config, config_hash
from app.models.models import Pipeline, RunExecution
from app.services.pipeline_stages import build_pipeline
from app.validators.errors import GcdValidationError
from app.validators.validators import ContextValidator


def _execution_response(execution: RunExecution) -> RunExecutionResponse:
    stage_results = {
        k: StageResultResponse(
            status=v.status.value,
            data=v.data,
            error=v.error,
            execution_time=v.execution_time
        )
        for k, v in execution.stage_results.items()
    }
    return RunExecutionResponse(
        execution_id=execution.execution_id,
        pipeline_id=execution.pipeline_id,
        status=execution.status.value,
        current_stage=execution.current_stage,
        stage_results=stage_results,
        start_time=execution.start_time.isoformat() if execution.start_time else None,
        end_time=execution.end_time.isoformat() if execution.end_time else None,
        context=execution.context
    )


def register_routes(app: FastAPI, run_manager: RunManager, runs_root: Path = Path("runs")):
    # One registered pipeline per distinct stage list
    pipelines: Dict[Tuple[str, ...], Pipeline] = {}

    def pipeline_for(stages: List[str]) -> Pipeline:
        key = tuple(stages)
        if key not in pipelines:
            pipelines[key] = build_pipeline(stages)
            run_manager.register_pipeline(pipelines[key])
        return pipelines[key]

    @app.post("/runs", response_model=RunExecutionResponse)
    async def run_pipeline(request: RunRequest):
        try:
            config = build_config(request.preset, request.overrides)
            run_dir = ContextValidator.validate_run_dir(runs_root, config.run.output_dir)
            config = config.updated({"run.output_dir": str(run_dir)})
            pipeline = pipeline_for(request.stages)
            context = dict(request.context or {})
            ContextValidator.validate_request_context(context)
        except GcdValidationError as e:
            raise HTTPException(status_code=400, detail=f"Run validation error: {str(e)}")

        try:
            context["config"] = config.model_dump_json()
            execution = await run_manager.execute_pipeline(pipeline.id, context)
            return _execution_response(execution)
        except ValueError as e:
            raise HTTPException(status_code=404, detail=str(e))
        except Exception as e:
            raise HTTPException(status_code=500, detail=str(e))

    @app.get("/runs/{execution_id}", response_model=RunExecutionResponse)
    async def get_run(execution_id: str):
        execution = run_manager.get_execution(execution_id)
        if not execution:
            raise HTTPException(status_code=404, detail="Run not found")
        return _execution_response(execution)

    @app.get("/presets/{name}", response_model=PresetInfo)
    async def get_preset(name: str):
        if name not in PRESETS:
            raise HTTPException(status_code=404, detail=f"Preset '{name}' not found")
        try:
            config = build_config(name)
        except GcdValidationError as e:
            raise HTTPException(status_code=400, detail=str(e))
        return PresetInfo(
            name=name,
            config=config.model_dump(),
            config_hash=config_hash(config),
            tunable_params=parameter_budget(config)
        )

    @app.get("/health", response_model=HealthResponse)
    async def health_check():
        return HealthResponse(status="healthy", service="AdaptGCD Lab")
