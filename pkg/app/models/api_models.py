from typing import Any, Dict, List, Optional

from pydantic import BaseModel, Field


class RunRequest(BaseModel):
    # Payload for running a stage pipeline
    preset: str = "desk"
    overrides: Dict[str, Any] = Field(default_factory=dict)
    stages: List[str] = Field(default_factory=lambda: ["generate", "train", "evaluate"])
    context: Optional[Dict[str, Any]] = None


class StageResultResponse(BaseModel):
    # Info about a single stage execution result
    status: str
    data: Any = None
    error: Optional[str] = None
    execution_time: Optional[float] = None


class RunExecutionResponse(BaseModel):
    # Full response after running a pipeline
    execution_id: str
    pipeline_id: str
    status: str
    current_stage: Optional[str]
    stage_results: Dict[str, StageResultResponse]
    start_time: Optional[str]
    end_time: Optional[str]
    context: Dict[str, Any]


class PresetInfo(BaseModel):
    # Resolved configuration of a preset and its tunable-parameter budget
    name: str
    config: Dict[str, Dict[str, Any]]
    config_hash: str
    tunable_params: Dict[str, int]


class HealthResponse(BaseModel):
    # Response format for /health endpoint
    status: str
    service: str
