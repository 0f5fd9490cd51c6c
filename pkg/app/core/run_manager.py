import logging
from datetime import datetime
from typing import Any, Dict, Optional

from app.models.models import Pipeline, RunExecution, RunStatus, StageStatus
from app.services.stage_executor import StageExecutor

logger = logging.getLogger(__name__)


class RunManager:
    """Holds registered pipelines and runs them stage by stage over a shared context."""

    def __init__(self, max_executions: int = 100):
        if max_executions < 1:
            raise ValueError("max_executions must be >= 1")
        self.pipelines: Dict[str, Pipeline] = {}
        # Insertion ordered; the oldest finished executions are evicted first
        self.executions: Dict[str, RunExecution] = {}
        self.max_executions = max_executions
        self.stage_executor = StageExecutor()

    def register_pipeline(self, pipeline: Pipeline) -> None:
        self.pipelines[pipeline.id] = pipeline

    async def execute_pipeline(self, pipeline_id: str, context: Optional[Dict[str, Any]] = None) -> RunExecution:
        if pipeline_id not in self.pipelines:
            raise ValueError(f"Pipeline '{pipeline_id}' not found")

        pipeline = self.pipelines[pipeline_id]
        execution = RunExecution(
            pipeline_id=pipeline_id,
            context=context or {},
            start_time=datetime.now(),
            status=RunStatus.RUNNING,
        )
        self.executions[execution.execution_id] = execution

        try:
            for stage in pipeline.stages:
                execution.current_stage = stage.name
                result = await self.stage_executor.execute_stage(stage, execution.context)

                # Later stages read earlier outputs from the context
                execution.stage_results[stage.name] = result
                execution.context[f"{stage.name}_result"] = result.data

                if result.status == StageStatus.FAILURE:
                    logger.warning("stage '%s' failed: %s", stage.name, result.error)
                    execution.status = RunStatus.FAILED
                    break

            if execution.status == RunStatus.RUNNING:
                execution.status = RunStatus.COMPLETED
                execution.current_stage = None

        except Exception as e:
            execution.status = RunStatus.FAILED
            execution.context["error"] = str(e)
        finally:
            execution.end_time = datetime.now()
            self._evict_finished()

        return execution

    def _evict_finished(self) -> None:
        finished = [key for key, e in self.executions.items()
                    if e.status in (RunStatus.COMPLETED, RunStatus.FAILED)]
        for key in finished[:max(0, len(self.executions) - self.max_executions)]:
            del self.executions[key]
            logger.debug("evicted execution %s", key)

    def get_execution(self, execution_id: str) -> Optional[RunExecution]:
        return self.executions.get(execution_id)

    def get_pipeline(self, pipeline_id: str) -> Optional[Pipeline]:
        return self.pipelines.get(pipeline_id)
