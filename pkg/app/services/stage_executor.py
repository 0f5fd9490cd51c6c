import logging
from datetime import datetime
from typing import Any, Dict

from app.models.models import Stage, StageResult, StageStatus

logger = logging.getLogger(__name__)


class StageExecutor:
    # Runs one pipeline stage and captures its outcome

    @staticmethod
    async def execute_stage(stage: Stage, context: Dict[str, Any]) -> StageResult:
        """
        Runs a stage and returns the outcome in a StageResult.

        Args:
            stage: Stage to be executed
            context: Shared pipeline context (config plus earlier stage results)

        Returns:
            StageResult with status, result data, and timing
        """
        start_time = datetime.now()

        if stage.function is None:
            return StageResult(
                status=StageStatus.FAILURE,
                error=f"No function registered for stage '{stage.name}'",
                execution_time=0.0,
            )

        try:
            result_data = await stage.function(context)
            execution_time = (datetime.now() - start_time).total_seconds()
            logger.info("stage '%s' finished in %.2fs", stage.name, execution_time)
            return StageResult(status=StageStatus.SUCCESS, data=result_data, execution_time=execution_time)

        except Exception as e:
            # Stage raised: mark as failed, keep the message
            execution_time = (datetime.now() - start_time).total_seconds()
            return StageResult(
                status=StageStatus.FAILURE,
                error=f"{type(e).__name__}: {e}",
                execution_time=execution_time,
            )
