import asyncio
import tempfile

from app.core.run_manager import RunManager
from app.models.config import build_config
from app.services.pipeline_stages import build_pipeline


async def demo(preset: str = "tiny"):
    """
    Runs a complete generate -> train -> evaluate pipeline in process:
    - Builds the preset configuration
    - Registers the default pipeline with the manager
    - Executes it and prints per-stage results
    """
    print("=== AdaptGCD Lab Demo ===")

    manager = RunManager()
    output_dir = tempfile.mkdtemp(prefix="adaptgcd-demo-")
    config = build_config(preset, {"run.output_dir": output_dir})

    pipeline = build_pipeline(name="demo")
    manager.register_pipeline(pipeline)

    print(f"Executing pipeline (preset '{preset}', output in {output_dir})...")
    execution = await manager.execute_pipeline(pipeline.id, {"config": config.model_dump_json()})

    print(f"\nExecution ID: {execution.execution_id}")
    print(f"Status: {execution.status.value}")
    print("Stage Results:")
    for stage_name, result in execution.stage_results.items():
        print(f"  {stage_name}: {result.status.value}")
        if result.data:
            print(f"    Output: {result.data}")
        if result.error:
            print(f"    Error: {result.error}")
        if result.execution_time:
            print(f"    Time: {result.execution_time:.3f} sec")

    if execution.start_time and execution.end_time:
        duration = (execution.end_time - execution.start_time).total_seconds()
        print(f"\nTotal execution time: {duration:.3f} sec")


if __name__ == "__main__":
    import sys

    asyncio.run(demo(sys.argv[1] if len(sys.argv) > 1 else "tiny"))
