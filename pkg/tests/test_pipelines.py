import pytest

from app.core.run_manager import RunManager
from app.models.config import build_config
from app.models.models import Pipeline, RunStatus, Stage, StageStatus
from app.services.pipeline_stages import STAGE_FUNCTIONS, build_pipeline
from app.validators.errors import GcdValidationError


@pytest.fixture
def context(tmp_path):
    return {"config": build_config("tiny", {"run.output_dir": str(tmp_path)}).model_dump_json()}


@pytest.mark.asyncio
async def test_execute_default_pipeline(context, tmp_path):
    manager = RunManager()
    pipeline = build_pipeline(name="tiny")
    manager.register_pipeline(pipeline)

    result = await manager.execute_pipeline(pipeline.id, context)
    assert result.status == RunStatus.COMPLETED
    assert list(result.stage_results) == ["generate", "train", "evaluate"]
    assert all(r.status == StageStatus.SUCCESS for r in result.stage_results.values())
    assert (tmp_path / "data.gcd").exists()
    assert (tmp_path / "evaluation" / "report.json").exists()
    trained, evaluated = result.context["train_result"], result.context["evaluate_result"]
    assert evaluated["acc_all"] == trained["acc_all"]
    assert evaluated["n_all"] == trained["n_all"]


@pytest.mark.asyncio
async def test_pipeline_stops_on_stage_failure(context):
    async def failing_stage(_context):
        raise Exception("Simulated failure")

    pipeline = Pipeline(
        id="fail_pipeline",
        name="Pipeline with failure",
        stages=[
            Stage(name="generate", description="Will fail", function=failing_stage),
            Stage(name="train", description="Should not run", function=STAGE_FUNCTIONS["train"]),
        ],
    )
    manager = RunManager()
    manager.register_pipeline(pipeline)

    result = await manager.execute_pipeline("fail_pipeline", context)
    assert result.status == RunStatus.FAILED
    assert result.stage_results["generate"].status == StageStatus.FAILURE
    assert "Simulated failure" in result.stage_results["generate"].error
    assert "train" not in result.stage_results


@pytest.mark.asyncio
async def test_stage_without_function_fails():
    pipeline = Pipeline(id="no_function", name="No function", stages=[Stage(name="train", description="Empty")])
    manager = RunManager()
    manager.register_pipeline(pipeline)

    result = await manager.execute_pipeline("no_function")
    assert result.status == RunStatus.FAILED
    assert "No function registered" in result.stage_results["train"].error


@pytest.mark.asyncio
async def test_unknown_pipeline():
    with pytest.raises(ValueError):
        await RunManager().execute_pipeline("missing")


@pytest.mark.asyncio
async def test_execution_is_retrievable(context):
    manager = RunManager()
    pipeline = build_pipeline(["generate"])
    manager.register_pipeline(pipeline)
    result = await manager.execute_pipeline(pipeline.id, context)
    assert manager.get_execution(result.execution_id) is result
    assert manager.get_pipeline(pipeline.id) is pipeline
    assert result.context["generate_result"]["labeled"] == 6


@pytest.mark.asyncio
async def test_train_stage_needs_a_dataset(context):
    with pytest.raises(ValueError, match="No dataset"):
        await STAGE_FUNCTIONS["train"](context)


@pytest.mark.asyncio
async def test_stage_needs_a_config():
    with pytest.raises(GcdValidationError):
        await STAGE_FUNCTIONS["generate"]({})


@pytest.mark.parametrize("stages", [
    [],
    ["generate", "fit"],
    ["generate", "generate"],
])
def test_build_pipeline_rejects(stages):
    with pytest.raises(GcdValidationError):
        build_pipeline(stages)


@pytest.mark.asyncio
async def test_finished_executions_are_capped(context):
    manager = RunManager(max_executions=2)
    pipeline = build_pipeline(["generate"])
    manager.register_pipeline(pipeline)

    results = [await manager.execute_pipeline(pipeline.id, dict(context)) for _ in range(3)]
    assert len(manager.executions) == 2
    assert manager.get_execution(results[0].execution_id) is None
    assert manager.get_execution(results[-1].execution_id) is results[-1]


def test_execution_cap_must_be_positive():
    with pytest.raises(ValueError):
        RunManager(max_executions=0)
