import pytest
from fastapi import FastAPI
from fastapi.testclient import TestClient

from app.api.endpoints import register_routes
from app.core.run_manager import RunManager


@pytest.fixture
def manager():
    return RunManager()


@pytest.fixture
def client(manager, tmp_path):
    app = FastAPI()
    register_routes(app, manager, runs_root=tmp_path)
    return TestClient(app)


def test_health(client):
    assert client.get("/health").json() == {"status": "healthy", "service": "AdaptGCD Lab"}


def test_preset_info(client):
    body = client.get("/presets/tiny").json()
    assert body["config"]["backbone"]["embed_dim"] == 8
    assert body["tunable_params"]["backbone"] == 0
    assert body["tunable_params"]["total"] == sum(v for k, v in body["tunable_params"].items() if k != "total")


def test_unknown_preset(client):
    assert client.get("/presets/nope").status_code == 404


@pytest.mark.parametrize("payload", [
    {"preset": "nope"},
    {"preset": "tiny", "overrides": {"mea.unknown": 1}},
    {"preset": "tiny", "stages": ["fit"]},
    {"preset": "tiny", "overrides": {"run.output_dir": "/etc/adaptgcd"}},
    {"preset": "tiny", "overrides": {"run.output_dir": "../outside"}},
    {"preset": "tiny", "context": {"generate_result": {"dataset": "/etc/passwd"}}},
    {"preset": "tiny", "context": {"config": "{}"}},
    {"preset": "tiny", "context": {"seeds": ["zero"]}},
    {"preset": "tiny", "context": {"variants": ["mea", "no-such-variant"]}},
])
def test_run_validation_errors(client, payload):
    response = client.post("/runs", json=payload)
    assert response.status_code == 400
    assert "Run validation error" in response.json()["detail"]


def test_run_and_fetch(client, tmp_path):
    response = client.post("/runs", json={"preset": "tiny", "stages": ["generate"],
                                          "overrides": {"run.output_dir": "tiny"}})
    assert response.status_code == 200
    body = response.json()
    assert body["status"] == "completed"
    assert body["stage_results"]["generate"]["data"]["unlabeled"] == 18
    assert (tmp_path / "tiny" / "data.gcd").exists()

    fetched = client.get(f"/runs/{body['execution_id']}").json()
    assert fetched["execution_id"] == body["execution_id"]
    assert client.get("/runs/missing").status_code == 404


def test_runs_reuse_one_pipeline_per_stage_list(client, manager):
    payload = {"preset": "tiny", "stages": ["generate"], "overrides": {"run.output_dir": "reuse"}}
    first = client.post("/runs", json=payload).json()
    second = client.post("/runs", json=payload).json()
    assert first["pipeline_id"] == second["pipeline_id"]
    assert len(manager.pipelines) == 1
