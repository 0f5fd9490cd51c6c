import time
from typing import Any, Dict, List, Optional

import requests


class AdaptGcdClient:
    """Basic HTTP client for interacting with the AdaptGCD Lab API."""

    def __init__(self, base_url: str = "http://localhost:8000"):
        self.base_url = base_url

    def run(self, preset: str = "tiny", overrides: Optional[Dict[str, Any]] = None,
            stages: Optional[List[str]] = None, context: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
        """Run a stage pipeline and wait for the result."""
        payload = {"preset": preset, "overrides": overrides or {}, "context": context or {}}
        if stages:
            payload["stages"] = stages
        response = requests.post(f"{self.base_url}/runs", json=payload)
        response.raise_for_status()
        return response.json()

    def get_run(self, execution_id: str) -> Dict[str, Any]:
        """Get details of a specific run."""
        response = requests.get(f"{self.base_url}/runs/{execution_id}")
        response.raise_for_status()
        return response.json()

    def get_preset(self, name: str) -> Dict[str, Any]:
        """Fetch the resolved configuration of a preset."""
        response = requests.get(f"{self.base_url}/presets/{name}")
        response.raise_for_status()
        return response.json()

    def health_check(self) -> Dict[str, Any]:
        """Check if the API service is running."""
        response = requests.get(f"{self.base_url}/health")
        response.raise_for_status()
        return response.json()


def test_api():
    """Run basic checks against the AdaptGCD Lab API."""
    print("=== Testing AdaptGCD Lab API ===")

    client = AdaptGcdClient()

    try:
        print("1. Health check")
        print("   Service:", client.health_check())

        print("2. Fetching preset 'tiny'")
        preset = client.get_preset("tiny")
        print("   Hash:", preset["config_hash"][:12])
        print("   Tunable params:", preset["tunable_params"])

        print("3. Running generate -> train -> evaluate")
        run = client.run("tiny", overrides={"run.output_dir": "api-test"})
        print("   Execution ID:", run["execution_id"])
        print("   Status:", run["status"])

        print("4. Fetching run results")
        result = client.get_run(run["execution_id"])
        print("   Status:", result["status"])
        for stage_name, stage in result["stage_results"].items():
            print(f"   {stage_name}: {stage['status']} ({stage['execution_time']:.3f}s)")
            if stage["data"]:
                print(f"     Data: {stage['data']}")
            if stage["error"]:
                print(f"     Error: {stage['error']}")

        print("Test run finished.")

    except requests.exceptions.ConnectionError:
        print("Connection failed. Make sure the server is running.")
    except Exception as e:
        print("Test failed:", e)


def seed_test(count: int = 3):
    """Run the tiny pipeline with several seeds in sequence."""
    print("=== Seed Test ===")

    client = AdaptGcdClient()

    try:
        ids = []
        print(f"Running {count} seeds...")
        start = time.time()

        for seed in range(count):
            result = client.run("tiny", overrides={"run.seed": seed, "run.output_dir": f"api-seed-{seed}"})
            ids.append(result["execution_id"])
            print(f"  Finished: {result['execution_id']} ({result['status']})")

        end = time.time()

        print("\nChecking results...")
        ok = 0
        for exec_id in ids:
            res = client.get_run(exec_id)
            status = res["status"]
            evaluation = res["stage_results"].get("evaluate", {}).get("data") or {}
            print(f"  {exec_id}: {status} acc_all={evaluation.get('acc_all')}")
            if status == "completed":
                ok += 1

        duration = end - start
        print(f"\nFinished {count} runs in {duration:.2f} sec")
        print(f"Successful: {ok}, Failed: {count - ok}")

    except Exception as e:
        print("Seed test failed:", e)


if __name__ == "__main__":
    import sys

    if len(sys.argv) > 1:
        if sys.argv[1] == "test":
            test_api()
        elif sys.argv[1] == "seeds":
            seed_test()
        else:
            print("Unknown command. Use: test | seeds")
    else:
        print("Usage:")
        print("  python test_client.py test    # Run API tests")
        print("  python test_client.py seeds   # Run the pipeline for several seeds")
