import os
from pathlib import Path

from fastapi import FastAPI

from app.api.endpoints import register_routes
from app.core.run_manager import RunManager

app = FastAPI(title="AdaptGCD Lab API", version="1.0.0")
run_manager = RunManager()
register_routes(app, run_manager, runs_root=Path(os.environ.get("ADAPTGCD_RUNS_ROOT", "runs")))

if __name__ == "__main__":
    import uvicorn
    uvicorn.run(app, host="0.0.0.0", port=8000)
