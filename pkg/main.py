import logging
import os
import threading
import uuid
from contextlib import asynccontextmanager
from typing import Any, Dict, Optional

from dotenv import load_dotenv
from fastapi import BackgroundTasks, FastAPI, HTTPException, Request
from pydantic import BaseModel

from errors import AvseError, ConfigError
from experiment_config import ExperimentConfig, parse_experiment_config
from experiment_service import ExperimentService, evaluate_checkpoint

# Load environment variables
load_dotenv()

# Configure logging
logging.basicConfig(
    level=os.getenv("AVSE_LOG_LEVEL", "INFO").upper(),
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger(__name__)

runs: Dict[str, Dict[str, Any]] = {}
runs_lock = threading.Lock()


@asynccontextmanager
async def lifespan(app: FastAPI):
    logger.info("Experiment API starting")
    yield
    active = [run_id for run_id, run in runs.items() if run["status"] == "running"]
    if active:
        logger.warning(f"Shutting down with {len(active)} training run(s) still active: {active}")
    logger.info("Application shutdown complete.")


app = FastAPI(
    title="AVSE experiment service",
    description="Joint audio-visual speech enhancement and CTC phone recognition experiments",
    lifespan=lifespan
)


@app.middleware("http")
async def log_requests(request: Request, call_next):
    logger.info(f"Incoming {request.method} request to {request.url}")
    response = await call_next(request)
    return response


class ExperimentRequest(BaseModel):
    config: Dict[str, Any]
    out: Optional[str] = None
    seed: Optional[int] = None
    preset: Optional[str] = None


class EvalRequest(BaseModel):
    checkpoint: str
    corpus: str
    mapping: Optional[str] = None
    out: Optional[str] = None


def _http_error(e: AvseError) -> HTTPException:
    status = 422 if isinstance(e, ConfigError) else 400
    return HTTPException(status_code=status, detail=str(e))


def _config(request: ExperimentRequest) -> ExperimentConfig:
    try:
        return parse_experiment_config(request.config, seed=request.seed, preset=request.preset,
                                       output_dir=request.out)
    except AvseError as e:
        raise _http_error(e)


@app.get("/")
async def root():
    return {"message": "AVSE experiment service is running"}


@app.get("/health")
async def health_check():
    with runs_lock:
        active = sum(1 for run in runs.values() if run["status"] == "running")
    return {"status": "healthy", "active_runs": active}


@app.post("/corpus")
def generate_corpus(request: ExperimentRequest):
    config = _config(request)
    try:
        return ExperimentService(config).gen_corpus()
    except AvseError as e:
        logger.error(f"Corpus generation failed: {e}")
        raise _http_error(e)


def train_in_background(run_id: str, config: ExperimentConfig, output_dir: str):
    try:
        logger.info(f"Background: run {run_id} training into {output_dir}")
        result = ExperimentService(config, output_dir=output_dir).train()
        last = result.history.records[-1]
        with runs_lock:
            runs[run_id].update(status="finished", result={
                "epochs": len(result.history),
                "updates": result.updates,
                "history": result.curves,
                "checkpoint": result.checkpoint,
                "phase_checkpoints": result.phase_checkpoints,
                "final": vars(last),
            })
        logger.info(f"Background: run {run_id} finished")
    except Exception as e:
        logger.error(f"Background Error in run {run_id}: {e}")
        logger.exception(e)
        with runs_lock:
            runs[run_id].update(status="failed", error=str(e))


@app.post("/train")
def start_training(request: ExperimentRequest, background_tasks: BackgroundTasks):
    config = _config(request)
    run_id = uuid.uuid4().hex[:12]
    output_dir = os.path.join(config.resolved_output_dir(), run_id) if request.out is None else request.out
    with runs_lock:
        runs[run_id] = {"run_id": run_id, "status": "running", "output_dir": output_dir}
    background_tasks.add_task(train_in_background, run_id, config, output_dir)
    return {"run_id": run_id, "status": "running", "output_dir": output_dir}


@app.get("/runs/{run_id}")
async def get_run(run_id: str):
    with runs_lock:
        run = runs.get(run_id)
        if run is None:
            raise HTTPException(status_code=404, detail=f"unknown run '{run_id}'")
        return dict(run)


@app.post("/eval")
def evaluate(request: EvalRequest):
    try:
        reports = evaluate_checkpoint(request.checkpoint, request.corpus, mapping=request.mapping,
                                      out_dir=request.out)
    except AvseError as e:
        logger.error(f"Evaluation failed: {e}")
        raise _http_error(e)
    return {name: report.model_dump() if report else None for name, report in reports.items()}


@app.post("/grad-check")
def gradient_check(request: ExperimentRequest):
    config = _config(request)
    try:
        report = ExperimentService(config).grad_check()
    except AvseError as e:
        logger.error(f"Gradient check failed: {e}")
        raise _http_error(e)
    return {"passed": report.passed, "max_error": report.max_error, "tolerance": report.tolerance,
            "errors": report.errors, "failing": report.failing}


if __name__ == "__main__":
    import uvicorn
    port = int(os.environ.get("PORT", 8000))
    uvicorn.run(app, host="0.0.0.0", port=port)
