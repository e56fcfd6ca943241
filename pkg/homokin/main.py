import logging
import os
from contextlib import asynccontextmanager
from datetime import datetime
from pathlib import Path
from typing import List

import yaml
from fastapi import FastAPI, File, HTTPException, Query, UploadFile
from fastapi.responses import Response

from homokin import harness
from homokin.errors import ConfigError, HomokinError
from homokin.exporter import ExcelExporter
from homokin.models import ComparisonReport, CompareRequest, ExperimentConfig, RunManifest, RunSubmitted
from homokin.scheduler import init_scheduler
from homokin.storage import RunStorage, config_from_dict, config_hash, dump_config

logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(levelname)s %(message)s")
logger = logging.getLogger(__name__)

BASE_DIR = Path(__file__).parent.parent
storage = RunStorage(os.environ.get("HOMOKIN_RUNS_DIR", str(BASE_DIR / "runs")))
exporter = ExcelExporter()


def execute_run(config: ExperimentConfig, run_id: str) -> RunManifest:
    return harness.run(config, storage, run_id)


run_scheduler = init_scheduler(storage, execute_run)


@asynccontextmanager
async def lifespan(app: FastAPI):
    run_scheduler.start()
    yield
    run_scheduler.stop()


app = FastAPI(title="Homoenergetic Kinetics Harness", lifespan=lifespan)

XLSX_MEDIA_TYPE = "application/vnd.openxmlformats-officedocument.spreadsheetml.sheet"


def _media_type(name: str) -> str:
    if name.endswith(".csv"):
        return "text/csv"
    if name.endswith(".json"):
        return "application/json"
    if name.endswith(".yaml"):
        return "application/x-yaml"
    return "application/octet-stream"


@app.post("/api/runs", response_model=RunSubmitted)
async def submit_run(config: ExperimentConfig):
    run_id = f"{config.level}-{config_hash(config)[:8]}-{datetime.now():%Y%m%d%H%M%S%f}"
    manifest = RunManifest(run_id=run_id, level=config.level, config_hash=config_hash(config), seeds=list(config.seeds))
    run_scheduler.submit(config, manifest)
    return RunSubmitted(run_id=run_id, status="queued")


@app.get("/api/runs", response_model=List[RunManifest])
async def list_runs():
    return storage.list_runs()


@app.get("/api/runs/{run_id}", response_model=RunManifest)
async def get_run(run_id: str):
    manifest = storage.load_manifest(run_id)
    if manifest is None:
        raise HTTPException(status_code=404, detail="Run not found")
    return manifest


@app.get("/api/runs/{run_id}/files/{name}")
async def get_run_file(run_id: str, name: str):
    content = storage.read_file(run_id, name)
    if content is None:
        raise HTTPException(status_code=404, detail="File not found")
    return Response(content=content, media_type=_media_type(name))


@app.get("/api/runs/{run_id}/export")
async def export_run(run_id: str):
    if not storage.exists(run_id):
        raise HTTPException(status_code=404, detail="Run not found")
    files = ExcelExporter.csv_files(storage.list_files(run_id), lambda name: storage.read_file(run_id, name))
    if not files:
        raise HTTPException(status_code=404, detail=f"运行 {run_id} 尚无 CSV 输出")
    return Response(
        content=exporter.export(files),
        media_type=XLSX_MEDIA_TYPE,
        headers={"Content-Disposition": f"attachment; filename={run_id}.xlsx"},
    )


@app.post("/api/configs/import", response_model=ExperimentConfig)
async def import_config(file: UploadFile = File(...)):
    content = await file.read()
    try:
        data = yaml.safe_load(content.decode("utf-8"))
    except (UnicodeDecodeError, yaml.YAMLError) as e:
        raise HTTPException(status_code=400, detail=f"读取配置失败: {e}")
    if not isinstance(data, dict):
        raise HTTPException(status_code=400, detail="config must be a YAML mapping")
    try:
        return config_from_dict(data)
    except ConfigError as e:
        raise HTTPException(status_code=400, detail=str(e))


@app.get("/api/templates/config")
async def download_config_template(level: str = Query("dsmc")):
    try:
        config = harness.config_template(level)
    except ConfigError as e:
        raise HTTPException(status_code=400, detail=str(e))
    return Response(
        content=dump_config(config).encode("utf-8"),
        media_type="application/x-yaml",
        headers={"Content-Disposition": f"attachment; filename={level}_template.yaml"},
    )


@app.post("/api/compare", response_model=ComparisonReport)
async def compare_series(request: CompareRequest):
    arm_a = harness.ArmSeries(request.arm_a.name, request.arm_a.t, request.arm_a.values)
    arm_b = harness.ArmSeries(request.arm_b.name, request.arm_b.t, request.arm_b.values)
    for arm in (arm_a, arm_b):
        if arm.times.size == 0 or arm.times.size != arm.values.size:
            raise HTTPException(status_code=400, detail=f"series {arm.name}: t and values must be non-empty and equal length")
    try:
        return harness.compare(arm_a, arm_b, "sup_rel_dev", request.tolerance)
    except HomokinError as e:
        raise HTTPException(status_code=400, detail=str(e))


if __name__ == "__main__":
    import uvicorn

    uvicorn.run(app, host="0.0.0.0", port=8000)
