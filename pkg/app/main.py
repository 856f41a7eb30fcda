import os
import base64
import traceback
from typing import Optional

from fastapi import FastAPI, HTTPException, UploadFile, File
from fastapi.responses import JSONResponse
from dotenv import load_dotenv

from app.models.enhancer import Enhancer, enhance, param_breakdown
from app.models.presets import REFERENCE_PARAMS_M, get_preset, list_presets
from app.services.checkpoint_service import CheckpointService
from app.services.wav_service import WavService
from app.utils.helper import CheckpointError, ConfigError, WavFormatError, log

# Load environment variables
load_dotenv()

checkpoint_service = CheckpointService()
wav_service = WavService()
_model_cache = {}

app = FastAPI(
    title="DF-Conformer Enhancement Service",
    description="Splits uploaded noisy speech into speech and noise stems",
    version="1.0.0"
)


def get_model() -> Optional[Enhancer]:
    """Load the checkpoint named by DFC_CHECKPOINT once and reuse it"""
    path = os.getenv("DFC_CHECKPOINT")
    if not path:
        return None
    if path not in _model_cache:
        _model_cache[path] = checkpoint_service.load_model(path)
    return _model_cache[path]


@app.on_event("startup")
async def startup_event():
    path = os.getenv("DFC_CHECKPOINT")
    log(f"Enhancement service initialized: checkpoint={path}")


@app.on_event("shutdown")
async def shutdown_event():
    log("Shutting down enhancement service...")


@app.get("/")
async def root():
    """Liveness endpoint"""
    return {"message": "DF-Conformer enhancement service is running"}


@app.get("/health")
async def health_check():
    """Ready when a checkpoint is configured and loads"""
    path = os.getenv("DFC_CHECKPOINT")
    try:
        model = get_model()
    except CheckpointError as e:
        return JSONResponse(
            status_code=503,
            content={"status": "unhealthy", "checkpoint": path, "error": str(e)}
        )
    if model is None:
        return JSONResponse(
            status_code=503,
            content={"status": "unhealthy", "checkpoint": None, "error": "DFC_CHECKPOINT is not set"}
        )
    return JSONResponse(
        status_code=200,
        content={
            "status": "healthy",
            "checkpoint": path,
            "preset": model.cfg.name,
            "sample_rate": model.cfg.filterbank.sample_rate,
        }
    )


@app.get("/params/{preset}")
async def params(preset: str):
    """Parameter count and per-module breakdown of a named preset"""
    try:
        cfg = get_preset(preset)
    except ConfigError:
        raise HTTPException(status_code=404, detail=f"Unknown preset '{preset}'; available: {list_presets()}")
    frame = param_breakdown(cfg)
    return {
        "preset": preset,
        "total": int(frame["params"].sum()),
        "reference_millions": REFERENCE_PARAMS_M.get(preset),
        "breakdown": [
            {"module": row.module, "params": int(row.params), "share": float(row.share)}
            for row in frame.itertuples()
        ],
    }


@app.post("/enhance")
async def enhance_upload(file: UploadFile = File(...)):
    """Enhance an uploaded mono 16-bit WAV; both stems come back base64-encoded"""
    try:
        model = get_model()
    except CheckpointError as e:
        raise HTTPException(status_code=503, detail=f"Checkpoint failed to load: {e}")
    if model is None:
        raise HTTPException(status_code=503, detail="No model configured (set DFC_CHECKPOINT)")

    payload = await file.read()
    try:
        mixture = wav_service.from_bytes(payload, expected_rate=model.cfg.filterbank.sample_rate)
    except WavFormatError as e:
        raise HTTPException(status_code=400, detail=str(e))

    log(f"Enhance request: filename={file.filename}, samples={mixture.num_samples}, rate={mixture.sample_rate}")
    try:
        speech, noise = enhance(mixture, model)
    except Exception as e:
        log(f"Enhancement failed: {e}\n{traceback.format_exc()}", "ERROR")
        raise HTTPException(status_code=500, detail=f"Enhancement failed: {str(e)}")

    return JSONResponse(
        status_code=200,
        content={
            "samples": mixture.num_samples,
            "sample_rate": mixture.sample_rate,
            "speech_wav_b64": base64.b64encode(wav_service.to_bytes(speech)).decode("ascii"),
            "noise_wav_b64": base64.b64encode(wav_service.to_bytes(noise)).decode("ascii"),
        }
    )


if __name__ == "__main__":
    import uvicorn
    port = int(os.getenv("PORT", 8080))
    uvicorn.run(app, host="0.0.0.0", port=port)
