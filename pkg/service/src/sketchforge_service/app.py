"""HTTP surface: POST /v1/denoise, POST /v1/sketch_loss, GET /v1/health.

Request and response bodies use the binary wire protocol (see protocol.py).
Model calls run one at a time under an inference lock; health checks do not
take the lock.
"""

from __future__ import annotations

import threading

import numpy as np
from fastapi import FastAPI, Request, Response

from .bundles import BundleError, ModelBundle, SyntheticBundle
from .protocol import ProtocolError, decode_message, encode_message

SERVICE_VERSION = "0.1.0"


def _bad_request(msg: str) -> Response:
    return Response(content=msg, status_code=400, media_type="text/plain")


def _require_finite(name: str, arr: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise ProtocolError(f"{name} contains non-finite values")
    return arr.astype(np.float64)


def create_app(bundle: ModelBundle | None = None) -> FastAPI:
    app = FastAPI(title="sketchforge-service", version=SERVICE_VERSION)
    app.state.bundle = bundle if bundle is not None else SyntheticBundle()
    app.state.lock = threading.Lock()

    @app.post("/v1/denoise")
    async def denoise(request: Request) -> Response:
        if app.state.bundle is None:
            return Response(content="no model bundle loaded", status_code=503)
        body = await request.body()
        try:
            meta, arrays = decode_message(body)
            if "x_t" not in arrays:
                raise ProtocolError("request is missing x_t")
            x_t = _require_finite("x_t", arrays["x_t"])
            if x_t.ndim != 3 or x_t.shape[-1] != 3:
                raise ProtocolError("x_t must have shape (H, W, 3)")
            sketch = None
            if "sketch" in arrays:
                sketch = _require_finite("sketch", arrays["sketch"])
                if sketch.ndim != 2:
                    raise ProtocolError("sketch must have shape (H, W)")
            t = int(meta.get("t", -1))
            lam = float(meta.get("lambda", 0.0))
            prompt = str(meta.get("prompt", ""))
            seed = int(meta.get("seed", 0))
            with app.state.lock:
                eps_cond, eps_uncond = app.state.bundle.predict_eps(
                    x_t, t, prompt, lam, sketch, seed
                )
        except (ProtocolError, BundleError, ValueError) as exc:
            return _bad_request(str(exc))
        payload = encode_message({}, {"eps_cond": eps_cond, "eps_uncond": eps_uncond})
        return Response(content=payload, media_type="application/octet-stream")

    @app.post("/v1/sketch_loss")
    async def sketch_loss(request: Request) -> Response:
        if app.state.bundle is None:
            return Response(content="no model bundle loaded", status_code=503)
        body = await request.body()
        try:
            _meta, arrays = decode_message(body)
            if "x" not in arrays or "sketch" not in arrays:
                raise ProtocolError("request needs x and sketch arrays")
            x = _require_finite("x", arrays["x"])
            sketch = _require_finite("sketch", arrays["sketch"])
            if x.ndim != 3 or x.shape[-1] != 3 or sketch.ndim != 2:
                raise ProtocolError("x must be (H, W, 3) and sketch (H, W)")
            with app.state.lock:
                loss, grad = app.state.bundle.sketch_loss(x, sketch)
        except (ProtocolError, BundleError, ValueError) as exc:
            return _bad_request(str(exc))
        payload = encode_message({"loss": loss}, {"grad": grad})
        return Response(content=payload, media_type="application/octet-stream")

    @app.get("/v1/health")
    async def health() -> dict:
        info = {"status": "ok", "service_version": SERVICE_VERSION}
        info.update(app.state.bundle.info())
        return info

    return app
