"""HTTP client for the remote guidance service.

Exposes the guidance and sketch-loss provider interfaces over the wire
protocol. Calls are blocking with at most one request in flight, so
iteration ordering is preserved; timeouts and 5xx responses are retried
with backoff before surfacing a transport error. Every value coming off
the wire is validated against the protocol bounds before use.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import requests

from .guidance import GuidanceProvider, GuidanceRequest, GuidanceResponse
from .protocol import ProtocolError, decode_message, encode_message
from .sketchloss import SketchImage, SketchLossProvider


class TransportError(Exception):
    """Service unreachable or persistently failing."""


@dataclass
class ServiceConfig:
    base_url: str
    timeout: float = 30.0
    max_retries: int = 2
    backoff: float = 0.5

    def __post_init__(self):
        if self.timeout <= 0.0:
            raise ValueError("timeout must be positive")
        if self.max_retries < 0:
            raise ValueError("max_retries must be nonnegative")
        self.base_url = self.base_url.rstrip("/")


class ServiceClient:
    def __init__(self, config: ServiceConfig):
        self.config = config
        self.session = requests.Session()

    def post(self, path: str, body: bytes) -> bytes:
        url = self.config.base_url + path
        last = None
        for attempt in range(self.config.max_retries + 1):
            if attempt:
                time.sleep(self.config.backoff * (2 ** (attempt - 1)))
            try:
                resp = self.session.post(
                    url, data=body, timeout=self.config.timeout,
                    headers={"Content-Type": "application/octet-stream"},
                )
            except (requests.Timeout, requests.ConnectionError) as exc:
                last = exc
                continue
            if resp.status_code == 200:
                return resp.content
            if 500 <= resp.status_code < 600:
                last = TransportError(f"{url} returned {resp.status_code}")
                continue
            raise ProtocolError(
                f"{url} rejected the request: {resp.status_code} {resp.text[:200]}"
            )
        raise TransportError(f"giving up on {url} after "
                             f"{self.config.max_retries + 1} attempts: {last}")

    def health(self) -> dict:
        url = self.config.base_url + "/v1/health"
        try:
            resp = self.session.get(url, timeout=self.config.timeout)
        except (requests.Timeout, requests.ConnectionError) as exc:
            raise TransportError(f"health check failed: {exc}") from exc
        if resp.status_code != 200:
            raise TransportError(f"health check returned {resp.status_code}")
        return resp.json()


def _validate_array(name: str, arr: np.ndarray, shape) -> np.ndarray:
    if arr.shape != tuple(shape):
        raise ProtocolError(f"{name} has shape {arr.shape}, expected {tuple(shape)}")
    if not np.all(np.isfinite(arr)):
        raise ProtocolError(f"{name} contains non-finite values")
    return arr.astype(np.float64)


class RemoteGuidanceProvider(GuidanceProvider):
    """Noise predictions from the service's diffusion prior (POST /v1/denoise)."""

    name = "remote"

    def __init__(self, client: ServiceClient):
        self.client = client

    def predict(self, req: GuidanceRequest) -> GuidanceResponse:
        meta = {"t": int(req.t), "prompt": req.prompt,
                "lambda": float(req.lam), "seed": int(req.seed)}
        arrays = {"x_t": req.x_t}
        if req.sketch is not None:
            arrays["sketch"] = req.sketch
        raw = self.client.post("/v1/denoise", encode_message(meta, arrays))
        _, out = decode_message(raw)
        if "eps_cond" not in out or "eps_uncond" not in out:
            raise ProtocolError("denoise response is missing noise predictions")
        return GuidanceResponse(
            eps_cond=_validate_array("eps_cond", out["eps_cond"], req.x_t.shape),
            eps_uncond=_validate_array("eps_uncond", out["eps_uncond"], req.x_t.shape),
        )


class RemoteSketchLossProvider(SketchLossProvider):
    """Sketch-consistency loss and input gradient computed service-side
    (POST /v1/sketch_loss); the gradient crosses the wire because the
    service's estimator and encoder cannot be differentiated client-side."""

    name = "remote"

    def __init__(self, client: ServiceClient):
        self.client = client

    def evaluate(self, x: np.ndarray, sketch: SketchImage):
        x = np.asarray(x, dtype=np.float64)
        body = encode_message({}, {"x": x, "sketch": sketch.strokes})
        raw = self.client.post("/v1/sketch_loss", body)
        meta, out = decode_message(raw)
        if "loss" not in meta or "grad" not in out:
            raise ProtocolError("sketch_loss response is missing loss or grad")
        loss = float(meta["loss"])
        if not (-1.0 <= loss <= 1.0):
            raise ProtocolError(f"sketch loss {loss} outside [-1, 1]")
        grad = _validate_array("grad", out["grad"], x.shape)
        return loss, grad
