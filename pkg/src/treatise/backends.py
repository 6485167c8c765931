"""HTTP clients for the five inference stages (segment, caption, tag,
ground, define), speaking JSON over POST /v1/<stage>.

Request bodies are canonical JSON, and the SHA-256 of every body sent is
kept in an in-order call log; pipeline provenance is built from that log.
Responses are schema-checked before anything downstream touches them.
"""

from __future__ import annotations

import base64
import hashlib
import os
import threading
import time
from dataclasses import dataclass

import requests

from .catalog import canonical_json_bytes

STAGES = ("segment", "caption", "tag", "ground", "define")

_ENV_VARS = {stage: f"TREATISE_{stage.upper()}_URL" for stage in STAGES}


class BackendError(RuntimeError):
    """Transport failure or error response; .stage names the failing stage."""

    def __init__(self, stage: str, message: str):
        self.stage = stage
        super().__init__(f"{stage}: {message}")


class WireSchemaError(BackendError):
    """A 200 response whose body violates the wire schema."""


@dataclass(frozen=True)
class BackendCall:
    stage: str
    url: str
    request_sha256: str


def resolve_endpoints(configured: dict | None = None, environ=None) -> dict:
    """Stage → URL map; TREATISE_<STAGE>_URL wins over configured values."""
    env = os.environ if environ is None else environ
    out = {}
    for stage in STAGES:
        url = env.get(_ENV_VARS[stage]) or (configured or {}).get(stage)
        if url:
            out[stage] = url
    return out


def _is_num(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _check_bbox(v, where: str):
    ok = (isinstance(v, list) and len(v) == 4
          and all(isinstance(c, int) and not isinstance(c, bool) for c in v)
          and v[0] >= 0 and v[1] >= 0 and v[2] >= 1 and v[3] >= 1)
    if not ok:
        raise ValueError(f"{where}: bbox must be [x,y,w,h] with w,h >= 1")


def _validate_segment(obj):
    segs = obj.get("segments")
    if not isinstance(segs, list):
        raise ValueError("missing segments list")
    for i, s in enumerate(segs):
        if not isinstance(s, dict):
            raise ValueError(f"segments[{i}] must be an object")
        _check_bbox(s.get("bbox"), f"segments[{i}]")
        mask = s.get("mask")
        if not isinstance(mask, dict) or not isinstance(mask.get("counts"), list):
            raise ValueError(f"segments[{i}]: mask must be {{counts: [...]}}")
        counts = mask["counts"]
        if not all(isinstance(c, int) and not isinstance(c, bool) and c >= 0 for c in counts):
            raise ValueError(f"segments[{i}]: counts must be non-negative integers")
        if sum(counts) != s["bbox"][2] * s["bbox"][3]:
            raise ValueError(f"segments[{i}]: counts do not sum to the box area")


def _validate_caption(obj):
    if not isinstance(obj.get("caption"), str):
        raise ValueError("missing caption string")


def _validate_tag(obj):
    tags = obj.get("tags")
    if not isinstance(tags, list):
        raise ValueError("missing tags list")
    for i, t in enumerate(tags):
        if not (isinstance(t, dict) and isinstance(t.get("text"), str) and t["text"]):
            raise ValueError(f"tags[{i}]: text must be a non-empty string")
        if not (_is_num(t.get("confidence")) and 0.0 <= t["confidence"] <= 1.0):
            raise ValueError(f"tags[{i}]: confidence must be in [0,1]")


def _validate_ground(obj):
    dets = obj.get("detections")
    if not isinstance(dets, list):
        raise ValueError("missing detections list")
    for i, d in enumerate(dets):
        if not (isinstance(d, dict) and isinstance(d.get("text"), str) and d["text"]):
            raise ValueError(f"detections[{i}]: text must be a non-empty string")
        if not (_is_num(d.get("confidence")) and 0.0 <= d["confidence"] <= 1.0):
            raise ValueError(f"detections[{i}]: confidence must be in [0,1]")
        _check_bbox(d.get("bbox"), f"detections[{i}]")


def _validate_define(obj):
    if not isinstance(obj.get("definition"), str) or not obj["definition"]:
        raise ValueError("missing definition string")


_VALIDATORS = {
    "segment": _validate_segment,
    "caption": _validate_caption,
    "tag": _validate_tag,
    "ground": _validate_ground,
    "define": _validate_define,
}


class BackendClient:
    """Thin POST client with bounded retries and a call log.

    Transport failures and 5xx responses are retried (`retries` attempts,
    exponential backoff starting at `backoff` seconds); error responses
    below 500 are deterministic and fail immediately.
    """

    def __init__(self, endpoints: dict, timeout: float = 10.0,
                 retries: int = 3, backoff: float = 0.1, session=None):
        self.endpoints = dict(endpoints)
        self.timeout = timeout
        self.retries = max(1, int(retries))
        self.backoff = backoff
        self._session = session or requests.Session()
        self._lock = threading.Lock()
        self.calls: list[BackendCall] = []

    def call(self, stage: str, payload: dict) -> dict:
        if stage not in STAGES:
            raise ValueError(f"unknown stage {stage!r}")
        url = self.endpoints.get(stage)
        if not url:
            raise BackendError(stage, "no endpoint configured")
        body = canonical_json_bytes(payload)
        digest = hashlib.sha256(body).hexdigest()
        with self._lock:
            self.calls.append(BackendCall(stage=stage, url=url, request_sha256=digest))
        last = "unreachable"
        for attempt in range(self.retries):
            if attempt:
                time.sleep(self.backoff * (2 ** (attempt - 1)))
            try:
                resp = self._session.post(
                    url, data=body, timeout=self.timeout,
                    headers={"Content-Type": "application/json"},
                )
            except requests.RequestException as exc:
                last = str(exc) or type(exc).__name__
                continue
            if resp.status_code >= 500:
                last = f"HTTP {resp.status_code}"
                continue
            if resp.status_code != 200:
                try:
                    detail = resp.json().get("error", "")
                except ValueError:
                    detail = ""
                raise BackendError(stage, f"HTTP {resp.status_code}: {detail or 'error'}")
            try:
                obj = resp.json()
            except ValueError:
                raise WireSchemaError(stage, "response is not JSON") from None
            if not isinstance(obj, dict):
                raise WireSchemaError(stage, "response must be a JSON object")
            try:
                _VALIDATORS[stage](obj)
            except ValueError as exc:
                raise WireSchemaError(stage, str(exc)) from None
            return obj
        raise BackendError(stage, f"gave up after {self.retries} attempts ({last})")

    # stage wrappers

    def segment(self, image_bytes: bytes) -> dict:
        return self.call("segment", {"image_b64": _b64(image_bytes)})

    def caption(self, image_bytes: bytes) -> dict:
        return self.call("caption", {"image_b64": _b64(image_bytes)})

    def tag(self, image_bytes: bytes, vocabulary=None) -> dict:
        payload = {"image_b64": _b64(image_bytes)}
        if vocabulary is not None:
            payload["vocabulary"] = list(vocabulary)
        return self.call("tag", payload)

    def ground(self, image_bytes: bytes, tags) -> dict:
        return self.call("ground", {"image_b64": _b64(image_bytes), "tags": list(tags)})

    def define(self, prompt: str) -> dict:
        return self.call("define", {"prompt": prompt})


def _b64(image_bytes: bytes) -> str:
    return base64.b64encode(image_bytes).decode("ascii")
