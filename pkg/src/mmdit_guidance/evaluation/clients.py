"""Clients for external evaluators (open-set detector, LLM judge) and their mocks.

The HTTP clients take an optional ``httpx`` transport so tests can run
them against an in-process handler; nothing here touches the network
unless a real endpoint is configured.
"""

from __future__ import annotations

import base64
import io
import json
import logging
import os
import threading
import time
from typing import Callable, Mapping, Protocol, Sequence

import httpx
import numpy as np
from PIL import Image

from .metrics import build_llm_query, grounding_hint, parse_llm_response
from .toy_detector import DetectionResult

log = logging.getLogger(__name__)

API_KEY_ENV = "EVAL_LLM_API_KEY"
JUDGE_IMAGE_SIDE = 256


class ClientError(RuntimeError):
    pass


class ConfidenceSource(Protocol):
    def detect(self, image, subjects: Sequence[str]) -> DetectionResult: ...


class Judge(Protocol):
    def judge(self, image, subjects: Sequence[str]) -> int: ...


def to_png_bytes(image, side: int | None = None) -> bytes:
    pixels = np.asarray(getattr(image, "pixels", image), dtype=np.float32)
    img = Image.fromarray(np.round(np.clip(pixels, 0, 1) * 255).astype(np.uint8), mode="RGB")
    if side is not None:
        img = img.resize((side, side), Image.BICUBIC)
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


class RateLimiter:
    """Blocks so that at most ``rate`` calls start per second."""

    def __init__(self, rate: float, clock: Callable[[], float] = time.monotonic, sleep=time.sleep):
        self.interval = 1.0 / rate if rate > 0 else 0.0
        self.clock, self.sleep = clock, sleep
        self._next = 0.0
        self._lock = threading.Lock()

    def wait(self) -> None:
        with self._lock:
            now = self.clock()
            if now < self._next:
                self.sleep(self._next - now)
                now = self._next
            self._next = now + self.interval


class _HttpClient:
    def __init__(self, endpoint: str, headers: Mapping[str, str], rate: float, max_retries: int,
                 backoff: float, transport: httpx.BaseTransport | None, sleep=time.sleep):
        self.endpoint = endpoint
        self.http = httpx.Client(headers=dict(headers), transport=transport, timeout=60.0)
        self.limiter = RateLimiter(rate, sleep=sleep)
        self.max_retries = max_retries
        self.backoff = backoff
        self.sleep = sleep
        self.audit: list[dict] = []

    def post(self, body: dict) -> dict:
        payload = json.dumps(body)
        for attempt in range(self.max_retries + 1):
            self.limiter.wait()
            try:
                resp = self.http.post(self.endpoint, content=payload, headers={"content-type": "application/json"})
                self.audit.append({"request": payload, "status": resp.status_code, "response": resp.text})
                if resp.status_code == 429 or resp.status_code >= 500:
                    raise ClientError(f"HTTP {resp.status_code}")
                resp.raise_for_status()
                return resp.json()
            except (httpx.TransportError, ClientError) as err:
                if attempt == self.max_retries:
                    raise ClientError(f"{self.endpoint}: giving up after {attempt + 1} attempts: {err}") from err
                delay = self.backoff * 2**attempt
                log.warning("request failed (%s); retrying in %.2fs", err, delay)
                self.sleep(delay)
        raise AssertionError("unreachable")


class LLMJudgeClient:
    """Asks a chat-completions style endpoint whether all subjects are present."""

    def __init__(self, endpoint: str, model: str = "gpt-4o-mini", api_key: str | None = None,
                 rate: float = 2.0, max_retries: int = 4, backoff: float = 1.0,
                 transport: httpx.BaseTransport | None = None, sleep=time.sleep):
        api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV)
        if not api_key:
            raise ClientError(f"set {API_KEY_ENV} to use the LLM judge")
        self.model = model
        self.client = _HttpClient(endpoint, {"authorization": f"Bearer {api_key}"}, rate, max_retries,
                                  backoff, transport, sleep)

    @property
    def audit(self) -> list[dict]:
        return self.client.audit

    def request_body(self, image, subjects: Sequence[str]) -> dict:
        png = base64.b64encode(to_png_bytes(image, JUDGE_IMAGE_SIDE)).decode("ascii")
        return {
            "model": self.model,
            "messages": [
                {
                    "role": "user",
                    "content": [
                        {"type": "text", "text": build_llm_query(subjects)},
                        {"type": "image_url", "image_url": {"url": f"data:image/png;base64,{png}"}},
                    ],
                }
            ],
        }

    def judge(self, image, subjects: Sequence[str]) -> int:
        data = self.client.post(self.request_body(image, subjects))
        try:
            text = data["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as err:
            raise ClientError(f"malformed judge response: {data!r}") from err
        return parse_llm_response(text)


class DetectorClient:
    """Open-set detector over HTTP.

    Request: ``{"image_png_base64", "text_hint", "subjects"}``.
    Response: ``{"confidences": [float per subject, in request order]}``.
    """

    def __init__(self, endpoint: str, token: str | None = None, rate: float = 5.0, max_retries: int = 4,
                 backoff: float = 1.0, transport: httpx.BaseTransport | None = None, sleep=time.sleep,
                 detector_id: str = "http-detector"):
        headers = {"authorization": f"Bearer {token}"} if token else {}
        self.client = _HttpClient(endpoint, headers, rate, max_retries, backoff, transport, sleep)
        self.detector_id = detector_id

    def detect(self, image, subjects: Sequence[str]) -> DetectionResult:
        body = {
            "image_png_base64": base64.b64encode(to_png_bytes(image)).decode("ascii"),
            "text_hint": grounding_hint(subjects),
            "subjects": list(subjects),
        }
        data = self.client.post(body)
        conf = data.get("confidences") if isinstance(data, dict) else None
        if not isinstance(conf, list) or len(conf) != len(subjects):
            raise ClientError(f"detector returned {data!r} for {len(subjects)} subjects")
        conf = tuple(float(c) for c in conf)
        if any(not 0.0 <= c <= 1.0 for c in conf):
            raise ClientError(f"confidence outside [0, 1]: {conf}")
        return DetectionResult(tuple(subjects), tuple(c > 0 for c in conf), conf, self.detector_id)


class MockDetector:
    """Replays a confidence table keyed by (prompt_id, seed) or by call order."""

    def __init__(self, table: Mapping | Sequence[Sequence[float]], detector_id: str = "mock"):
        self.table = table
        self.detector_id = detector_id
        self.calls = 0

    def detect(self, image, subjects, key=None) -> DetectionResult:
        if isinstance(self.table, Mapping):
            conf = self.table[key]
        else:
            conf = self.table[self.calls]
        self.calls += 1
        conf = tuple(float(c) for c in conf)
        return DetectionResult(tuple(subjects), tuple(c > 0 for c in conf), conf, self.detector_id)


class MockJudge:
    def __init__(self, responses: Sequence[str]):
        self.responses = list(responses)
        self.queries: list[str] = []

    def judge(self, image, subjects) -> int:
        self.queries.append(build_llm_query(subjects))
        return parse_llm_response(self.responses[len(self.queries) - 1])
