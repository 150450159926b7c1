"""Clients for the editor, segmenter, and MLLM services, plus mocks.

Live mode speaks the /v1/* wire protocol: JSON bodies with base64 PNG
image fields, endpoints /v1/edit, /v1/segment, /v1/complete. Mock mode
replays transcripts from a script file so entire sessions are
reproducible byte for byte. Either way a per-session CallLedger counts
successful logical calls (retried attempts are not double-counted).
"""

from __future__ import annotations

import base64
import json
import time
from collections import deque
from dataclasses import dataclass, field, fields
from pathlib import Path

import httpx
import numpy as np

from .geometry import PixelBox
from .pngio import decode_mask_png, decode_png, encode_mask_png, encode_png
from .raster import ImageBuffer, Mask

EDIT_PATH = "/v1/edit"
SEGMENT_PATH = "/v1/segment"
COMPLETE_PATH = "/v1/complete"

MODE_LIVE = "live"
MODE_MOCK = "mock"


class BackendError(RuntimeError):
    """Transport, protocol, or fixture failure while calling a backend."""


@dataclass
class CallLedger:
    """Per-session counters of successful backend calls."""

    editor_calls: int = 0
    segmenter_calls: int = 0
    mllm_calls: int = 0

    def snapshot(self) -> dict:
        return {
            "editor_calls": self.editor_calls,
            "segmenter_calls": self.segmenter_calls,
            "mllm_calls": self.mllm_calls,
        }


@dataclass
class BackendConfig:
    mode: str = MODE_MOCK
    editor_url: str | None = None
    segmenter_url: str | None = None
    mllm_url: str | None = None
    editor_timeout: float = 120.0
    timeout: float = 60.0
    retry_limit: int = 2
    auth_token: str | None = None
    mock_script_path: str | None = None

    def validate(self) -> None:
        if self.mode == MODE_LIVE:
            missing = [
                name
                for name, url in (
                    ("editor_url", self.editor_url),
                    ("segmenter_url", self.segmenter_url),
                    ("mllm_url", self.mllm_url),
                )
                if not url
            ]
            if missing:
                raise ValueError(f"live mode requires URLs, missing: {missing}")
        elif self.mode == MODE_MOCK:
            if not self.mock_script_path:
                raise ValueError("mock mode requires mock_script_path")
        else:
            raise ValueError(f"unknown backend mode {self.mode!r}")

    @classmethod
    def from_dict(cls, data: dict) -> "BackendConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown backend config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class SegmentInstance:
    """One raw segmentation hit, unfiltered."""

    mask: Mask
    box: PixelBox
    score: float


def image_to_b64(image: ImageBuffer) -> str:
    return base64.b64encode(encode_png(image)).decode("ascii")


def image_from_b64(data: str) -> ImageBuffer:
    try:
        return decode_png(base64.b64decode(data, validate=True))
    except (ValueError, TypeError) as exc:
        raise BackendError(f"bad image payload: {exc}") from exc


def mask_to_b64(mask: Mask) -> str:
    return base64.b64encode(encode_mask_png(mask)).decode("ascii")


def mask_from_b64(data: str) -> Mask:
    try:
        return decode_mask_png(base64.b64decode(data, validate=True))
    except (ValueError, TypeError) as exc:
        raise BackendError(f"bad mask payload: {exc}") from exc


def text_part(text: str) -> dict:
    return {"text": text}


def image_part(image: ImageBuffer, name: str = "image") -> dict:
    return {"image": image, "name": name}


# --- live clients -----------------------------------------------------------


class _HttpCaller:
    """Shared POST-with-retries plumbing for the live clients."""

    def __init__(self, config: BackendConfig, transport: httpx.BaseTransport | None = None):
        self._config = config
        headers = {}
        if config.auth_token:
            headers["Authorization"] = f"Bearer {config.auth_token}"
        self._client = httpx.Client(headers=headers, transport=transport)

    def post(self, url: str, body: dict, timeout: float) -> dict:
        attempts = self._config.retry_limit + 1
        last_error: Exception | None = None
        for attempt in range(attempts):
            if attempt:
                time.sleep(min(0.2 * attempt, 1.0))
            try:
                resp = self._client.post(url, json=body, timeout=timeout)
            except httpx.HTTPError as exc:
                last_error = exc
                continue
            if resp.status_code >= 500:
                last_error = BackendError(f"{url} returned {resp.status_code}")
                continue
            if resp.status_code != 200:
                raise BackendError(f"{url} returned {resp.status_code}: {resp.text[:200]}")
            try:
                return resp.json()
            except json.JSONDecodeError as exc:
                raise BackendError(f"{url} returned non-JSON body") from exc
        raise BackendError(f"{url} unreachable after {attempts} attempts: {last_error}")

    def close(self) -> None:
        self._client.close()


class LiveEditor:
    def __init__(self, config: BackendConfig, ledger: CallLedger,
                 transport: httpx.BaseTransport | None = None):
        self._caller = _HttpCaller(config, transport)
        self._config = config
        self._ledger = ledger

    def edit(self, image: ImageBuffer, instruction: str) -> ImageBuffer:
        if not instruction:
            raise ValueError("instruction must be non-empty")
        body = {"image": image_to_b64(image), "instruction": instruction}
        data = self._caller.post(
            self._config.editor_url + EDIT_PATH, body, self._config.editor_timeout
        )
        if "image" not in data:
            raise BackendError("edit response missing 'image'")
        out = image_from_b64(data["image"])
        self._ledger.editor_calls += 1
        return out


class LiveSegmenter:
    def __init__(self, config: BackendConfig, ledger: CallLedger,
                 transport: httpx.BaseTransport | None = None):
        self._caller = _HttpCaller(config, transport)
        self._config = config
        self._ledger = ledger

    def segment(self, image: ImageBuffer, query: str) -> list[SegmentInstance]:
        if not query:
            raise ValueError("query must be non-empty")
        body = {"image": image_to_b64(image), "query": query}
        data = self._caller.post(
            self._config.segmenter_url + SEGMENT_PATH, body, self._config.timeout
        )
        try:
            instances = [
                SegmentInstance(
                    mask=mask_from_b64(item["mask"]),
                    box=PixelBox.from_list(item["box"]),
                    score=float(item["score"]),
                )
                for item in data["instances"]
            ]
        except (KeyError, TypeError, ValueError) as exc:
            raise BackendError(f"malformed segment response: {exc}") from exc
        self._ledger.segmenter_calls += 1
        return instances


class LiveMllm:
    def __init__(self, config: BackendConfig, ledger: CallLedger,
                 transport: httpx.BaseTransport | None = None):
        self._caller = _HttpCaller(config, transport)
        self._config = config
        self._ledger = ledger

    def complete(self, parts: list[dict], role: str = "generic") -> str:
        # role keys mock transcripts and traces; it never goes on the wire
        if not any("text" in p for p in parts):
            raise ValueError("at least one text part required")
        wire_parts = []
        for part in parts:
            if "text" in part:
                wire_parts.append({"text": part["text"]})
            else:
                wire_parts.append(
                    {"image": image_to_b64(part["image"]), "name": part.get("name", "image")}
                )
        body = {"parts": wire_parts, "deterministic": True}
        data = self._caller.post(
            self._config.mllm_url + COMPLETE_PATH, body, self._config.timeout
        )
        if "text" not in data or not isinstance(data["text"], str):
            raise BackendError("complete response missing 'text'")
        self._ledger.mllm_calls += 1
        return data["text"]


# --- scripted mocks ---------------------------------------------------------


def load_mock_script(path: str | Path) -> dict:
    try:
        script = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise BackendError(f"cannot load mock script {path}: {exc}") from exc
    if not isinstance(script, dict):
        raise BackendError(f"mock script {path} must be a JSON object")
    return script


def resolve_case_script(script: dict, case_id: str) -> dict:
    """Merge a case section over the script's default, service by service."""
    merged = dict(script.get("default", {}))
    merged.update(script.get("cases", {}).get(case_id, {}))
    return merged


class MockEditor:
    """Deterministic editor: echo, invert, or canned PNGs.

    Scalar specs repeat forever; list specs are consumed call by call and
    exhaust to BackendError (fixtures must be complete).
    """

    def __init__(self, spec, ledger: CallLedger, base_dir: Path | None = None):
        self._ledger = ledger
        self._base_dir = base_dir or Path(".")
        self.wire_calls = 0
        if isinstance(spec, list):
            self._queue: deque | None = deque(spec)
            self._constant = None
        else:
            self._queue = None
            self._constant = spec if spec is not None else "echo"

    def _next_spec(self):
        if self._queue is None:
            return self._constant
        if not self._queue:
            raise BackendError("mock editor transcript exhausted")
        return self._queue.popleft()

    def edit(self, image: ImageBuffer, instruction: str) -> ImageBuffer:
        if not instruction:
            raise ValueError("instruction must be non-empty")
        self.wire_calls += 1
        item = self._next_spec()
        if item == "echo":
            out = image.copy()
        elif item == "invert":
            arr = image.pixels.copy()
            arr[:, :, :3] = 255 - arr[:, :, :3]
            out = ImageBuffer(arr)
        elif item == "fail":
            raise BackendError("mock editor scripted failure")
        elif isinstance(item, dict) and "path" in item:
            out = decode_png((self._base_dir / item["path"]).read_bytes())
        else:
            raise BackendError(f"unknown mock editor spec {item!r}")
        self._ledger.editor_calls += 1
        return out


class MockSegmenter:
    """Returns instances materialized from box specs; masks are filled boxes."""

    def __init__(self, spec, ledger: CallLedger):
        self._spec = spec if spec is not None else []
        self._ledger = ledger
        self.wire_calls = 0

    def segment(self, image: ImageBuffer, query: str) -> list[SegmentInstance]:
        if not query:
            raise ValueError("query must be non-empty")
        self.wire_calls += 1
        if self._spec == "fail":
            raise BackendError("mock segmenter scripted failure")
        instances = []
        for item in self._spec:
            box = PixelBox.from_list(item["box"])
            mask_box = PixelBox.from_list(item.get("mask_box", item["box"]))
            values = np.zeros((image.height, image.width), dtype=bool)
            values[
                mask_box.y : mask_box.y + mask_box.h,
                mask_box.x : mask_box.x + mask_box.w,
            ] = True
            instances.append(
                SegmentInstance(mask=Mask(values), box=box, score=float(item["score"]))
            )
        self._ledger.segmenter_calls += 1
        return instances


class MockMllm:
    """Role-keyed transcript playback.

    A string value answers every call for that role; a list is consumed
    in order and exhausts to BackendError. Missing roles are errors too:
    fixtures must be complete.
    """

    def __init__(self, transcripts: dict | None, ledger: CallLedger):
        self._ledger = ledger
        self.wire_calls = 0
        self.calls: list[str] = []
        self._constant: dict[str, str] = {}
        self._queues: dict[str, deque] = {}
        for role, value in (transcripts or {}).items():
            if isinstance(value, list):
                self._queues[role] = deque(str(v) for v in value)
            else:
                self._constant[role] = str(value)

    def complete(self, parts: list[dict], role: str = "generic") -> str:
        if not any("text" in p for p in parts):
            raise ValueError("at least one text part required")
        self.wire_calls += 1
        self.calls.append(role)
        if role in self._queues:
            queue = self._queues[role]
            if not queue:
                raise BackendError(f"mock transcript for role {role!r} exhausted")
            reply = queue.popleft()
        elif role in self._constant:
            reply = self._constant[role]
        else:
            raise BackendError(f"mock transcript has no entry for role {role!r}")
        if reply == "fail":
            raise BackendError(f"mock mllm scripted failure for role {role!r}")
        self._ledger.mllm_calls += 1
        return reply


@dataclass
class BackendSet:
    """The three clients a session talks to, sharing one ledger."""

    editor: LiveEditor | MockEditor
    segmenter: LiveSegmenter | MockSegmenter
    mllm: LiveMllm | MockMllm
    ledger: CallLedger = field(default_factory=CallLedger)


def make_backends(config: BackendConfig, case_id: str = "default") -> BackendSet:
    """Build a fresh client set (and ledger) for one session."""
    config.validate()
    ledger = CallLedger()
    if config.mode == MODE_LIVE:
        return BackendSet(
            editor=LiveEditor(config, ledger),
            segmenter=LiveSegmenter(config, ledger),
            mllm=LiveMllm(config, ledger),
            ledger=ledger,
        )
    script = load_mock_script(config.mock_script_path)
    case = resolve_case_script(script, case_id)
    base_dir = Path(config.mock_script_path).resolve().parent
    return BackendSet(
        editor=MockEditor(case.get("editor"), ledger, base_dir),
        segmenter=MockSegmenter(case.get("segmenter"), ledger),
        mllm=MockMllm(case.get("mllm"), ledger),
        ledger=ledger,
    )
