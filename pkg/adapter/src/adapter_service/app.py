"""The FastAPI application implementing /v1/edit, /v1/segment, /v1/complete.

Error contract: 400 for schema violations and undecodable payloads,
413 for oversized image parts, 502 when the backing model fails, and
500 when the server's own response validation rejects a backing's
output. Model invocations are serialized per backing by a lock (one
queue per device).
"""

from __future__ import annotations

import base64
import binascii
import io
import threading

from fastapi import FastAPI, HTTPException, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from PIL import Image, UnidentifiedImageError
from pydantic import BaseModel, ConfigDict, Field

from .backings import (
    CompleteBacking,
    EditorBacking,
    SegmenterBacking,
    StubComplete,
    StubEditor,
    StubSegmenter,
)
from .config import AdapterConfig


class EditRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")
    image: str = Field(min_length=1)
    instruction: str = Field(min_length=1)


class SegmentRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")
    image: str = Field(min_length=1)
    query: str = Field(min_length=1)


class TextPart(BaseModel):
    model_config = ConfigDict(extra="forbid")
    text: str


class ImagePart(BaseModel):
    model_config = ConfigDict(extra="forbid")
    image: str = Field(min_length=1)
    name: str | None = None


class CompleteRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")
    parts: list[TextPart | ImagePart] = Field(min_length=1)
    deterministic: bool = False


def _decode_image(b64_data: str, limit: int) -> Image.Image:
    try:
        raw = base64.b64decode(b64_data, validate=True)
    except (binascii.Error, ValueError) as exc:
        raise HTTPException(status_code=400, detail=f"bad base64 image: {exc}")
    if len(raw) > limit:
        raise HTTPException(status_code=413, detail="image payload exceeds size limit")
    try:
        with Image.open(io.BytesIO(raw)) as im:
            return im.convert("RGBA")
    except (UnidentifiedImageError, OSError) as exc:
        raise HTTPException(status_code=400, detail=f"not a decodable image: {exc}")


def _encode_image(image: Image.Image) -> str:
    out = io.BytesIO()
    image.save(out, format="PNG")
    return base64.b64encode(out.getvalue()).decode("ascii")


def _encode_mask(mask: Image.Image) -> str:
    out = io.BytesIO()
    mask.convert("L").save(out, format="PNG")
    return base64.b64encode(out.getvalue()).decode("ascii")


def _validate_instances(instances, image: Image.Image) -> None:
    """Reject contract-violating backing output before it reaches a client."""
    width, height = image.size
    for mask, box, score in instances:
        if not (isinstance(score, (int, float)) and 0.0 <= score <= 1.0):
            raise HTTPException(
                status_code=500, detail=f"backing produced score {score!r} outside [0, 1]"
            )
        if len(box) != 4 or any((not isinstance(v, int)) or v < 0 for v in box):
            raise HTTPException(
                status_code=500, detail=f"backing produced malformed box {box!r}"
            )
        if box[0] + box[2] > width or box[1] + box[3] > height:
            raise HTTPException(
                status_code=500, detail=f"backing box {box!r} exceeds image {image.size}"
            )
        if mask.size != image.size:
            raise HTTPException(
                status_code=500, detail="backing mask dims differ from image dims"
            )


def create_app(
    config: AdapterConfig | None = None,
    editor: EditorBacking | None = None,
    segmenter: SegmenterBacking | None = None,
    completer: CompleteBacking | None = None,
) -> FastAPI:
    """Build the service; backings default to stubs (no model weights)."""
    config = config or AdapterConfig()
    editor = editor or StubEditor()
    segmenter = segmenter or StubSegmenter()
    completer = completer or StubComplete()
    locks = {
        "editor": threading.Lock(),
        "segmenter": threading.Lock(),
        "completer": threading.Lock(),
    }

    app = FastAPI(title="editloop adapter", version="1.0")

    @app.exception_handler(RequestValidationError)
    async def schema_violation(request: Request, exc: RequestValidationError):
        return JSONResponse(status_code=400, content={"detail": exc.errors()})

    @app.get("/healthz")
    def healthz():
        return {"status": "ok", "mode": config.mode}

    @app.post("/v1/edit")
    def serve_edit(request: EditRequest):
        image = _decode_image(request.image, config.max_image_bytes)
        try:
            with locks["editor"]:
                edited = editor.edit(image, request.instruction)
        except Exception as exc:
            raise HTTPException(status_code=502, detail=f"editor backing failed: {exc}")
        return {"image": _encode_image(edited)}

    @app.post("/v1/segment")
    def serve_segment(request: SegmentRequest):
        image = _decode_image(request.image, config.max_image_bytes)
        try:
            with locks["segmenter"]:
                instances = segmenter.segment(image, request.query)
        except Exception as exc:
            raise HTTPException(status_code=502, detail=f"segmenter backing failed: {exc}")
        _validate_instances(instances, image)
        return {
            "instances": [
                {"mask": _encode_mask(mask), "box": list(box), "score": float(score)}
                for mask, box, score in instances
            ]
        }

    @app.post("/v1/complete")
    def serve_complete(request: CompleteRequest):
        parts = []
        for part in request.parts:
            if isinstance(part, TextPart):
                parts.append({"text": part.text})
            else:
                image = _decode_image(part.image, config.max_image_bytes)
                parts.append({"image": image, "name": part.name or "image"})
        try:
            with locks["completer"]:
                text = completer.complete(parts)
        except Exception as exc:
            raise HTTPException(status_code=502, detail=f"completion backing failed: {exc}")
        if not isinstance(text, str):
            raise HTTPException(status_code=500, detail="backing produced non-text reply")
        return {"text": text}

    return app
