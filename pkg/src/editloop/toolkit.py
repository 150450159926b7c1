"""The agent-callable tool library behind uniform call/result envelopes.

Geometric tools delegate to geometry/raster; model-backed tools delegate
to the backend clients. Every tool is addressable through the registry by
name, validates its arguments against a declared schema, and reports
failures as typed error results instead of raising — a schema-valid call
never crashes the caller.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import jsonschema
import numpy as np
from PIL import Image

from . import prompts
from .backends import BackendError, BackendSet, image_part, text_part
from .geometry import (
    REL_CANVAS,
    DegenerateBox,
    PixelBox,
    RelBox,
    RelOffset,
    normalize_rel_box,
    offset_clamped,
    pixel_to_rel,
    rel_to_pixel,
)
from .raster import (
    DimMismatch,
    ImageBuffer,
    OutOfBounds,
    ZeroAlpha,
    ZeroMask,
    alpha_composite,
    alpha_trim,
    crop,
    mixed_paste,
    resample_fit,
)

MIN_REL_SIDE = 8.0
MIN_PIXEL_SIDE = 8
SCORE_THRESHOLD = 0.25
REFINE_MAX_CHARS = 200

UNPARSEABLE = "unparseable"


class InvalidImage(ValueError):
    """Tool call is missing a required image slot or carries a non-image."""


class NoInstances(RuntimeError):
    """Segmentation backend found nothing usable."""


@dataclass
class ToolCall:
    tool_name: str
    arguments: dict = field(default_factory=dict)
    images: dict[str, ImageBuffer] = field(default_factory=dict)


@dataclass
class ToolResult:
    status: str
    payload: dict = field(default_factory=dict)
    images: dict[str, ImageBuffer] = field(default_factory=dict)
    error_kind: str | None = None
    error_message: str | None = None

    @classmethod
    def ok(cls, payload: dict | None = None, images: dict | None = None) -> "ToolResult":
        return cls(status="ok", payload=payload or {}, images=images or {})

    @classmethod
    def fail(cls, kind: str, message: str) -> "ToolResult":
        return cls(status="error", error_kind=kind, error_message=message)


@dataclass
class SegmentationResult:
    """Kept instances plus the fused outputs of one segmentation call."""

    boxes: list[tuple[PixelBox, RelBox]]
    scores: list[float]
    cutout: ImageBuffer
    overlay: ImageBuffer
    fused_box: tuple[PixelBox, RelBox]


@dataclass
class FinishVerdict:
    status: str
    is_finished: bool
    reasoning: str

    def to_dict(self) -> dict:
        return {
            "status": self.status,
            "is_finished": self.is_finished,
            "reasoning": self.reasoning,
        }


# Exception type -> error_kind surfaced in ToolResult envelopes.
_DECLARED_ERRORS = {
    DegenerateBox: "DegenerateBox",
    OutOfBounds: "OutOfBounds",
    DimMismatch: "DimMismatch",
    ZeroAlpha: "ZeroAlpha",
    ZeroMask: "ZeroMask",
    InvalidImage: "InvalidImage",
    NoInstances: "NoInstances",
    BackendError: "BackendError",
}

_BOX4 = {"type": "array", "items": {"type": "number"}, "minItems": 4, "maxItems": 4}
_OFFSET2 = {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2}


def _obj(properties: dict, required: list[str]) -> dict:
    return {
        "type": "object",
        "properties": properties,
        "required": required,
        "additionalProperties": False,
    }


TOOL_SPECS: dict[str, dict] = {
    "crop_tool": {
        "arguments": _obj({"box": _BOX4}, ["box"]),
        "images": ["image"],
        "output": _obj({"box": _BOX4}, ["box"]),
        "errors": ["InvalidImage"],
    },
    "croppaste_tool": {
        "arguments": _obj({"box": _BOX4}, ["box"]),
        "images": ["original", "patch"],
        "output": _obj({"mode": {"enum": ["hard", "poisson"]}}, ["mode"]),
        "errors": ["OutOfBounds"],
    },
    "sam3_tool": {
        "arguments": _obj(
            {
                "query": {"type": "string", "minLength": 1},
                "multi_target": {"type": "boolean"},
            },
            ["query"],
        ),
        "images": ["image"],
        "output": _obj(
            {
                "boxes": {"type": "array", "items": _BOX4},
                "rel_boxes": {"type": "array", "items": _BOX4},
                "scores": {"type": "array", "items": {"type": "number"}},
                "fused_box": _BOX4,
                "fused_rel_box": _BOX4,
            },
            ["boxes", "rel_boxes", "scores", "fused_box", "fused_rel_box"],
        ),
        "errors": ["NoInstances", "BackendError"],
    },
    "target_tool": {
        "arguments": _obj({"box": _BOX4, "offset": _OFFSET2}, ["box", "offset"]),
        "images": [],
        "output": _obj({"box": _BOX4}, ["box"]),
        "errors": [],
    },
    "smartpaste_tool": {
        "arguments": _obj({"box": _BOX4}, ["box"]),
        "images": ["cutout", "background"],
        "output": _obj({"box": _BOX4, "placement": _OFFSET2}, ["box", "placement"]),
        "errors": ["ZeroAlpha"],
    },
    "fixprompt_tool": {
        "arguments": _obj({"instruction": {"type": "string", "minLength": 1}}, ["instruction"]),
        "images": ["image"],
        "output": _obj(
            {
                "instruction": {"type": "string", "minLength": 1},
                "was_rewritten": {"type": "boolean"},
            },
            ["instruction", "was_rewritten"],
        ),
        "errors": [],
    },
    "ifinish_tool": {
        "arguments": _obj({"instruction": {"type": "string", "minLength": 1}}, ["instruction"]),
        "images": ["original", "current"],
        "output": _obj(
            {
                "status": {"type": "string"},
                "is_finished": {"type": "boolean"},
                "reasoning": {"type": "string"},
            },
            ["status", "is_finished", "reasoning"],
        ),
        "errors": ["BackendError"],
    },
    "refinement_tool": {
        "arguments": _obj({}, []),
        "images": ["original", "composed"],
        "output": _obj(
            {"prompt": {"type": "string", "maxLength": REFINE_MAX_CHARS}}, ["prompt"]
        ),
        "errors": ["BackendError"],
    },
}

# Envelope-level failures any tool may report besides its declared errors.
ENVELOPE_ERRORS = ["UnknownTool", "SchemaViolation", "InvalidImage"]


def parse_json_reply(reply: str) -> dict | None:
    """Best-effort extraction of a JSON object from a model reply."""
    text = reply.strip()
    try:
        obj = json.loads(text)
        return obj if isinstance(obj, dict) else None
    except json.JSONDecodeError:
        pass
    start, end = text.find("{"), text.rfind("}")
    if 0 <= start < end:
        try:
            obj = json.loads(text[start : end + 1])
            return obj if isinstance(obj, dict) else None
        except json.JSONDecodeError:
            return None
    return None


class Toolkit:
    """Registry-addressable tool set bound to one backend set."""

    def __init__(self, backends: BackendSet):
        self._backends = backends
        self._impls = {
            "crop_tool": self._crop_tool,
            "croppaste_tool": self._croppaste_tool,
            "sam3_tool": self._sam3_tool,
            "target_tool": self._target_tool,
            "smartpaste_tool": self._smartpaste_tool,
            "fixprompt_tool": self._fixprompt_tool,
            "ifinish_tool": self._ifinish_tool,
            "refinement_tool": self._refinement_tool,
        }

    def manifest(self) -> list[dict]:
        """Machine-readable tool catalog for the planner."""
        return [
            {
                "name": name,
                "arguments": spec["arguments"],
                "images": spec["images"],
                "output": spec["output"],
                "errors": spec["errors"] + ENVELOPE_ERRORS,
            }
            for name, spec in TOOL_SPECS.items()
        ]

    def invoke(self, call: ToolCall) -> ToolResult:
        spec = TOOL_SPECS.get(call.tool_name)
        if spec is None:
            return ToolResult.fail("UnknownTool", f"no tool named {call.tool_name!r}")
        try:
            jsonschema.validate(call.arguments, spec["arguments"])
        except jsonschema.ValidationError as exc:
            return ToolResult.fail("SchemaViolation", exc.message)
        for slot in spec["images"]:
            if not isinstance(call.images.get(slot), ImageBuffer):
                return ToolResult.fail(
                    "InvalidImage", f"{call.tool_name} requires image slot {slot!r}"
                )
        try:
            result = self._impls[call.tool_name](call)
        except tuple(_DECLARED_ERRORS) as exc:
            return ToolResult.fail(_DECLARED_ERRORS[type(exc)], str(exc))
        jsonschema.validate(result.payload, spec["output"])  # self-check
        return result

    # -- geometric tools ------------------------------------------------

    def _crop_tool(self, call: ToolCall) -> ToolResult:
        image = call.images["image"]
        x1, y1, x2, y2 = (float(v) for v in call.arguments["box"])
        try:
            box = normalize_rel_box(x1, y1, x2, y2)
        except DegenerateBox:
            box = _expand_degenerate(x1, y1, x2, y2)
        pixel = rel_to_pixel(box, image.dims)
        grown = _grow_pixel_box(pixel, image.dims)
        if grown != pixel:
            pixel = grown
            box = pixel_to_rel(pixel, image.dims)
        patch = crop(image, pixel)
        return ToolResult.ok({"box": box.to_list()}, {"patch": patch})

    def _croppaste_tool(self, call: ToolCall) -> ToolResult:
        original = call.images["original"]
        patch = call.images["patch"]
        box = RelBox.from_list(call.arguments["box"])
        pixel = rel_to_pixel(box, original.dims)
        if (patch.width, patch.height) != (pixel.w, pixel.h):
            patch = ImageBuffer.from_pil(
                patch.to_pil().resize((pixel.w, pixel.h), Image.Resampling.LANCZOS)
            )
        composed, mode = mixed_paste(patch, original, pixel)
        return ToolResult.ok({"mode": mode}, {"composed": composed})

    def _target_tool(self, call: ToolCall) -> ToolResult:
        box = RelBox.from_list(call.arguments["box"])
        offset = RelOffset.from_list(call.arguments["offset"])
        return ToolResult.ok({"box": offset_clamped(box, offset).to_list()})

    def _smartpaste_tool(self, call: ToolCall) -> ToolResult:
        cutout = call.images["cutout"]
        background = call.images["background"]
        dest = RelBox.from_list(call.arguments["box"])
        dest_px = rel_to_pixel(dest, background.dims)
        trimmed, _ = alpha_trim(cutout)
        fitted, (off_x, off_y) = resample_fit(trimmed, dest_px.w, dest_px.h)
        placement = (dest_px.x + off_x, dest_px.y + off_y)
        composed = alpha_composite(fitted, background, placement)
        return ToolResult.ok(
            {"box": dest.to_list(), "placement": list(placement)},
            {"composed": composed},
        )

    # -- model-backed tools ---------------------------------------------

    def _sam3_tool(self, call: ToolCall) -> ToolResult:
        image = call.images["image"]
        result = self.segmentation(
            image, call.arguments["query"], bool(call.arguments.get("multi_target", False))
        )
        return ToolResult.ok(
            {
                "boxes": [px.to_list() for px, _ in result.boxes],
                "rel_boxes": [rel.to_list() for _, rel in result.boxes],
                "scores": result.scores,
                "fused_box": result.fused_box[0].to_list(),
                "fused_rel_box": result.fused_box[1].to_list(),
            },
            {"cutout": result.cutout, "overlay": result.overlay},
        )

    def segmentation(
        self, image: ImageBuffer, query: str, multi_target: bool
    ) -> SegmentationResult:
        """Filter/fuse raw backend instances into the tool's output bundle.

        Single-target keeps the highest-confidence instance; multi-target
        keeps every instance scoring strictly above the threshold and
        OR-fuses their masks. The fused box is the union of kept boxes.
        """
        instances = self._backends.segmenter.segment(image, query)
        if not instances:
            raise NoInstances(f"segmenter found nothing for {query!r}")
        if multi_target:
            kept = [inst for inst in instances if inst.score > SCORE_THRESHOLD]
            if not kept:
                raise NoInstances(
                    f"no instance for {query!r} scored above {SCORE_THRESHOLD}"
                )
        else:
            kept = [max(instances, key=lambda inst: inst.score)]

        fused = np.zeros((image.height, image.width), dtype=bool)
        for inst in kept:
            if (inst.mask.height, inst.mask.width) != fused.shape:
                raise BackendError("instance mask dims differ from image dims")
            fused |= inst.mask.values
        x0 = min(inst.box.x for inst in kept)
        y0 = min(inst.box.y for inst in kept)
        x1 = max(inst.box.x + inst.box.w for inst in kept)
        y1 = max(inst.box.y + inst.box.h for inst in kept)
        fused_px = PixelBox(x0, y0, x1 - x0, y1 - y0)

        cutout_arr = image.pixels.copy()
        cutout_arr[:, :, 3] = np.where(fused, 255, 0)
        overlay = _draw_overlay(image, [inst.box for inst in kept], fused)

        return SegmentationResult(
            boxes=[(inst.box, pixel_to_rel(inst.box, image.dims)) for inst in kept],
            scores=[inst.score for inst in kept],
            cutout=ImageBuffer(cutout_arr),
            overlay=overlay,
            fused_box=(fused_px, pixel_to_rel(fused_px, image.dims)),
        )

    def _fixprompt_tool(self, call: ToolCall) -> ToolResult:
        instruction = call.arguments["instruction"]
        prompt = prompts.FIXPROMPT.format(instruction=instruction)
        try:
            reply = self._backends.mllm.complete(
                [text_part(prompt), image_part(call.images["image"])],
                role="fixprompt",
            )
        except BackendError:
            # zero-crash fallback: execution continues on the original text
            return ToolResult.ok({"instruction": instruction, "was_rewritten": False})
        rewritten = reply.strip()
        if not rewritten or rewritten.upper() == "DIRECT":
            return ToolResult.ok({"instruction": instruction, "was_rewritten": False})
        return ToolResult.ok(
            {"instruction": rewritten, "was_rewritten": rewritten != instruction}
        )

    def _ifinish_tool(self, call: ToolCall) -> ToolResult:
        verdict = self.finish_verdict(
            call.images["original"], call.images["current"], call.arguments["instruction"]
        )
        return ToolResult.ok(verdict.to_dict())

    def finish_verdict(
        self, original: ImageBuffer, current: ImageBuffer, instruction: str
    ) -> FinishVerdict:
        """Ask the verifier whether the core edit landed; parse conservatively."""
        prompt = prompts.IFINISH.format(instruction=instruction)
        reply = self._backends.mllm.complete(
            [
                text_part(prompt),
                image_part(original, "original"),
                image_part(current, "current"),
            ],
            role="ifinish",
        )
        parsed = parse_json_reply(reply)
        if parsed is None or not isinstance(parsed.get("is_finished"), bool):
            return FinishVerdict(status=UNPARSEABLE, is_finished=False, reasoning=UNPARSEABLE)
        return FinishVerdict(
            status=str(parsed.get("status", "ok")),
            is_finished=parsed["is_finished"],
            reasoning=str(parsed.get("reasoning", "")),
        )

    def _refinement_tool(self, call: ToolCall) -> ToolResult:
        reply = self._backends.mllm.complete(
            [
                text_part(prompts.REFINE),
                image_part(call.images["original"], "original"),
                image_part(call.images["composed"], "composed"),
            ],
            role="refine",
        )
        return ToolResult.ok({"prompt": reply[:REFINE_MAX_CHARS]})


def _expand_degenerate(x1: float, y1: float, x2: float, y2: float) -> RelBox:
    """Anti-degeneration: grow a collapsed region about its center."""
    lo_x, hi_x = sorted((min(max(v, 0.0), REL_CANVAS) for v in (x1, x2)))
    lo_y, hi_y = sorted((min(max(v, 0.0), REL_CANVAS) for v in (y1, y2)))
    w = max(hi_x - lo_x, MIN_REL_SIDE)
    h = max(hi_y - lo_y, MIN_REL_SIDE)
    cx = (lo_x + hi_x) / 2.0
    cy = (lo_y + hi_y) / 2.0
    x = max(0.0, min(REL_CANVAS - w, cx - w / 2.0))
    y = max(0.0, min(REL_CANVAS - h, cy - h / 2.0))
    return RelBox(x, y, w, h)


def _grow_pixel_box(box: PixelBox, dims) -> PixelBox:
    """Enforce the minimum patch size in pixels, clipped to the image."""
    w = max(box.w, min(MIN_PIXEL_SIDE, dims.width))
    h = max(box.h, min(MIN_PIXEL_SIDE, dims.height))
    if (w, h) == (box.w, box.h):
        return box
    cx = box.x + box.w / 2.0
    cy = box.y + box.h / 2.0
    x = max(0, min(dims.width - w, int(round(cx - w / 2.0))))
    y = max(0, min(dims.height - h, int(round(cy - h / 2.0))))
    return PixelBox(x, y, w, h)


def _draw_overlay(image: ImageBuffer, boxes: list[PixelBox], fused: np.ndarray) -> ImageBuffer:
    """Visualization: tint the fused mask, outline the kept boxes."""
    arr = image.pixels.copy()
    rgb = arr[:, :, :3].astype(np.int64)
    rgb[fused] = (rgb[fused] + np.array([255, 0, 0])) // 2
    arr[:, :, :3] = rgb.astype(np.uint8)
    green = np.array([0, 255, 0, 255], dtype=np.uint8)
    for box in boxes:
        x1, y1 = box.x + box.w - 1, box.y + box.h - 1
        arr[box.y, box.x : x1 + 1] = green
        arr[y1, box.x : x1 + 1] = green
        arr[box.y : y1 + 1, box.x] = green
        arr[box.y : y1 + 1, x1] = green
    arr[:, :, 3] = image.pixels[:, :, 3]
    return ImageBuffer(arr)
