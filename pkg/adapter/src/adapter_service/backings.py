"""Model backings behind the three endpoints.

A backing is anything honoring these call shapes; model choice is
configuration, not code. Stub backings need no weights and exist so the
wire contract can be exercised end to end on any machine.
"""

from __future__ import annotations

import numpy as np
from PIL import Image


class EditorBacking:
    """Implements edit(image, instruction) -> image."""

    def edit(self, image: Image.Image, instruction: str) -> Image.Image:
        raise NotImplementedError


class SegmenterBacking:
    """Implements segment(image, query) -> [(mask L-mode, box, score)]."""

    def segment(self, image: Image.Image, query: str) -> list[tuple[Image.Image, list[int], float]]:
        raise NotImplementedError


class CompleteBacking:
    """Implements complete(parts) -> text; parts are dicts with text/image."""

    def complete(self, parts: list[dict]) -> str:
        raise NotImplementedError


class StubEditor(EditorBacking):
    """Identity editor: returns the input image unchanged."""

    def edit(self, image: Image.Image, instruction: str) -> Image.Image:
        return image


class StubSegmenter(SegmenterBacking):
    """One full-frame instance at full confidence."""

    def segment(self, image: Image.Image, query: str) -> list[tuple[Image.Image, list[int], float]]:
        width, height = image.size
        mask = Image.fromarray(np.full((height, width), 255, dtype=np.uint8), mode="L")
        return [(mask, [0, 0, width, height], 1.0)]


class StubComplete(CompleteBacking):
    """Echo: concatenated text parts."""

    def complete(self, parts: list[dict]) -> str:
        return "\n".join(p["text"] for p in parts if "text" in p)
