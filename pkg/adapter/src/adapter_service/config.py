"""Adapter configuration."""

from __future__ import annotations

from dataclasses import dataclass

MODE_STUB = "stub"

# Decoded size ceiling for any single image payload.
DEFAULT_MAX_IMAGE_BYTES = 16_000_000


@dataclass
class AdapterConfig:
    host: str = "127.0.0.1"
    port: int = 8080
    mode: str = MODE_STUB
    max_image_bytes: int = DEFAULT_MAX_IMAGE_BYTES
    device: str = "cpu"
    # identifiers for real backings; unused in stub mode
    editor_model: str | None = None
    segmenter_model: str | None = None
    mllm_model: str | None = None
