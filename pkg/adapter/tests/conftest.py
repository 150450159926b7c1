"""Shared fixtures: test client, schema validation, payload helpers."""

from __future__ import annotations

import base64
import io
import json
from pathlib import Path

import jsonschema
import numpy as np
import pytest
from fastapi.testclient import TestClient
from PIL import Image

from adapter_service.app import create_app
from adapter_service.config import AdapterConfig

SCHEMA_PATH = Path(__file__).resolve().parents[2] / "schemas" / "wire_v1.json"
SCHEMA = json.loads(SCHEMA_PATH.read_text())


def validate_wire(kind: str, body: dict) -> None:
    jsonschema.validate(
        body, {"$ref": f"#/definitions/{kind}", "definitions": SCHEMA["definitions"]}
    )


def png_b64(width: int = 16, height: int = 12, seed: int = 0) -> str:
    rng = np.random.default_rng(seed)
    arr = rng.integers(0, 256, size=(height, width, 4), dtype=np.uint8)
    arr[:, :, 3] = 255
    out = io.BytesIO()
    Image.fromarray(arr, mode="RGBA").save(out, format="PNG")
    return base64.b64encode(out.getvalue()).decode("ascii")


@pytest.fixture
def client() -> TestClient:
    return TestClient(create_app(AdapterConfig()))


@pytest.fixture
def small_limit_client() -> TestClient:
    return TestClient(create_app(AdapterConfig(max_image_bytes=64)))
