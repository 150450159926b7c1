"""Shared fixtures: deterministic images and mock-script plumbing."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest

from editloop.backends import BackendConfig
from editloop.raster import ImageBuffer


def random_image(width: int, height: int, seed: int = 0, opaque: bool = True) -> ImageBuffer:
    rng = np.random.default_rng(seed)
    arr = rng.integers(0, 256, size=(height, width, 4), dtype=np.uint8)
    if opaque:
        arr[:, :, 3] = 255
    return ImageBuffer(arr)


def write_mock_script(path: Path, script: dict) -> BackendConfig:
    path.write_text(json.dumps(script), encoding="utf-8")
    return BackendConfig(mode="mock", mock_script_path=str(path))


def full_profile(**overrides) -> str:
    profile = {
        "target": "object",
        "constraint": "none",
        "scope": "scene_level",
        "scene_context": "a scene",
        "small_target": False,
        "multi_target": False,
    }
    profile.update(overrides)
    return json.dumps(profile)


def verdict(finished: bool, reasoning: str = "checked") -> str:
    return json.dumps({"status": "done", "is_finished": finished, "reasoning": reasoning})


@pytest.fixture
def rgb_image() -> ImageBuffer:
    return random_image(64, 48, seed=1)


@pytest.fixture
def mock_config(tmp_path):
    """Factory fixture: write a script dict, get a mock BackendConfig."""

    def _factory(script: dict, name: str = "script.json") -> BackendConfig:
        return write_mock_script(tmp_path / name, script)

    return _factory
