"""Wire-protocol contract: bodies the clients emit/accept match the schema.

The same schema file (schemas/wire_v1.json) is the contract any live
adapter service must satisfy; set EDITLOOP_CONTRACT_URL to point these
checks at a running server.
"""

import json
import os
from pathlib import Path

import httpx
import jsonschema
import pytest

from editloop.backends import (
    BackendConfig,
    CallLedger,
    LiveEditor,
    LiveMllm,
    LiveSegmenter,
    MODE_LIVE,
    image_to_b64,
    mask_to_b64,
    text_part,
    image_part,
)
from editloop.raster import Mask

import numpy as np

from conftest import random_image

SCHEMA_PATH = Path(__file__).resolve().parents[1] / "schemas" / "wire_v1.json"
SCHEMA = json.loads(SCHEMA_PATH.read_text())


def validate_wire(kind: str, body: dict) -> None:
    jsonschema.validate(
        body, {"$ref": f"#/definitions/{kind}", "definitions": SCHEMA["definitions"]}
    )


def _config() -> BackendConfig:
    url = "http://svc.test"
    return BackendConfig(
        mode=MODE_LIVE, editor_url=url, segmenter_url=url, mllm_url=url, retry_limit=0
    )


@pytest.fixture
def image():
    return random_image(16, 12, seed=90)


class TestRequestBodies:
    def test_edit_request_validates(self, image):
        captured = {}

        def handler(request):
            captured.update(json.loads(request.content))
            return httpx.Response(200, json={"image": image_to_b64(image)})

        LiveEditor(_config(), CallLedger(), transport=httpx.MockTransport(handler)).edit(
            image, "brighten"
        )
        validate_wire("edit_request", captured)

    def test_segment_request_validates(self, image):
        captured = {}
        mask = Mask(np.ones((image.height, image.width)))

        def handler(request):
            captured.update(json.loads(request.content))
            return httpx.Response(
                200,
                json={"instances": [{"mask": mask_to_b64(mask), "box": [0, 0, 2, 2], "score": 1.0}]},
            )

        LiveSegmenter(
            _config(), CallLedger(), transport=httpx.MockTransport(handler)
        ).segment(image, "everything")
        validate_wire("segment_request", captured)

    def test_complete_request_validates(self, image):
        captured = {}

        def handler(request):
            captured.update(json.loads(request.content))
            return httpx.Response(200, json={"text": "ok"})

        LiveMllm(_config(), CallLedger(), transport=httpx.MockTransport(handler)).complete(
            [text_part("hello"), image_part(image, "scene")], role="profile"
        )
        validate_wire("complete_request", captured)


class TestResponseBodies:
    def test_clients_accept_schema_valid_responses(self, image):
        edit_body = {"image": image_to_b64(image)}
        validate_wire("edit_response", edit_body)
        seg_body = {
            "instances": [
                {
                    "mask": mask_to_b64(Mask(np.ones((image.height, image.width)))),
                    "box": [0, 0, image.width, image.height],
                    "score": 0.75,
                }
            ]
        }
        validate_wire("segment_response", seg_body)
        complete_body = {"text": "A"}
        validate_wire("complete_response", complete_body)

        def edit_handler(request):
            return httpx.Response(200, json=edit_body)

        def seg_handler(request):
            return httpx.Response(200, json=seg_body)

        def complete_handler(request):
            return httpx.Response(200, json=complete_body)

        out = LiveEditor(
            _config(), CallLedger(), transport=httpx.MockTransport(edit_handler)
        ).edit(image, "x")
        assert out == image
        instances = LiveSegmenter(
            _config(), CallLedger(), transport=httpx.MockTransport(seg_handler)
        ).segment(image, "x")
        assert instances[0].score == 0.75
        reply = LiveMllm(
            _config(), CallLedger(), transport=httpx.MockTransport(complete_handler)
        ).complete([text_part("x")], role="router")
        assert reply == "A"

    def test_schema_rejects_out_of_range_score(self, image):
        bad = {
            "instances": [
                {
                    "mask": mask_to_b64(Mask(np.ones((2, 2)))),
                    "box": [0, 0, 1, 1],
                    "score": 1.3,
                }
            ]
        }
        with pytest.raises(jsonschema.ValidationError):
            validate_wire("segment_response", bad)

    def test_schema_rejects_missing_fields(self):
        with pytest.raises(jsonschema.ValidationError):
            validate_wire("edit_response", {})
        with pytest.raises(jsonschema.ValidationError):
            validate_wire("complete_request", {"parts": []})


@pytest.mark.skipif(
    not os.environ.get("EDITLOOP_CONTRACT_URL"),
    reason="EDITLOOP_CONTRACT_URL not set; live contract checks skipped",
)
class TestLiveServer:
    """Run the full client round trip against a conforming /v1 server."""

    def _live_config(self) -> BackendConfig:
        url = os.environ["EDITLOOP_CONTRACT_URL"].rstrip("/")
        return BackendConfig(
            mode=MODE_LIVE, editor_url=url, segmenter_url=url, mllm_url=url
        )

    def test_edit_round_trip(self, image):
        ledger = CallLedger()
        out = LiveEditor(self._live_config(), ledger).edit(image, "no-op please")
        assert (out.width, out.height) == (image.width, image.height)
        assert ledger.editor_calls == 1

    def test_segment_round_trip(self, image):
        instances = LiveSegmenter(self._live_config(), CallLedger()).segment(image, "all")
        for inst in instances:
            assert 0.0 <= inst.score <= 1.0

    def test_complete_round_trip(self, image):
        reply = LiveMllm(self._live_config(), CallLedger()).complete(
            [text_part("echo this")], role="probe"
        )
        assert isinstance(reply, str)
