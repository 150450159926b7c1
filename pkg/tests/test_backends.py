"""Backend clients: mock determinism, ledger accounting, live wire handling."""

import json

import httpx
import pytest

from editloop.backends import (
    BackendConfig,
    BackendError,
    CallLedger,
    LiveEditor,
    LiveMllm,
    LiveSegmenter,
    MODE_LIVE,
    image_from_b64,
    image_part,
    image_to_b64,
    make_backends,
    mask_from_b64,
    mask_to_b64,
    text_part,
)
from editloop.raster import Mask

import numpy as np

from conftest import random_image


class TestCodecs:
    def test_image_b64_round_trip(self, rgb_image):
        assert image_from_b64(image_to_b64(rgb_image)) == rgb_image

    def test_mask_b64_round_trip(self):
        mask = Mask(np.eye(5))
        back = mask_from_b64(mask_to_b64(mask))
        assert np.array_equal(back.values, mask.values)

    def test_bad_image_payload(self):
        with pytest.raises(BackendError):
            image_from_b64("not base64!!!")
        with pytest.raises(BackendError):
            image_from_b64("aGVsbG8=")  # valid base64, not a PNG


class TestMockEditor:
    def test_echo_returns_input_and_counts(self, mock_config, rgb_image):
        backends = make_backends(mock_config({"default": {"editor": "echo", "mllm": {}}}))
        out = backends.editor.edit(rgb_image, "anything")
        assert out == rgb_image
        assert backends.ledger.editor_calls == 1

    def test_invert_is_deterministic(self, mock_config, rgb_image):
        config = mock_config({"default": {"editor": "invert", "mllm": {}}})
        a = make_backends(config).editor.edit(rgb_image, "x")
        b = make_backends(config).editor.edit(rgb_image, "x")
        assert a == b
        assert a != rgb_image

    def test_scripted_png_output(self, tmp_path, rgb_image):
        from editloop.pngio import save_image

        canned = random_image(8, 8, seed=77)
        save_image(canned, tmp_path / "canned.png")
        script = {"default": {"editor": {"path": "canned.png"}, "mllm": {}}}
        (tmp_path / "script.json").write_text(json.dumps(script))
        config = BackendConfig(mode="mock", mock_script_path=str(tmp_path / "script.json"))
        out = make_backends(config).editor.edit(rgb_image, "x")
        assert out == canned

    def test_list_spec_consumed_in_order_then_exhausts(self, mock_config, rgb_image):
        backends = make_backends(
            mock_config({"default": {"editor": ["echo", "invert"], "mllm": {}}})
        )
        first = backends.editor.edit(rgb_image, "x")
        second = backends.editor.edit(rgb_image, "x")
        assert first == rgb_image and second != rgb_image
        with pytest.raises(BackendError):
            backends.editor.edit(rgb_image, "x")
        assert backends.ledger.editor_calls == 2
        assert backends.editor.wire_calls == 3

    def test_empty_instruction_rejected(self, mock_config, rgb_image):
        backends = make_backends(mock_config({"default": {"mllm": {}}}))
        with pytest.raises(ValueError):
            backends.editor.edit(rgb_image, "")


class TestMockSegmenter:
    def test_passthrough_instances(self, mock_config, rgb_image):
        spec = [
            {"box": [1, 2, 3, 4], "score": 0.9},
            {"box": [5, 5, 10, 10], "score": 0.3},
            {"box": [0, 0, 2, 2], "score": 0.1},
        ]
        backends = make_backends(mock_config({"default": {"segmenter": spec, "mllm": {}}}))
        instances = backends.segmenter.segment(rgb_image, "things")
        assert [round(i.score, 2) for i in instances] == [0.9, 0.3, 0.1]
        assert instances[0].box.to_list() == [1, 2, 3, 4]
        assert instances[0].mask.values[2, 1] and not instances[0].mask.values[0, 0]
        assert backends.ledger.segmenter_calls == 1

    def test_empty_fixture_gives_empty_list(self, mock_config, rgb_image):
        backends = make_backends(mock_config({"default": {"segmenter": [], "mllm": {}}}))
        assert backends.segmenter.segment(rgb_image, "things") == []
        assert backends.ledger.segmenter_calls == 1


class TestMockMllm:
    def test_case_keyed_transcript(self, mock_config, rgb_image):
        script = {
            "default": {"mllm": {"router": "A"}},
            "cases": {"7": {"mllm": {"router": "C"}}},
        }
        config = mock_config(script)
        default_set = make_backends(config)
        case_set = make_backends(config, case_id="7")
        parts = [text_part("pick a route")]
        assert default_set.mllm.complete(parts, role="router") == "A"
        assert case_set.mllm.complete(parts, role="router") == "C"

    def test_missing_key_is_backend_error(self, mock_config):
        backends = make_backends(mock_config({"default": {"mllm": {}}}))
        with pytest.raises(BackendError):
            backends.mllm.complete([text_part("x")], role="router")

    def test_list_transcript_consumed_in_order(self, mock_config):
        backends = make_backends(
            mock_config({"default": {"mllm": {"ifinish": ["no", "yes"]}}})
        )
        parts = [text_part("done?")]
        assert backends.mllm.complete(parts, role="ifinish") == "no"
        assert backends.mllm.complete(parts, role="ifinish") == "yes"
        with pytest.raises(BackendError):
            backends.mllm.complete(parts, role="ifinish")

    def test_ledger_counts_only_successes(self, mock_config):
        backends = make_backends(mock_config({"default": {"mllm": {"router": "B"}}}))
        backends.mllm.complete([text_part("x")], role="router")
        with pytest.raises(BackendError):
            backends.mllm.complete([text_part("x")], role="missing")
        assert backends.ledger.mllm_calls == 1
        assert backends.mllm.wire_calls == 2
        assert backends.mllm.calls == ["router", "missing"]

    def test_requires_text_part(self, mock_config, rgb_image):
        backends = make_backends(mock_config({"default": {"mllm": {"r": "x"}}}))
        with pytest.raises(ValueError):
            backends.mllm.complete([image_part(rgb_image)], role="r")


class TestBackendConfig:
    def test_live_requires_urls(self):
        with pytest.raises(ValueError, match="live mode requires URLs"):
            BackendConfig(mode=MODE_LIVE).validate()

    def test_mock_requires_script(self):
        with pytest.raises(ValueError, match="mock_script_path"):
            BackendConfig(mode="mock").validate()

    def test_unknown_mode(self):
        with pytest.raises(ValueError, match="unknown backend mode"):
            BackendConfig(mode="cloud").validate()

    def test_from_dict_rejects_unknown_keys(self):
        with pytest.raises(ValueError, match="unknown backend config keys"):
            BackendConfig.from_dict({"editor_ur": "typo"})


def _live_config(**kwargs) -> BackendConfig:
    url = "http://backend.test"
    return BackendConfig(
        mode=MODE_LIVE, editor_url=url, segmenter_url=url, mllm_url=url,
        retry_limit=2, **kwargs,
    )


class TestLiveClients:
    def test_edit_round_trip_and_auth_header(self, rgb_image):
        seen = {}

        def handler(request: httpx.Request) -> httpx.Response:
            seen["path"] = request.url.path
            seen["auth"] = request.headers.get("authorization")
            body = json.loads(request.content)
            seen["body_keys"] = sorted(body)
            return httpx.Response(200, json={"image": body["image"]})

        ledger = CallLedger()
        editor = LiveEditor(
            _live_config(auth_token="sekrit"), ledger, transport=httpx.MockTransport(handler)
        )
        out = editor.edit(rgb_image, "brighten")
        assert out == rgb_image
        assert seen == {
            "path": "/v1/edit",
            "auth": "Bearer sekrit",
            "body_keys": ["image", "instruction"],
        }
        assert ledger.editor_calls == 1

    def test_retries_then_succeeds_counts_once(self, rgb_image):
        attempts = {"n": 0}

        def handler(request: httpx.Request) -> httpx.Response:
            attempts["n"] += 1
            if attempts["n"] < 3:
                return httpx.Response(503, text="busy")
            return httpx.Response(200, json={"image": image_to_b64(rgb_image)})

        ledger = CallLedger()
        editor = LiveEditor(_live_config(), ledger, transport=httpx.MockTransport(handler))
        editor.edit(rgb_image, "x")
        assert attempts["n"] == 3
        assert ledger.editor_calls == 1

    def test_exhausted_retries_propagate(self, rgb_image):
        def handler(request: httpx.Request) -> httpx.Response:
            return httpx.Response(502, text="down")

        ledger = CallLedger()
        editor = LiveEditor(_live_config(), ledger, transport=httpx.MockTransport(handler))
        with pytest.raises(BackendError, match="after 3 attempts"):
            editor.edit(rgb_image, "x")
        assert ledger.editor_calls == 0

    def test_malformed_segment_reply(self, rgb_image):
        def handler(request: httpx.Request) -> httpx.Response:
            return httpx.Response(200, json={"instances": [{"box": [0, 0, 1, 1]}]})

        segmenter = LiveSegmenter(
            _live_config(), CallLedger(), transport=httpx.MockTransport(handler)
        )
        with pytest.raises(BackendError, match="malformed segment response"):
            segmenter.segment(rgb_image, "dog")

    def test_segment_decodes_instances(self, rgb_image):
        mask = Mask(np.ones((rgb_image.height, rgb_image.width)))

        def handler(request: httpx.Request) -> httpx.Response:
            return httpx.Response(
                200,
                json={
                    "instances": [
                        {"mask": mask_to_b64(mask), "box": [0, 0, 4, 4], "score": 0.5}
                    ]
                },
            )

        ledger = CallLedger()
        segmenter = LiveSegmenter(
            _live_config(), ledger, transport=httpx.MockTransport(handler)
        )
        instances = segmenter.segment(rgb_image, "dog")
        assert len(instances) == 1 and instances[0].score == 0.5
        assert ledger.segmenter_calls == 1

    def test_complete_sends_parts_and_deterministic_flag(self, rgb_image):
        captured = {}

        def handler(request: httpx.Request) -> httpx.Response:
            captured.update(json.loads(request.content))
            return httpx.Response(200, json={"text": "C"})

        mllm = LiveMllm(_live_config(), CallLedger(), transport=httpx.MockTransport(handler))
        reply = mllm.complete(
            [text_part("route?"), image_part(rgb_image, "scene")], role="router"
        )
        assert reply == "C"
        assert captured["deterministic"] is True
        assert captured["parts"][0] == {"text": "route?"}
        assert captured["parts"][1]["name"] == "scene"

    def test_4xx_is_not_retried(self, rgb_image):
        attempts = {"n": 0}

        def handler(request: httpx.Request) -> httpx.Response:
            attempts["n"] += 1
            return httpx.Response(400, text="bad request")

        editor = LiveEditor(
            _live_config(), CallLedger(), transport=httpx.MockTransport(handler)
        )
        with pytest.raises(BackendError, match="400"):
            editor.edit(rgb_image, "x")
        assert attempts["n"] == 1
