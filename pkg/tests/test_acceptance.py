"""Acceptance suite: one test per criterion, with its stated tolerance.

Run with `pytest tests/test_acceptance.py -v -s` to see one line per
criterion. Everything here runs on mock backends only.
"""

import random
import time
from pathlib import Path

import numpy as np
import pytest

from editloop.backends import make_backends
from editloop.geometry import PixelBox, RelBox, RelOffset, offset_clamped
from editloop.harness import CaseSet, ablation_sweep, grid_configs, pilot_compare, run_batch
from editloop.planner import (
    ActionKind,
    EditRequest,
    Engine,
    EngineConfig,
    ExecutionState,
    RouteStrategy,
    _successors,
)
from editloop.raster import ImageBuffer, Mask, crop, hard_paste, poisson_blend
from editloop.toolkit import SCORE_THRESHOLD, ToolCall, Toolkit
from editloop.trace import read_documents

from conftest import random_image, write_mock_script
from fixture_sets import build_mixed_case_set, build_pilot_case_set, expected_pilot_cells
from oracles import (
    clamp_formula,
    fuse_masks_bruteforce,
    poisson_dense_solve,
    union_box_bruteforce,
)
from test_planner import replay_allowed_check


def _report(name: str, elapsed: float | None = None) -> None:
    suffix = f" ({elapsed:.2f}s)" if elapsed is not None else ""
    print(f"\nACCEPTANCE {name}: PASS{suffix}")


@pytest.fixture(scope="module")
def mixed_fixture(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance_mixed")
    case_dir, backend_config, expectations = build_mixed_case_set(root)
    return CaseSet.load(case_dir), backend_config, expectations


def test_geometry_clamp_oracle():
    """10k random (box, offset) pairs match the hand formula; < 1 s."""
    rng = random.Random(12345)
    started = time.perf_counter()
    for _ in range(10_000):
        w = rng.uniform(0.001, 1000.0)
        h = rng.uniform(0.001, 1000.0)
        x = rng.uniform(0.0, 1000.0 - w)
        y = rng.uniform(0.0, 1000.0 - h)
        dx = rng.uniform(-1000.0, 1000.0)
        dy = rng.uniform(-1000.0, 1000.0)
        box = RelBox(x, y, w, h)
        moved = offset_clamped(box, RelOffset(dx, dy))
        expected = clamp_formula(x, y, w, h, dx, dy)
        assert (moved.x, moved.y, moved.w, moved.h) == expected
        # constructing RelBox re-checks every invariant; do it explicitly
        RelBox(moved.x, moved.y, moved.w, moved.h)
    elapsed = time.perf_counter() - started
    assert elapsed < 1.0, f"clamp oracle took {elapsed:.2f}s (budget 1s)"
    _report("geometry-clamp-oracle", elapsed)


def test_crop_paste_round_trip():
    """200 random images/boxes: crop -> hard_paste is bit-exact; < 5 s."""
    rng = np.random.default_rng(777)
    started = time.perf_counter()
    for trial in range(200):
        width = int(rng.integers(2, 96))
        height = int(rng.integers(2, 96))
        arr = rng.integers(0, 256, size=(height, width, 4), dtype=np.uint8)
        image = ImageBuffer(arr)
        x = int(rng.integers(0, width))
        y = int(rng.integers(0, height))
        w = int(rng.integers(1, width - x + 1))
        h = int(rng.integers(1, height - y + 1))
        box = PixelBox(x, y, w, h)
        assert hard_paste(crop(image, box), image, box) == image, f"trial {trial}"
    elapsed = time.perf_counter() - started
    assert elapsed < 5.0, f"round trip took {elapsed:.2f}s (budget 5s)"
    _report("crop-paste-round-trip", elapsed)


def test_poisson_correctness():
    """50 random 16x16 interior patches vs dense solve within 1 level; < 30 s."""
    rng = np.random.default_rng(4242)
    started = time.perf_counter()
    box = PixelBox(2, 2, 16, 16)
    for trial in range(50):
        bg_arr = rng.integers(0, 256, size=(20, 20, 4), dtype=np.uint8)
        bg_arr[:, :, 3] = 255
        bg = ImageBuffer(bg_arr)
        identity_case = trial % 5 == 0
        if identity_case:
            patch = crop(bg, box)
        else:
            patch_arr = rng.integers(0, 256, size=(16, 16, 4), dtype=np.uint8)
            patch_arr[:, :, 3] = 255
            patch = ImageBuffer(patch_arr)
        mode = trial % 3
        if mode == 0:
            mask = Mask.full(16, 16)
        elif mode == 1:
            mask = Mask.full_eroded(16, 16)
        else:
            values = np.zeros((16, 16), dtype=bool)
            mx, my = rng.integers(0, 8, size=2)
            values[my : my + int(rng.integers(3, 9)), mx : mx + int(rng.integers(3, 9))] = True
            mask = Mask(values)
        ours = poisson_blend(patch, bg, box, mask)
        reference = poisson_dense_solve(patch, bg, box, mask)
        gap = np.abs(ours.pixels.astype(int) - reference.pixels.astype(int)).max()
        assert gap <= 1, f"trial {trial}: GS vs dense gap {gap}"
        if identity_case:
            drift = np.abs(ours.pixels.astype(int) - bg.pixels.astype(int)).max()
            assert drift <= 1, f"trial {trial}: identity drift {drift}"
    elapsed = time.perf_counter() - started
    assert elapsed < 30.0, f"poisson suite took {elapsed:.2f}s (budget 30s)"
    _report("poisson-correctness", elapsed)


def test_fusion_oracle(tmp_path):
    """Multi-target fusion equals brute force; threshold 0.25 is strict."""
    image = random_image(40, 32, seed=31337)
    instances = [
        {"box": [2, 3, 10, 8], "score": 0.9},
        {"box": [20, 10, 12, 12], "score": 0.26},
        {"box": [5, 20, 6, 6], "score": SCORE_THRESHOLD},        # excluded: not > 0.25
        {"box": [30, 2, 8, 20], "score": SCORE_THRESHOLD + 1e-9},  # included
        {"box": [0, 0, 4, 4], "score": 0.05},
    ]
    config = write_mock_script(
        tmp_path / "fusion.json", {"default": {"mllm": {}, "segmenter": instances}}
    )
    toolkit = Toolkit(make_backends(config))
    result = toolkit.invoke(
        ToolCall("sam3_tool", {"query": "all targets", "multi_target": True},
                 {"image": image})
    )
    assert result.status == "ok"
    kept = [PixelBox.from_list(b) for b in result.payload["boxes"]]
    expected_kept = [instances[0], instances[1], instances[3]]
    assert [b.to_list() for b in kept] == [spec["box"] for spec in expected_kept]
    assert result.payload["fused_box"] == union_box_bruteforce(kept).to_list()
    masks = []
    for spec in expected_kept:
        values = np.zeros((image.height, image.width), dtype=bool)
        x, y, w, h = spec["box"]
        values[y : y + h, x : x + w] = True
        masks.append(values)
    fused = fuse_masks_bruteforce(masks)
    assert np.array_equal(result.images["cutout"].pixels[:, :, 3] > 0, fused)
    _report("fusion-oracle")


def test_state_machine_conformance(mixed_fixture, tmp_path):
    """30-case set: actions in allowed sets, budget held, traces byte-stable; < 10 s."""
    cases, backend_config, _ = mixed_fixture
    started = time.perf_counter()
    payloads = []
    for run_dir in ("one", "two"):
        trace_dir = tmp_path / run_dir
        report = run_batch(cases, EngineConfig(), "atr", backend_config,
                           trace_dir=trace_dir)
        assert all(r.error is None for r in report.per_case)
        payload = {}
        for row in report.per_case:
            payload[row.case_id] = Path(row.trace_path).read_bytes()
        payloads.append(payload)
    assert payloads[0] == payloads[1], "traces are not byte-identical across runs"

    from editloop.trace import SessionTrace

    for case_id, raw in payloads[0].items():
        path = tmp_path / "one" / f"{case_id}.atr.trace.jsonl"
        docs = read_documents(path)
        steps = [d for d in docs if d.get("type") == "step"]
        assert len(steps) <= 12, f"{case_id}: {len(steps)} steps exceeds budget"
        trace = SessionTrace(header=docs[0], body=docs[1:])
        replay_allowed_check(trace)
    elapsed = time.perf_counter() - started
    assert elapsed < 10.0, f"conformance suite took {elapsed:.2f}s (budget 10s)"
    _report("state-machine-conformance", elapsed)


def test_call_accounting(mixed_fixture, tmp_path):
    """Mean editor calls: direct 1.0, Bo2 2.0, ATR within [1, 2]; fallback +1."""
    cases, backend_config, expectations = mixed_fixture
    direct = run_batch(cases, EngineConfig(), "direct", backend_config)
    assert direct.aggregates()["mean_editor_calls"] == 1.0
    bo2 = run_batch(cases, EngineConfig(), "bo2", backend_config)
    assert bo2.aggregates()["mean_editor_calls"] == 2.0
    atr = run_batch(cases, EngineConfig(), "atr", backend_config,
                    trace_dir=tmp_path / "traces")
    mean = atr.aggregates()["mean_editor_calls"]
    assert 1.0 <= mean <= 2.0, f"ATR mean editor calls {mean} outside [1, 2]"

    fallback_rows = [r for r in atr.per_case if r.fallback]
    expected_fallbacks = {cid for cid, e in expectations.items() if e["fallback"]}
    assert {r.case_id for r in fallback_rows} == expected_fallbacks
    for row in fallback_rows:
        docs = read_documents(row.trace_path)
        steps = [d for d in docs if d.get("type") == "step"]
        fallback_docs = [d for d in docs if d.get("type") == "fallback"]
        assert docs[0]["fallback"] is True
        assert len(fallback_docs) == 1
        before = steps[-1]["ledger"]["editor_calls"]
        after = fallback_docs[0]["ledger"]["editor_calls"]
        assert after == before + 1, f"{row.case_id}: fallback added {after - before} calls"
    _report("call-accounting")


def test_ablation_structure(mixed_fixture, tmp_path):
    """Config a: only edit actions. If-finish: verify records. Oracle: exact."""
    cases, backend_config, expectations = mixed_fixture

    configs = grid_configs("routing", EngineConfig(), labels=["a", "e", "f", "g"])
    reports = {
        report.label: report
        for report in ablation_sweep(cases, configs, backend_config,
                                     trace_dir=tmp_path / "sweep")
    }

    for row in reports["a"].per_case:
        actions = [d["action"] for d in read_documents(row.trace_path)
                   if d.get("type") == "step"]
        assert actions == ["edit"], f"config a {row.case_id}: {actions}"

    clean_cases = {cid for cid, e in expectations.items()
                   if not e.get("injected_failure")}
    for label, must_have_verify in (("e", False), ("f", True)):
        for row in reports[label].per_case:
            if row.case_id not in clean_cases:
                continue
            actions = [d["action"] for d in read_documents(row.trace_path)
                       if d.get("type") == "step"]
            has_verify = "verify" in actions
            assert has_verify == must_have_verify, (
                f"config {label} {row.case_id}: verify={has_verify}"
            )

    oracle = reports["g"]
    for row, case in zip(oracle.per_case, cases.cases):
        assert row.route == case.oracle_route.value, row.case_id

    # an oracle session never spends MLLM calls on profiling or routing
    engine = Engine(make_backends(backend_config, case_id="a01"))
    request = EditRequest(image=random_image(32, 24, seed=5), instruction="x")
    engine.run_session(request, EngineConfig(oracle_route=RouteStrategy.A_DIRECT))
    assert not {"profile", "router"} & set(engine._backends.mllm.calls)
    _report("ablation-structure")


def test_pilot_table_shape(tmp_path):
    """Pilot cells equal hand-averaged scripted judge scores."""
    case_dir, backend_config = build_pilot_case_set(tmp_path)
    cases = CaseSet.load(case_dir)
    report = pilot_compare(cases, EngineConfig(), backend_config,
                           trace_dir=tmp_path / "traces")
    cells = report.category_means()
    expected = expected_pilot_cells()
    assert set(cells) == set(expected)
    for key, value in expected.items():
        assert cells[key] == pytest.approx(value, rel=1e-12), key
    _report("pilot-table-shape")


def test_graph_successors_cover_all_routes():
    """Sanity net under the conformance criterion: every route graph terminates."""
    for route in RouteStrategy:
        state = ExecutionState(
            current_image=random_image(4, 4, seed=1),
            current_instruction="x",
            strategy=route,
        )
        seen = []
        for _ in range(16):
            allowed = _successors(state, True)
            if not allowed:
                break
            kind = allowed[0]
            seen.append(kind)
            from test_planner import _record

            state.history.append(_record(kind))
            if kind is ActionKind.VERIFY:
                state.scratch["last_verdict"] = {"is_finished": True}
            if kind is ActionKind.TERMINATE:
                break
        assert seen[-1] is ActionKind.TERMINATE, f"{route}: {seen}"
