"""Batch evaluation: strategy comparison, ablation sweeps, reporting.

A case set is a directory with one sub-directory per case holding
image.png plus case.json ({"instruction": ..., "oracle_route"?: ...,
"category"?: ...}). Batches run each case in a fresh session (its own
mock transcript and ledger), record per-case results, and aggregate.
"""

from __future__ import annotations

import json
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

from .backends import BackendConfig, BackendError, make_backends, image_part, text_part
from .planner import (
    EditRequest,
    Engine,
    EngineConfig,
    RouteStrategy,
    SessionFailed,
    parse_route_token,
)
from .pngio import load_image
from .trace import read_documents
from . import prompts

STRATEGY_ATR = "atr"
STRATEGY_DIRECT = "direct"
STRATEGY_BO2 = "bo2"

# The four pilot strategies compared per labeled case.
PILOT_STRATEGIES: list[tuple[str, RouteStrategy | None]] = [
    ("direct", None),
    ("rewrite", RouteStrategy.A_REWRITE),
    ("spatial", RouteStrategy.B_SPATIAL),
    ("local", RouteStrategy.C_LOCAL),
]

# Ablation grids. Entries are EngineConfig overrides; "oracle_from_case"
# is a harness-level flag that injects each case's labeled route.
ROUTING_GRID: dict[str, dict] = {
    "a": dict(enable_router=False, enable_mdp=False, enable_fallback=False, enable_ifinish=False),
    "b": dict(enable_router=True, enable_mdp=False, enable_fallback=False, enable_ifinish=False),
    "c": dict(enable_router=False, oracle_from_case=True, enable_mdp=False, enable_fallback=False, enable_ifinish=False),
    "d": dict(enable_router=True, enable_mdp=True, enable_fallback=False, enable_ifinish=False),
    "e": dict(enable_router=True, enable_mdp=True, enable_fallback=True, enable_ifinish=False),
    "f": dict(enable_router=True, enable_mdp=True, enable_fallback=True, enable_ifinish=True),
    "g": dict(enable_router=False, oracle_from_case=True, enable_mdp=True, enable_fallback=True, enable_ifinish=True),
}

REFORM_GRID: dict[str, dict] = {
    "a": dict(enable_rewrite=False, enable_spatial=False, enable_local=False, enable_context=False),
    "b": dict(enable_rewrite=True, enable_spatial=False, enable_local=False, enable_context=False),
    "c": dict(enable_rewrite=True, enable_spatial=True, enable_local=False, enable_context=False),
    "d": dict(enable_rewrite=True, enable_spatial=True, enable_local=True, enable_context=False),
    "e": dict(enable_rewrite=True, enable_spatial=True, enable_local=True, enable_context=True),
}


class CaseSetError(ValueError):
    """Case-set directory cannot be loaded."""


class MissingLabel(ValueError):
    """Pilot comparison requires every case to carry a category label."""


@dataclass
class Case:
    id: str
    image_path: Path
    instruction: str
    oracle_route: RouteStrategy | None = None
    category: str | None = None


@dataclass
class CaseSet:
    root: Path
    cases: list[Case]

    @classmethod
    def load(cls, path: str | Path) -> "CaseSet":
        root = Path(path)
        if not root.is_dir():
            raise CaseSetError(f"case set {root} is not a directory")
        cases = []
        for case_dir in sorted(p for p in root.iterdir() if p.is_dir()):
            doc_path = case_dir / "case.json"
            image_path = case_dir / "image.png"
            if not doc_path.is_file() or not image_path.is_file():
                raise CaseSetError(f"case {case_dir.name} missing case.json or image.png")
            try:
                doc = json.loads(doc_path.read_text(encoding="utf-8"))
            except json.JSONDecodeError as exc:
                raise CaseSetError(f"case {case_dir.name}: bad case.json: {exc}") from exc
            instruction = doc.get("instruction")
            if not instruction:
                raise CaseSetError(f"case {case_dir.name}: missing instruction")
            try:
                load_image(image_path)
            except ValueError as exc:
                raise CaseSetError(f"case {case_dir.name}: bad image: {exc}") from exc
            oracle = doc.get("oracle_route")
            oracle_route = None
            if oracle is not None:
                oracle_route = parse_route_token(str(oracle))
                if oracle_route is None:
                    raise CaseSetError(f"case {case_dir.name}: bad oracle_route {oracle!r}")
            cases.append(
                Case(
                    id=case_dir.name,
                    image_path=image_path,
                    instruction=instruction,
                    oracle_route=oracle_route,
                    category=doc.get("category"),
                )
            )
        if not cases:
            raise CaseSetError(f"case set {root} contains no cases")
        return cls(root=root, cases=cases)


@dataclass
class CaseResult:
    case_id: str
    strategy: str
    route: str | None = None
    editor_calls: int = 0
    segmenter_calls: int = 0
    mllm_calls: int = 0
    fallback: bool = False
    trace_path: str | None = None
    score: float | None = None
    category: str | None = None
    error: str | None = None

    def to_dict(self) -> dict:
        return {
            "case_id": self.case_id,
            "strategy": self.strategy,
            "route": self.route,
            "editor_calls": self.editor_calls,
            "segmenter_calls": self.segmenter_calls,
            "mllm_calls": self.mllm_calls,
            "fallback": self.fallback,
            "trace_path": self.trace_path,
            "score": self.score,
            "category": self.category,
            "error": self.error,
        }


@dataclass
class RunReport:
    label: str
    per_case: list[CaseResult] = field(default_factory=list)
    repeats: int = 1

    def aggregates(self) -> dict:
        """Exact functions of the per-case records (recomputable)."""
        ok = [r for r in self.per_case if r.error is None]
        strategies = sorted({r.strategy for r in self.per_case})
        routes: dict[str, int] = {}
        for r in ok:
            if r.route:
                routes[r.route] = routes.get(r.route, 0) + 1
        scored = [r for r in ok if r.score is not None]
        agg = {
            "cases": len(self.per_case),
            "failed_cases": len(self.per_case) - len(ok),
            "strategies": strategies,
            "route_distribution": routes,
            "mean_editor_calls": (
                sum(r.editor_calls for r in ok) / len(ok) if ok else 0.0
            ),
            "fallback_rate": (
                sum(1 for r in ok if r.fallback) / len(ok) if ok else 0.0
            ),
            "mean_score": (
                sum(r.score for r in scored) / len(scored) if scored else None
            ),
            "repeats": self.repeats,
        }
        by_strategy = {}
        for strategy in strategies:
            rows = [r for r in ok if r.strategy == strategy]
            srows = [r for r in rows if r.score is not None]
            by_strategy[strategy] = {
                "cases": len(rows),
                "mean_editor_calls": (
                    sum(r.editor_calls for r in rows) / len(rows) if rows else 0.0
                ),
                "mean_score": (
                    sum(r.score for r in srows) / len(srows) if srows else None
                ),
            }
        agg["by_strategy"] = by_strategy
        return agg

    def category_means(self) -> dict[tuple[str, str], float | None]:
        """(category, strategy) -> mean judge score over scored cases."""
        cells: dict[tuple[str, str], list[float]] = {}
        for r in self.per_case:
            if r.category is None or r.score is None or r.error is not None:
                continue
            cells.setdefault((r.category, r.strategy), []).append(r.score)
        return {key: sum(v) / len(v) for key, v in cells.items()}

    def category_counts(self) -> dict[str, int]:
        seen: dict[str, set] = {}
        for r in self.per_case:
            if r.category is not None:
                seen.setdefault(r.category, set()).add(r.case_id)
        return {cat: len(ids) for cat, ids in seen.items()}

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "per_case": [r.to_dict() for r in self.per_case],
            "aggregates": self.aggregates(),
        }


def _strategy_config(strategy: str, config: EngineConfig) -> EngineConfig:
    """Translate a strategy name into the session config for one case."""
    if strategy == STRATEGY_ATR:
        # run the engine exactly as configured (router off means the
        # session degenerates to a direct edit, as in ablation config a)
        return replace(config, bo2=False)
    if strategy == STRATEGY_DIRECT:
        return replace(config, bo2=False, enable_router=False, oracle_route=None)
    if strategy == STRATEGY_BO2:
        return replace(config, bo2=True)
    match = re.fullmatch(r"fixed:(.+)", strategy)
    if match:
        route = parse_route_token(match.group(1))
        if route is None:
            raise ValueError(f"unknown route in strategy {strategy!r}")
        return replace(config, bo2=False, oracle_route=route)
    raise ValueError(f"unknown strategy {strategy!r}")


def _score_case(backends, instruction: str, image, role: str) -> float:
    prompt = prompts.SCORE.format(instruction=instruction)
    reply = backends.mllm.complete(
        [text_part(prompt), image_part(image, "edited")], role=role
    )
    match = re.search(r"-?\d+(?:\.\d+)?", reply)
    if not match:
        raise BackendError(f"judge reply unparseable: {reply[:80]!r}")
    return float(match.group(0))


def _run_case(
    case: Case,
    strategy: str,
    strategy_label: str,
    config: EngineConfig,
    backend_config: BackendConfig,
    judge: bool,
    trace_dir: Path | None,
    oracle_from_case: bool = False,
) -> CaseResult:
    result = CaseResult(case_id=case.id, strategy=strategy_label, category=case.category)
    backends = None
    try:
        cfg = _strategy_config(strategy, config)
        if oracle_from_case:
            if case.oracle_route is None:
                raise MissingLabel(f"case {case.id} has no oracle_route label")
            cfg = replace(cfg, oracle_route=case.oracle_route, enable_router=False)
        backends = make_backends(backend_config, case_id=case.id)
        engine = Engine(backends)
        request = EditRequest(image=load_image(case.image_path), instruction=case.instruction)
        session = engine.run_session(request, cfg)
        result.route = session.route.value if session.route else None
        result.fallback = session.fallback
        if judge:
            result.score = _score_case(
                backends, request.instruction, session.image, role=f"score.{strategy_label}"
            )
        if trace_dir is not None:
            path = trace_dir / f"{case.id}.{strategy_label}.trace.jsonl"
            session.trace.write(path)
            result.trace_path = str(path)
    except (SessionFailed, BackendError, MissingLabel, ValueError) as exc:
        result.error = f"{type(exc).__name__}: {exc}"
    if backends is not None:
        result.editor_calls = backends.ledger.editor_calls
        result.segmenter_calls = backends.ledger.segmenter_calls
        result.mllm_calls = backends.ledger.mllm_calls
    return result


def run_batch(
    cases: CaseSet,
    config: EngineConfig,
    strategy: str,
    backend_config: BackendConfig,
    judge: bool = False,
    repeats: int = 1,
    trace_dir: str | Path | None = None,
    parallelism: int = 1,
    oracle_from_case: bool = False,
    label: str | None = None,
) -> RunReport:
    """Execute every case under one strategy; failures are recorded, not fatal."""
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    trace_path = Path(trace_dir) if trace_dir else None
    label = label or strategy
    runs: list[list[CaseResult]] = []
    for _ in range(repeats):
        if parallelism > 1:
            with ThreadPoolExecutor(max_workers=parallelism) as pool:
                results = list(
                    pool.map(
                        lambda case: _run_case(
                            case, strategy, label, config, backend_config,
                            judge, trace_path, oracle_from_case,
                        ),
                        cases.cases,
                    )
                )
        else:
            results = [
                _run_case(
                    case, strategy, label, config, backend_config,
                    judge, trace_path, oracle_from_case,
                )
                for case in cases.cases
            ]
        runs.append(sorted(results, key=lambda r: r.case_id))
    merged = runs[0]
    if repeats > 1:
        for row, *others in zip(*runs):
            scores = [r.score for r in (row, *others) if r.score is not None]
            row.score = sum(scores) / len(scores) if scores else None
    return RunReport(label=label, per_case=merged, repeats=repeats)


def pilot_compare(
    cases: CaseSet,
    config: EngineConfig,
    backend_config: BackendConfig,
    trace_dir: str | Path | None = None,
) -> RunReport:
    """Run the four fixed strategies per labeled case and tabulate."""
    unlabeled = [c.id for c in cases.cases if not c.category]
    if unlabeled:
        raise MissingLabel(f"cases without category label: {unlabeled}")
    report = RunReport(label="pilot")
    for name, route in PILOT_STRATEGIES:
        strategy = STRATEGY_DIRECT if route is None else f"fixed:{route.value}"
        batch = run_batch(
            cases, config, strategy, backend_config,
            judge=True, trace_dir=trace_dir, label=name,
        )
        report.per_case.extend(batch.per_case)
    return report


def grid_configs(
    grid_name: str, base: EngineConfig, labels: list[str] | None = None
) -> list[tuple[str, EngineConfig, bool]]:
    """Materialize an ablation grid into (label, config, oracle_from_case)."""
    grids = {"routing": ROUTING_GRID, "reform": REFORM_GRID}
    if grid_name not in grids:
        raise ValueError(f"unknown grid {grid_name!r} (expected one of {sorted(grids)})")
    grid = grids[grid_name]
    chosen = labels or list(grid)
    out = []
    for label in chosen:
        if label not in grid:
            raise ValueError(f"unknown config label {label!r} in grid {grid_name!r}")
        overrides = dict(grid[label])
        oracle_from_case = overrides.pop("oracle_from_case", False)
        out.append((label, replace(base, **overrides), oracle_from_case))
    return out


def ablation_sweep(
    cases: CaseSet,
    configs: list[tuple[str, EngineConfig, bool]],
    backend_config: BackendConfig,
    judge: bool = False,
    trace_dir: str | Path | None = None,
) -> list[RunReport]:
    """One run_batch per labeled config; duplicate labels are rejected."""
    labels = [label for label, _, _ in configs]
    if len(set(labels)) != len(labels):
        raise ValueError(f"duplicate config labels: {labels}")
    reports = []
    for label, config, oracle_from_case in configs:
        reports.append(
            run_batch(
                cases, config, STRATEGY_ATR, backend_config,
                judge=judge, trace_dir=trace_dir,
                oracle_from_case=oracle_from_case, label=label,
            )
        )
    return reports


# -- plain-text rendering ----------------------------------------------------


def render_batch_summary(report: RunReport) -> str:
    agg = report.aggregates()
    lines = [
        f"batch: {report.label}",
        f"  cases: {agg['cases']}  failed: {agg['failed_cases']}  repeats: {agg['repeats']}",
        f"  mean editor calls: {agg['mean_editor_calls']:.2f}",
        f"  fallback rate: {agg['fallback_rate']:.2f}",
    ]
    if agg["mean_score"] is not None:
        lines.append(f"  mean judge score: {agg['mean_score']:.2f}")
    if agg["route_distribution"]:
        dist = ", ".join(f"{k}={v}" for k, v in sorted(agg["route_distribution"].items()))
        lines.append(f"  routes: {dist}")
    return "\n".join(lines)


def render_pilot_table(report: RunReport, categories: list[str] | None = None) -> str:
    """Category x strategy table of mean judge scores."""
    strategies = [name for name, _ in PILOT_STRATEGIES]
    cells = report.category_means()
    counts = report.category_counts()
    rows = list(categories) if categories else sorted(counts)
    for cat in sorted(counts):
        if cat not in rows:
            rows.append(cat)
    width = max([len("category")] + [len(r) for r in rows]) + 2
    header = "category".ljust(width) + "count".rjust(7) + "".join(
        s.rjust(10) for s in strategies
    )
    lines = [header, "-" * len(header)]
    for cat in rows:
        line = cat.ljust(width) + str(counts.get(cat, 0)).rjust(7)
        for strategy in strategies:
            value = cells.get((cat, strategy))
            line += (f"{value:.2f}" if value is not None else "-").rjust(10)
        lines.append(line)
    return "\n".join(lines)


def render_ablation_table(reports: list[RunReport]) -> str:
    header = (
        "config".ljust(10)
        + "cases".rjust(7)
        + "editor".rjust(9)
        + "fallback".rjust(10)
        + "verify".rjust(8)
        + "  routes"
    )
    lines = [header, "-" * len(header)]
    for report in reports:
        agg = report.aggregates()
        verify_records = 0
        for result in report.per_case:
            if result.trace_path:
                docs = read_documents(result.trace_path)
                verify_records += sum(
                    1 for d in docs if d.get("type") == "step" and d.get("action") == "verify"
                )
        dist = ",".join(f"{k}:{v}" for k, v in sorted(agg["route_distribution"].items()))
        lines.append(
            report.label.ljust(10)
            + str(agg["cases"]).rjust(7)
            + f"{agg['mean_editor_calls']:.2f}".rjust(9)
            + f"{agg['fallback_rate']:.2f}".rjust(10)
            + str(verify_records).rjust(8)
            + f"  {dist}"
        )
    return "\n".join(lines)
