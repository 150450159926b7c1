"""Command-line entry points: edit, batch, pilot, ablate, trace.

Exit codes are a contract: 0 success, 1 bad invocation or load failure,
2 session failure.
"""

from __future__ import annotations

import json
import os
import sys
from importlib import resources
from pathlib import Path

import click

from .backends import BackendConfig, BackendError, MODE_MOCK, make_backends
from .harness import (
    CaseSet,
    CaseSetError,
    MissingLabel,
    ablation_sweep,
    grid_configs,
    pilot_compare,
    render_ablation_table,
    render_batch_summary,
    render_pilot_table,
    run_batch,
)
from .planner import (
    EditRequest,
    Engine,
    EngineConfig,
    ROUTE_TOKENS,
    SessionFailed,
)
from .pngio import load_image, save_image
from .trace import TraceParseError, read_documents

_ENV_URLS = {
    "EDITLOOP_EDITOR_URL": "editor_url",
    "EDITLOOP_SEGMENTER_URL": "segmenter_url",
    "EDITLOOP_MLLM_URL": "mllm_url",
}


def _bundled_mock_script() -> str:
    return str(resources.files("editloop.data") / "default_mock.json")


def load_configs(
    config_path: str | None, mock: bool
) -> tuple[BackendConfig, EngineConfig]:
    """Config file -> (BackendConfig, EngineConfig), with env URL overrides."""
    backend_data: dict = {}
    engine_data: dict = {}
    if config_path:
        try:
            doc = json.loads(Path(config_path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise click.ClickException(f"cannot load config {config_path}: {exc}")
        backend_data = doc.get("backend", {})
        engine_data = doc.get("engine", {})
    try:
        backend = BackendConfig.from_dict(backend_data)
        engine = EngineConfig.from_dict(engine_data)
    except (TypeError, ValueError) as exc:
        raise click.ClickException(f"bad config: {exc}")
    for env, attr in _ENV_URLS.items():
        if os.environ.get(env):
            setattr(backend, attr, os.environ[env])
    if mock:
        backend.mode = MODE_MOCK
        if not backend.mock_script_path:
            backend.mock_script_path = _bundled_mock_script()
    try:
        backend.validate()
    except ValueError as exc:
        raise click.ClickException(str(exc))
    return backend, engine


@click.group()
def cli():
    """Closed-loop instruction-guided image editing."""


@cli.command("edit")
@click.option("--image", "image_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--instruction", required=True)
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--route", type=click.Choice(sorted(ROUTE_TOKENS)), help="Force this route (oracle).")
@click.option("--mock", is_flag=True, help="Use mock backends (bundled script by default).")
@click.option("--budget", type=int, default=None, help="Step budget override.")
@click.option("--bo2", is_flag=True, help="Best-of-two baseline instead of routing.")
@click.option("--case-id", default="default", help="Mock transcript key.")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default="editloop_out")
def cmd_edit(image_path, instruction, config_path, route, mock, budget, bo2, case_id, out_dir):
    """Run one edit session and write result.png plus the trace."""
    backend_cfg, engine_cfg = load_configs(config_path, mock)
    if route:
        engine_cfg.oracle_route = ROUTE_TOKENS[route]
    if budget is not None:
        engine_cfg.budget = budget
    if bo2:
        engine_cfg.bo2 = True
    try:
        image = load_image(image_path)
    except ValueError as exc:
        raise click.ClickException(f"cannot load image: {exc}")

    backends = make_backends(backend_cfg, case_id=case_id)
    engine = Engine(backends)
    session = engine.run_session(EditRequest(image=image, instruction=instruction), engine_cfg)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result_path = out / "result.png"
    trace_path = out / "trace.jsonl"
    save_image(session.image, result_path)
    session.trace.write(trace_path)
    ledger = session.ledger.snapshot()
    click.echo(f"route: {session.route.value if session.route else 'bo2'}")
    click.echo(
        "ledger: editor={editor_calls} segmenter={segmenter_calls} mllm={mllm_calls}".format(
            **ledger
        )
    )
    click.echo(f"fallback: {session.fallback}")
    click.echo(f"result: {result_path}")
    click.echo(f"trace: {trace_path}")


@cli.command("batch")
@click.argument("case_set", type=click.Path(exists=True, file_okay=False))
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--strategy", default="atr", help="atr | direct | bo2 | fixed:<route>")
@click.option("--repeats", type=int, default=1)
@click.option("--judge", is_flag=True, help="Score each case via the judge endpoint.")
@click.option("--mock", is_flag=True)
@click.option("--parallelism", type=int, default=1)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default="editloop_out")
def cmd_batch(case_set, config_path, strategy, repeats, judge, mock, parallelism, out_dir):
    """Run a case set under one strategy and emit a report."""
    backend_cfg, engine_cfg = load_configs(config_path, mock)
    cases = CaseSet.load(case_set)
    out = Path(out_dir)
    report = run_batch(
        cases, engine_cfg, strategy, backend_cfg,
        judge=judge, repeats=repeats, trace_dir=out / "traces",
        parallelism=parallelism,
    )
    out.mkdir(parents=True, exist_ok=True)
    report_path = out / "report.json"
    report_path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    click.echo(render_batch_summary(report))
    click.echo(f"report: {report_path}")


@cli.command("pilot")
@click.argument("case_set", type=click.Path(exists=True, file_okay=False))
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--mock", is_flag=True)
@click.option("--categories", default=None, help="Comma-separated row order for the table.")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default="editloop_out")
def cmd_pilot(case_set, config_path, mock, categories, out_dir):
    """Compare the four fixed strategies on a labeled case set."""
    backend_cfg, engine_cfg = load_configs(config_path, mock)
    cases = CaseSet.load(case_set)
    out = Path(out_dir)
    report = pilot_compare(cases, engine_cfg, backend_cfg, trace_dir=out / "traces")
    out.mkdir(parents=True, exist_ok=True)
    report_path = out / "pilot_report.json"
    report_path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    rows = [c.strip() for c in categories.split(",")] if categories else None
    click.echo(render_pilot_table(report, rows))
    click.echo(f"report: {report_path}")


@cli.command("ablate")
@click.argument("case_set", type=click.Path(exists=True, file_okay=False))
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--grid", default="routing", help="routing | reform")
@click.option("--labels", default=None, help="Comma-separated subset of grid labels.")
@click.option("--configs-file", type=click.Path(exists=True, dir_okay=False),
              help="JSON list of {label, engine config overrides} instead of a grid.")
@click.option("--judge", is_flag=True)
@click.option("--mock", is_flag=True)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default="editloop_out")
def cmd_ablate(case_set, config_path, grid, labels, configs_file, judge, mock, out_dir):
    """Sweep engine configurations over a case set."""
    backend_cfg, engine_cfg = load_configs(config_path, mock)
    cases = CaseSet.load(case_set)
    try:
        if configs_file:
            entries = json.loads(Path(configs_file).read_text(encoding="utf-8"))
            configs = []
            for entry in entries:
                overrides = dict(entry)
                label = overrides.pop("label")
                oracle_from_case = overrides.pop("oracle_from_case", False)
                merged = EngineConfig.from_dict({**engine_cfg.to_dict(), **overrides})
                configs.append((label, merged, oracle_from_case))
        else:
            chosen = [s.strip() for s in labels.split(",")] if labels else None
            configs = grid_configs(grid, engine_cfg, chosen)
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        raise click.ClickException(f"bad ablation configs: {exc}")
    out = Path(out_dir)
    reports = ablation_sweep(
        cases, configs, backend_cfg, judge=judge, trace_dir=out / "traces"
    )
    out.mkdir(parents=True, exist_ok=True)
    report_path = out / "ablation_report.json"
    report_path.write_text(
        json.dumps([r.to_dict() for r in reports], indent=2, sort_keys=True)
    )
    click.echo(render_ablation_table(reports))
    click.echo(f"report: {report_path}")


@cli.command("trace")
@click.argument("trace_file", type=click.Path(exists=True, dir_okay=False))
@click.option("--step", "step_index", type=int, default=None)
def cmd_trace(trace_file, step_index):
    """Render a trace as a human-readable step listing."""
    docs = read_documents(trace_file)
    header = docs[0] if docs[0].get("type") == "header" else {}
    if header:
        click.echo(
            f"mode={header.get('mode')} route={header.get('route')} "
            f"fallback={header.get('fallback')}"
        )
    previous = {"editor_calls": 0, "segmenter_calls": 0, "mllm_calls": 0}
    for doc in docs:
        if doc.get("type") == "step":
            ledger = doc.get("ledger", previous)
            delta = {k: ledger.get(k, 0) - previous.get(k, 0) for k in previous}
            previous = ledger
            if step_index is not None and doc.get("index") != step_index:
                continue
            line = (
                f"step {doc.get('index')}: action={doc.get('action')} "
                f"tool={doc.get('tool')} status={doc.get('status')} "
                f"ledger+=(editor={delta['editor_calls']},"
                f"segmenter={delta['segmenter_calls']},mllm={delta['mllm_calls']})"
            )
            if doc.get("status") == "error":
                line += f" error={doc.get('error_kind')}"
            click.echo(line)
        elif doc.get("type") == "fallback" and step_index is None:
            click.echo(f"fallback: reason={doc.get('reason')}")
        elif doc.get("type") == "selection" and step_index is None:
            click.echo(f"selection: candidate {doc.get('choice')}")


def _run(argv=None) -> int:
    try:
        cli.main(args=argv, standalone_mode=False)
    except click.UsageError as exc:
        exc.show()
        return 1
    except click.ClickException as exc:
        exc.show()
        return 1
    except click.Abort:
        return 1
    except (CaseSetError, MissingLabel, BackendError, TraceParseError, ValueError) as exc:
        click.echo(f"error: {exc}", err=True)
        return 1
    except SessionFailed as exc:
        click.echo(f"session failed: {exc}", err=True)
        return 2
    return 0


def main() -> None:
    sys.exit(_run())
