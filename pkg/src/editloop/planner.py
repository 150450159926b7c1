"""Query profiling, route selection, and the route-conditioned state machine.

A session turns one (image, instruction) request into a final image by
profiling the query, routing it to an execution strategy, then looping
planner -> tool execution under per-route action graphs, a step budget,
optional finish verification, and a bounded single-pass fallback.
"""

from __future__ import annotations

import json
import re
import time
from dataclasses import dataclass, field, fields
from enum import Enum

from . import prompts
from .backends import BackendError, BackendSet, image_part, text_part
from .raster import ImageBuffer
from .toolkit import ToolCall, Toolkit, parse_json_reply
from .trace import SessionTrace, args_digest


class RouteStrategy(str, Enum):
    A_DIRECT = "A_direct"
    A_REWRITE = "A_rewrite"
    B_SPATIAL = "B_spatial"
    C_LOCAL = "C_local"


ROUTE_TOKENS = {
    "A": RouteStrategy.A_DIRECT,
    "A2": RouteStrategy.A_REWRITE,
    "B": RouteStrategy.B_SPATIAL,
    "C": RouteStrategy.C_LOCAL,
}
_TOKEN_BY_ROUTE = {route: token for token, route in ROUTE_TOKENS.items()}


def parse_route_token(text: str) -> RouteStrategy | None:
    match = re.search(r"\b(A_rewrite|A_direct|B_spatial|C_local|A2|[ABC])\b", text)
    if not match:
        return None
    token = match.group(1)
    if token in ROUTE_TOKENS:
        return ROUTE_TOKENS[token]
    return RouteStrategy(token)


class ActionKind(str, Enum):
    REWRITE = "rewrite"
    LOCALIZE = "localize"
    CROP = "crop"
    ISOLATE = "isolate"
    ESTIMATE_OFFSET = "estimate_offset"
    EDIT = "edit"
    PASTE = "paste"
    COMPOSE = "compose"
    REFINE = "refine"
    VERIFY = "verify"
    TERMINATE = "terminate"


# Planner fallback order per route: the canonical next action is the
# first allowed one in this declaration.
ROUTE_ORDER = {
    RouteStrategy.A_DIRECT: [
        ActionKind.EDIT,
        ActionKind.VERIFY,
        ActionKind.TERMINATE,
    ],
    RouteStrategy.A_REWRITE: [
        ActionKind.REWRITE,
        ActionKind.EDIT,
        ActionKind.VERIFY,
        ActionKind.TERMINATE,
    ],
    RouteStrategy.B_SPATIAL: [
        ActionKind.ISOLATE,
        ActionKind.EDIT,
        ActionKind.ESTIMATE_OFFSET,
        ActionKind.PASTE,
        ActionKind.REFINE,
        ActionKind.VERIFY,
        ActionKind.TERMINATE,
    ],
    RouteStrategy.C_LOCAL: [
        ActionKind.LOCALIZE,
        ActionKind.CROP,
        ActionKind.REWRITE,
        ActionKind.EDIT,
        ActionKind.COMPOSE,
        ActionKind.REFINE,
        ActionKind.VERIFY,
        ActionKind.TERMINATE,
    ],
}

CONSTRAINTS = {"ambiguity", "structural_dependency", "background_coupling", "none"}
SCOPES = {"localized", "scene_level"}

# Consecutive not-finished verdicts tolerated before the session is
# treated as a budget-style failure.
MAX_NOT_FINISHED = 2

MODE_ATR = "atr"
MODE_DIRECT = "direct"
MODE_BO2 = "bo2"


class ToolFailure(RuntimeError):
    def __init__(self, error_kind: str, message: str):
        super().__init__(f"{error_kind}: {message}")
        self.error_kind = error_kind


class BudgetExceeded(RuntimeError):
    pass


class SessionFailed(RuntimeError):
    pass


@dataclass
class EditRequest:
    image: ImageBuffer
    instruction: str

    def __post_init__(self):
        if not self.instruction:
            raise ValueError("instruction must be non-empty")


@dataclass
class QueryProfile:
    target: str = ""
    constraint: str = "none"
    scope: str = "scene_level"
    scene_context: str = ""
    small_target: bool = False
    multi_target: bool = False

    def to_dict(self) -> dict:
        return {
            "target": self.target,
            "constraint": self.constraint,
            "scope": self.scope,
            "scene_context": self.scene_context,
            "small_target": self.small_target,
            "multi_target": self.multi_target,
        }


@dataclass
class Action:
    kind: ActionKind
    arguments: dict = field(default_factory=dict)


@dataclass
class StepRecord:
    action: Action
    call: ToolCall | None
    result: dict
    timestamp: float


@dataclass
class ExecutionState:
    current_image: ImageBuffer
    current_instruction: str
    strategy: RouteStrategy
    history: list[StepRecord] = field(default_factory=list)
    step_count: int = 0
    budget: int = 12
    scratch: dict = field(default_factory=dict)


@dataclass
class EngineConfig:
    enable_rewrite: bool = True
    enable_spatial: bool = True
    enable_local: bool = True
    enable_context: bool = True
    enable_router: bool = True
    oracle_route: RouteStrategy | None = None
    enable_mdp: bool = True
    enable_fallback: bool = True
    enable_ifinish: bool = True
    budget: int = 12
    bo2: bool = False

    def to_dict(self) -> dict:
        data = {f.name: getattr(self, f.name) for f in fields(self)}
        data["oracle_route"] = self.oracle_route.value if self.oracle_route else None
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "EngineConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown engine config keys: {sorted(unknown)}")
        data = dict(data)
        oracle = data.get("oracle_route")
        if isinstance(oracle, str):
            parsed = parse_route_token(oracle)
            if parsed is None:
                raise ValueError(f"unknown oracle route {oracle!r}")
            data["oracle_route"] = parsed
        return cls(**data)


@dataclass
class SessionResult:
    image: ImageBuffer
    trace: SessionTrace
    ledger: object
    route: RouteStrategy | None
    fallback: bool
    profile: QueryProfile


def _parse_action_kind(reply: str, allowed: list[ActionKind]) -> ActionKind | None:
    text = reply.strip().lower()
    for kind in allowed:
        if text == kind.value:
            return kind
    hits = [
        (match.start(), kind)
        for kind in allowed
        for match in [re.search(rf"\b{re.escape(kind.value)}\b", text)]
        if match
    ]
    if not hits:
        return None
    return min(hits)[1]


def _parse_offset(reply: str) -> tuple[float, float]:
    try:
        data = json.loads(reply.strip())
        if isinstance(data, list) and len(data) == 2:
            return float(data[0]), float(data[1])
    except (json.JSONDecodeError, TypeError, ValueError):
        pass
    numbers = re.findall(r"-?\d+(?:\.\d+)?", reply)
    if len(numbers) >= 2:
        return float(numbers[0]), float(numbers[1])
    return 0.0, 0.0  # no-move; verification will catch it


def _successors(state: ExecutionState, ifinish: bool) -> list[ActionKind]:
    """Next nodes of the route's action graph given the history."""
    route = state.strategy
    done = [rec.action.kind for rec in state.history]
    last = done[-1] if done else None
    verdict = state.scratch.get("last_verdict")
    finished = bool(verdict and verdict.get("is_finished"))
    after_content = [ActionKind.VERIFY] if ifinish else [ActionKind.TERMINATE]

    if last is ActionKind.TERMINATE:
        return []
    if last is ActionKind.VERIFY:
        if finished:
            return [ActionKind.TERMINATE]
        retry = (
            ActionKind.EDIT
            if route in (RouteStrategy.A_DIRECT, RouteStrategy.A_REWRITE)
            else ActionKind.REFINE
        )
        return [retry, ActionKind.TERMINATE]

    if route is RouteStrategy.A_DIRECT or route is RouteStrategy.A_REWRITE:
        if last is None:
            return [ActionKind.REWRITE] if route is RouteStrategy.A_REWRITE else [ActionKind.EDIT]
        if last is ActionKind.REWRITE:
            return [ActionKind.EDIT]
        if last is ActionKind.EDIT:
            return list(after_content)
    elif route is RouteStrategy.B_SPATIAL:
        if last is None:
            return [ActionKind.ISOLATE]
        if last is ActionKind.ISOLATE:
            return [ActionKind.EDIT]
        if last is ActionKind.EDIT:
            return [ActionKind.ESTIMATE_OFFSET]
        if last is ActionKind.ESTIMATE_OFFSET:
            return [ActionKind.PASTE]
        if last is ActionKind.PASTE:
            return [ActionKind.REFINE] + after_content
        if last is ActionKind.REFINE:
            return list(after_content)
    elif route is RouteStrategy.C_LOCAL:
        if last is None:
            return [ActionKind.LOCALIZE]
        if last is ActionKind.LOCALIZE:
            return [ActionKind.CROP]
        if last is ActionKind.CROP:
            return [ActionKind.REWRITE, ActionKind.EDIT]
        if last is ActionKind.REWRITE:
            return [ActionKind.EDIT]
        if last is ActionKind.EDIT:
            return [ActionKind.COMPOSE]
        if last is ActionKind.COMPOSE:
            return [ActionKind.REFINE] + after_content
        if last is ActionKind.REFINE:
            return list(after_content)
    return list(after_content)


class Engine:
    """One engine drives one session against one backend set."""

    def __init__(self, backends: BackendSet):
        self._backends = backends
        self._toolkit = Toolkit(backends)

    @property
    def toolkit(self) -> Toolkit:
        return self._toolkit

    # -- profiling and routing -------------------------------------------

    def profile(self, request: EditRequest) -> QueryProfile:
        """One MLLM round trip; any failure degrades to the permissive default."""
        prompt = prompts.PROFILE.format(instruction=request.instruction)
        try:
            reply = self._backends.mllm.complete(
                [text_part(prompt), image_part(request.image)], role="profile"
            )
        except BackendError:
            return QueryProfile()
        parsed = parse_json_reply(reply)
        if parsed is None:
            return QueryProfile()
        constraint = str(parsed.get("constraint", "none"))
        scope = str(parsed.get("scope", "scene_level"))
        return QueryProfile(
            target=str(parsed.get("target", "")),
            constraint=constraint if constraint in CONSTRAINTS else "none",
            scope=scope if scope in SCOPES else "scene_level",
            scene_context=str(parsed.get("scene_context", "")),
            small_target=bool(parsed.get("small_target", False)),
            multi_target=bool(parsed.get("multi_target", False)),
        )

    def route(
        self, request: EditRequest, profile: QueryProfile, config: EngineConfig
    ) -> RouteStrategy:
        """Pick the strategy from the enabled route set; oracle wins outright."""
        if config.oracle_route is not None:
            return config.oracle_route
        choices = [RouteStrategy.A_DIRECT]
        if config.enable_rewrite:
            choices.append(RouteStrategy.A_REWRITE)
        if config.enable_spatial:
            choices.append(RouteStrategy.B_SPATIAL)
        if config.enable_local:
            choices.append(RouteStrategy.C_LOCAL)
        if len(choices) == 1:
            return RouteStrategy.A_DIRECT
        profile_doc = profile.to_dict()
        context_line = ""
        if config.enable_context:
            if profile.scene_context:
                context_line = f"Scene context: {profile.scene_context}\n"
        else:
            del profile_doc["scene_context"]  # context signal disabled entirely
        prompt = prompts.ROUTER.format(
            instruction=request.instruction,
            profile=json.dumps(profile_doc, sort_keys=True),
            context_line=context_line,
            choices=", ".join(_TOKEN_BY_ROUTE[c] for c in choices),
        )
        try:
            reply = self._backends.mllm.complete(
                [text_part(prompt), image_part(request.image)], role="router"
            )
        except BackendError:
            return RouteStrategy.A_DIRECT
        parsed = parse_route_token(reply)
        if parsed is None or parsed not in choices:
            return RouteStrategy.A_DIRECT
        return parsed

    # -- the state machine ------------------------------------------------

    def allowed_actions(
        self, state: ExecutionState, config: EngineConfig
    ) -> list[ActionKind]:
        if config.enable_mdp:
            return _successors(state, config.enable_ifinish)
        kinds = list(ActionKind)
        if not config.enable_ifinish:
            kinds.remove(ActionKind.VERIFY)
        return kinds

    def plan_next(self, state: ExecutionState, allowed: list[ActionKind]) -> Action:
        """Choose the next action; forced moves never cost an MLLM call."""
        if not allowed:
            raise ValueError("allowed action set is empty")
        if len(allowed) == 1:
            return Action(allowed[0])
        history = [rec.action.kind.value for rec in state.history]
        prompt = prompts.PLANNER.format(
            route=state.strategy.value,
            instruction=state.current_instruction,
            history=", ".join(history) or "(none)",
            allowed=", ".join(k.value for k in allowed),
        )
        try:
            reply = self._backends.mllm.complete(
                [text_part(prompt), image_part(state.current_image, "current")],
                role="planner",
            )
        except BackendError:
            reply = ""
        kind = _parse_action_kind(reply, allowed)
        if kind is None:
            kind = self._canonical(state, allowed)
        return Action(kind)

    def _canonical(self, state: ExecutionState, allowed: list[ActionKind]) -> ActionKind:
        """The graph's next action, first in the route's declared order.

        With the action constraints disabled `allowed` is the full kind
        set, so the graph successors (not route-order position) must
        drive the choice or an unscripted planner would loop on the
        route's first action forever.
        """
        successors = _successors(state, ActionKind.VERIFY in allowed)
        for kind in ROUTE_ORDER[state.strategy]:
            if kind in successors and kind in allowed:
                return kind
        for kind in ROUTE_ORDER[state.strategy]:
            if kind in allowed:
                return kind
        return allowed[0]

    def execute_step(self, state: ExecutionState, action: Action) -> ExecutionState:
        """Dispatch one action to its tool and append the step record."""
        if state.step_count >= state.budget:
            raise BudgetExceeded(
                f"budget of {state.budget} steps exhausted before {action.kind.value}"
            )
        handler = {
            ActionKind.REWRITE: self._step_rewrite,
            ActionKind.LOCALIZE: self._step_localize,
            ActionKind.CROP: self._step_crop,
            ActionKind.ISOLATE: self._step_isolate,
            ActionKind.ESTIMATE_OFFSET: self._step_estimate_offset,
            ActionKind.EDIT: self._step_edit,
            ActionKind.PASTE: self._step_paste,
            ActionKind.COMPOSE: self._step_compose,
            ActionKind.REFINE: self._step_refine,
            ActionKind.VERIFY: self._step_verify,
            ActionKind.TERMINATE: self._step_terminate,
        }[action.kind]
        call, summary, fatal = handler(state)
        summary.setdefault("detail", {})
        summary["image_digest"] = state.current_image.digest()
        summary["ledger"] = self._backends.ledger.snapshot()
        state.history.append(StepRecord(action, call, summary, time.time()))
        state.step_count += 1
        if fatal is not None:
            raise ToolFailure(fatal, summary.get("error_message") or fatal)
        return state

    # Handlers mutate state and return (call, summary, fatal_error_kind).

    def _invoke(self, call: ToolCall):
        result = self._toolkit.invoke(call)
        summary = {"tool": call.tool_name, "status": result.status}
        if result.status != "ok":
            summary["error_kind"] = result.error_kind
            summary["error_message"] = result.error_message
        return result, summary

    def _require(self, state: ExecutionState, key: str, tool: str):
        value = state.scratch.get(key)
        if value is None:
            summary = {
                "tool": tool,
                "status": "error",
                "error_kind": "MissingState",
                "error_message": f"{tool} needs scratch value {key!r}",
            }
            return None, summary
        return value, None

    def _step_edit(self, state: ExecutionState):
        instruction = state.scratch.pop("queued_instruction", None) or state.current_instruction
        call = ToolCall("backends.edit", {"instruction": instruction})
        try:
            out = self._backends.editor.edit(state.current_image, instruction)
        except BackendError as exc:
            return call, {
                "tool": "backends.edit",
                "status": "error",
                "error_kind": "BackendError",
                "error_message": str(exc),
            }, "BackendError"
        state.current_image = out
        return call, {"tool": "backends.edit", "status": "ok"}, None

    def _step_rewrite(self, state: ExecutionState):
        call = ToolCall(
            "fixprompt_tool",
            {"instruction": state.current_instruction},
            {"image": state.current_image},
        )
        result, summary = self._invoke(call)
        if result.status != "ok":  # contract says this cannot happen
            return call, summary, result.error_kind
        state.current_instruction = result.payload["instruction"]
        summary["detail"] = {"was_rewritten": result.payload["was_rewritten"]}
        return call, summary, None

    def _segment_call(self, state: ExecutionState) -> ToolCall:
        profile: QueryProfile = state.scratch.get("profile") or QueryProfile()
        query = profile.target or state.scratch.get("original_instruction", state.current_instruction)
        return ToolCall(
            "sam3_tool",
            {"query": query, "multi_target": profile.multi_target},
            {"image": state.current_image},
        )

    def _step_localize(self, state: ExecutionState):
        call = self._segment_call(state)
        result, summary = self._invoke(call)
        if result.status != "ok":
            return call, summary, result.error_kind
        state.scratch["target_box_rel"] = result.payload["fused_rel_box"]
        summary["detail"] = {"box": result.payload["fused_rel_box"]}
        return call, summary, None

    def _step_isolate(self, state: ExecutionState):
        call = self._segment_call(state)
        result, summary = self._invoke(call)
        if result.status != "ok":
            return call, summary, result.error_kind
        profile: QueryProfile = state.scratch.get("profile") or QueryProfile()
        target = profile.target or "object"
        state.scratch["cutout"] = result.images["cutout"]
        state.scratch["source_box_rel"] = result.payload["fused_rel_box"]
        # the next edit node performs background completion over the region
        state.scratch["queued_instruction"] = prompts.BACKGROUND_COMPLETION.format(
            target=target
        )
        summary["detail"] = {"box": result.payload["fused_rel_box"]}
        return call, summary, None

    def _step_crop(self, state: ExecutionState):
        box, err = self._require(state, "target_box_rel", "crop_tool")
        if err:
            return None, err, "MissingState"
        x, y, w, h = box
        call = ToolCall(
            "crop_tool", {"box": [x, y, x + w, y + h]}, {"image": state.current_image}
        )
        result, summary = self._invoke(call)
        if result.status != "ok":
            return call, summary, result.error_kind
        state.scratch["full_image"] = state.current_image
        state.scratch["paste_box_rel"] = result.payload["box"]
        state.current_image = result.images["patch"]
        summary["detail"] = {"box": result.payload["box"]}
        return call, summary, None

    def _step_estimate_offset(self, state: ExecutionState):
        box, err = self._require(state, "source_box_rel", "target_tool")
        if err:
            return None, err, "MissingState"
        instruction = state.scratch.get("original_instruction", state.current_instruction)
        prompt = prompts.OFFSET.format(instruction=instruction, box=box)
        try:
            reply = self._backends.mllm.complete(
                [text_part(prompt), image_part(state.current_image, "current")],
                role="offset",
            )
        except BackendError as exc:
            return None, {
                "tool": "target_tool",
                "status": "error",
                "error_kind": "BackendError",
                "error_message": str(exc),
            }, "BackendError"
        dx, dy = _parse_offset(reply)
        call = ToolCall("target_tool", {"box": box, "offset": [dx, dy]})
        result, summary = self._invoke(call)
        if result.status != "ok":
            return call, summary, result.error_kind
        state.scratch["dest_box_rel"] = result.payload["box"]
        summary["detail"] = {"offset": [dx, dy], "box": result.payload["box"]}
        return call, summary, None

    def _step_paste(self, state: ExecutionState):
        cutout, err = self._require(state, "cutout", "smartpaste_tool")
        if err:
            return None, err, "MissingState"
        dest, err = self._require(state, "dest_box_rel", "smartpaste_tool")
        if err:
            return None, err, "MissingState"
        call = ToolCall(
            "smartpaste_tool",
            {"box": dest},
            {"cutout": cutout, "background": state.current_image},
        )
        result, summary = self._invoke(call)
        if result.status != "ok":
            return call, summary, result.error_kind
        state.current_image = result.images["composed"]
        return call, summary, None

    def _step_compose(self, state: ExecutionState):
        full, err = self._require(state, "full_image", "croppaste_tool")
        if err:
            return None, err, "MissingState"
        box, err = self._require(state, "paste_box_rel", "croppaste_tool")
        if err:
            return None, err, "MissingState"
        call = ToolCall(
            "croppaste_tool",
            {"box": box},
            {"original": full, "patch": state.current_image},
        )
        result, summary = self._invoke(call)
        if result.status != "ok":
            return call, summary, result.error_kind
        state.current_image = result.images["composed"]
        summary["detail"] = {"mode": result.payload["mode"]}
        return call, summary, None

    def _step_refine(self, state: ExecutionState):
        original = state.scratch.get("original_image", state.current_image)
        call = ToolCall(
            "refinement_tool",
            {},
            {"original": original, "composed": state.current_image},
        )
        result, summary = self._invoke(call)
        if result.status != "ok":
            # refinement is optional: record the miss and carry on
            return call, summary, None
        refine_prompt = result.payload["prompt"]
        try:
            out = self._backends.editor.edit(state.current_image, refine_prompt)
        except BackendError as exc:
            summary.update(
                status="error", error_kind="BackendError", error_message=str(exc)
            )
            return call, summary, "BackendError"
        state.current_image = out
        summary["detail"] = {"refined": True}
        return call, summary, None

    def _step_verify(self, state: ExecutionState):
        original = state.scratch.get("original_image", state.current_image)
        instruction = state.scratch.get("original_instruction", state.current_instruction)
        call = ToolCall(
            "ifinish_tool",
            {"instruction": instruction},
            {"original": original, "current": state.current_image},
        )
        result, summary = self._invoke(call)
        if result.status != "ok":
            return call, summary, result.error_kind
        state.scratch["last_verdict"] = result.payload
        if not result.payload["is_finished"]:
            state.scratch["not_finished_count"] = (
                state.scratch.get("not_finished_count", 0) + 1
            )
        summary["detail"] = {"finished": result.payload["is_finished"]}
        return call, summary, None

    def _step_terminate(self, state: ExecutionState):
        return None, {"tool": None, "status": "ok"}, None

    # -- whole sessions ----------------------------------------------------

    def run_session(self, request: EditRequest, config: EngineConfig) -> SessionResult:
        if config.bo2:
            return self._run_bo2(request, config)
        if config.oracle_route is None and not config.enable_router:
            return self._run_direct(request, config)

        if config.oracle_route is not None:
            profile = QueryProfile()  # oracle routing spends no MLLM calls
        else:
            profile = self.profile(request)
        route = self.route(request, profile, config)

        state = ExecutionState(
            current_image=request.image,
            current_instruction=request.instruction,
            strategy=route,
            budget=config.budget,
            scratch={
                "original_image": request.image,
                "original_instruction": request.instruction,
                "profile": profile,
            },
        )

        failure: Exception | None = None
        try:
            while True:
                if state.history and state.history[-1].action.kind is ActionKind.TERMINATE:
                    break
                if state.step_count >= state.budget:
                    raise BudgetExceeded(f"budget of {state.budget} steps exhausted")
                allowed = self.allowed_actions(state, config)
                if not allowed:
                    break
                action = self.plan_next(state, allowed)
                self.execute_step(state, action)
                if (
                    action.kind is ActionKind.VERIFY
                    and state.scratch.get("not_finished_count", 0) >= MAX_NOT_FINISHED
                ):
                    raise BudgetExceeded(
                        f"verification failed {MAX_NOT_FINISHED} times"
                    )
        except (BudgetExceeded, ToolFailure) as exc:
            failure = exc

        trace = SessionTrace(
            header=self._header(MODE_ATR, route, profile, config, fallback=False)
        )
        trace.body = [self._step_doc(i, rec) for i, rec in enumerate(state.history)]

        if failure is None:
            return SessionResult(
                state.current_image, trace, self._backends.ledger, route, False, profile
            )
        if not config.enable_fallback:
            raise SessionFailed(f"session failed without fallback: {failure}") from failure
        try:
            final = self._backends.editor.edit(request.image, request.instruction)
        except BackendError as exc:
            raise SessionFailed(f"fallback edit failed: {exc}") from exc
        trace.header["fallback"] = True
        trace.body.append(
            {
                "type": "fallback",
                "reason": type(failure).__name__,
                "image": final.digest(),
                "ledger": self._backends.ledger.snapshot(),
            }
        )
        return SessionResult(final, trace, self._backends.ledger, route, True, profile)

    def _run_direct(self, request: EditRequest, config: EngineConfig) -> SessionResult:
        """No router, no oracle: a single safe pass through the editor."""
        profile = QueryProfile()
        state = ExecutionState(
            current_image=request.image,
            current_instruction=request.instruction,
            strategy=RouteStrategy.A_DIRECT,
            budget=max(config.budget, 1),
            scratch={
                "original_image": request.image,
                "original_instruction": request.instruction,
                "profile": profile,
            },
        )
        trace = SessionTrace(
            header=self._header(
                MODE_DIRECT, RouteStrategy.A_DIRECT, profile, config, fallback=False
            )
        )
        try:
            self.execute_step(state, Action(ActionKind.EDIT))
        except ToolFailure as exc:
            trace.body = [self._step_doc(i, rec) for i, rec in enumerate(state.history)]
            raise SessionFailed(f"direct edit failed: {exc}") from exc
        trace.body = [self._step_doc(i, rec) for i, rec in enumerate(state.history)]
        return SessionResult(
            state.current_image,
            trace,
            self._backends.ledger,
            RouteStrategy.A_DIRECT,
            False,
            profile,
        )

    def _run_bo2(self, request: EditRequest, config: EngineConfig) -> SessionResult:
        """Cost-matched baseline: two independent edits, judge-selected."""
        profile = QueryProfile()
        trace = SessionTrace(header=self._header(MODE_BO2, None, profile, config, False))
        candidates = []
        for index in (1, 2):
            try:
                out = self._backends.editor.edit(request.image, request.instruction)
            except BackendError as exc:
                raise SessionFailed(f"bo2 edit {index} failed: {exc}") from exc
            candidates.append(out)
            trace.body.append(
                {
                    "type": "step",
                    "index": index - 1,
                    "action": ActionKind.EDIT.value,
                    "tool": "backends.edit",
                    "args_digest": args_digest({"instruction": request.instruction}),
                    "status": "ok",
                    "detail": {"candidate": index},
                    "image": out.digest(),
                    "ledger": self._backends.ledger.snapshot(),
                }
            )
        choice = self._judge(request, candidates)
        trace.body.append(
            {
                "type": "selection",
                "choice": choice,
                "ledger": self._backends.ledger.snapshot(),
            }
        )
        return SessionResult(
            candidates[choice - 1], trace, self._backends.ledger, None, False, profile
        )

    def _judge(self, request: EditRequest, candidates: list[ImageBuffer]) -> int:
        prompt = prompts.JUDGE.format(instruction=request.instruction)
        parts = [text_part(prompt)] + [
            image_part(img, f"candidate_{i + 1}") for i, img in enumerate(candidates)
        ]
        try:
            reply = self._backends.mllm.complete(parts, role="judge")
        except BackendError:
            return 1
        match = re.search(r"\b([12])\b", reply)
        return int(match.group(1)) if match else 1

    # -- trace assembly ------------------------------------------------------

    def _header(
        self,
        mode: str,
        route: RouteStrategy | None,
        profile: QueryProfile,
        config: EngineConfig,
        fallback: bool,
    ) -> dict:
        return {
            "type": "header",
            "mode": mode,
            "route": route.value if route else None,
            "profile": profile.to_dict(),
            "config": config.to_dict(),
            "fallback": fallback,
            "prompt_version": prompts.PROMPT_VERSION,
        }

    @staticmethod
    def _step_doc(index: int, record: StepRecord) -> dict:
        doc = {
            "type": "step",
            "index": index,
            "action": record.action.kind.value,
            "tool": record.result.get("tool"),
            "args_digest": args_digest(record.call.arguments if record.call else {}),
            "status": record.result.get("status", "ok"),
            "detail": record.result.get("detail", {}),
            "image": record.result.get("image_digest"),
            "ledger": record.result.get("ledger", {}),
        }
        if record.result.get("status") == "error":
            doc["error_kind"] = record.result.get("error_kind")
        return doc


def run_session(
    request: EditRequest, config: EngineConfig, backends: BackendSet
) -> SessionResult:
    """Convenience wrapper: one engine, one session."""
    return Engine(backends).run_session(request, config)
