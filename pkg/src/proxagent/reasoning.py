"""Decision core: provider abstraction, reasoning modes, hierarchical memory.

The decision model is factored into typed provider calls (decide, plan,
select, reflect, summarize, route). Provider output is line-oriented tagged
text; anything that does not parse to the call kind's grammar is classified
malformed, never silently coerced. Scripted and replay providers are
deterministic; the remote provider speaks a chat-completions-shaped HTTP
contract.

Three mode loops produce exactly one committed control-or-terminal tool
call per outer step: standard (direct, with one optional follow-up after a
non-control tool), react (up to R inner rounds), and prospective (plan
three candidates, select one, degrade to a direct call on malformed
plans).
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from typing import Optional

from .tools import (
    CATEGORY_CONTROL,
    ToolCall,
    ToolDescriptor,
    validate_args,
)

CALL_DECIDE = "decide_action"
CALL_PLAN = "plan"
CALL_SELECT = "select"
CALL_REFLECT = "reflect"
CALL_SUMMARIZE = "summarize"
CALL_ROUTE = "route"

RISK_ORDER = {"Low": 0, "Medium": 1, "High": 2}

DEFAULT_MEMORY_WINDOW = 5
REMOTE_TIMEOUT_S = 60.0
STEP_RETRY_BUDGET = 1


class ReasoningError(Exception):
    pass


class MalformedOutput(ReasoningError):
    pass


class ProviderTimeout(ReasoningError):
    pass


class ReplayMismatch(ReasoningError):
    pass


@dataclass
class ProviderRequest:
    call_kind: str
    prompt: str
    observation: dict
    memory_text: str
    visible_tools: list[ToolDescriptor]
    task_kind: str = ""
    step_index: int = 0
    episode_id: str = ""
    inner_results: list = field(default_factory=list)  # [{"tool", "payload"}]
    extra: dict = field(default_factory=dict)
    hint: str = ""  # retry hint after malformed output


@dataclass
class Candidate:
    action: ToolCall
    predicted_outcome: str
    risk: str


class DecisionProvider:
    identity = "provider"
    kind = "abstract"

    def reset_episode(self, episode_id: str = "") -> None:
        pass

    def complete(self, request: ProviderRequest) -> str:
        raise NotImplementedError


# ---------------------------------------------------------------------------
# Output grammars
# ---------------------------------------------------------------------------

_TOOL_LINE = re.compile(r"^TOOL (?P<tool>\S+) ARGS (?P<args>.+)$")
_CANDIDATE_LINE = re.compile(
    r"^CANDIDATE (?P<i>\d+): TOOL (?P<tool>\S+) ARGS (?P<args>.+?) "
    r"OUTCOME (?P<outcome>.+?) RISK (?P<risk>Low|Medium|High)\s*$"
)
_SELECT_LINE = re.compile(r"^SELECT (?P<i>\d+)\s*$")


def format_tool_call(tool: str, args: dict) -> str:
    return f"TOOL {tool} ARGS {json.dumps(args, sort_keys=True)}"


def parse_tool_call(
    text: str, visible: list[ToolDescriptor], step_index: int = 0, inner_round: int = 0
) -> ToolCall:
    """Parse a decide-action output; raises MalformedOutput on any violation."""
    if not isinstance(text, str):
        raise MalformedOutput("output is not text")
    by_name = {t.name: t for t in visible}
    for line in text.splitlines():
        match = _TOOL_LINE.match(line.strip())
        if match is None:
            continue
        tool_name = match.group("tool")
        if tool_name not in by_name:
            raise MalformedOutput(f"tool {tool_name!r} not in visible set")
        try:
            args = json.loads(match.group("args"))
        except ValueError as exc:
            raise MalformedOutput(f"args are not valid JSON: {exc}") from exc
        problem = validate_args(by_name[tool_name], args)
        if problem is not None:
            raise MalformedOutput(problem)
        return ToolCall(
            tool=tool_name, args=args, step_index=step_index, inner_round=inner_round
        )
    raise MalformedOutput("no TOOL line found")


def parse_candidates(
    text: str, visible: list[ToolDescriptor], step_index: int = 0
) -> list[Candidate]:
    """Parse a plan output into at most three valid candidates."""
    if not isinstance(text, str):
        raise MalformedOutput("output is not text")
    by_name = {t.name: t for t in visible}
    candidates: list[Candidate] = []
    for line in text.splitlines():
        match = _CANDIDATE_LINE.match(line.strip())
        if match is None:
            continue
        tool_name = match.group("tool")
        if tool_name not in by_name:
            raise MalformedOutput(f"candidate tool {tool_name!r} not visible")
        try:
            args = json.loads(match.group("args"))
        except ValueError as exc:
            raise MalformedOutput(f"candidate args not valid JSON: {exc}") from exc
        problem = validate_args(by_name[tool_name], args)
        if problem is not None:
            raise MalformedOutput(problem)
        candidates.append(
            Candidate(
                action=ToolCall(tool=tool_name, args=args, step_index=step_index),
                predicted_outcome=match.group("outcome"),
                risk=match.group("risk"),
            )
        )
        if len(candidates) == 3:
            break
    if not candidates:
        raise MalformedOutput("no CANDIDATE lines found")
    return candidates


def parse_select(text: str, count: int) -> int:
    if not isinstance(text, str):
        raise MalformedOutput("output is not text")
    for line in text.splitlines():
        match = _SELECT_LINE.match(line.strip())
        if match is not None:
            index = int(match.group("i"))
            if 0 <= index < count:
                return index
            raise MalformedOutput(f"SELECT index {index} out of range")
    raise MalformedOutput("no SELECT line found")


# ---------------------------------------------------------------------------
# Hierarchical memory
# ---------------------------------------------------------------------------


@dataclass
class MemoryState:
    """Recent detailed window plus compressed long-term summary."""

    n: int = DEFAULT_MEMORY_WINDOW
    recent: list[dict] = field(default_factory=list)
    long_term: str = ""
    stats: dict = field(
        default_factory=lambda: {
            "evicted": 0,
            "tool_counts": {},
            "net_dx": 0.0,
            "net_dy": 0.0,
            "net_dz": 0.0,
            "last_bearing_az": None,
        }
    )

    def memory_text(self) -> str:
        parts = []
        if self.long_term:
            parts.append("Long-term summary: " + self.long_term)
        for record in self.recent:
            digest = record.get("result_digest", "")
            parts.append(
                f"step {record.get('step')}: {record.get('tool')}"
                f"({json.dumps(record.get('args', {}), sort_keys=True)}) -> {digest}"
            )
        return "\n".join(parts)


def template_summary(stats: dict) -> str:
    """Deterministic long-term summary: counts, net displacement, last bearing."""
    counts = ", ".join(
        f"{name} x{count}" for name, count in sorted(stats["tool_counts"].items())
    )
    bearing = stats["last_bearing_az"]
    bearing_text = "unknown" if bearing is None else f"{bearing:.1f} deg"
    return (
        f"{stats['evicted']} earlier steps compressed. Tool usage: {counts or 'none'}. "
        f"Net body-frame displacement: dx={stats['net_dx']:.2f} m, "
        f"dy={stats['net_dy']:.2f} m, dz={stats['net_dz']:.2f} m. "
        f"Last known target bearing: {bearing_text}."
    )


def update_memory(
    memory: MemoryState, step_record: dict, provider: Optional[DecisionProvider]
) -> MemoryState:
    """Append a step; evict the oldest into the long-term summary past N."""
    memory.recent.append(step_record)
    while len(memory.recent) > memory.n:
        evicted = memory.recent.pop(0)
        stats = memory.stats
        stats["evicted"] += 1
        tool = evicted.get("tool", "?")
        stats["tool_counts"][tool] = stats["tool_counts"].get(tool, 0) + 1
        args = evicted.get("args", {})
        if tool == "set_position":
            stats["net_dx"] += args.get("dx", 0.0)
            stats["net_dy"] += args.get("dy", 0.0)
            stats["net_dz"] += args.get("dz", 0.0)
        if evicted.get("bearing_az") is not None:
            stats["last_bearing_az"] = evicted["bearing_az"]
        try:
            if provider is not None and provider.kind != "scripted":
                request = ProviderRequest(
                    call_kind=CALL_SUMMARIZE,
                    prompt="Compress the evicted step into the running summary.",
                    observation={},
                    memory_text=memory.long_term,
                    visible_tools=[],
                    extra={"stats": stats, "evicted": evicted},
                )
                memory.long_term = provider.complete(request).strip()
            else:
                memory.long_term = template_summary(stats)
        except Exception:
            # summarizer failure degrades to raw-concatenation truncation
            raw = memory.long_term + " | " + json.dumps(evicted, sort_keys=True)
            memory.long_term = raw[-2000:]
    return memory


# ---------------------------------------------------------------------------
# Scripted provider
# ---------------------------------------------------------------------------


@dataclass
class ScriptedPolicyConfig:
    forward_fraction: float = 0.2
    min_forward_step: float = 0.1
    max_forward_step: float = 2.0
    terminate_range: float = 2.2
    align_threshold_deg: float = 15.0
    sweep_step_deg: float = 15.0
    sweep_limit_deg: float = 90.0
    brightness_low: float = 40.0
    brightness_high: float = 220.0
    lateral_gain_limit: float = 0.5
    assumed_radius: float = 0.5
    vision_range_bias: float = 3.0  # monocular overestimation factor
    nominal_gain: float = 1.0


_DIRECTIVE_MAX_STEP = re.compile(r"max_forward_step:\s*([0-9.]+)")
_DIRECTIVE_CAP = re.compile(
    r"cap_forward_step:\s*([0-9.]+)\s+within_range_m:\s*([0-9.]+)"
)


class ScriptedProvider(DecisionProvider):
    """Deterministic stand-in policy encoding the reported closed-loop behaviors:
    exposure correction toward nominal gain, a bounded +/-90 degree yaw sweep
    in 15 degree increments while the target is lost, range-proportional
    forward steps with step-size decay, and explicit termination near 2 m.

    Honors step-cap directives found in learned-skill prompt sections, which
    closes the self-evolution loop without a live model.
    """

    identity = "scripted-policy"
    kind = "scripted"

    def __init__(self, config: Optional[ScriptedPolicyConfig] = None):
        self.config = config or ScriptedPolicyConfig()
        self.reset_episode()

    def reset_episode(self, episode_id: str = "") -> None:
        self._sweep_cum = 0.0
        self._sweep_dir = 1.0
        self._gathered_parts: Optional[list] = None
        self._gathered_kb: Optional[dict] = None

    # -- provider entry point -----------------------------------------

    def complete(self, request: ProviderRequest) -> str:
        self._absorb_inner_results(request.inner_results)
        if request.call_kind == CALL_DECIDE:
            tool, args = self._decide(request)
            return format_tool_call(tool, args)
        if request.call_kind == CALL_PLAN:
            return self._plan(request)
        if request.call_kind == CALL_SELECT:
            candidates = request.extra.get("candidates", [])
            best = min(
                range(len(candidates)),
                key=lambda i: RISK_ORDER.get(candidates[i].get("risk"), 3),
            )
            return f"SELECT {best}"
        if request.call_kind == CALL_SUMMARIZE:
            return template_summary(request.extra["stats"])
        if request.call_kind == CALL_REFLECT:
            from .evolution import scripted_reflection  # local to avoid cycle

            return scripted_reflection(request.extra)
        return ""  # route: force the gateway's keyword fallback

    # -- internals ----------------------------------------------------

    def _absorb_inner_results(self, inner_results: list) -> None:
        for item in inner_results or []:
            payload = item.get("payload", {})
            if item.get("tool") == "segment_parts":
                self._gathered_parts = payload.get("parts", [])
            elif item.get("tool") == "kb_lookup":
                self._gathered_kb = payload

    def _directives(self, prompt: str) -> tuple[float, Optional[tuple[float, float]]]:
        max_step = self.config.max_forward_step
        for match in _DIRECTIVE_MAX_STEP.finditer(prompt):
            max_step = min(max_step, float(match.group(1)))
        cap = None
        match = _DIRECTIVE_CAP.search(prompt)
        if match is not None:
            cap = (float(match.group(1)), float(match.group(2)))
        return max_step, cap

    def _sweep_delta(self) -> float:
        cfg = self.config
        if self._sweep_dir > 0 and self._sweep_cum + cfg.sweep_step_deg > cfg.sweep_limit_deg:
            self._sweep_dir = -1.0
        elif self._sweep_dir < 0 and self._sweep_cum - cfg.sweep_step_deg < -cfg.sweep_limit_deg:
            self._sweep_dir = 1.0
        delta = self._sweep_dir * cfg.sweep_step_deg
        self._sweep_cum += delta
        return delta

    def _range_estimate(self, obs: dict) -> Optional[float]:
        if obs.get("lidar_range") is not None:
            return obs["lidar_range"]
        angular = obs.get("angular_size", 0.0)
        if angular <= 0:
            return None
        center = self.config.assumed_radius / math.tan(math.radians(angular) / 2.0)
        surface = max(center - self.config.assumed_radius, 0.05)
        return surface * self.config.vision_range_bias

    def _control_action(self, request: ProviderRequest) -> tuple[str, dict]:
        """The motion/exposure/terminate action the policy wants to commit."""
        cfg = self.config
        obs = request.observation
        visible_names = {t.name for t in request.visible_tools}

        brightness = obs.get("mean_brightness", 128.0)
        if (
            (brightness < cfg.brightness_low or brightness > cfg.brightness_high)
            and "set_exposure" in visible_names
        ):
            delta = round(cfg.nominal_gain - obs.get("exposure_gain", 1.0), 4)
            if abs(delta) > 1e-9:
                return "set_exposure", {"gain_delta": delta}

        if request.task_kind == "inspection":
            return self._inspection_control(request)

        if not obs.get("visible", False):
            return "set_attitude", {
                "dyaw": self._sweep_delta(), "dpitch": 0.0, "droll": 0.0,
            }
        self._sweep_cum, self._sweep_dir = 0.0, 1.0

        az, el = obs.get("bearing_az", 0.0), obs.get("bearing_el", 0.0)
        if abs(az) > cfg.align_threshold_deg or abs(el) > cfg.align_threshold_deg:
            return "set_attitude", {
                "dyaw": round(max(-90.0, min(90.0, az)), 3),
                "dpitch": round(max(-90.0, min(90.0, el)), 3),
                "droll": 0.0,
            }

        rng = self._range_estimate(obs)
        if rng is None:
            return "set_attitude", {"dyaw": 0.0, "dpitch": 0.0, "droll": 0.0}
        if rng <= cfg.terminate_range:
            return "terminate", {"reason": f"target reached at {rng:.2f} m"}

        max_step, cap = self._directives(request.prompt)
        forward = max(cfg.min_forward_step, min(cfg.forward_fraction * rng, max_step))
        if cap is not None and rng < cap[1]:
            forward = min(forward, cap[0])
        lat = max(-cfg.lateral_gain_limit,
                  min(cfg.lateral_gain_limit, forward * math.tan(math.radians(az))))
        vert = max(-cfg.lateral_gain_limit,
                   min(cfg.lateral_gain_limit, forward * math.tan(math.radians(el))))
        norm = math.sqrt(forward**2 + lat**2 + vert**2)
        if norm > 2.0 and forward <= 2.0:
            scale = 1.999 / norm
            forward, lat, vert = forward * scale, lat * scale, vert * scale
        return "set_position", {
            "dx": round(forward, 4), "dy": round(lat, 4), "dz": round(vert, 4),
        }

    def _inspection_control(self, request: ProviderRequest) -> tuple[str, dict]:
        if self._gathered_parts is not None and self._gathered_kb is not None:
            return "terminate", {
                "reason": "inspection complete",
                "report": self._build_report(request.observation),
            }
        # evidence still missing and only control tools available: hold pose
        return "set_attitude", {"dyaw": 0.0, "dpitch": 0.0, "droll": 0.0}

    def _build_report(self, obs: dict) -> dict:
        parts = self._gathered_parts or []
        kb = self._gathered_kb or {}
        attributes = [p.get("attribute", "") for p in kb.get("parts", [])]
        names = [p.get("name", "") for p in parts]
        appendage_attrs = [
            a for a in attributes
            if any(w in a for w in ("panel", "antenna", "wing", "boom", "dish"))
        ]
        radius = kb.get("bounding_radius", 0.5)
        return {
            "structure": "; ".join(attributes) or "structure not resolved",
            "appendages": "; ".join(appendage_attrs) or "no appendages resolved",
            "surface": "; ".join(attributes) or "surface not resolved",
            "condition": "intact hardware with no visible damage observed "
                         f"across parts {', '.join(names) or 'none'}",
            "scale": f"roughly {2 * radius:.1f} meter across the bounding envelope",
        }

    def _decide(self, request: ProviderRequest) -> tuple[str, dict]:
        cfg = self.config
        obs = request.observation
        visible_names = {t.name for t in request.visible_tools}
        brightness = obs.get("mean_brightness", 128.0)

        # diagnostic first when a perception call is still possible this step
        if (
            (brightness < cfg.brightness_low or brightness > cfg.brightness_high)
            and "brightness_assess" in visible_names
            and not request.inner_results
        ):
            return "brightness_assess", {}

        if request.task_kind == "inspection":
            if self._gathered_parts is None and "segment_parts" in visible_names:
                return "segment_parts", {}
            if (
                self._gathered_parts is not None
                and self._gathered_kb is None
                and "kb_lookup" in visible_names
            ):
                return "kb_lookup", {}

        return self._control_action(request)

    def _plan(self, request: ProviderRequest) -> str:
        tool, args = self._control_action(request)
        lines = [
            f"CANDIDATE 0: {format_tool_call(tool, args)} "
            "OUTCOME expected progress toward the task goal RISK Low"
        ]
        if tool == "set_position":
            half = {k: round(v / 2.0, 4) for k, v in args.items()}
            lines.append(
                f"CANDIDATE 1: {format_tool_call('set_position', half)} "
                "OUTCOME slower but safer progress RISK Medium"
            )
        else:
            lines.append(
                "CANDIDATE 1: "
                + format_tool_call(
                    "set_attitude", {"dyaw": 0.0, "dpitch": 0.0, "droll": 0.0}
                )
                + " OUTCOME hold pose and reassess RISK Medium"
            )
        lines.append(
            "CANDIDATE 2: "
            + format_tool_call("set_position", {"dx": -0.5, "dy": 0.0, "dz": 0.0})
            + " OUTCOME retreat and widen the view RISK High"
        )
        return "\n".join(lines)


# ---------------------------------------------------------------------------
# Replay, recording, and remote providers
# ---------------------------------------------------------------------------


class ReplayProvider(DecisionProvider):
    """Replays a recorded transcript; any divergence is a hard error."""

    identity = "replay"
    kind = "replay"

    def __init__(self, path):
        with open(path, encoding="utf-8") as fh:
            self.entries = json.load(fh)["entries"]
        self._cursor = 0

    def reset_episode(self, episode_id: str = "") -> None:
        pass

    def complete(self, request: ProviderRequest) -> str:
        if self._cursor >= len(self.entries):
            raise ReplayMismatch("transcript exhausted")
        entry = self.entries[self._cursor]
        self._cursor += 1
        if entry["call_kind"] != request.call_kind or entry["step"] != request.step_index:
            raise ReplayMismatch(
                f"expected ({entry['step']}, {entry['call_kind']}), "
                f"got ({request.step_index}, {request.call_kind})"
            )
        return entry["output"]


class RecordingProvider(DecisionProvider):
    """Wraps another provider and records a replayable transcript."""

    kind = "recording"

    def __init__(self, inner: DecisionProvider):
        self.inner = inner
        self.identity = f"recording({inner.identity})"
        self.entries: list[dict] = []
        self._episode_id = ""

    def reset_episode(self, episode_id: str = "") -> None:
        self._episode_id = episode_id
        self.inner.reset_episode(episode_id)

    def complete(self, request: ProviderRequest) -> str:
        output = self.inner.complete(request)
        self.entries.append(
            {
                "episode": self._episode_id or request.episode_id,
                "step": request.step_index,
                "call_kind": request.call_kind,
                "output": output,
            }
        )
        return output

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump({"entries": self.entries}, fh, indent=2, sort_keys=True)


class RemoteProvider(DecisionProvider):
    """Chat-completions-shaped HTTP provider.

    System content is the assembled skill prompt plus memory; user content is
    the observation record and, per call kind, a grammar reminder.
    """

    kind = "remote"

    def __init__(
        self,
        endpoint: str,
        model: str,
        temperature: float = 0.2,
        timeout: float = REMOTE_TIMEOUT_S,
        api_key: str = "",
    ):
        if temperature > 0.3:
            raise ReasoningError("temperature must be <= 0.3")
        self.endpoint = endpoint
        self.model = model
        self.temperature = temperature
        self.timeout = timeout
        self.api_key = api_key
        self.identity = f"remote({model})"

    _GRAMMAR_HINTS = {
        CALL_DECIDE: "Answer with exactly one line: TOOL <name> ARGS <json-object>.",
        CALL_PLAN: (
            "Answer with up to three lines, each exactly: "
            "CANDIDATE <i>: TOOL <name> ARGS <json> OUTCOME <text> RISK <Low|Medium|High>."
        ),
        CALL_SELECT: "Answer with exactly one line: SELECT <index>.",
        CALL_REFLECT: (
            "Answer with lines MUTATION <action>, TARGET <name|->, SCOPE <kind>, "
            "then INTENT/TRIGGER/RULE/CONSTRAINTS/EVIDENCE/JUSTIFY lines."
        ),
        CALL_SUMMARIZE: "Answer with a short plain-text summary.",
        CALL_ROUTE: "Answer with exactly: task=<name>; helpers=<a,b>; because=<text>.",
    }

    def complete(self, request: ProviderRequest) -> str:
        import requests  # noqa: PLC0415

        system = request.prompt
        if request.memory_text:
            system += "\n\nMemory:\n" + request.memory_text
        user = json.dumps(
            {
                "observation": request.observation,
                "visible_tools": [t.name for t in request.visible_tools],
                "inner_results": request.inner_results,
                "extra": {
                    k: v for k, v in request.extra.items() if k != "candidates"
                },
            },
            sort_keys=True,
        )
        user += "\n" + self._GRAMMAR_HINTS.get(request.call_kind, "")
        if request.hint:
            user += "\nPrevious answer was malformed: " + request.hint
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        try:
            response = requests.post(
                self.endpoint,
                json={
                    "model": self.model,
                    "temperature": self.temperature,
                    "messages": [
                        {"role": "system", "content": system},
                        {"role": "user", "content": user},
                    ],
                },
                headers=headers,
                timeout=self.timeout,
            )
            response.raise_for_status()
            return response.json()["choices"][0]["message"]["content"]
        except requests.Timeout as exc:
            raise ProviderTimeout(str(exc)) from exc
        except requests.RequestException as exc:
            raise ReasoningError(f"remote provider failed: {exc}") from exc


def make_provider(spec: dict) -> DecisionProvider:
    """Instantiate a provider from a configuration record."""
    kind = spec.get("kind", "scripted")
    if kind == "scripted":
        policy_fields = {
            k: v for k, v in spec.items() if k in ScriptedPolicyConfig.__dataclass_fields__
        }
        return ScriptedProvider(ScriptedPolicyConfig(**policy_fields))
    if kind == "replay":
        return ReplayProvider(spec["transcript"])
    if kind == "remote":
        return RemoteProvider(
            endpoint=spec["endpoint"],
            model=spec.get("model", ""),
            temperature=spec.get("temperature", 0.2),
            timeout=spec.get("timeout", REMOTE_TIMEOUT_S),
            api_key=spec.get("api_key", ""),
        )
    raise ReasoningError(f"unknown provider kind: {kind!r}")


# ---------------------------------------------------------------------------
# Mode step loops
# ---------------------------------------------------------------------------


@dataclass
class ModeStepResult:
    call: ToolCall
    inner: list[dict] = field(default_factory=list)
    provider_calls: int = 0
    degraded: bool = False


def _control_tools(visible: list[ToolDescriptor]) -> list[ToolDescriptor]:
    return [t for t in visible if t.category == CATEGORY_CONTROL]


def _is_control(call: ToolCall, visible: list[ToolDescriptor]) -> bool:
    for tool in visible:
        if tool.name == call.tool:
            return tool.category == CATEGORY_CONTROL
    return False


class _StepContext:
    """Shared plumbing for one outer step: request building and retries."""

    def __init__(self, obs, prompt, memory, visible, provider, dispatcher,
                 task_kind, step_index, episode_id):
        self.obs = obs
        self.prompt = prompt
        self.memory = memory
        self.visible = visible
        self.provider = provider
        self.dispatcher = dispatcher
        self.task_kind = task_kind
        self.step_index = step_index
        self.episode_id = episode_id
        self.provider_calls = 0
        self.inner: list[dict] = []
        self.inner_results: list[dict] = []

    def request(self, call_kind: str, visible=None, hint: str = "", extra=None):
        return ProviderRequest(
            call_kind=call_kind,
            prompt=self.prompt.text,
            observation=self.obs,
            memory_text=self.memory.memory_text(),
            visible_tools=self.visible if visible is None else visible,
            task_kind=self.task_kind,
            step_index=self.step_index,
            episode_id=self.episode_id,
            inner_results=self.inner_results,
            extra=extra or {},
            hint=hint,
        )

    def decide(self, visible=None, inner_round: int = 0) -> ToolCall:
        """One decide-action call with a single retry on malformed output."""
        active = self.visible if visible is None else visible
        hint = ""
        for attempt in range(STEP_RETRY_BUDGET + 1):
            raw = self.provider.complete(self.request(CALL_DECIDE, active, hint=hint))
            self.provider_calls += 1
            try:
                return parse_tool_call(raw, active, self.step_index, inner_round)
            except MalformedOutput as exc:
                hint = str(exc)
                if attempt == STEP_RETRY_BUDGET:
                    raise

    def run_inner(self, call: ToolCall, inner_round: int) -> dict:
        result = self.dispatcher.dispatch(call)
        record = {
            "round": inner_round,
            "tool": call.tool,
            "args": call.args,
            "result": result.to_dict(),
        }
        self.inner.append(record)
        self.inner_results.append({"tool": call.tool, "payload": result.payload})
        return record


def step_standard(obs, prompt, memory, visible, provider, dispatcher,
                  task_kind="", step_index=0, episode_id="") -> ModeStepResult:
    """Direct decision; one optional follow-up after a non-control tool.

    The follow-up is restricted to control/terminal tools, so the committed
    action of every step is a control-or-terminal call.
    """
    ctx = _StepContext(obs, prompt, memory, visible, provider, dispatcher,
                       task_kind, step_index, episode_id)
    call = ctx.decide()
    if _is_control(call, visible):
        return ModeStepResult(call, ctx.inner, ctx.provider_calls)
    ctx.run_inner(call, inner_round=1)
    followup = ctx.decide(visible=_control_tools(visible), inner_round=0)
    return ModeStepResult(followup, ctx.inner, ctx.provider_calls)


def step_react(obs, prompt, memory, visible, provider, dispatcher,
               task_kind="", step_index=0, episode_id="", rounds: int = 3) -> ModeStepResult:
    """Thought-action-observation loop: exits as soon as a control tool is
    chosen; the final round is restricted to control/terminal tools."""
    if rounds < 1:
        raise ReasoningError("rounds must be >= 1")
    ctx = _StepContext(obs, prompt, memory, visible, provider, dispatcher,
                       task_kind, step_index, episode_id)
    for inner_round in range(1, rounds + 1):
        final = inner_round == rounds
        active = _control_tools(visible) if final else visible
        call = ctx.decide(visible=active, inner_round=inner_round)
        if _is_control(call, visible):
            call.inner_round = inner_round
            return ModeStepResult(call, ctx.inner, ctx.provider_calls)
        ctx.run_inner(call, inner_round)
    raise MalformedOutput("react loop ended without a control tool")  # pragma: no cover


def step_prospective(obs, prompt, memory, visible, provider, dispatcher,
                     task_kind="", step_index=0, episode_id="") -> ModeStepResult:
    """Plan up to three candidates, then select; degrades to a direct
    control-restricted call when the plan or selection is malformed."""
    ctx = _StepContext(obs, prompt, memory, visible, provider, dispatcher,
                       task_kind, step_index, episode_id)
    control = _control_tools(visible)

    raw_plan = provider.complete(ctx.request(CALL_PLAN))
    ctx.provider_calls += 1
    try:
        candidates = parse_candidates(raw_plan, control, step_index)
    except MalformedOutput:
        call = ctx.decide(visible=control)
        return ModeStepResult(call, ctx.inner, ctx.provider_calls, degraded=True)

    listing = [
        {
            "index": i,
            "tool": c.action.tool,
            "args": c.action.args,
            "outcome": c.predicted_outcome,
            "risk": c.risk,
        }
        for i, c in enumerate(candidates)
    ]
    raw_select = provider.complete(
        ctx.request(CALL_SELECT, extra={"candidates": listing})
    )
    ctx.provider_calls += 1
    try:
        index = parse_select(raw_select, len(candidates))
    except MalformedOutput:
        call = ctx.decide(visible=control)
        return ModeStepResult(call, ctx.inner, ctx.provider_calls, degraded=True)
    return ModeStepResult(candidates[index].action, ctx.inner, ctx.provider_calls)
