"""Tool layer: catalog, profiles, and synchronous dispatch.

Tools fall into four categories. Control tools publish to the matching
``cmd/*`` bus key and block until the next observation arrives; perception
tools compute over the latest observation; the knowledge tool reads the
satellite knowledge base; the auxiliary tool evaluates a pure arithmetic
expression. Translation and rotation are deliberately separate tools.

A profile is a whitelist; the visible set is the intersection of the
whitelist with the catalog, in catalog order. The three shipped profiles
differ only in configuration, never in code.
"""

from __future__ import annotations

import ast
import hashlib
import json
import time
from dataclasses import dataclass, field
from typing import Optional

from . import bus as busmod
from .env import HALF_FOV_DEG, Observation, SatelliteModel


class ToolError(Exception):
    pass


CATEGORY_PERCEPTION = "perception"
CATEGORY_CONTROL = "control"
CATEGORY_KNOWLEDGE = "knowledge"
CATEGORY_AUXILIARY = "auxiliary"

# Error kinds carried in ToolResult
ERR_INVALID_ARGS = "InvalidArgs"
ERR_NOT_VISIBLE = "ToolNotVisible"
ERR_ENV_TIMEOUT = "EnvTimeout"
ERR_EXPRESSION = "ExpressionError"
ERR_STEP_LIMIT = "StepLimitExceeded"
ERR_GAIN_RANGE = "GainOutOfRange"

BRIGHTNESS_UNDER = 40.0
BRIGHTNESS_OVER = 220.0


@dataclass(frozen=True)
class ToolDescriptor:
    name: str
    category: str
    params: dict  # name -> {"type": ..., "required": bool, "unit"?: str}
    description: str
    terminal: bool = False


@dataclass(frozen=True)
class ToolProfile:
    name: str
    allowed: frozenset[str]

    @classmethod
    def of(cls, name: str, allowed) -> "ToolProfile":
        return cls(name=name, allowed=frozenset(allowed))


@dataclass
class ToolCall:
    tool: str
    args: dict
    step_index: int = 0
    inner_round: int = 0

    def to_dict(self) -> dict:
        return {
            "tool": self.tool,
            "args": self.args,
            "step_index": self.step_index,
            "inner_round": self.inner_round,
        }


@dataclass
class ToolResult:
    ok: bool
    payload: dict = field(default_factory=dict)
    error_kind: Optional[str] = None

    def __post_init__(self) -> None:
        assert self.ok == (self.error_kind is None)

    def to_dict(self) -> dict:
        return {"ok": self.ok, "payload": self.payload, "error_kind": self.error_kind}


_NUM = {"type": "number", "required": True}
_NUM_OPT = {"type": "number", "required": False}


class ToolCatalog:
    def __init__(self, tools: list[ToolDescriptor]):
        names = [t.name for t in tools]
        if len(names) != len(set(names)):
            raise ToolError("duplicate tool names in catalog")
        if sum(1 for t in tools if t.terminal) != 1:
            raise ToolError("catalog must have exactly one terminal tool")
        self.tools = list(tools)
        self.by_name = {t.name: t for t in tools}

    def __len__(self) -> int:
        return len(self.tools)

    def get(self, name: str) -> Optional[ToolDescriptor]:
        return self.by_name.get(name)

    def schema_document(self) -> dict:
        """MCP-shaped introspection document for external clients."""
        entries = []
        for tool in self.tools:
            properties = {}
            required = []
            for pname, meta in tool.params.items():
                prop = {"type": meta["type"]}
                if "unit" in meta:
                    prop["description"] = f"unit: {meta['unit']}"
                properties[pname] = prop
                if meta.get("required"):
                    required.append(pname)
            entries.append(
                {
                    "name": tool.name,
                    "description": tool.description,
                    "inputSchema": {
                        "type": "object",
                        "properties": properties,
                        "required": required,
                    },
                }
            )
        return {"tools": entries}

    def schema_text(self) -> str:
        return json.dumps(self.schema_document(), indent=2, sort_keys=True)


def builtin_catalog() -> ToolCatalog:
    meters = {"type": "number", "required": True, "unit": "meters"}
    degrees = {"type": "number", "required": True, "unit": "degrees"}
    return ToolCatalog(
        [
            ToolDescriptor(
                "brightness_assess", CATEGORY_PERCEPTION, {},
                "Assess mean image brightness and report an exposure verdict.",
            ),
            ToolDescriptor(
                "segment_parts", CATEGORY_PERCEPTION, {},
                "List target satellite parts currently visible, with bearings.",
            ),
            ToolDescriptor(
                "crop_region", CATEGORY_PERCEPTION,
                {
                    "az_min": {"type": "number", "required": True, "unit": "degrees"},
                    "az_max": {"type": "number", "required": True, "unit": "degrees"},
                },
                "Restrict the part listing to a bearing window.",
            ),
            ToolDescriptor(
                "zoom", CATEGORY_PERCEPTION,
                {"factor": {"type": "number", "required": True}},
                "Magnify the reported angular size detail of the target.",
            ),
            ToolDescriptor(
                "lidar_range", CATEGORY_PERCEPTION, {},
                "Read the latest LiDAR range summary to the target surface.",
            ),
            ToolDescriptor(
                "set_position", CATEGORY_CONTROL,
                {"dx": meters, "dy": meters, "dz": meters},
                "Translate the chaser by a body-frame delta.",
            ),
            ToolDescriptor(
                "set_attitude", CATEGORY_CONTROL,
                {"dyaw": degrees, "dpitch": degrees, "droll": degrees},
                "Rotate the chaser by yaw/pitch/roll deltas.",
            ),
            ToolDescriptor(
                "set_exposure", CATEGORY_CONTROL,
                {"gain_delta": {"type": "number", "required": True}},
                "Adjust the camera exposure gain by a delta.",
            ),
            ToolDescriptor(
                "terminate", CATEGORY_CONTROL,
                {
                    "reason": {"type": "string", "required": False},
                    "report": {"type": "object", "required": False},
                },
                "End the episode; optionally attach an inspection report.",
                terminal=True,
            ),
            ToolDescriptor(
                "kb_lookup", CATEGORY_KNOWLEDGE,
                {"satellite_id": {"type": "string", "required": False}},
                "Look up known characteristics of a satellite.",
            ),
            ToolDescriptor(
                "eval_expr", CATEGORY_AUXILIARY,
                {"expression": {"type": "string", "required": True}},
                "Evaluate a pure arithmetic expression.",
            ),
        ]
    )


def builtin_profiles() -> dict[str, ToolProfile]:
    """The three shipped profiles, expressible purely as configuration."""
    everything = [t.name for t in builtin_catalog().tools]
    vision_only = [n for n in everything if n not in ("lidar_range", "eval_expr")]
    hybrid_nav = [n for n in everything if n != "eval_expr"]
    return {
        "vision-only": ToolProfile.of("vision-only", vision_only),
        "hybrid-nav": ToolProfile.of("hybrid-nav", hybrid_nav),
        "hybrid-nav-code": ToolProfile.of("hybrid-nav-code", everything),
    }


def visible_tools(catalog: ToolCatalog, profile: ToolProfile) -> list[ToolDescriptor]:
    """Whitelist intersection, stable-ordered by catalog order."""
    return [t for t in catalog.tools if t.name in profile.allowed]


def validate_args(tool: ToolDescriptor, args: dict) -> Optional[str]:
    """Return an error message, or None when args fit the schema."""
    if not isinstance(args, dict):
        return "args must be an object"
    for pname, meta in tool.params.items():
        if meta.get("required") and pname not in args:
            return f"missing required arg {pname!r}"
    for pname, value in args.items():
        meta = tool.params.get(pname)
        if meta is None:
            return f"unknown arg {pname!r}"
        expected = meta["type"]
        if expected == "number":
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                return f"arg {pname!r} must be a number"
        elif expected == "string":
            if not isinstance(value, str):
                return f"arg {pname!r} must be a string"
        elif expected == "object":
            if not isinstance(value, dict):
                return f"arg {pname!r} must be an object"
    return None


def safe_eval(expression: str) -> float:
    """Arithmetic-only expression evaluator: numbers, + - * /, parens, unary minus."""
    try:
        tree = ast.parse(expression, mode="eval")
    except (SyntaxError, ValueError) as exc:
        raise ToolError(f"parse error: {exc}") from exc

    def walk(node):
        if isinstance(node, ast.Expression):
            return walk(node.body)
        if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)):
            if isinstance(node.value, bool):
                raise ToolError("booleans not allowed")
            return node.value
        if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
            operand = walk(node.operand)
            return -operand if isinstance(node.op, ast.USub) else operand
        if isinstance(node, ast.BinOp) and isinstance(
            node.op, (ast.Add, ast.Sub, ast.Mult, ast.Div)
        ):
            left, right = walk(node.left), walk(node.right)
            if isinstance(node.op, ast.Add):
                return left + right
            if isinstance(node.op, ast.Sub):
                return left - right
            if isinstance(node.op, ast.Mult):
                return left * right
            if right == 0:
                raise ToolError("division by zero")
            return left / right
        raise ToolError(f"disallowed syntax: {type(node).__name__}")

    return walk(tree)


def part_bearing_offsets(satellite: SatelliteModel, part_name: str) -> tuple[float, float]:
    """Deterministic angular offset of a part inside the target silhouette."""
    digest = hashlib.blake2b(
        f"{satellite.id}:{part_name}".encode(), digest_size=4
    ).digest()
    frac_az = digest[0] / 255.0 - 0.5
    frac_el = digest[1] / 255.0 - 0.5
    return frac_az * 0.8, frac_el * 0.8  # fractions of half the angular size


class ToolDispatcher:
    """Synchronous per-episode tool dispatch over the bus."""

    def __init__(
        self,
        backend: busmod.BusBackend,
        catalog: ToolCatalog,
        profile: ToolProfile,
        satellites: dict[str, SatelliteModel],
        target_id: str,
        obs_timeout: float = 5.0,
    ):
        self.backend = backend
        self.catalog = catalog
        self.profile = profile
        self.satellites = satellites
        self.target_id = target_id
        self.obs_timeout = obs_timeout

    # -- observation access -------------------------------------------

    def latest_observation(self) -> Optional[Observation]:
        rgb = self.backend.get_latest(busmod.SENSOR_RGB)
        if rgb is None:
            return None
        lidar = self.backend.get_latest(busmod.SENSOR_LIDAR)
        return Observation.from_payloads(
            rgb.record(), lidar.record() if lidar else {"range_m": None}
        )

    def _await_new_observation(self, prev_seq: int) -> Optional[dict]:
        deadline = time.monotonic() + self.obs_timeout
        while time.monotonic() < deadline:
            msg = self.backend.get_latest(busmod.SENSOR_RGB)
            if msg is not None and msg.seq > prev_seq:
                return msg.record()
            time.sleep(0.001)
        return None

    # -- dispatch ------------------------------------------------------

    def dispatch(self, call: ToolCall) -> ToolResult:
        tool = self.catalog.get(call.tool)
        if tool is None or tool.name not in self.profile.allowed:
            return ToolResult(False, {"tool": call.tool}, ERR_NOT_VISIBLE)
        problem = validate_args(tool, call.args)
        if problem is not None:
            return ToolResult(False, {"detail": problem}, ERR_INVALID_ARGS)
        if tool.category == CATEGORY_CONTROL:
            return self._dispatch_control(tool, call.args)
        if tool.category == CATEGORY_PERCEPTION:
            return self._dispatch_perception(tool, call.args)
        if tool.category == CATEGORY_KNOWLEDGE:
            return self._dispatch_knowledge(call.args)
        return self._dispatch_auxiliary(call.args)

    def _dispatch_control(self, tool: ToolDescriptor, args: dict) -> ToolResult:
        if tool.name == "terminate":
            payload = {}
            if "reason" in args:
                payload["reason"] = args["reason"]
            if "report" in args:
                payload["report"] = args["report"]
            self.backend.publish(busmod.CMD_TERMINATE, busmod.encode(payload))
            return ToolResult(True, {"terminated": True})

        prev = self.backend.get_latest(busmod.SENSOR_RGB)
        prev_seq = prev.seq if prev else 0
        if tool.name == "set_position":
            record = {
                "dx": args["dx"], "dy": args["dy"], "dz": args["dz"],
                "dyaw": 0.0, "dpitch": 0.0, "droll": 0.0,
            }
            self.backend.publish(busmod.CMD_POSE_DELTA, busmod.encode(record))
        elif tool.name == "set_attitude":
            record = {
                "dx": 0.0, "dy": 0.0, "dz": 0.0,
                "dyaw": args["dyaw"], "dpitch": args["dpitch"], "droll": args["droll"],
            }
            self.backend.publish(busmod.CMD_POSE_DELTA, busmod.encode(record))
        elif tool.name == "set_exposure":
            self.backend.publish(
                busmod.CMD_EXPOSURE, busmod.encode({"gain_delta": args["gain_delta"]})
            )
        else:  # pragma: no cover - catalog is fixed
            return ToolResult(False, {"tool": tool.name}, ERR_INVALID_ARGS)

        obs = self._await_new_observation(prev_seq)
        if obs is None:
            return ToolResult(False, {"tool": tool.name}, ERR_ENV_TIMEOUT)
        note = obs.get("note", "")
        if note.startswith("StepLimitExceeded"):
            return ToolResult(False, {"detail": note, "observation": obs}, ERR_STEP_LIMIT)
        if note.startswith("GainOutOfRange"):
            return ToolResult(False, {"detail": note, "observation": obs}, ERR_GAIN_RANGE)
        return ToolResult(True, {"observation": obs})

    def _visible_parts(self, obs: Observation) -> list[dict]:
        if not obs.visible or obs.mean_brightness < BRIGHTNESS_UNDER:
            return []
        satellite = self.satellites[self.target_id]
        parts = []
        half_size = obs.angular_size / 2.0
        for part_name, _attr in satellite.parts:
            off_az, off_el = part_bearing_offsets(satellite, part_name)
            part_az = obs.bearing_az + off_az * half_size
            part_el = obs.bearing_el + off_el * half_size
            if abs(part_az) <= HALF_FOV_DEG and abs(part_el) <= HALF_FOV_DEG:
                parts.append(
                    {
                        "name": part_name,
                        "bearing_az": round(part_az, 3),
                        "bearing_el": round(part_el, 3),
                    }
                )
        return parts

    def _dispatch_perception(self, tool: ToolDescriptor, args: dict) -> ToolResult:
        obs = self.latest_observation()
        if obs is None:
            return ToolResult(False, {"detail": "no observation yet"}, ERR_ENV_TIMEOUT)
        if tool.name == "brightness_assess":
            value = obs.mean_brightness
            if value < BRIGHTNESS_UNDER:
                verdict = "underexposed"
            elif value > BRIGHTNESS_OVER:
                verdict = "overexposed"
            else:
                verdict = "nominal"
            return ToolResult(True, {"mean_brightness": value, "verdict": verdict})
        if tool.name == "segment_parts":
            return ToolResult(True, {"parts": self._visible_parts(obs)})
        if tool.name == "crop_region":
            lo, hi = args["az_min"], args["az_max"]
            parts = [
                p for p in self._visible_parts(obs) if lo <= p["bearing_az"] <= hi
            ]
            return ToolResult(True, {"parts": parts})
        if tool.name == "zoom":
            factor = args["factor"]
            if factor <= 0:
                return ToolResult(False, {"detail": "factor must be > 0"}, ERR_INVALID_ARGS)
            return ToolResult(
                True, {"angular_size_detail": obs.angular_size * factor}
            )
        if tool.name == "lidar_range":
            return ToolResult(True, {"range_m": obs.lidar_range})
        return ToolResult(False, {"tool": tool.name}, ERR_INVALID_ARGS)  # pragma: no cover

    def _dispatch_knowledge(self, args: dict) -> ToolResult:
        sat_id = args.get("satellite_id", self.target_id)
        satellite = self.satellites.get(sat_id)
        if satellite is None:
            return ToolResult(False, {"detail": f"unknown satellite {sat_id!r}"}, ERR_INVALID_ARGS)
        return ToolResult(
            True,
            {
                "id": satellite.id,
                "bounding_radius": satellite.bounding_radius,
                "parts": [
                    {"name": name, "attribute": attr} for name, attr in satellite.parts
                ],
            },
        )

    def _dispatch_auxiliary(self, args: dict) -> ToolResult:
        try:
            value = safe_eval(args["expression"])
        except ToolError as exc:
            return ToolResult(False, {"detail": str(exc)}, ERR_EXPRESSION)
        return ToolResult(True, {"value": value})
