import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from proxagent import reasoning
from proxagent.tools import builtin_catalog, builtin_profiles, visible_tools

VISIBLE = visible_tools(builtin_catalog(), builtin_profiles()["hybrid-nav-code"])
CONTROL = [t for t in VISIBLE if t.category == "control"]


def obs(**over):
    record = {
        "visible": True, "bearing_az": 0.0, "bearing_el": 0.0,
        "angular_size": 4.0, "mean_brightness": 140.0, "exposure_gain": 1.0,
        "step_index": 0, "collided": False, "lidar_range": 10.0,
    }
    record.update(over)
    return record


def request(call_kind=reasoning.CALL_DECIDE, observation=None, prompt="",
            task_kind="rendezvous", inner_results=None, extra=None):
    return reasoning.ProviderRequest(
        call_kind=call_kind, prompt=prompt,
        observation=obs() if observation is None else observation,
        memory_text="", visible_tools=VISIBLE, task_kind=task_kind,
        inner_results=inner_results or [], extra=extra or {},
    )


# -- grammars -----------------------------------------------------------


def test_tool_call_grammar_round_trip():
    text = reasoning.format_tool_call("set_position", {"dx": 1.0, "dy": 0.0, "dz": 0.0})
    call = reasoning.parse_tool_call(text, VISIBLE)
    assert call.tool == "set_position"
    assert call.args == {"dx": 1.0, "dy": 0.0, "dz": 0.0}


@pytest.mark.parametrize(
    "text",
    [
        "",
        "please move forward",
        "TOOL warp_drive ARGS {}",
        'TOOL set_position ARGS {"dx": 1}',          # missing required args
        "TOOL set_position ARGS not-json",
        'TOOL set_position ARGS {"dx": true, "dy": 0, "dz": 0}',
    ],
)
def test_malformed_decide_outputs_raise(text):
    with pytest.raises(reasoning.MalformedOutput):
        reasoning.parse_tool_call(text, VISIBLE)


def test_candidate_grammar():
    text = "\n".join(
        [
            'CANDIDATE 0: TOOL set_position ARGS {"dx": 1.0, "dy": 0.0, "dz": 0.0} '
            "OUTCOME closes range RISK Low",
            'CANDIDATE 1: TOOL terminate ARGS {} OUTCOME ends episode RISK High',
        ]
    )
    candidates = reasoning.parse_candidates(text, CONTROL)
    assert len(candidates) == 2
    assert candidates[0].risk == "Low"
    assert candidates[1].action.tool == "terminate"


def test_candidates_capped_at_three():
    line = ('CANDIDATE {i}: TOOL terminate ARGS {{}} OUTCOME ends RISK Low')
    text = "\n".join(line.format(i=i) for i in range(6))
    assert len(reasoning.parse_candidates(text, CONTROL)) == 3


def test_select_grammar_bounds():
    assert reasoning.parse_select("SELECT 1", 3) == 1
    with pytest.raises(reasoning.MalformedOutput):
        reasoning.parse_select("SELECT 5", 3)
    with pytest.raises(reasoning.MalformedOutput):
        reasoning.parse_select("pick the first", 3)


# -- memory -------------------------------------------------------------


def make_step(i, tool="set_position"):
    return {"step": i, "tool": tool, "args": {"dx": 1.0, "dy": 0.0, "dz": 0.0},
            "result_digest": "{}", "bearing_az": float(i)}


def test_memory_window_and_eviction():
    memory = reasoning.MemoryState(n=5)
    for i in range(12):
        reasoning.update_memory(memory, make_step(i), None)
    assert len(memory.recent) == 5
    assert memory.stats["evicted"] == 7
    assert memory.stats["tool_counts"] == {"set_position": 7}
    assert memory.stats["net_dx"] == pytest.approx(7.0)
    assert "7 earlier steps compressed" in memory.long_term


def test_memory_text_deterministic_for_identical_histories():
    def build():
        memory = reasoning.MemoryState(n=3)
        for i in range(9):
            reasoning.update_memory(memory, make_step(i), None)
        return memory.memory_text()

    assert build() == build()


def test_summarizer_failure_degrades_to_truncation():
    class Broken(reasoning.DecisionProvider):
        kind = "remote"

        def complete(self, request):
            raise RuntimeError("summarizer offline")

    memory = reasoning.MemoryState(n=1)
    for i in range(4):
        reasoning.update_memory(memory, make_step(i), Broken())
    assert len(memory.long_term) <= 2000
    assert memory.long_term  # raw-concatenation fallback kept something


@given(st.lists(st.integers(0, 4), min_size=0, max_size=200))
@settings(max_examples=30, deadline=None)
def test_memory_invariant_under_any_sequence(tool_ids):
    names = ["set_position", "set_attitude", "set_exposure", "zoom", "kb_lookup"]
    memory = reasoning.MemoryState(n=5)
    for i, t in enumerate(tool_ids):
        reasoning.update_memory(memory, make_step(i, tool=names[t]), None)
    assert len(memory.recent) <= 5
    assert memory.stats["evicted"] == max(0, len(tool_ids) - 5)


# -- scripted provider --------------------------------------------------


def test_scripted_exposure_priority():
    provider = reasoning.ScriptedProvider()
    raw = provider.complete(request(observation=obs(mean_brightness=14.0, exposure_gain=0.1)))
    call = reasoning.parse_tool_call(raw, VISIBLE)
    assert call.tool == "brightness_assess"  # diagnostic first
    raw = provider.complete(
        request(observation=obs(mean_brightness=14.0, exposure_gain=0.1),
                inner_results=[{"tool": "brightness_assess", "payload": {}}])
    )
    call = reasoning.parse_tool_call(raw, VISIBLE)
    assert call.tool == "set_exposure"
    assert call.args["gain_delta"] == pytest.approx(0.9)


def test_scripted_sweep_state_machine():
    provider = reasoning.ScriptedProvider()
    hidden = obs(visible=False, lidar_range=None, angular_size=0.0)
    deltas = []
    for _ in range(14):
        raw = provider.complete(request(observation=hidden))
        deltas.append(reasoning.parse_tool_call(raw, VISIBLE).args["dyaw"])
    assert deltas[:6] == [15.0] * 6        # up to +90
    assert deltas[6:] == [-15.0] * 8       # then back down toward -90
    assert max(abs(d) for d in deltas) <= 90.0


def test_scripted_terminates_inside_band():
    provider = reasoning.ScriptedProvider()
    raw = provider.complete(request(observation=obs(lidar_range=2.1)))
    call = reasoning.parse_tool_call(raw, VISIBLE)
    assert call.tool == "terminate"


def test_scripted_forward_step_is_range_proportional():
    provider = reasoning.ScriptedProvider()
    raw = provider.complete(request(observation=obs(lidar_range=5.0)))
    call = reasoning.parse_tool_call(raw, VISIBLE)
    assert call.tool == "set_position"
    assert call.args["dx"] == pytest.approx(1.0)  # 0.2 * range


def test_scripted_honors_learned_step_directives():
    provider = reasoning.ScriptedProvider(
        reasoning.ScriptedPolicyConfig(max_forward_step=6.0, forward_fraction=0.5)
    )
    prompt = (
        "keep steps within the actuator limit (max_forward_step: 2.0) and "
        "reduce close in (cap_forward_step: 0.5 within_range_m: 5.0)"
    )
    raw = provider.complete(request(observation=obs(lidar_range=15.0), prompt=prompt))
    assert reasoning.parse_tool_call(raw, VISIBLE).args["dx"] <= 2.0
    raw = provider.complete(request(observation=obs(lidar_range=4.0), prompt=prompt))
    assert reasoning.parse_tool_call(raw, VISIBLE).args["dx"] == pytest.approx(0.5)


def test_scripted_vision_estimate_overshoots():
    provider = reasoning.ScriptedProvider()
    # without lidar the monocular estimate is biased 3x long
    estimate = provider._range_estimate(obs(lidar_range=None, angular_size=4.0))
    lidar = provider._range_estimate(obs(lidar_range=10.0))
    assert estimate > 2.5 * lidar


# -- replay / recording -------------------------------------------------


def test_record_then_replay_round_trip(tmp_path):
    recording = reasoning.RecordingProvider(reasoning.ScriptedProvider())
    recording.reset_episode("ep-000001")
    first = recording.complete(request())
    path = tmp_path / "transcript.json"
    recording.save(path)

    replay = reasoning.ReplayProvider(path)
    assert replay.complete(request()) == first
    with pytest.raises(reasoning.ReplayMismatch):
        replay.complete(request())  # transcript exhausted


def test_replay_detects_divergence(tmp_path):
    path = tmp_path / "transcript.json"
    path.write_text(json.dumps(
        {"entries": [{"episode": "e", "step": 3, "call_kind": "plan", "output": "x"}]}
    ))
    replay = reasoning.ReplayProvider(path)
    with pytest.raises(reasoning.ReplayMismatch):
        replay.complete(request())  # step/kind mismatch


def test_remote_provider_rejects_hot_temperature():
    with pytest.raises(reasoning.ReasoningError):
        reasoning.RemoteProvider("http://localhost:9", "m", temperature=0.9)


def test_make_provider_kinds(tmp_path):
    assert reasoning.make_provider({"kind": "scripted"}).kind == "scripted"
    scripted = reasoning.make_provider(
        {"kind": "scripted", "forward_fraction": 0.4}
    )
    assert scripted.config.forward_fraction == 0.4
    with pytest.raises(reasoning.ReasoningError):
        reasoning.make_provider({"kind": "psychic"})


# -- mode loops ---------------------------------------------------------


class _QueueProvider(reasoning.DecisionProvider):
    kind = "scripted"
    identity = "queue"

    def __init__(self, outputs):
        self.outputs = list(outputs)
        self.calls = []

    def complete(self, request):
        self.calls.append(request.call_kind)
        return self.outputs.pop(0)


class _NullDispatcher:
    def __init__(self, payload=None):
        self.payload = payload or {}
        self.dispatched = []

    def dispatch(self, call):
        from proxagent.tools import ToolResult

        self.dispatched.append(call.tool)
        return ToolResult(True, dict(self.payload))


def _memory():
    return reasoning.MemoryState()


def test_standard_commits_control_directly():
    provider = _QueueProvider(['TOOL set_position ARGS {"dx": 1.0, "dy": 0.0, "dz": 0.0}'])
    result = reasoning.step_standard(
        obs(), type("P", (), {"text": ""})(), _memory(), VISIBLE, provider,
        _NullDispatcher(),
    )
    assert result.call.tool == "set_position"
    assert result.provider_calls == 1
    assert result.inner == []


def test_standard_follow_up_after_perception():
    provider = _QueueProvider(
        ["TOOL brightness_assess ARGS {}",
         'TOOL set_exposure ARGS {"gain_delta": 0.9}']
    )
    dispatcher = _NullDispatcher()
    result = reasoning.step_standard(
        obs(), type("P", (), {"text": ""})(), _memory(), VISIBLE, provider, dispatcher,
    )
    assert dispatcher.dispatched == ["brightness_assess"]
    assert result.call.tool == "set_exposure"
    assert result.provider_calls == 2  # never more than two


def test_standard_retries_once_then_raises():
    provider = _QueueProvider(["garbage", "still garbage"])
    with pytest.raises(reasoning.MalformedOutput):
        reasoning.step_standard(
            obs(), type("P", (), {"text": ""})(), _memory(), VISIBLE, provider,
            _NullDispatcher(),
        )
    assert len(provider.calls) == 2


def test_react_runs_inner_rounds_then_commits():
    provider = _QueueProvider(
        ["TOOL segment_parts ARGS {}", "TOOL kb_lookup ARGS {}",
         'TOOL terminate ARGS {"reason": "done"}']
    )
    result = reasoning.step_react(
        obs(), type("P", (), {"text": ""})(), _memory(), VISIBLE, provider,
        _NullDispatcher(),
    )
    assert result.call.tool == "terminate"
    assert [r["tool"] for r in result.inner] == ["segment_parts", "kb_lookup"]
    assert result.call.inner_round == 3  # bounded by R=3


def test_react_final_round_is_control_restricted():
    # a provider that keeps asking for perception would exceed the budget;
    # the final round only offers control tools, so parsing perception fails
    provider = _QueueProvider(
        ["TOOL zoom ARGS {\"factor\": 2.0}", "TOOL zoom ARGS {\"factor\": 2.0}",
         "TOOL zoom ARGS {\"factor\": 2.0}", "TOOL zoom ARGS {\"factor\": 2.0}"]
    )
    with pytest.raises(reasoning.MalformedOutput):
        reasoning.step_react(
            obs(), type("P", (), {"text": ""})(), _memory(), VISIBLE, provider,
            _NullDispatcher(),
        )


def test_prospective_plan_select():
    provider = _QueueProvider(
        [
            'CANDIDATE 0: TOOL set_position ARGS {"dx": 1.0, "dy": 0.0, "dz": 0.0} '
            "OUTCOME slow RISK Medium\n"
            'CANDIDATE 1: TOOL terminate ARGS {} OUTCOME stop RISK Low',
            "SELECT 1",
        ]
    )
    result = reasoning.step_prospective(
        obs(), type("P", (), {"text": ""})(), _memory(), VISIBLE, provider,
        _NullDispatcher(),
    )
    assert result.call.tool == "terminate"
    assert result.provider_calls == 2
    assert not result.degraded


def test_prospective_degrades_on_malformed_plan():
    provider = _QueueProvider(
        ["no plan here",
         'TOOL set_position ARGS {"dx": 1.0, "dy": 0.0, "dz": 0.0}']
    )
    result = reasoning.step_prospective(
        obs(), type("P", (), {"text": ""})(), _memory(), VISIBLE, provider,
        _NullDispatcher(),
    )
    assert result.degraded
    assert result.call.tool == "set_position"


def test_prospective_degrades_on_malformed_select():
    provider = _QueueProvider(
        ['CANDIDATE 0: TOOL terminate ARGS {} OUTCOME stop RISK Low',
         "SELECT 9",
         'TOOL terminate ARGS {}']
    )
    result = reasoning.step_prospective(
        obs(), type("P", (), {"text": ""})(), _memory(), VISIBLE, provider,
        _NullDispatcher(),
    )
    assert result.degraded
    assert result.call.tool == "terminate"
