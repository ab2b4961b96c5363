"""Episode orchestration: setup, closed loop, and post-episode evolution.

One episode is three phases. Setup routes skills, assembles the system
prompt, and resets the simulator behind the bus bridge. The loop commits
exactly one control-or-terminal tool call per outer step until the episode
terminates, collides, or times out, logging every step as a sorted-key
JSON line. Teardown scores the trajectory and, when evolution is enabled,
reflects the outcome into a gated skill mutation.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional

from . import bus as busmod
from .env import (
    EnvBridge,
    SimEnv,
    TaskSpec,
    evaluate,
    load_satellite_catalog,
)
from .evolution import (
    EpisodeSummary,
    SkillStore,
    run_evolution,
    select_learned,
    summarize_episode,
)
from .reasoning import (
    DecisionProvider,
    MemoryState,
    ModeStepResult,
    ReasoningError,
    ScriptedProvider,
    step_prospective,
    step_react,
    step_standard,
    update_memory,
)
from .skills import (
    CORE,
    MODE_SKILLS,
    MODE_STANDARD,
    REASONING_MODES,
    SkillCatalog,
    assemble_prompt,
    route,
)
from .tools import (
    ToolDispatcher,
    builtin_catalog,
    builtin_profiles,
    visible_tools,
)
from .trajectory import (
    ENDED_COLLISION,
    ENDED_ERROR,
    ENDED_TERMINATE,
    ENDED_TIMEOUT,
    Outcome,
    StepRecord,
    Trajectory,
)

_MODE_STEP = {
    "standard": step_standard,
    "react": step_react,
    "prospective": step_prospective,
}


class RunnerError(Exception):
    pass


@dataclass
class EpisodeConfig:
    task: TaskSpec
    profile: str = "hybrid-nav"
    mode: str = MODE_STANDARD
    seed: int = 0
    episode_id: str = "ep-000001"
    workspace: Optional[Path] = None       # holds learned skills + logs
    trajectory_path: Optional[Path] = None
    evolve: bool = False
    learned_k: int = 2
    router: Optional[DecisionProvider] = None
    obs_timeout: float = 5.0

    def __post_init__(self) -> None:
        if self.mode not in REASONING_MODES:
            raise RunnerError(f"unknown reasoning mode {self.mode!r}")
        if self.profile not in builtin_profiles():
            raise RunnerError(f"unknown tool profile {self.profile!r}")


@dataclass
class EpisodeResult:
    episode_id: str
    trajectory: Trajectory
    outcome: Outcome
    routing: dict
    skill_names: list[str]
    summary: EpisodeSummary
    evolution: Optional[dict] = None


def default_skills_root() -> Path:
    return Path(str(resources.files("proxagent.data").joinpath("skills")))


def provider_view(obs: dict, visible_names: set[str]) -> dict:
    """Observation record as the decision layer sees it.

    Ground-truth range is never exposed; the LiDAR reading is exposed only
    when the profile grants the LiDAR tool.
    """
    view = {k: v for k, v in obs.items() if k != "true_range"}
    if "lidar_range" not in visible_names:
        view.pop("lidar_range", None)
    return view


def is_terminated(call_tool: str, obs: dict, step_count: int, max_steps: int) -> Optional[str]:
    """Episode end cause after a committed call, or None to continue."""
    if call_tool == "terminate":
        return ENDED_TERMINATE
    if obs.get("collided"):
        return ENDED_COLLISION
    if step_count >= max_steps:
        return ENDED_TIMEOUT
    return None


def _observation_dict(dispatcher: ToolDispatcher) -> dict:
    obs = dispatcher.latest_observation()
    if obs is None:
        raise RunnerError("no observation on the bus")
    record = obs.rgb_payload()
    record["lidar_range"] = obs.lidar_range
    return record


def run_episode(
    config: EpisodeConfig,
    provider: Optional[DecisionProvider] = None,
    satellites: Optional[dict] = None,
    skills_root: Optional[Path] = None,
    backend: Optional[busmod.BusBackend] = None,
) -> EpisodeResult:
    """Run one full episode and return its scored result."""
    task = config.task
    provider = provider or ScriptedProvider()
    satellites = satellites or load_satellite_catalog()
    backend = backend or busmod.InProcessBus()

    # -- phase 1: setup ------------------------------------------------
    catalog = builtin_catalog()
    profile = builtin_profiles()[config.profile]
    visible = visible_tools(catalog, profile)
    visible_names = {t.name for t in visible}

    skill_catalog = SkillCatalog.load(skills_root or default_skills_root())
    routing = route(
        task.description, task.kind, profile, config.mode, skill_catalog,
        router=config.router,
    )
    core_skills = skill_catalog.of_category(CORE)
    mode_skills = [skill_catalog.by_name[n] for n in MODE_SKILLS[config.mode]]

    store = None
    learned = []
    if config.workspace is not None:
        store = SkillStore(Path(config.workspace) / "learned")
        learned = select_learned(
            task.kind, config.mode, task.description, store, k=config.learned_k
        )
    prompt = assemble_prompt(core_skills, routing, mode_skills, learned, skill_catalog)

    env = SimEnv(satellites)
    bridge = EnvBridge(env, backend)
    bridge.reset(task, seed=config.seed)
    dispatcher = ToolDispatcher(
        backend, catalog, profile, satellites, task.satellite_id,
        obs_timeout=config.obs_timeout,
    )
    provider.reset_episode(config.episode_id)
    memory = MemoryState()
    step_fn = _MODE_STEP[config.mode]

    trajectory = Trajectory(
        meta={
            "episode_id": config.episode_id,
            "task_kind": task.kind,
            "satellite_id": task.satellite_id,
            "condition": task.condition.id,
            "profile": config.profile,
            "mode": config.mode,
            "seed": config.seed,
            "provider": provider.identity,
            "skills": prompt.skill_names,
        }
    )

    # -- phase 2: closed loop ------------------------------------------
    ended_by = ENDED_TIMEOUT
    try:
        for step_index in range(task.max_steps):
            obs = _observation_dict(dispatcher)
            mode_result: ModeStepResult = step_fn(
                provider_view(obs, visible_names), prompt, memory, visible,
                provider, dispatcher,
                task_kind=task.kind, step_index=step_index,
                episode_id=config.episode_id,
            )
            call = mode_result.call
            result = dispatcher.dispatch(call)
            post_obs = _observation_dict(dispatcher)

            digest = json.dumps(result.payload, sort_keys=True)[:120]
            memory = update_memory(
                memory,
                {
                    "step": step_index,
                    "tool": call.tool,
                    "args": call.args,
                    "result_digest": digest,
                    "bearing_az": post_obs.get("bearing_az"),
                },
                provider,
            )
            memory_hash = hashlib.blake2b(
                memory.memory_text().encode(), digest_size=8
            ).hexdigest()

            trajectory.steps.append(
                StepRecord(
                    step=step_index,
                    observation=post_obs,
                    call=call.to_dict(),
                    result=result.to_dict(),
                    inner=mode_result.inner,
                    memory_hash=memory_hash,
                    provider_calls=mode_result.provider_calls,
                )
            )
            cause = is_terminated(call.tool, post_obs, step_index + 1, task.max_steps)
            if cause is not None:
                ended_by = cause
                break
    except ReasoningError:
        ended_by = ENDED_ERROR
    finally:
        bridge.close()
    trajectory.ended_by = ended_by

    # -- phase 3: teardown ---------------------------------------------
    if config.trajectory_path is not None:
        path = Path(config.trajectory_path)
        path.parent.mkdir(parents=True, exist_ok=True)
        trajectory.write(path)

    outcome = evaluate(trajectory, task, satellites[task.satellite_id])
    summary = summarize_episode(trajectory, outcome, task.kind, config.episode_id)
    evolution_event = None
    if config.evolve and store is not None:
        evolution_event = run_evolution(
            summary, _load_history(config.workspace), prompt.skill_names,
            provider, store,
        )
        _append_history(config.workspace, summary)
    elif config.workspace is not None:
        _append_history(config.workspace, summary)

    return EpisodeResult(
        episode_id=config.episode_id,
        trajectory=trajectory,
        outcome=outcome,
        routing={
            "task_skill": routing.task_skill,
            "helpers": routing.helper_skills,
            "used_fallback": routing.used_fallback,
        },
        skill_names=prompt.skill_names,
        summary=summary,
        evolution=evolution_event,
    )


# -- campaign history ---------------------------------------------------


def _history_path(workspace) -> Path:
    return Path(workspace) / "episodes.jsonl"


def _load_history(workspace) -> list[EpisodeSummary]:
    path = _history_path(workspace)
    if not path.exists():
        return []
    summaries = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                data = json.loads(line)
                omitted = data.pop("movement_omitted", 0)
                summary = EpisodeSummary(**{**data, "movement_omitted": omitted})
                summaries.append(summary)
    return summaries


def _append_history(workspace, summary: EpisodeSummary) -> None:
    path = _history_path(workspace)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(summary.to_dict(), sort_keys=True) + "\n")


@dataclass
class CampaignReport:
    rounds: list[dict] = field(default_factory=list)

    def successes(self) -> int:
        return sum(1 for r in self.rounds if r["success"])

    def to_dict(self) -> dict:
        return {"rounds": self.rounds, "successes": self.successes()}


def run_campaign(
    base: EpisodeConfig,
    rounds: int,
    workspace: Path,
    provider_factory=None,
    satellites: Optional[dict] = None,
    skills_root: Optional[Path] = None,
) -> CampaignReport:
    """Sequential multi-round campaign over a shared evolution workspace."""
    workspace = Path(workspace)
    workspace.mkdir(parents=True, exist_ok=True)
    satellites = satellites or load_satellite_catalog()
    provider_factory = provider_factory or ScriptedProvider
    report = CampaignReport()
    for index in range(rounds):
        episode_id = f"ep-{index + 1:06d}"
        config = EpisodeConfig(
            task=base.task,
            profile=base.profile,
            mode=base.mode,
            seed=base.seed,
            episode_id=episode_id,
            workspace=workspace,
            trajectory_path=workspace / f"{episode_id}.jsonl",
            evolve=True,
            learned_k=base.learned_k,
            router=base.router,
            obs_timeout=base.obs_timeout,
        )
        result = run_episode(
            config, provider=provider_factory(), satellites=satellites,
            skills_root=skills_root,
        )
        report.rounds.append(
            {
                "episode_id": episode_id,
                "steps": result.outcome.steps,
                "success": bool(result.outcome.success),
                "reason": result.outcome.reason,
                "terminal_distance": result.outcome.terminal_distance,
                "score": result.outcome.score,
                "evolution": result.evolution,
            }
        )
    return report
