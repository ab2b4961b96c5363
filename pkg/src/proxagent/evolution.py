"""Skill self-evolution: summarize, reflect, gate, materialize, inject.

After an episode ends, a structured summary of the trajectory and outcome
is reflected into a mutation decision (create / overlay / rewrite /
disable / no_change). Every mutation passes a four-constraint quality gate
before touching the store: safety-phrase blacklist, fingerprint
deduplication, task-scope binding, and parent validation. Accepted
mutations become versioned learned-skill files in the same format as
hand-authored skills; rejections are recorded in an append-only audit log.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .reasoning import CALL_REFLECT, DecisionProvider, ProviderRequest
from .skills import LEARNED, Skill, parse_skill_text, render_skill
from .trajectory import Outcome, Trajectory

ACTION_CREATE = "create"
ACTION_OVERLAY = "overlay"
ACTION_REWRITE = "rewrite"
ACTION_DISABLE = "disable"
ACTION_NO_CHANGE = "no_change"
ACTIONS = (ACTION_CREATE, ACTION_OVERLAY, ACTION_REWRITE, ACTION_DISABLE, ACTION_NO_CHANGE)

CONTENT_SECTIONS = ("intent", "trigger", "rule", "constraints", "evidence")

REJECT_SAFETY = "SafetyPhrase"
REJECT_DUPLICATE = "DuplicateFingerprint"
REJECT_SCOPE = "ScopeMismatch"
REJECT_PARENT = "MissingParent"

DEFAULT_BLACKLIST = (
    "ignore safety",
    "override safety",
    "disable constraints",
    "exceed max step",
    "skip quality gate",
)

MOVEMENT_DIGEST_EDGE = 10  # keep first/last 10 movement entries
DEFAULT_TOP_K = 2
REFLECTION_HISTORY = 3  # recent prior episodes consulted during reflection


class EvolutionError(Exception):
    pass


class StoreWriteFailure(EvolutionError):
    pass


# ---------------------------------------------------------------------------
# Episode summary
# ---------------------------------------------------------------------------


@dataclass
class EpisodeSummary:
    episode_id: str
    task_kind: str
    success: Optional[bool]
    terminal_distance: Optional[float]
    score: Optional[float]
    steps: int
    reason: str
    movement: list[dict] = field(default_factory=list)
    movement_omitted: int = 0
    perception: list[dict] = field(default_factory=list)
    max_attempted_translation: float = 0.0
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "episode_id": self.episode_id,
            "task_kind": self.task_kind,
            "success": self.success,
            "terminal_distance": self.terminal_distance,
            "score": self.score,
            "steps": self.steps,
            "reason": self.reason,
            "movement": self.movement,
            "movement_omitted": self.movement_omitted,
            "perception": self.perception,
            "max_attempted_translation": self.max_attempted_translation,
            "notes": self.notes,
        }


def summarize_episode(
    trajectory: Trajectory, outcome: Outcome, task_kind: str, episode_id: str = ""
) -> EpisodeSummary:
    """Deterministic, bounded digest of an ended trajectory."""
    movement = []
    max_translation = 0.0
    perception = []
    for record in trajectory.steps:
        call = record.call
        movement.append({"step": record.step, "tool": call["tool"], "args": call["args"]})
        if call["tool"] == "set_position":
            args = call["args"]
            norm = (
                args.get("dx", 0.0) ** 2
                + args.get("dy", 0.0) ** 2
                + args.get("dz", 0.0) ** 2
            ) ** 0.5
            max_translation = max(max_translation, norm)
        obs = record.observation
        perception.append(
            {
                "step": record.step,
                "brightness": obs.get("mean_brightness"),
                "visible": obs.get("visible"),
            }
        )
    omitted = 0
    if len(movement) > 2 * MOVEMENT_DIGEST_EDGE:
        omitted = len(movement) - 2 * MOVEMENT_DIGEST_EDGE
        movement = movement[:MOVEMENT_DIGEST_EDGE] + movement[-MOVEMENT_DIGEST_EDGE:]
    reason = outcome.reason if trajectory.steps else "error"
    return EpisodeSummary(
        episode_id=episode_id,
        task_kind=task_kind,
        success=outcome.success,
        terminal_distance=outcome.terminal_distance,
        score=outcome.score,
        steps=outcome.steps,
        reason=reason,
        movement=movement,
        movement_omitted=omitted,
        perception=perception,
        max_attempted_translation=round(max_translation, 4),
    )


# ---------------------------------------------------------------------------
# Mutation decisions
# ---------------------------------------------------------------------------


@dataclass
class MutationDecision:
    action: str
    scope: str
    target: Optional[str] = None
    content: Optional[dict] = None  # intent/trigger/rule/constraints/evidence
    justification: str = ""

    def validate(self) -> Optional[str]:
        if self.action not in ACTIONS:
            return f"unknown action {self.action!r}"
        if self.action in (ACTION_OVERLAY, ACTION_REWRITE, ACTION_DISABLE):
            if not self.target:
                return f"{self.action} requires a target"
        elif self.target:
            return f"{self.action} must not carry a target"
        if self.action in (ACTION_CREATE, ACTION_OVERLAY, ACTION_REWRITE):
            if not self.content:
                return f"{self.action} requires content"
            for section in CONTENT_SECTIONS:
                if not str(self.content.get(section, "")).strip():
                    return f"content section {section!r} is empty"
        elif self.content:
            return f"{self.action} must not carry content"
        return None


_MUTATION_HEAD = re.compile(r"^MUTATION (?P<action>\S+)\s*$", re.MULTILINE)
_MUTATION_FIELD = re.compile(
    r"^(?P<key>TARGET|SCOPE|INTENT|TRIGGER|RULE|CONSTRAINTS|EVIDENCE|JUSTIFY) "
    r"(?P<value>.*)$"
)


def parse_mutation(text: str) -> MutationDecision:
    """Parse reflection output; raises EvolutionError when malformed."""
    if not isinstance(text, str):
        raise EvolutionError("reflection output is not text")
    head = _MUTATION_HEAD.search(text)
    if head is None:
        raise EvolutionError("no MUTATION line")
    fields: dict[str, str] = {}
    for line in text.splitlines():
        match = _MUTATION_FIELD.match(line.strip())
        if match is not None:
            fields[match.group("key").lower()] = match.group("value").strip()
    action = head.group("action")
    target = fields.get("target") or None
    if target == "-":
        target = None
    content = {s: fields.get(s, "") for s in CONTENT_SECTIONS}
    if not any(content.values()):
        content = None
    decision = MutationDecision(
        action=action,
        scope=fields.get("scope", ""),
        target=target,
        content=content,
        justification=fields.get("justify", ""),
    )
    problem = decision.validate()
    if problem is not None:
        raise EvolutionError(problem)
    return decision


def no_change(scope: str, justification: str = "") -> MutationDecision:
    return MutationDecision(action=ACTION_NO_CHANGE, scope=scope, justification=justification)


def reflect(
    summary: EpisodeSummary,
    history: list[EpisodeSummary],
    active_skills: list[str],
    provider: DecisionProvider,
    learned_names: Optional[list[str]] = None,
) -> MutationDecision:
    """Reflection call; malformed output degrades to no_change, never raises."""
    request = ProviderRequest(
        call_kind=CALL_REFLECT,
        prompt="Reflect on the episode and propose at most one skill mutation.",
        observation={},
        memory_text="",
        visible_tools=[],
        task_kind=summary.task_kind,
        episode_id=summary.episode_id,
        extra={
            "summary": summary.to_dict(),
            "history": [h.to_dict() for h in history[-REFLECTION_HISTORY:]],
            "active_skills": active_skills,
            "learned_names": learned_names or [],
        },
    )
    try:
        raw = provider.complete(request)
        return parse_mutation(raw)
    except Exception:
        return no_change(summary.task_kind, "reflection output malformed")


# ---------------------------------------------------------------------------
# Quality gate and store
# ---------------------------------------------------------------------------


def fingerprint(scope: str, trigger: str, rule: str) -> str:
    """Stable 64-bit content fingerprint over (scope, trigger, rule)."""
    normalized = " ".join((scope + " " + trigger + " " + rule).lower().split())
    return hashlib.blake2b(normalized.encode(), digest_size=8).hexdigest()


_SECTION_LINE = re.compile(
    r"^(?P<key>Intent|Trigger|Rule|Constraints|Evidence):\s*(?P<value>.*)$"
)


def parse_learned_sections(body: str) -> dict[str, str]:
    sections = {s: "" for s in CONTENT_SECTIONS}
    current = None
    for line in body.splitlines():
        match = _SECTION_LINE.match(line.strip())
        if match is not None:
            current = match.group("key").lower()
            sections[current] = match.group("value")
        elif current is not None and line.strip():
            sections[current] += " " + line.strip()
    return sections


@dataclass
class GateVerdict:
    accepted: bool
    rejected_by: Optional[str] = None
    detail: str = ""


class SkillStore:
    """Learned-skill directory plus append-only audit log. Single writer;
    mutated only between episodes."""

    def __init__(self, learned_dir: Path, audit_path: Optional[Path] = None):
        self.learned_dir = Path(learned_dir)
        self.learned_dir.mkdir(parents=True, exist_ok=True)
        self.audit_path = (
            Path(audit_path) if audit_path else self.learned_dir / "audit.log"
        )

    # -- reading -------------------------------------------------------

    def load_all(self) -> dict[str, tuple[Skill, Path]]:
        """Highest version per skill name; archived files are excluded."""
        best: dict[str, tuple[Skill, Path]] = {}
        for path in sorted(self.learned_dir.glob("*.skill")):
            skill = parse_skill_text(path.read_text(encoding="utf-8"))
            if skill.name not in best or skill.version > best[skill.name][0].version:
                best[skill.name] = (skill, path)
        return best

    def fingerprints(self) -> set[str]:
        prints = set()
        for skill, _path in self.load_all().values():
            sections = parse_learned_sections(skill.body)
            prints.add(
                fingerprint(
                    ",".join(skill.scope), sections["trigger"], sections["rule"]
                )
            )
        return prints

    # -- audit ---------------------------------------------------------

    def audit(self, record: dict) -> None:
        with open(self.audit_path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")

    def audit_records(self) -> list[dict]:
        if not self.audit_path.exists():
            return []
        with open(self.audit_path, encoding="utf-8") as fh:
            return [json.loads(line) for line in fh if line.strip()]


def quality_gate(
    mutation: MutationDecision,
    store: SkillStore,
    episode_task: str,
    blacklist=DEFAULT_BLACKLIST,
    episode_id: str = "",
) -> GateVerdict:
    """Four constraints, applied in order; first failure wins."""
    if mutation.action == ACTION_NO_CHANGE:
        raise EvolutionError("no_change does not pass through the gate")

    verdict = GateVerdict(accepted=True)
    content = mutation.content or {}
    checked_text = " ".join(
        str(content.get(s, "")) for s in CONTENT_SECTIONS
    ).lower()
    existing = store.load_all()

    for phrase in blacklist:
        if phrase.lower() in checked_text:
            verdict = GateVerdict(False, REJECT_SAFETY, f"blacklisted phrase {phrase!r}")
            break
    if verdict.accepted and mutation.action in (ACTION_CREATE, ACTION_OVERLAY, ACTION_REWRITE):
        print_ = fingerprint(
            mutation.scope, content.get("trigger", ""), content.get("rule", "")
        )
        if print_ in store.fingerprints():
            verdict = GateVerdict(False, REJECT_DUPLICATE, f"fingerprint {print_}")
    if verdict.accepted and mutation.scope != episode_task:
        verdict = GateVerdict(
            False, REJECT_SCOPE,
            f"mutation scope {mutation.scope!r} != episode task {episode_task!r}",
        )
    if verdict.accepted and mutation.action in (ACTION_OVERLAY, ACTION_REWRITE, ACTION_DISABLE):
        entry = existing.get(mutation.target or "")
        if entry is None or entry[0].category != LEARNED:
            verdict = GateVerdict(
                False, REJECT_PARENT, f"target {mutation.target!r} not a learned skill"
            )

    store.audit(
        {
            "episode": episode_id,
            "action": mutation.action,
            "verdict": "accepted" if verdict.accepted else "rejected",
            "reason": verdict.rejected_by or "",
            "detail": verdict.detail,
        }
    )
    return verdict


# ---------------------------------------------------------------------------
# Materialization and retrieval
# ---------------------------------------------------------------------------


def _slug(text: str, limit: int = 40) -> str:
    words = "".join(c.lower() if c.isalnum() else " " for c in text).split()
    slug = ""
    for word in words:
        extended = f"{slug}-{word}" if slug else word
        if len(extended) > limit:
            break
        slug = extended
    return slug or "learned-skill"


def _keywords_from(content: dict) -> list[str]:
    words = []
    for section in ("intent", "trigger"):
        for word in "".join(
            c.lower() if c.isalnum() else " " for c in content.get(section, "")
        ).split():
            if len(word) > 3 and word not in words:
                words.append(word)
    return words[:8]


def _render_sections(content: dict) -> str:
    return "\n".join(
        f"{section.capitalize()}: {content.get(section, '')}"
        for section in CONTENT_SECTIONS
    )


def materialize(
    mutation: MutationDecision, store: SkillStore, episode_id: str = ""
) -> Skill:
    """Write an accepted mutation to the store as a learned-skill file."""
    existing = store.load_all()
    provenance = f"evolved:{episode_id}"
    try:
        if mutation.action == ACTION_CREATE:
            name = _slug(mutation.content["intent"])
            if name in existing:
                suffix = 2
                while f"{name}-{suffix}" in existing:
                    suffix += 1
                name = f"{name}-{suffix}"
            skill = Skill(
                name=name,
                category=LEARNED,
                routing_summary=mutation.content["intent"],
                keywords=_keywords_from(mutation.content),
                body=_render_sections(mutation.content),
                scope=[mutation.scope],
                version=1,
                provenance=provenance,
            )
            path = store.learned_dir / f"{name}.v1.skill"
            path.write_text(render_skill(skill), encoding="utf-8")
            return skill

        current, current_path = existing[mutation.target]
        if mutation.action == ACTION_OVERLAY:
            skill = Skill(
                name=current.name,
                category=LEARNED,
                routing_summary=current.routing_summary,
                keywords=sorted(set(current.keywords) | set(_keywords_from(mutation.content))),
                body=current.body
                + f"\n\nOverlay v{current.version + 1} ({episode_id}):\n"
                + _render_sections(mutation.content),
                scope=current.scope,
                version=current.version + 1,
                provenance=provenance,
                enabled=current.enabled,
            )
            path = store.learned_dir / f"{skill.name}.v{skill.version}.skill"
            path.write_text(render_skill(skill), encoding="utf-8")
            return skill
        if mutation.action == ACTION_REWRITE:
            skill = Skill(
                name=current.name,
                category=LEARNED,
                routing_summary=mutation.content["intent"],
                keywords=_keywords_from(mutation.content),
                body=_render_sections(mutation.content),
                scope=current.scope,
                version=current.version + 1,
                provenance=provenance,
                enabled=current.enabled,
            )
            current_path.rename(current_path.with_suffix(".skill.archived"))
            path = store.learned_dir / f"{skill.name}.v{skill.version}.skill"
            path.write_text(render_skill(skill), encoding="utf-8")
            return skill
        if mutation.action == ACTION_DISABLE:
            disabled = Skill(**{**current.__dict__, "enabled": False})
            current_path.write_text(render_skill(disabled), encoding="utf-8")
            return disabled
    except OSError as exc:
        raise StoreWriteFailure(str(exc)) from exc
    raise EvolutionError(f"cannot materialize action {mutation.action!r}")


def select_learned(
    task_kind: str,
    mode: str,
    description: str,
    store: SkillStore,
    k: int = DEFAULT_TOP_K,
) -> list[Skill]:
    """Top-k enabled learned skills for this task, ranked by keyword overlap
    with the description; ties break to higher version, then newer episode."""
    if k <= 0:
        return []
    words = set(
        "".join(c.lower() if c.isalnum() else " " for c in description).split()
    )
    candidates = []
    for skill, _path in store.load_all().values():
        if not skill.enabled or not skill.applies_to(task_kind):
            continue
        overlap = len(words & {kw.lower() for kw in skill.keywords})
        episode = skill.provenance.split(":", 1)[-1]
        candidates.append((-overlap, -skill.version, episode, skill.name, skill))
    candidates.sort(key=lambda item: (item[0], item[1], _episode_recency(item[2]), item[3]))
    return [item[4] for item in candidates[:k]]


def _episode_recency(episode: str) -> str:
    # newer episode ids sort first (ids are zero-padded and sortable)
    return "".join(chr(255 - ord(c)) for c in episode)


# ---------------------------------------------------------------------------
# Scripted reflection (deterministic rule table)
# ---------------------------------------------------------------------------

LOW_SCORE_THRESHOLD = 40.0
HARMFUL_MARKER = "harmful-skill:"


def scripted_reflection(extra: dict) -> str:
    """Rule-table reflector emitting the mutation grammar."""
    summary = extra.get("summary", {})
    history = extra.get("history", [])
    learned_names = extra.get("learned_names", [])
    kind = summary.get("task_kind", "")
    episode = summary.get("episode_id", "")

    for note in summary.get("notes", []):
        if HARMFUL_MARKER in note:
            target = note.split(HARMFUL_MARKER, 1)[1].strip()
            return (
                f"MUTATION disable\nTARGET {target}\nSCOPE {kind}\n"
                f"JUSTIFY skill {target} marked harmful in episode {episode}"
            )

    failed = summary.get("success") is False
    if (
        failed
        and summary.get("reason") == "timeout"
        and summary.get("max_attempted_translation", 0.0) > 2.0
    ):
        biggest = summary.get("max_attempted_translation")
        return "\n".join(
            [
                "MUTATION create",
                "TARGET -",
                f"SCOPE {kind}",
                "INTENT cap forward translation steps near the target",
                "TRIGGER commanded translations rejected by the actuator while closing in",
                "RULE keep every forward step within the actuator limit "
                "(max_forward_step: 2.0) and reduce steps close in "
                "(cap_forward_step: 0.5 within_range_m: 5.0)",
                "CONSTRAINTS never command a translation longer than 2.0 m",
                f"EVIDENCE episode {episode} ended by {summary.get('reason')} after "
                f"{summary.get('steps')} steps with translations up to {biggest} m",
                "JUSTIFY distance dependent step reduction prevents rejected "
                "commands and overshoot",
            ]
        )

    score = summary.get("score")
    if score is not None and score < LOW_SCORE_THRESHOLD:
        prior_low = any(
            h.get("score") is not None and h.get("score") < LOW_SCORE_THRESHOLD
            for h in history
        )
        if prior_low:
            sections = [
                "INTENT refine close range perception before reporting",
                "TRIGGER inspection report scored low in consecutive episodes",
                "RULE gather part segmentation and knowledge base attributes "
                "before writing any report dimension",
                "CONSTRAINTS keep exposure in the nominal band while imaging",
                f"EVIDENCE episodes including {episode} scored below "
                f"{LOW_SCORE_THRESHOLD} points",
            ]
            if learned_names:
                head = [
                    "MUTATION overlay",
                    f"TARGET {learned_names[0]}",
                    f"SCOPE {kind}",
                ]
            else:
                head = ["MUTATION create", "TARGET -", f"SCOPE {kind}"]
            return "\n".join(
                head + sections + ["JUSTIFY repeated low inspection scores"]
            )

    return f"MUTATION no_change\nJUSTIFY no anomalies in episode {episode}"


# ---------------------------------------------------------------------------
# Post-episode pipeline
# ---------------------------------------------------------------------------


def run_evolution(
    summary: EpisodeSummary,
    history: list[EpisodeSummary],
    active_skills: list[str],
    provider: DecisionProvider,
    store: SkillStore,
    blacklist=DEFAULT_BLACKLIST,
) -> dict:
    """Reflect, gate, and materialize. Returns an event record for the log."""
    learned_names = sorted(store.load_all())
    mutation = reflect(summary, history, active_skills, provider, learned_names)
    event = {"action": mutation.action, "accepted": False, "skill": None}
    if mutation.action == ACTION_NO_CHANGE:
        return event
    verdict = quality_gate(
        mutation, store, summary.task_kind, blacklist, episode_id=summary.episode_id
    )
    if not verdict.accepted:
        event["rejected_by"] = verdict.rejected_by
        return event
    skill = materialize(mutation, store, episode_id=summary.episode_id)
    event.update(accepted=True, skill=skill.name, version=skill.version)
    return event
