"""Operator command-line entry point.

Exit codes: 0 success, 2 task failure, 3 configuration error, 4 episode
error. Flags override configuration-file values; per-task overrides sit
between flags and defaults.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click

from . import bus as busmod
from .config import ConfigError, RootConfig, RunSection, load_config
from .env import TASK_KINDS, load_satellite_catalog, make_task
from .evolution import SkillStore
from .reasoning import make_provider
from .runner import (
    EpisodeConfig,
    RunnerError,
    run_campaign,
    run_episode,
)
from .skills import SkillCatalog
from .tools import builtin_profiles
from .trajectory import ENDED_ERROR, Trajectory

EXIT_OK = 0
EXIT_TASK_FAILURE = 2
EXIT_CONFIG_ERROR = 3
EXIT_EPISODE_ERROR = 4


def _load_root(config_path) -> RootConfig:
    if config_path:
        return load_config(config_path)
    return RootConfig()


def _satellites(root: RootConfig):
    path = Path(root.satellite_catalog) if root.satellite_catalog else None
    return load_satellite_catalog(path)


def _backend(root: RootConfig):
    if root.bus.backend == "redis":
        return busmod.make_backend("redis", url=root.bus.redis_url)
    return busmod.make_backend("inprocess")


def _episode_config(run: RunSection, episode_id: str, trajectory=None, workspace=None,
                    evolve=False) -> EpisodeConfig:
    task = make_task(
        run.task,
        satellite_id=run.satellite,
        condition=run.condition,
        max_steps=run.max_steps,
    )
    return EpisodeConfig(
        task=task,
        profile=run.profile,
        mode=run.mode,
        seed=run.seed,
        episode_id=episode_id,
        workspace=Path(workspace) if workspace else None,
        trajectory_path=Path(trajectory) if trajectory else None,
        evolve=evolve,
    )


def _outcome_line(outcome) -> str:
    if outcome.score is not None:
        return f"{outcome.reason} score={outcome.score:.1f} steps={outcome.steps}"
    verdict = "success" if outcome.success else "failure"
    dist = "n/a" if outcome.terminal_distance is None else f"{outcome.terminal_distance:.2f}"
    return f"{verdict} ({outcome.reason}) dist={dist} steps={outcome.steps}"


def _outcome_exit(outcome, ended_by: str) -> int:
    if ended_by == ENDED_ERROR:
        return EXIT_EPISODE_ERROR
    if outcome.success is True:
        return EXIT_OK
    if outcome.success is None:  # inspection: a scored report counts as completion
        return EXIT_OK if outcome.reason == "terminate" else EXIT_TASK_FAILURE
    return EXIT_TASK_FAILURE


def _render_table(headers: list[str], rows: list[list[str]]) -> str:
    widths = [
        max(len(str(headers[i])), *(len(str(r[i])) for r in rows)) if rows else len(headers[i])
        for i in range(len(headers))
    ]
    lines = [
        "  ".join(str(headers[i]).ljust(widths[i]) for i in range(len(headers))),
        "  ".join("-" * widths[i] for i in range(len(headers))),
    ]
    for row in rows:
        lines.append("  ".join(str(row[i]).ljust(widths[i]) for i in range(len(headers))))
    return "\n".join(lines)


@click.group()
def main() -> None:
    """Closed-loop proximity-operations agent harness."""


@main.command()
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--task", type=str, default=None)
@click.option("--satellite", type=str, default=None)
@click.option("--condition", type=str, default=None)
@click.option("--profile", type=str, default=None)
@click.option("--mode", type=str, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--max-steps", type=int, default=None)
@click.option("--trajectory", type=click.Path(), default=None)
@click.option("--workspace", type=click.Path(), default=None)
@click.option("--evolve/--no-evolve", default=None)
def run(config_path, task, satellite, condition, profile, mode, seed,
        max_steps, trajectory, workspace, evolve) -> None:
    """Run one episode and print its outcome line."""
    try:
        root = _load_root(config_path)
        effective = root.effective_run(
            task=task, satellite=satellite, condition=condition, profile=profile,
            mode=mode, seed=seed, max_steps=max_steps,
        )
        workspace = workspace or root.run.workspace
        evolve = root.run.evolve if evolve is None else evolve
        episode = _episode_config(
            effective, "ep-000001", trajectory=trajectory,
            workspace=workspace, evolve=evolve,
        )
        provider = make_provider(root.provider.spec())
        backend = _backend(root)
    except (ConfigError, RunnerError, KeyError, ValueError) as exc:
        click.echo(f"configuration error: {exc}", err=True)
        sys.exit(EXIT_CONFIG_ERROR)
    try:
        result = run_episode(
            episode, provider=provider, satellites=_satellites(root), backend=backend,
            skills_root=Path(root.skills_root) if root.skills_root else None,
        )
    except Exception as exc:
        click.echo(f"episode error: {exc}", err=True)
        sys.exit(EXIT_EPISODE_ERROR)
    click.echo(_outcome_line(result.outcome))
    sys.exit(_outcome_exit(result.outcome, result.trajectory.ended_by))


@main.command()
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--profiles", type=str, default=None,
              help="Comma-separated profile names; default: all shipped profiles.")
@click.option("--tasks", "task_list", type=str, default="rendezvous,search")
@click.option("--condition", type=str, default="C1")
@click.option("--seed", type=int, default=0)
@click.option("--out", type=click.Path(), default=None,
              help="Also write the report as structured JSON.")
def ablate(config_path, profiles, task_list, condition, seed, out) -> None:
    """Run a tool-profile ablation matrix and print the result table."""
    try:
        root = _load_root(config_path)
        names = [p.strip() for p in (profiles or ",".join(builtin_profiles())).split(",")]
        kinds = [t.strip() for t in task_list.split(",")]
        for name in names:
            if name not in builtin_profiles():
                raise ConfigError(f"unknown profile {name!r}")
        for kind in kinds:
            if kind not in TASK_KINDS:
                raise ConfigError(f"unknown task kind {kind!r}")
    except ConfigError as exc:
        click.echo(f"configuration error: {exc}", err=True)
        sys.exit(EXIT_CONFIG_ERROR)

    satellites = _satellites(root)
    rows, records = [], []
    for name in names:
        cells = [name]
        for kind in kinds:
            effective = root.effective_run(task=kind, profile=name,
                                           condition=condition, seed=seed)
            episode = _episode_config(effective, f"ablate-{name}-{kind}")
            try:
                result = run_episode(
                    episode, provider=make_provider(root.provider.spec()),
                    satellites=satellites,
                )
                outcome = result.outcome
                passed = outcome.success is True
                cell = (
                    f"PASS dist={outcome.terminal_distance:.2f} steps={outcome.steps}"
                    if passed else f"FAIL ({outcome.reason})"
                )
            except Exception as exc:
                outcome, passed, cell = None, False, f"FAIL (error: {exc})"
            cells.append(cell)
            records.append(
                {"profile": name, "task": kind, "passed": passed,
                 "outcome": outcome.to_dict() if outcome else None}
            )
        rows.append(cells)
    click.echo(_render_table(["profile"] + kinds, rows))
    if out:
        Path(out).write_text(json.dumps({"ablation": records}, indent=2, sort_keys=True))
    sys.exit(EXIT_OK)


@main.command()
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--task", type=str, default="rendezvous")
@click.option("--runs", type=int, default=5)
@click.option("--condition", type=str, default="C1")
@click.option("--mode", type=str, default=None)
@click.option("--profile", type=str, default=None)
@click.option("--out", type=click.Path(), default=None)
def sweep(config_path, task, runs, condition, mode, profile, out) -> None:
    """Run one task over consecutive seeds and report the pass count."""
    try:
        root = _load_root(config_path)
        effective = root.effective_run(task=task, condition=condition,
                                       mode=mode, profile=profile)
    except ConfigError as exc:
        click.echo(f"configuration error: {exc}", err=True)
        sys.exit(EXIT_CONFIG_ERROR)
    satellites = _satellites(root)
    records = []
    for seed in range(runs):
        effective.seed = seed
        episode = _episode_config(effective, f"sweep-{seed:04d}")
        try:
            outcome = run_episode(
                episode, provider=make_provider(root.provider.spec()),
                satellites=satellites,
            ).outcome
        except Exception:
            outcome = None
        records.append(
            {"seed": seed, "outcome": outcome.to_dict() if outcome else None,
             "passed": bool(outcome and outcome.success)}
        )
    passed = sum(1 for r in records if r["passed"])
    rows = [
        [r["seed"], "PASS" if r["passed"] else "FAIL",
         "n/a" if not r["outcome"] else r["outcome"]["steps"]]
        for r in records
    ]
    click.echo(_render_table(["seed", "result", "steps"], rows))
    click.echo(f"pass count: {passed}/{runs}")
    if out:
        Path(out).write_text(
            json.dumps({"sweep": records, "passed": passed}, indent=2, sort_keys=True)
        )
    sys.exit(EXIT_OK)


@main.command()
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--task", type=str, default="rendezvous")
@click.option("--rounds", type=int, default=5)
@click.option("--workspace", type=click.Path(), required=True)
@click.option("--out", type=click.Path(), default=None)
def evolve(config_path, task, rounds, workspace, out) -> None:
    """Run a shared-workspace evolution campaign and list learned skills."""
    try:
        root = _load_root(config_path)
        effective = root.effective_run(task=task)
        base = _episode_config(effective, "ep-000000", workspace=workspace, evolve=True)
    except ConfigError as exc:
        click.echo(f"configuration error: {exc}", err=True)
        sys.exit(EXIT_CONFIG_ERROR)
    try:
        report = run_campaign(
            base, rounds, Path(workspace),
            provider_factory=lambda: make_provider(root.provider.spec()),
            satellites=_satellites(root),
            skills_root=Path(root.skills_root) if root.skills_root else None,
        )
    except Exception as exc:
        click.echo(f"episode error: {exc}", err=True)
        sys.exit(EXIT_EPISODE_ERROR)
    rows = [
        [r["episode_id"], "PASS" if r["success"] else "FAIL", r["steps"],
         r["reason"], json.dumps(r["evolution"]) if r["evolution"] else "-"]
        for r in report.rounds
    ]
    click.echo(_render_table(["round", "result", "steps", "reason", "evolution"], rows))
    store = SkillStore(Path(workspace) / "learned")
    inventory = [
        [skill.name, skill.version, skill.provenance, "yes" if skill.enabled else "no"]
        for skill, _path in sorted(store.load_all().values(), key=lambda e: e[0].name)
    ]
    click.echo("\nlearned skills:")
    click.echo(_render_table(["name", "version", "provenance", "enabled"], inventory))
    if out:
        Path(out).write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    sys.exit(EXIT_OK)


@main.command()
@click.option("--trajectory", "trajectory_path", type=click.Path(exists=True),
              required=True)
@click.option("--config", "config_path", type=click.Path(), default=None)
def report(trajectory_path, config_path) -> None:
    """Recompute and print the outcome of a persisted trajectory log."""
    from .env import evaluate  # noqa: PLC0415

    try:
        root = _load_root(config_path)
        trajectory = Trajectory.read(Path(trajectory_path))
        meta = trajectory.meta
        task = make_task(
            meta["task_kind"], satellite_id=meta["satellite_id"],
            condition=meta["condition"],
        )
        satellites = _satellites(root)
        outcome = evaluate(trajectory, task, satellites[task.satellite_id])
    except Exception as exc:
        click.echo(f"configuration error: {exc}", err=True)
        sys.exit(EXIT_CONFIG_ERROR)
    click.echo(_outcome_line(outcome))
    click.echo(json.dumps(outcome.to_dict(), indent=2, sort_keys=True))
    sys.exit(EXIT_OK)


@main.group()
def skills() -> None:
    """Inspect the skill catalog and the evolution audit log."""


@skills.command("list")
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--workspace", type=click.Path(), default=None,
              help="Also list learned skills from this workspace.")
def skills_list(config_path, workspace) -> None:
    from .runner import default_skills_root  # noqa: PLC0415

    try:
        root = _load_root(config_path)
        catalog_root = Path(root.skills_root) if root.skills_root else default_skills_root()
        catalog = SkillCatalog.load(catalog_root)
    except Exception as exc:
        click.echo(f"configuration error: {exc}", err=True)
        sys.exit(EXIT_CONFIG_ERROR)
    rows = [
        [s.name, s.category, s.version, s.provenance, "yes" if s.enabled else "no"]
        for s in catalog.skills
    ]
    if workspace:
        store = SkillStore(Path(workspace) / "learned")
        for skill, _path in sorted(store.load_all().values(), key=lambda e: e[0].name):
            rows.append(
                [skill.name, skill.category, skill.version, skill.provenance,
                 "yes" if skill.enabled else "no"]
            )
    click.echo(_render_table(["name", "category", "version", "provenance", "enabled"], rows))
    sys.exit(EXIT_OK)


@skills.command("audit")
@click.option("--workspace", type=click.Path(exists=True), required=True)
def skills_audit(workspace) -> None:
    store = SkillStore(Path(workspace) / "learned")
    records = store.audit_records()
    if not records:
        click.echo("audit log is empty")
        sys.exit(EXIT_OK)
    rows = [
        [r.get("episode", ""), r.get("action", ""), r.get("verdict", ""),
         r.get("reason", ""), r.get("detail", "")]
        for r in records
    ]
    click.echo(_render_table(["episode", "action", "verdict", "reason", "detail"], rows))
    sys.exit(EXIT_OK)


if __name__ == "__main__":  # pragma: no cover
    main()
