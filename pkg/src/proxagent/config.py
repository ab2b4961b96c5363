"""Declarative run configuration.

One YAML file drives every run: bus backend, provider, default episode
parameters, and optional per-task overrides. The whole document is
validated before any episode starts; unknown keys are rejected, and
parse -> serialize -> parse is the identity.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import yaml

from .env import CONDITIONS, TASK_KINDS
from .skills import REASONING_MODES
from .tools import builtin_profiles


class ConfigError(Exception):
    pass


def _check_keys(record: dict, allowed: set[str], where: str) -> None:
    unknown = set(record) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")


@dataclass
class BusSection:
    backend: str = "inprocess"
    redis_url: str = "redis://localhost:6379/0"

    def validate(self) -> None:
        if self.backend not in ("inprocess", "redis"):
            raise ConfigError(f"unknown bus backend {self.backend!r}")


@dataclass
class ProviderSection:
    kind: str = "scripted"
    options: dict = field(default_factory=dict)  # passed to the provider factory

    def validate(self) -> None:
        if self.kind not in ("scripted", "replay", "remote"):
            raise ConfigError(f"unknown provider kind {self.kind!r}")

    def spec(self) -> dict:
        return {"kind": self.kind, **self.options}


@dataclass
class RunSection:
    task: str = "rendezvous"
    satellite: str = "CAPSTONE"
    condition: str = "C1"
    profile: str = "hybrid-nav"
    mode: str = "standard"
    seed: int = 0
    max_steps: Optional[int] = None
    evolve: bool = False
    workspace: Optional[str] = None

    def validate(self) -> None:
        if self.task not in TASK_KINDS:
            raise ConfigError(f"unknown task kind {self.task!r}")
        if self.condition not in CONDITIONS:
            raise ConfigError(f"unknown condition {self.condition!r}")
        if self.profile not in builtin_profiles():
            raise ConfigError(f"unknown profile {self.profile!r}")
        if self.mode not in REASONING_MODES:
            raise ConfigError(f"unknown reasoning mode {self.mode!r}")
        if self.max_steps is not None and self.max_steps < 1:
            raise ConfigError("max_steps must be >= 1")


# Per-task override fields operators may set under ``tasks:``
_OVERRIDE_FIELDS = {"satellite", "condition", "profile", "mode", "seed", "max_steps"}


@dataclass
class RootConfig:
    bus: BusSection = field(default_factory=BusSection)
    provider: ProviderSection = field(default_factory=ProviderSection)
    run: RunSection = field(default_factory=RunSection)
    tasks: dict = field(default_factory=dict)  # task kind -> override record
    skills_root: Optional[str] = None
    satellite_catalog: Optional[str] = None

    def validate(self) -> None:
        self.bus.validate()
        self.provider.validate()
        self.run.validate()
        for kind, overrides in self.tasks.items():
            if kind not in TASK_KINDS:
                raise ConfigError(f"per-task override for unknown task {kind!r}")
            _check_keys(overrides, _OVERRIDE_FIELDS, f"tasks.{kind}")

    def effective_run(self, task: Optional[str] = None, **flags) -> RunSection:
        """Precedence: command-line flags > per-task overrides > defaults."""
        record = asdict(self.run)
        kind = task or record["task"]
        record["task"] = kind
        record.update(self.tasks.get(kind, {}))
        record.update({k: v for k, v in flags.items() if v is not None})
        run = RunSection(**record)
        run.validate()
        return run

    def to_dict(self) -> dict:
        return {
            "bus": asdict(self.bus),
            "provider": asdict(self.provider),
            "run": asdict(self.run),
            "tasks": self.tasks,
            "skills_root": self.skills_root,
            "satellite_catalog": self.satellite_catalog,
        }


_ROOT_KEYS = {"bus", "provider", "run", "tasks", "skills_root", "satellite_catalog"}


def parse_config(record: dict) -> RootConfig:
    if not isinstance(record, dict):
        raise ConfigError("configuration root must be a mapping")
    _check_keys(record, _ROOT_KEYS, "root")

    bus_rec = record.get("bus", {}) or {}
    _check_keys(bus_rec, {"backend", "redis_url"}, "bus")
    provider_rec = record.get("provider", {}) or {}
    _check_keys(provider_rec, {"kind", "options"}, "provider")
    run_rec = record.get("run", {}) or {}
    _check_keys(run_rec, set(RunSection.__dataclass_fields__), "run")

    config = RootConfig(
        bus=BusSection(**bus_rec),
        provider=ProviderSection(**provider_rec),
        run=RunSection(**run_rec),
        tasks=record.get("tasks", {}) or {},
        skills_root=record.get("skills_root"),
        satellite_catalog=record.get("satellite_catalog"),
    )
    config.validate()
    return config


def load_config(path) -> RootConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read configuration: {exc}") from exc
    try:
        record = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"configuration is not valid YAML: {exc}") from exc
    return parse_config(record)


def dump_config(config: RootConfig) -> str:
    return yaml.safe_dump(config.to_dict(), sort_keys=True)
