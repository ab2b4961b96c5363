import json

import pytest
import yaml
from click.testing import CliRunner

from proxagent.cli import main
from proxagent.config import ConfigError, dump_config, load_config, parse_config


@pytest.fixture()
def runner():
    return CliRunner()


# -- config -------------------------------------------------------------


def test_config_round_trip(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text(
        "run:\n  task: search\n  seed: 3\ntasks:\n  inspection:\n"
        "    profile: hybrid-nav-code\n"
    )
    config = load_config(path)
    again = parse_config(yaml.safe_load(dump_config(config)))
    assert again.to_dict() == config.to_dict()


def test_config_rejects_unknown_keys(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("run:\n  task: search\nextra_section: true\n")
    with pytest.raises(ConfigError):
        load_config(path)
    path.write_text("run:\n  warp: 9\n")
    with pytest.raises(ConfigError):
        load_config(path)


def test_config_validates_names(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("run:\n  profile: psychic\n")
    with pytest.raises(ConfigError):
        load_config(path)


def test_flag_precedence_over_task_overrides(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text(
        "run:\n  mode: standard\ntasks:\n  search:\n    mode: react\n"
    )
    config = load_config(path)
    assert config.effective_run(task="search").mode == "react"
    assert config.effective_run(task="search", mode="prospective").mode == "prospective"
    assert config.effective_run(task="rendezvous").mode == "standard"


def test_shipped_default_config_parses():
    from importlib import resources

    text = resources.files("proxagent.data").joinpath("default_config.yaml").read_text()
    config = parse_config(yaml.safe_load(text))
    assert config.run.profile == "hybrid-nav"


# -- commands -----------------------------------------------------------


def test_run_success_exit_zero(runner, tmp_path):
    traj = tmp_path / "t.jsonl"
    result = runner.invoke(
        main, ["run", "--task", "rendezvous", "--trajectory", str(traj)]
    )
    assert result.exit_code == 0, result.output
    assert result.output.startswith("success")
    assert traj.exists()


def test_run_unknown_profile_exits_three(runner):
    result = runner.invoke(main, ["run", "--profile", "nope"])
    assert result.exit_code == 3
    assert "nope" in result.output


def test_run_task_failure_exits_two(runner):
    result = runner.invoke(
        main, ["run", "--task", "rendezvous", "--profile", "vision-only"]
    )
    assert result.exit_code == 2
    assert result.output.startswith("failure")


def test_run_prospective_logs_plan_select_pairs(runner, tmp_path):
    traj = tmp_path / "t.jsonl"
    result = runner.invoke(
        main, ["run", "--mode", "prospective", "--trajectory", str(traj)]
    )
    assert result.exit_code == 0
    lines = [json.loads(l) for l in traj.read_text().splitlines()]
    steps = [l for l in lines if "step" in l]
    assert steps and all(s["provider_calls"] == 2 for s in steps)


def test_ablate_table_shape(runner, tmp_path):
    out = tmp_path / "report.json"
    result = runner.invoke(
        main, ["ablate", "--tasks", "rendezvous,search", "--out", str(out)]
    )
    assert result.exit_code == 0
    assert "vision-only" in result.output and "FAIL" in result.output
    assert "hybrid-nav" in result.output and "PASS" in result.output
    records = json.loads(out.read_text())["ablation"]
    assert len(records) == 6  # 3 profiles x 2 tasks
    by_profile = {
        (r["profile"], r["task"]): r["passed"] for r in records
    }
    assert not by_profile[("vision-only", "rendezvous")]
    assert by_profile[("hybrid-nav", "rendezvous")]


def test_sweep_reports_pass_count(runner):
    result = runner.invoke(main, ["sweep", "--task", "rendezvous", "--runs", "3"])
    assert result.exit_code == 0
    assert "pass count: 3/3" in result.output


def test_evolve_and_skills_commands(runner, tmp_path):
    ws = tmp_path / "ws"
    config = tmp_path / "c.yaml"
    config.write_text(
        "provider:\n  kind: scripted\n  options:\n"
        "    max_forward_step: 6.0\n    forward_fraction: 0.5\n"
    )
    result = runner.invoke(
        main,
        ["evolve", "--task", "rendezvous", "--rounds", "3",
         "--workspace", str(ws), "--config", str(config)],
    )
    assert result.exit_code == 0, result.output
    assert "learned skills:" in result.output
    assert "evolved:ep-000001" in result.output

    listed = runner.invoke(main, ["skills", "list", "--workspace", str(ws)])
    assert listed.exit_code == 0
    assert "learned" in listed.output

    audit = runner.invoke(main, ["skills", "audit", "--workspace", str(ws)])
    assert audit.exit_code == 0
    assert "accepted" in audit.output


def test_report_recomputes_outcome(runner, tmp_path):
    traj = tmp_path / "t.jsonl"
    assert runner.invoke(
        main, ["run", "--task", "rendezvous", "--trajectory", str(traj)]
    ).exit_code == 0
    result = runner.invoke(main, ["report", "--trajectory", str(traj)])
    assert result.exit_code == 0
    assert result.output.startswith("success")


def test_full_cross_product_smoke(runner):
    for task in ("rendezvous", "search"):
        for mode in ("standard", "react", "prospective"):
            result = runner.invoke(
                main, ["run", "--task", task, "--mode", mode, "--seed", "1"]
            )
            assert result.exit_code == 0, (task, mode, result.output)
