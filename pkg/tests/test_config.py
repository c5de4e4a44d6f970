import json
import logging

import pytest

from src.core import config
from src.core.config import (
    RunConfig,
    config_from_dict,
    config_to_dict,
    load_run_config,
    log_effective_config,
    read_config_file,
    require_anchor_token,
)
from src.core.errors import ConfigError, InputFileError
from src.steering.abss import SolverMode
from src.steering.eaqs import Ablation, StrengthPolicy
from src.steering.scheduler import DESK_SCHEDULE, FULL_SCHEDULE


def _write(tmp_path, doc, name="run.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc), encoding="utf-8")
    return path


def test_empty_document_gives_builtin_defaults():
    cfg = config_from_dict({})
    assert cfg == RunConfig()
    assert cfg.schedule == DESK_SCHEDULE
    assert cfg.seeds == (0,)
    assert cfg.output.write_json and cfg.output.write_csv


def test_shipped_defaults_match_builtin_defaults():
    cfg = load_run_config(config.REPO_ROOT / "config" / "defaults.json")
    assert cfg.schedule == RunConfig().schedule
    assert cfg.solver == RunConfig().solver
    assert cfg.policy == RunConfig().policy
    assert cfg.scenario == RunConfig().scenario


def test_full_scale_preset():
    cfg = load_run_config(config.REPO_ROOT / "config" / "full_scale.json")
    assert cfg.schedule == FULL_SCHEDULE
    assert (cfg.scenario.head_count, cfg.scenario.head_dim, cfg.scenario.latent_frames) == (40, 128, 21)
    assert cfg.scenario.bias_strength == 0.8
    assert cfg.output.out_dir == "out/full_scale"


def test_overrides_beat_file_and_none_keeps_file_value(tmp_path):
    path = _write(tmp_path, {"solver": {"mode": "active-set"}, "schedule": {"max_steps": 1}})
    cfg = load_run_config(path, {"schedule": {"max_steps": None, "max_blocks": 1}, "seeds": {"seed": 5, "count": 3}})
    assert cfg.solver.mode is SolverMode.ACTIVE_SET
    assert (cfg.schedule.max_steps, cfg.schedule.max_blocks) == (1, 1)
    assert cfg.seeds == (5, 6, 7)


def test_paper_solver_name_in_config_file(tmp_path):
    cfg = load_run_config(_write(tmp_path, {"solver": {"mode": "paper"}}))
    assert cfg.solver.mode is SolverMode.CLOSED_FORM


def test_enums_and_numbers_are_converted():
    cfg = config_from_dict({
        "solver": {"margin_eps": "0.1", "ridge": 1},
        "steering": {"strength": "fixed", "ablation": "no-svd", "fixed_strength": 2},
        "output": {"workers": "4", "formats": "csv"},
    })
    assert cfg.solver.margin_eps == 0.1
    assert cfg.solver.ridge == 1.0
    assert cfg.policy.strength is StrengthPolicy.FIXED
    assert cfg.policy.ablation is Ablation.NO_SVD
    assert cfg.output.workers == 4
    assert cfg.output.write_csv and not cfg.output.write_json

    steering = cfg.steering_config()
    assert steering.strength is StrengthPolicy.FIXED
    assert steering.fixed_strength == 2.0
    assert steering.ridge == 1.0


@pytest.mark.parametrize(
    "doc, match",
    [
        ({"extra": {}}, "unknown config sections"),
        ({"solver": {"tolerance": 1}}, "unknown keys in 'solver'"),
        ({"solver": {"mode": "exact"}}, "solver.mode"),
        ({"steering": {"strength": "max"}}, "steering.strength"),
        ({"schedule": {"max_steps": 60}}, "max_steps"),
        ({"scenario": {"bias_strength": 2.0}}, "scenario"),
        ({"seeds": {"count": 0}}, "seeds.count"),
        ({"output": {"formats": "xml"}}, "output.formats"),
        ({"anchors": "x"}, "must be an object"),
    ],
)
def test_invalid_documents(doc, match):
    with pytest.raises(ConfigError, match=match):
        config_from_dict(doc)


def test_missing_files_are_io_errors(tmp_path):
    with pytest.raises(InputFileError):
        read_config_file(tmp_path / "absent.json")
    with pytest.raises(InputFileError, match="plan file not found"):
        config_from_dict({"plan": str(tmp_path / "absent_plan.json")})


def test_broken_json_is_a_config_error(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{", encoding="utf-8")
    with pytest.raises(ConfigError):
        read_config_file(bad)
    with pytest.raises(ConfigError, match="JSON object"):
        read_config_file(_write(tmp_path, [1, 2]))


def test_dict_view_reloads_to_same_config():
    cfg = config_from_dict({"solver": {"mode": "active-set"}, "seeds": {"seed": 3, "count": 2}})
    doc = config_to_dict(cfg)
    assert doc["solver"]["mode"] == "active-set"
    assert json.loads(json.dumps(doc)) == doc
    assert config_from_dict(doc) == cfg


def test_require_anchor_token(monkeypatch):
    monkeypatch.delenv("STEER_TEST_TOKEN", raising=False)
    with pytest.raises(ConfigError, match="STEER_TEST_TOKEN"):
        require_anchor_token("STEER_TEST_TOKEN")
    monkeypatch.setenv("STEER_TEST_TOKEN", "abc")
    assert require_anchor_token("STEER_TEST_TOKEN") == "abc"


def test_effective_config_log_has_no_token(monkeypatch, caplog):
    monkeypatch.setenv("OPENAI_API_KEY", "sk-very-secret")
    with caplog.at_level(logging.INFO, logger="src.core.config"):
        log_effective_config(RunConfig())
    assert "schedule=3/2 of 6/4" in caplog.text
    assert "sk-very-secret" not in caplog.text
