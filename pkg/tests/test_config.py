"""Tests for JSON run-config validation, defaults, and presets."""

import json

import pytest

from mole.config import (
    DESK_STAGES,
    PAPER_PRESETS,
    default_config,
    load_config,
    parse_config,
)
from mole.errors import ConfigError


def test_minimal_config_applies_all_defaults():
    cfg = parse_config({"out_dir": "runs/x"}, env={})
    assert cfg.out_dir == "runs/x"
    assert cfg.model.image_size == 16
    assert cfg.model.nonlinearity == "tanh"
    assert cfg.schedule.T == 100
    assert cfg.data.scene_count == 64 and cfg.data.closeup_count == 32
    assert cfg.analysis.runs == 20 and cfg.analysis.steer_t == 60
    for name, fields in DESK_STAGES.items():
        stage = cfg.stage(name)
        assert stage.steps == fields["steps"]
        assert stage.learning_rate == fields["learning_rate"]
        assert stage.dataset == fields["dataset"]


def test_paper_stage2_face_preset_sets_rank_256():
    cfg = parse_config({"out_dir": "x", "stage": {"stage2-face": {"preset": "paper-stage2-face"}}}, env={})
    stage = cfg.stage("stage2-face")
    assert stage.rank == 256
    assert stage.learning_rate == 2e-5
    assert stage.steps == 30_000


def test_all_paper_presets_resolve():
    for preset in PAPER_PRESETS:
        name = preset.removeprefix("paper-")
        cfg = parse_config({"out_dir": "x", "stage": {name: {"preset": preset}}}, env={})
        stage = cfg.stage(name)
        assert stage.steps == PAPER_PRESETS[preset]["steps"]
    lion = parse_config({"out_dir": "x", "stage": {"stage1": {"preset": "paper-stage1"}}}, env={})
    assert lion.stage("stage1").optimizer == "lion"


def test_preset_fields_can_be_overridden():
    cfg = parse_config(
        {"out_dir": "x", "stage": {"stage2-face": {"preset": "paper-stage2-face", "rank": 8}}},
        env={},
    )
    assert cfg.stage("stage2-face").rank == 8
    assert cfg.stage("stage2-face").steps == 30_000


def test_misspelled_stage_key_rejected_with_path():
    with pytest.raises(ConfigError, match=r"config\.stage\.stage1\.leraning_rate"):
        parse_config({"out_dir": "x", "stage": {"stage1": {"leraning_rate": 1e-3}}}, env={})


def test_unknown_top_level_key_rejected():
    with pytest.raises(ConfigError, match=r"config\.modle"):
        parse_config({"out_dir": "x", "modle": {}}, env={})


def test_unknown_stage_name_rejected():
    with pytest.raises(ConfigError, match=r"config\.stage\.stage4"):
        parse_config({"out_dir": "x", "stage": {"stage4": {}}}, env={})


def test_unknown_preset_rejected():
    with pytest.raises(ConfigError, match=r"preset"):
        parse_config({"out_dir": "x", "stage": {"stage1": {"preset": "paper-stage9"}}}, env={})


def test_out_dir_required_without_env():
    with pytest.raises(ConfigError, match="out_dir"):
        parse_config({}, env={})


def test_mole_out_env_overrides_out_dir():
    cfg = parse_config({"out_dir": "from-file"}, env={"MOLE_OUT": "from-env"})
    assert cfg.out_dir == "from-env"
    assert parse_config({}, env={"MOLE_OUT": "only-env"}).out_dir == "only-env"


def test_type_mismatches_name_the_field():
    with pytest.raises(ConfigError, match=r"config\.stage\.stage1\.steps"):
        parse_config({"out_dir": "x", "stage": {"stage1": {"steps": "many"}}}, env={})
    with pytest.raises(ConfigError, match=r"config\.model\.image_size"):
        parse_config({"out_dir": "x", "model": {"image_size": True}}, env={})
    with pytest.raises(ConfigError, match=r"config\.schedule\.beta_start"):
        parse_config({"out_dir": "x", "schedule": {"beta_start": "small"}}, env={})


def test_int_accepted_for_float_fields():
    cfg = parse_config({"out_dir": "x", "stage": {"stage1": {"learning_rate": 1}}}, env={})
    assert cfg.stage("stage1").learning_rate == 1.0


def test_range_validation():
    with pytest.raises(ConfigError, match=r"schedule\.T"):
        parse_config({"out_dir": "x", "schedule": {"T": 1}}, env={})
    with pytest.raises(ConfigError, match=r"beta_start"):
        parse_config({"out_dir": "x", "schedule": {"beta_start": 0.5, "beta_end": 0.1}}, env={})
    with pytest.raises(ConfigError, match=r"nonlinearity"):
        parse_config({"out_dir": "x", "model": {"nonlinearity": "gelu"}}, env={})
    with pytest.raises(ConfigError, match=r"time_width"):
        parse_config({"out_dir": "x", "model": {"time_width": 7}}, env={})
    with pytest.raises(ConfigError, match=r"patch"):
        parse_config({"out_dir": "x", "model": {"image_size": 10, "patch": 4}}, env={})
    with pytest.raises(ConfigError, match=r"dataset"):
        parse_config({"out_dir": "x", "stage": {"stage1": {"dataset": "cats"}}}, env={})
    with pytest.raises(ConfigError, match=r"optimizer"):
        parse_config({"out_dir": "x", "stage": {"stage1": {"optimizer": "sgd"}}}, env={})
    with pytest.raises(ConfigError, match=r"steer_t"):
        parse_config({"out_dir": "x", "schedule": {"T": 10}, "analysis": {"steer_t": 10}}, env={})


def test_stage_overrides_merge_with_defaults():
    cfg = parse_config({"out_dir": "x", "stage": {"stage3": {"learning_rate": 5e-3}}}, env={})
    stage = cfg.stage("stage3")
    assert stage.learning_rate == 5e-3
    assert stage.steps == DESK_STAGES["stage3"]["steps"]
    assert stage.weight_decay == 0.0


def test_load_config_round_trip(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"out_dir": str(tmp_path / "out"), "schedule": {"T": 12}}))
    cfg = load_config(path)
    assert cfg.schedule.T == 12
    assert cfg.build_schedule().T == 12


def test_load_config_errors(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "absent.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError, match="not valid JSON"):
        load_config(bad)


def test_builders_and_datasets():
    cfg = default_config("out")
    net = cfg.build_net()
    assert net.image_size == 16
    scenes = cfg.make_data("scene")
    faces = cfg.make_data("face_closeup")
    mix = cfg.make_data("mixture")
    assert len(scenes) == 64 and len(faces) == 32
    assert len(mix) == 64 + 32 + 32
    assert all(s.kind == "face_closeup" for s in faces)
