"""End-to-end tests of the command-line surface."""

import json
import os

import pytest

from mole.cli import main

TINY = {
    "schedule": {"T": 6},
    "data": {"scene_count": 8, "closeup_count": 6},
    "stage": {
        "stage1": {"steps": 5},
        "stage2-face": {"steps": 4},
        "stage2-hand": {"steps": 4},
        "stage3": {"steps": 4},
    },
    "analysis": {"runs": 2, "steer_t": 3},
}


def write_config(dir_path, out_dir=None, **extra):
    doc = dict(TINY, **extra)
    doc["out_dir"] = str(out_dir if out_dir is not None else dir_path / "out")
    path = dir_path / "run.json"
    path.write_text(json.dumps(doc))
    return path


@pytest.fixture(autouse=True)
def _no_mole_out(monkeypatch):
    monkeypatch.delenv("MOLE_OUT", raising=False)


@pytest.fixture(scope="module")
def trained_run(tmp_path_factory):
    """A tiny full pipeline driven through the CLI."""
    saved = os.environ.pop("MOLE_OUT", None)
    try:
        root = tmp_path_factory.mktemp("cli-run")
        config = write_config(root)
        out = root / "out"
        assert main(["gen-data", "--config", str(config)]) == 0
        for stage in ("stage1", "stage2-face", "stage2-hand", "stage3"):
            assert main(["train", "--config", str(config), "--stage", stage]) == 0
        return {"config": config, "out": out}
    finally:
        if saved is not None:
            os.environ["MOLE_OUT"] = saved


def test_gen_data_writes_all_kinds(trained_run):
    data = trained_run["out"] / "data"
    for kind in ("scene", "face_closeup", "hand_closeup"):
        assert (data / f"{kind}.ckpt").is_file()
        assert (data / f"{kind}.ckpt.json").is_file()


def test_train_writes_stage_checkpoints(trained_run):
    ckpt = trained_run["out"] / "ckpt"
    for name in ("stage1.ckpt", "expert-face.ckpt", "expert-hand.ckpt", "stage3.ckpt"):
        assert (ckpt / name).is_file()


def test_stage3_requires_stage1_checkpoint(tmp_path, capsys):
    config = write_config(tmp_path)
    assert main(["train", "--config", str(config), "--stage", "stage3"]) == 1
    assert "stage-1 checkpoint" in capsys.readouterr().err


def test_stage3_names_the_missing_expert(tmp_path, capsys):
    config = write_config(tmp_path)
    assert main(["train", "--config", str(config), "--stage", "stage1"]) == 0
    assert main(["train", "--config", str(config), "--stage", "stage2-face"]) == 0
    assert main(["train", "--config", str(config), "--stage", "stage3"]) == 1
    err = capsys.readouterr().err
    assert "hand expert checkpoint" in err
    assert "stage2-hand" in err


def test_sample_writes_deterministic_pgm(trained_run, tmp_path):
    ckpt = str(trained_run["out"] / "ckpt" / "stage3.ckpt")
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    assert main(["sample", "--ckpt", ckpt, "--seeds", "3..4", "--out", str(out_a)]) == 0
    assert main(["sample", "--ckpt", ckpt, "--seeds", "3", "--out", str(out_b)]) == 0
    img = (out_a / "samples" / "sample-3.pgm").read_bytes()
    assert img.startswith(b"P5\n16 16\n255\n")
    assert len(img) == len(b"P5\n16 16\n255\n") + 256
    assert (out_a / "samples" / "sample-4.pgm").is_file()
    assert img == (out_b / "samples" / "sample-3.pgm").read_bytes()


def test_traced_sample_matches_untraced_image(trained_run, tmp_path):
    ckpt = str(trained_run["out"] / "ckpt" / "stage3.ckpt")
    plain, traced = tmp_path / "p", tmp_path / "t"
    assert main(["sample", "--ckpt", ckpt, "--seeds", "7", "--out", str(plain)]) == 0
    assert main(["sample", "--ckpt", ckpt, "--seeds", "7", "--trace", "--out", str(traced)]) == 0
    assert (plain / "samples" / "sample-7.pgm").read_bytes() == (traced / "samples" / "sample-7.pgm").read_bytes()
    gates = (traced / "samples" / "sample-7.gates.csv").read_text()
    assert gates.startswith("step,layer,expert,g,s_mean,s_min,s_max\n")
    norms = (traced / "samples" / "sample-7.norms.csv").read_text()
    assert norms.startswith("step,y1_norm,y2_norm\n")


def test_bad_seed_spec_is_a_validation_error(trained_run, capsys):
    ckpt = str(trained_run["out"] / "ckpt" / "stage3.ckpt")
    assert main(["sample", "--ckpt", ckpt, "--seeds", "three"]) == 1
    assert "--seeds" in capsys.readouterr().err
    assert main(["sample", "--ckpt", ckpt, "--seeds", "5..2"]) == 1


def test_analyze_emits_bundle_and_summary(trained_run, capsys):
    out = trained_run["out"]
    code = main(["analyze", "--run", str(out), "--group", "face_closeup", "--runs", "2", "--seed", "50"])
    assert code == 0
    stdout = capsys.readouterr().out
    assert "mean g_face" in stdout and "gap" in stdout
    assert (out / "analysis" / "gates" / "face_closeup.csv").is_file()
    assert (out / "analysis" / "norms" / "face_closeup.csv").is_file()
    assert (out / "analysis" / "gates" / "face_closeup.expert0.pgm").is_file()


def test_analyze_without_run_fails(tmp_path, capsys):
    assert main(["analyze", "--run", str(tmp_path), "--group", "scene"]) == 1
    assert "stage-3 checkpoint" in capsys.readouterr().err


def test_inspect_ckpt_lists_gate_tensors(trained_run, capsys):
    ckpt = str(trained_run["out"] / "ckpt" / "stage3.ckpt")
    assert main(["inspect-ckpt", ckpt]) == 0
    stdout = capsys.readouterr().out
    assert "layer.0.gates.phi  float64" in stdout
    assert "layer.1.gates.phi  float64" in stdout
    assert "meta.fingerprint_hi" in stdout


def test_gradcheck_passes_on_default_net(capsys):
    assert main(["gradcheck", "--entries", "2"]) == 0
    stdout = capsys.readouterr().out
    assert "max relative error" in stdout
    assert "gradcheck passed" in stdout


def test_mole_out_overrides_out_dir(tmp_path, monkeypatch):
    config = write_config(tmp_path, out_dir=tmp_path / "ignored")
    env_out = tmp_path / "env-out"
    monkeypatch.setenv("MOLE_OUT", str(env_out))
    assert main(["gen-data", "--config", str(config)]) == 0
    assert (env_out / "data" / "scene.ckpt").is_file()
    assert not (tmp_path / "ignored").exists()


def test_gen_data_with_defaults_needs_env(capsys, tmp_path, monkeypatch):
    assert main(["gen-data"]) == 1
    assert "--config" in capsys.readouterr().err
    monkeypatch.setenv("MOLE_OUT", str(tmp_path / "defaults"))
    assert main(["gen-data"]) == 0
    assert (tmp_path / "defaults" / "data" / "hand_closeup.ckpt").is_file()


def test_unknown_arguments_exit_nonzero():
    with pytest.raises(SystemExit):
        main(["train", "--config", "x.json", "--stage", "stage9"])
    with pytest.raises(SystemExit):
        main(["no-such-command"])


def test_missing_config_file_is_validation_error(capsys):
    assert main(["train", "--config", "/nonexistent/run.json", "--stage", "stage1"]) == 1
    assert "cannot read" in capsys.readouterr().err
