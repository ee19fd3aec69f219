from __future__ import annotations

import json
import subprocess
import sys

import pytest

from objmatch.cli import dispatch, pipeline_demo
from objmatch.manifest import MANIFEST_FILE, RunManifest, read_manifest

TINY_DEMO = {"seed": 3, "jobs": 1, "scenes-per-domain": 2, "eval-scenes": 2, "views": 3, "steps": 4, "pairs": 4,
             "eval-pairs": 2, "queries": 20, "dim": 3, "input": "rgbd", "rd-texture": 0.0}


def stable_entry(directory, entry):
    doc = read_manifest(directory, entry)
    return RunManifest(**doc).stable()


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    scenes = root / "scenes"
    for domain in ("sim", "pseudo-real"):
        assert dispatch(["gen-scenes", "--count", "2", "--views", "3", "--domain", domain, "--out", str(scenes)]) == 0
    pairs = root / "pairs" / "train.prs"
    assert dispatch(["gen-pairs", "--scenes", str(scenes), "--pairs", "6", "--matches", "50",
                     "--non-matches", "100", "--out", str(pairs)]) == 0
    model = root / "model.srd"
    assert dispatch(["train", "--pairs", str(pairs), "--steps", "3", "--dim", "3", "--hidden", "4,4",
                     "--out", str(model)]) == 0
    return root, scenes, pairs, model


# -- exit codes -----------------------------------------------------------------------------


def test_selftest_passes(capsys):
    assert dispatch(["selftest"]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and out.count("PASS") >= 5


def test_unknown_subcommand_is_a_usage_error(capsys):
    assert dispatch(["gen-scene"]) == 2
    err = capsys.readouterr().err
    assert "usage:" in err and "did you mean gen-scenes?" in err


def test_no_subcommand_prints_usage(capsys):
    assert dispatch([]) == 2
    assert "usage:" in capsys.readouterr().err


def test_unknown_flag_suggests_the_closest(capsys, tmp_path):
    assert dispatch(["train", "--stpes", "3", "--out", str(tmp_path / "m.srd")]) == 2
    assert "did you mean --steps?" in capsys.readouterr().err


def test_missing_required_flag(capsys):
    assert dispatch(["gen-pairs", "--out", "x.prs"]) == 2
    assert "--scenes is required" in capsys.readouterr().err


def test_bad_value_is_a_usage_error(capsys, tmp_path):
    assert dispatch(["gen-scenes", "--count", "two", "--out", str(tmp_path)]) == 2
    assert dispatch(["gen-scenes", "--size", "64", "--out", str(tmp_path)]) == 2


def test_domain_error_exits_one(capsys, tmp_path):
    assert dispatch(["eval", "--model", str(tmp_path / "none.srd"), "--pairs", str(tmp_path / "none.prs"),
                     "--scenes", str(tmp_path), "--report", str(tmp_path / "r.json")]) == 1


def test_help_and_version(capsys):
    assert dispatch(["--version"]) == 0
    assert dispatch(["train", "--help"]) == 0
    assert "--steps" in capsys.readouterr().out


def test_console_entry_point_runs():
    proc = subprocess.run([sys.executable, "-m", "objmatch", "bogus"], capture_output=True, text=True)
    assert proc.returncode == 2 and "unknown command" in proc.stderr


# -- manifests and config -------------------------------------------------------------------


def test_gen_scenes_twice_gives_identical_manifests(tmp_path):
    out = tmp_path / "scenes"
    runs = []
    for _ in range(2):
        assert dispatch(["gen-scenes", "--seed", "7", "--count", "1", "--views", "2", "--out", str(out)]) == 0
        runs.append(stable_entry(out, "scenes:sim"))
    assert runs[0] == runs[1]
    assert runs[0]["seeds"] == {"seed": 7} and runs[0]["outputs"]
    full = json.loads((out / MANIFEST_FILE).read_text())["entries"]["scenes:sim"]
    assert "wall_clock_seconds" in full and full["tool_version"]


def test_outputs_do_not_depend_on_output_location(tmp_path):
    hashes = []
    for name in ("a", "b"):
        assert dispatch(["gen-scenes", "--seed", "7", "--count", "1", "--views", "2", "--out", str(tmp_path / name)]) == 0
        hashes.append(read_manifest(tmp_path / name, "scenes:sim")["outputs"])
    assert hashes[0] == hashes[1]


def test_both_domains_share_a_directory(workspace):
    _, scenes, _, _ = workspace
    entries = json.loads((scenes / MANIFEST_FILE).read_text())["entries"]
    assert set(entries) == {"scenes:sim", "scenes:pseudo_real"}
    assert all(k.startswith("sim_") for k in entries["scenes:sim"]["outputs"])


def test_config_precedence(tmp_path):
    cfg = tmp_path / "gen.cfg"
    cfg.write_text("# flat settings\nviews = 2\ncount=1\nseed = 5\n")
    out = tmp_path / "scenes"
    assert dispatch(["gen-scenes", "--config", str(cfg), "--seed", "9", "--out", str(out)]) == 0
    entry = read_manifest(out, "scenes:sim")
    assert entry["config"]["views"] == 2 and entry["config"]["seed"] == 9 and entry["config"]["count"] == 1
    assert entry["config"]["objects"] == "9..10"
    assert "config" in entry["inputs"]


def test_unknown_config_key(tmp_path, capsys):
    cfg = tmp_path / "gen.cfg"
    cfg.write_text("veiws = 2\n")
    assert dispatch(["gen-scenes", "--config", str(cfg), "--out", str(tmp_path / "s")]) == 2
    assert "did you mean views?" in capsys.readouterr().err


def test_manifests_hash_every_input_file(workspace):
    root, scenes, pairs, model = workspace
    entry = read_manifest(root, model.name)
    scene_files = {"scenes/" + p.relative_to(scenes).as_posix() for p in scenes.rglob("*")
                   if p.is_file() and p.name != MANIFEST_FILE}
    assert scene_files <= set(entry["inputs"]) and "pairs" in entry["inputs"]
    assert set(entry["outputs"]) == {"model.srd", "model.srd.loss.json"}


# -- pipeline flow --------------------------------------------------------------------------


def test_eval_reads_scene_location_from_pair_manifest(workspace, capsys):
    root, _, pairs, model = workspace
    report = root / "reports" / "eval.json"
    assert dispatch(["eval", "--model", str(model), "--pairs", str(pairs), "--queries", "20",
                     "--report", str(report)]) == 0
    doc = json.loads(report.read_text())
    assert doc["config"]["dim"] == 3
    for row in doc["pairing_types"].values():
        assert 0 <= row["object_match_accuracy"] <= 1 and row["mean_normalized_error"] >= 0
    assert read_manifest(report.parent, "eval.json")["subcommand"] == "eval"


@pytest.mark.parametrize("mode, suffix", [("heatmap", "png"), ("matches", "ppm"), ("pca", "png")])
def test_visualize_modes(workspace, mode, suffix):
    root, scenes, _, model = workspace
    out = root / "viz" / f"{mode}.{suffix}"
    assert dispatch(["visualize", "--model", str(model), "--scenes", str(scenes), "--pair",
                     "sim_0_0000/000", "sim_0_0000/001", "--mode", mode, "--out", str(out)]) == 0
    assert out.stat().st_size > 0


def test_visualize_rejects_bad_mode(workspace):
    root, scenes, _, model = workspace
    assert dispatch(["visualize", "--model", str(model), "--scenes", str(scenes), "--pair",
                     "sim_0_0000/000", "sim_0_0000/001", "--mode", "tsne", "--out", str(root / "x.png")]) == 2


def test_train_without_pair_file_samples_live(workspace):
    root, scenes, _, _ = workspace
    assert dispatch(["train", "--scenes", str(scenes), "--steps", "2", "--hidden", "4", "--dim", "2",
                     "--out", str(root / "live.srd")]) == 0
    assert len(json.loads((root / "live.srd.loss.json").read_text())["loss"]) == 2


def test_demo_report_rows_and_rerun_identity(tmp_path):
    a = pipeline_demo(tmp_path / "a", TINY_DEMO)
    b = pipeline_demo(tmp_path / "b", TINY_DEMO)
    assert list(a["pairing_types"]) == ["Sim-Sim", "Real-Real", "Sim-Real"]
    assert a == b
    for name in ("report.json", "pairs.prs", "model.srd"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_demo_subcommand_writes_manifest(tmp_path, capsys):
    out = tmp_path / "demo"
    args = ["demo", "--out", str(out)] + [f"--{k}={v}" for k, v in TINY_DEMO.items() if k not in ("jobs",)]
    assert dispatch(args) == 0
    assert capsys.readouterr().out.count("accuracy") == 3
    assert "report.json" in read_manifest(out, ".")["outputs"]


def test_training_divergence_exits_one(workspace, capsys):
    root, scenes, pairs, _ = workspace
    assert dispatch(["train", "--pairs", str(pairs), "--steps", "3", "--lr", "nan", "--out", str(root / "nan.srd")]) == 1
    assert "error" in capsys.readouterr().err
