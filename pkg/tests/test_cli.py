"""End-to-end tests of the command line interface."""

import json

import numpy as np
import pytest

from airscene.checkpoint import save_checkpoint
from airscene.cli import main
from airscene.data import DatasetStats, SceneWindow, ingest_tracks, save_scenes
from airscene.model import ModelConfig, init_params

TINY_FLAGS = [
    "--d-model", "8", "--n-heads", "1", "--n-variate-layers", "1",
    "--n-aircraft-layers", "1", "--ffn-hidden", "16", "--mlp-hidden", "16",
    "--T", "8", "--H", "4",
]
TINY_CFG = ModelConfig(d_model=8, n_heads=1, n_variate_layers=1,
                       n_aircraft_layers=1, ffn_hidden=16, mlp_hidden=16,
                       T=8, H=4)


def make_scene(seed=1, n=2, t0=100.0):
    rng = np.random.default_rng(seed)
    return SceneWindow(
        ids=[f"A{i}" for i in range(n)],
        past=rng.normal(size=(n, 8, 3)) * 5 + 10,
        future=rng.normal(size=(n, 4, 3)) * 5 + 10,
        valid=np.ones(n, dtype=bool),
        t0=t0,
        dt=5.0,
    )


def write_tiny_checkpoint(path, scenes, seed=0):
    stats = DatasetStats.from_scenes(scenes)
    save_checkpoint(path, init_params(TINY_CFG, seed=seed), TINY_CFG, stats)
    return stats


def run(*argv):
    return main([str(a) for a in argv])


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------

def test_synth_writes_corpus_that_round_trips(tmp_path):
    out = tmp_path / "s"
    assert run("synth", "--out", out, "--seed", "3", "--n-episodes", "2") == 0
    assert (out / "run.json").is_file()
    result = ingest_tracks(out / "tracks.csv")
    assert result.rejected_rows == 0 and result.dropped_tracks == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert len(result.tracks) == len(manifest["events"])
    assert manifest["config"]["n_episodes"] == 2
    run_doc = json.loads((out / "run.json").read_text())
    assert run_doc["subcommand"] == "synth" and run_doc["seed"] == 3


def test_synth_same_seed_identical_bytes(tmp_path):
    for name in ("a", "b"):
        assert run("synth", "--out", tmp_path / name, "--seed", "9",
                   "--n-episodes", "2") == 0
    for fname in ("tracks.csv", "manifest.json"):
        assert (tmp_path / "a" / fname).read_bytes() == \
            (tmp_path / "b" / fname).read_bytes()


def test_synth_direct_to_flag_recorded_and_shortens_west_routes(tmp_path):
    out = tmp_path / "s"
    assert run("synth", "--out", out, "--seed", "5", "--n-episodes", "3",
               "--direct-to-prob", "1.0") == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config"]["direct_to_prob"] == 1.0
    west = [e for e in manifest["events"] if e["fix"] == "west"]
    assert west, "corpus should contain west-fix arrivals"
    for e in west:
        assert e["direct_to"] is True
        assert e["flown_len_km"] < e["nominal_len_km"] - 1.0


def test_synth_reproducible_from_run_json(tmp_path):
    first = tmp_path / "first"
    assert run("synth", "--out", first, "--seed", "21", "--n-episodes", "2",
               "--noise-std-km", "0.02") == 0
    doc = json.loads((first / "run.json").read_text())
    argv = [doc.pop("subcommand"), "--out", tmp_path / "second"]
    doc.pop("out")
    for key, val in doc.items():
        if val is not None:
            argv += ["--" + key.replace("_", "-"), val]
    assert run(*argv) == 0
    assert (first / "tracks.csv").read_bytes() == \
        (tmp_path / "second" / "tracks.csv").read_bytes()


def test_non_empty_out_needs_force(tmp_path, capsys):
    out = tmp_path / "s"
    out.mkdir()
    (out / "stale.txt").write_text("old run")
    assert run("synth", "--out", out, "--n-episodes", "2") == 2
    assert "--force" in capsys.readouterr().err
    assert run("synth", "--out", out, "--n-episodes", "2", "--force") == 0


def test_infeasible_scenario_config_is_usage_error(tmp_path, capsys):
    code = run("synth", "--out", tmp_path / "s", "--n-aircraft-min", "8",
               "--n-aircraft-max", "8", "--min-gap-s", "400")
    assert code == 2
    assert "error:" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# config file handling
# ---------------------------------------------------------------------------

def test_config_file_with_flag_override(tmp_path):
    cfg = tmp_path / "run.toml"
    cfg.write_text('[synth]\nseed = 5\nn_episodes = 3\nnoise_std_km = 0.01\n')
    out = tmp_path / "s"
    assert run("synth", "--config", cfg, "--out", out, "--n-episodes", "2") == 0
    doc = json.loads((out / "run.json").read_text())
    assert doc["seed"] == 5                 # from file
    assert doc["n_episodes"] == 2           # flag wins over file
    assert doc["noise_std_km"] == 0.01


def test_config_file_errors(tmp_path, capsys):
    missing = run("synth", "--config", tmp_path / "nope.toml", "--out", tmp_path / "a")
    assert missing == 2

    bad = tmp_path / "bad.toml"
    bad.write_text("[synth\n")
    assert run("synth", "--config", bad, "--out", tmp_path / "b") == 2
    assert "TOML" in capsys.readouterr().err

    unknown = tmp_path / "unknown.toml"
    unknown.write_text("[synth]\nwarp_factor = 9\n")
    assert run("synth", "--config", unknown, "--out", tmp_path / "c") == 2
    assert "warp_factor" in capsys.readouterr().err


def test_missing_out_is_usage_error(tmp_path, capsys):
    assert run("synth", "--n-episodes", "2") == 2
    assert "--out" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def test_train_writes_checkpoint_metrics_stats(tmp_path):
    scenes_file = tmp_path / "scenes.json"
    save_scenes([make_scene(seed=s, t0=100.0 + 40 * s) for s in range(6)], scenes_file)
    out = tmp_path / "t"
    assert run("train", "--out", out, "--scenes", scenes_file, "--seed", "2",
               *TINY_FLAGS, "--max-epochs", "3") == 0
    for fname in ("checkpoint.json", "metrics.csv", "stats.json", "run.json"):
        assert (out / fname).is_file()
    header = (out / "metrics.csv").read_text().splitlines()[0]
    assert header == "epoch,train_loss,val_ade,val_fde"


def test_train_rerun_identical_checkpoint(tmp_path):
    scenes_file = tmp_path / "scenes.json"
    save_scenes([make_scene(seed=s, t0=100.0 + 40 * s) for s in range(5)], scenes_file)
    for name in ("a", "b"):
        assert run("train", "--out", tmp_path / name, "--scenes", scenes_file,
                   "--seed", "4", *TINY_FLAGS, "--max-epochs", "3") == 0
    assert (tmp_path / "a" / "checkpoint.json").read_bytes() == \
        (tmp_path / "b" / "checkpoint.json").read_bytes()


def test_train_missing_input_names_path(tmp_path, capsys):
    assert run("train", "--out", tmp_path / "t",
               "--tracks", tmp_path / "absent.csv") == 2
    assert "absent.csv" in capsys.readouterr().err


def test_train_rejects_both_input_kinds(tmp_path, capsys):
    assert run("train", "--out", tmp_path / "t", "--tracks", "x.csv",
               "--scenes", "y.json") == 2
    assert "exactly one" in capsys.readouterr().err


def test_train_bad_model_dims_usage_error(tmp_path, capsys):
    scenes_file = tmp_path / "scenes.json"
    save_scenes([make_scene(seed=s) for s in range(3)], scenes_file)
    assert run("train", "--out", tmp_path / "t", "--scenes", scenes_file,
               "--d-model", "6", "--n-heads", "4", "--T", "8", "--H", "4") == 2
    assert "error:" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def test_eval_memorized_checkpoint_beats_baseline(tmp_path):
    # two copies of one scene: the val split holds out the same content the
    # train half memorizes, so the best snapshot is the memorized model
    scene = make_scene(seed=11, t0=100.0)
    scenes_file = tmp_path / "scenes.json"
    save_scenes([scene, make_scene(seed=11, t0=200.0)], scenes_file)
    train_out = tmp_path / "t"
    assert run("train", "--out", train_out, "--scenes", scenes_file, *TINY_FLAGS,
               "--max-epochs", "300", "--patience", "300",
               "--lr", "3e-3", "--batch-size", "1") == 0
    out = tmp_path / "e"
    assert run("eval", "--out", out, "--scenes", scenes_file,
               "--checkpoint", train_out / "checkpoint.json") == 0
    doc = json.loads((out / "eval.json").read_text())
    assert doc["model"]["ade"] < 0.5
    assert doc["model"]["ade"] < doc["baseline"]["ade"]
    assert doc["n_scenes"] == 2 and doc["n_aircraft"] == 4


def test_eval_untrained_checkpoint_output_well_formed(tmp_path):
    scenes = [make_scene(seed=s, t0=100.0 + 40 * s) for s in range(3)]
    scenes_file = tmp_path / "scenes.json"
    save_scenes(scenes, scenes_file)
    ckpt = tmp_path / "ckpt.json"
    write_tiny_checkpoint(ckpt, scenes)
    out = tmp_path / "e"
    assert run("eval", "--out", out, "--scenes", scenes_file,
               "--checkpoint", ckpt) == 0
    doc = json.loads((out / "eval.json").read_text())
    assert set(doc) == {"model", "baseline", "n_aircraft", "n_scenes"}
    assert doc["model"]["ade"] > 0 and doc["baseline"]["fde"] > 0


def test_eval_empty_scene_set_is_usage_error(tmp_path, capsys):
    scenes = [make_scene(seed=0)]
    ckpt = tmp_path / "ckpt.json"
    write_tiny_checkpoint(ckpt, scenes)
    empty = tmp_path / "empty.json"
    save_scenes([], empty)
    assert run("eval", "--out", tmp_path / "e", "--scenes", empty,
               "--checkpoint", ckpt) == 2
    assert "no usable scenes" in capsys.readouterr().err


def test_eval_rejects_window_mismatch(tmp_path, capsys):
    scenes = [make_scene(seed=s) for s in range(2)]
    ckpt = tmp_path / "ckpt.json"
    write_tiny_checkpoint(ckpt, scenes)
    wrong = SceneWindow(
        ids=["A0", "A1"],
        past=np.zeros((2, 12, 3)) + 1.0,
        future=np.zeros((2, 4, 3)) + 1.0,
        valid=np.ones(2, dtype=bool),
        t0=50.0,
        dt=5.0,
    )
    wrong_file = tmp_path / "wrong.json"
    save_scenes([wrong], wrong_file)
    assert run("eval", "--out", tmp_path / "e", "--scenes", wrong_file,
               "--checkpoint", ckpt) == 2
    assert "T=12" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# explain
# ---------------------------------------------------------------------------

@pytest.fixture
def explain_setup(tmp_path):
    scenes = [make_scene(seed=s, n=3, t0=100.0 + 40 * s) for s in range(4)]
    scenes_file = tmp_path / "scenes.json"
    save_scenes(scenes, scenes_file)
    ckpt = tmp_path / "ckpt.json"
    write_tiny_checkpoint(ckpt, scenes)
    return scenes_file, ckpt


def test_explain_query_writes_frames_and_svgs(tmp_path, explain_setup):
    scenes_file, ckpt = explain_setup
    out = tmp_path / "x"
    assert run("explain", "--out", out, "--scenes", scenes_file,
               "--checkpoint", ckpt, "--query", "A1", "--render") == 0
    doc = json.loads((out / "frames.json").read_text())
    assert doc["query_id"] == "A1"
    assert len(doc["frames"]) == 4
    for frame in doc["frames"]:
        assert sum(frame["scores"].values()) == pytest.approx(1.0, abs=1e-6)
        svg = (out / f"frame_{frame['t0']:g}.svg").read_text()
        assert svg.startswith("<svg") and 'class="aircraft query"' in svg


def test_explain_unknown_query_lists_ids(tmp_path, explain_setup, capsys):
    scenes_file, ckpt = explain_setup
    assert run("explain", "--out", tmp_path / "x", "--scenes", scenes_file,
               "--checkpoint", ckpt, "--query", "ZZ9") == 2
    err = capsys.readouterr().err
    assert "A0" in err and "A1" in err and "A2" in err


def test_explain_sole_aircraft_scores_itself_fully(tmp_path):
    solo = SceneWindow(
        ids=["A0"],
        past=np.linspace(0, 1, 24).reshape(1, 8, 3) + 5.0,
        future=np.linspace(1, 2, 12).reshape(1, 4, 3) + 5.0,
        valid=np.ones(1, dtype=bool),
        t0=60.0,
        dt=5.0,
    )
    scenes_file = tmp_path / "solo.json"
    save_scenes([solo], scenes_file)
    ckpt = tmp_path / "ckpt.json"
    write_tiny_checkpoint(ckpt, [solo])
    out = tmp_path / "x"
    assert run("explain", "--out", out, "--scenes", scenes_file,
               "--checkpoint", ckpt, "--query", "A0") == 0
    doc = json.loads((out / "frames.json").read_text())
    assert doc["frames"] == [{"t0": 60.0, "scores": {"A0": 1.0}}]


def test_explain_region_flag_switches_view(tmp_path, explain_setup):
    scenes_file, ckpt = explain_setup
    out = tmp_path / "x"
    assert run("explain", "--out", out, "--scenes", scenes_file,
               "--checkpoint", ckpt, "--region=-50,-50,50,50") == 0
    doc = json.loads((out / "frames.json").read_text())
    assert doc["query_id"].startswith("region(")
    assert len(doc["frames"]) == 4


def test_explain_query_region_exclusive(tmp_path, explain_setup, capsys):
    scenes_file, ckpt = explain_setup
    assert run("explain", "--out", tmp_path / "x1", "--scenes", scenes_file,
               "--checkpoint", ckpt) == 2
    assert run("explain", "--out", tmp_path / "x2", "--scenes", scenes_file,
               "--checkpoint", ckpt, "--query", "A0",
               "--region", "0,0,1,1") == 2
    assert run("explain", "--out", tmp_path / "x3", "--scenes", scenes_file,
               "--checkpoint", ckpt, "--region", "not-a-box") == 2
    assert "x0,y0,x1,y1" in capsys.readouterr().err


def test_explain_bad_checkpoint_is_usage_error(tmp_path, explain_setup, capsys):
    scenes_file, _ = explain_setup
    broken = tmp_path / "broken.json"
    broken.write_text("{not json")
    assert run("explain", "--out", tmp_path / "x", "--scenes", scenes_file,
               "--checkpoint", broken, "--query", "A0") == 2
    assert "checkpoint" in capsys.readouterr().err


def test_subcommand_required(capsys):
    assert run() == 2
