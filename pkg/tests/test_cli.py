import csv
import subprocess
import sys

import numpy as np
import pytest

from lfguide import cli, imageio, scenes


def run(mode, *args, **kw):
    argv = [mode, *args]
    for k, v in kw.items():
        argv += ["--" + k.replace("_", "-"), str(v)]
    return cli.main(argv)


@pytest.fixture(scope="module")
def scene_file(tmp_path_factory):
    d = tmp_path_factory.mktemp("scene")
    p = d / "small_light.toml"
    scenes.save_scene(scenes.make_template("small_light", res=16), p)
    return p


@pytest.fixture(scope="module")
def baked(scene_file, tmp_path_factory):
    out = tmp_path_factory.mktemp("bake")
    assert run("bake", scene=scene_file, output_dir=out, block_size=8, resolution=8, gt_spp=4,
               reference_spp=64) == 0
    return out


def test_render_outputs(scene_file, tmp_path, baked):
    assert run("render", scene=scene_file, output_dir=tmp_path, block_size=8, max_depth=4, budget=256, spp=4,
               reference=baked / "reference.pfm") == 0
    img = imageio.read_pfm(tmp_path / "image.pfm")
    assert img.shape == (16, 16, 3) and np.all(np.isfinite(img))
    assert (tmp_path / "image.png").exists() and (tmp_path / "actions.log").exists()
    with open(tmp_path / "metrics.csv") as f:
        rows = list(csv.DictReader(f))
    assert rows[0]["estimator"] == "heuristic" and float(rows[0]["relmse"]) > 0


def test_bake_outputs(baked):
    assert sorted(p.name for p in baked.glob("gt_*.lfgb")) == [f"gt_b{i}_r8.lfgb" for i in range(4)]


def test_eval_identical_image_passes(baked, tmp_path, scene_file):
    cfg = tmp_path / "eval.toml"
    cfg.write_text("[thresholds]\nrelmse = 0.0\n")
    assert run("eval", "--config", str(cfg), scene=scene_file, reference=baked / "reference.pfm",
               image=baked / "reference.pfm", output_dir=tmp_path) == 0
    with open(tmp_path / "metrics.csv") as f:
        assert float(next(csv.DictReader(f))["relmse"]) == 0.0


def test_eval_rows_and_failing_threshold(baked, tmp_path, scene_file):
    cfg = tmp_path / "eval.toml"
    cfg.write_text("[thresholds]\nheuristic = 1e-9\n")
    code = run("eval", "--config", str(cfg), scene=scene_file, reference=baked / "reference.pfm",
               output_dir=tmp_path, block_size=8, max_depth=4, budget=256, spp=2)
    assert code == 1
    with open(tmp_path / "metrics.csv") as f:
        rows = list(csv.DictReader(f))
    assert [r["estimator"] for r in rows] == ["unguided", "heuristic"]
    assert all(r["budget"] == "256" for r in rows)


def test_exit_codes(scene_file, tmp_path, capsys):
    assert run("render", output_dir=tmp_path) == 2  # missing scene
    assert run("render", scene=scene_file, alpha=3) == 2
    assert run("render", "--blocksize", "8", scene=scene_file) == 2
    assert "block_size" in capsys.readouterr().err
    assert run("paint") == 2
    assert run("eval", scene=scene_file, output_dir=tmp_path) == 2  # no reference: invalid state
    assert run("render", scene=tmp_path / "missing.toml", output_dir=tmp_path) == 3
    assert run("render", "--config", str(tmp_path / "none.toml"), scene=scene_file) == 2
    assert run("render", scene=scene_file, estimator="learned", r_checkpoint="a", q_checkpoint="b",
               output_dir=tmp_path) == 3


def test_seed_env_var(scene_file, tmp_path, monkeypatch):
    kw = dict(scene=scene_file, block_size=8, max_depth=4, budget=64, spp=1)
    monkeypatch.setenv("LFGUIDE_SEED", "5")
    run("render", output_dir=tmp_path / "a", **kw)
    monkeypatch.delenv("LFGUIDE_SEED")
    run("render", output_dir=tmp_path / "b", seed=5, **kw)
    run("render", output_dir=tmp_path / "c", seed=6, **kw)
    a, b, c = ((tmp_path / x / "image.pfm").read_bytes() for x in "abc")
    assert a == b and a != c


def test_learned_pipeline(tmp_path, scene_file):
    ds = tmp_path / "ds"
    assert run("dataset-gen", dataset_dir=ds, templates="cornell,small_light", seeds="0,1", width=16,
               gt_spp=4, resolution=8) == 0
    assert run("train-r", dataset_dir=ds, resolution=8, epochs=3, output_dir=tmp_path) == 0
    assert run("train-q", r_checkpoint=tmp_path / "r.lfgn", templates="small_light", seeds="0", width=16,
               block_size=16, resolution=8, gt_spp=4, episodes=2, q_steps=4, q_budget=32,
               output_dir=tmp_path) == 0
    assert (tmp_path / "r_train.csv").exists() and (tmp_path / "q_train.csv").exists()
    assert run("render", scene=scene_file, estimator="learned", r_checkpoint=tmp_path / "r.lfgn",
               q_checkpoint=tmp_path / "q.lfgn", block_size=16, max_depth=3, budget=64, spp=2,
               output_dir=tmp_path / "lr") == 0


def test_implicit_commands(tmp_path, scene_file):
    kw = dict(scene=scene_file, block_size=8, max_depth=3, budget=128, implicit_epochs=5, resolution=8)
    assert run("fit-implicit", output_dir=tmp_path, **kw) == 0
    assert (tmp_path / "implicit.lfgn").exists() and (tmp_path / "implicit_fit.csv").exists()
    assert run("compare", output_dir=tmp_path, gt_spp=4, spp=2, reference_spp=16, **kw) == 0
    assert "implicit" in (tmp_path / "compare.txt").read_text()


def test_module_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "lfguide.cli", "render", "--bogus-flag", "1"],
                       capture_output=True, text=True)
    assert r.returncode == 2 and "unknown option" in r.stderr
