import json
import subprocess
import sys

import numpy as np
import pytest

from anchorsplat import io, synth
from anchorsplat.cli import main

TINY = {"segments": 10, "body_rings": 6, "cap_rings": 3}
FAST = ["--stage1.iterations", "15", "--stage3.iterations", "8", "--joint.iterations", "4"]


def write_spec(path, spec):
    path.write_text(json.dumps(spec.to_dict()))
    return str(path)


def run(*argv):
    code = main([str(a) for a in argv])
    assert code == 0, argv
    return code


@pytest.fixture(scope="module")
def chain(tmp_path_factory):
    """synth, lift, refine from the ground-truth labeling, then fit."""
    d = tmp_path_factory.mktemp("chain")
    spec = synth.SceneSpec.capsule_two_bands(views={"count": 3, "resolution": 24}, body_options=TINY)
    run("synth", "--out", d / "scene", "--spec", write_spec(d / "spec.json", spec))
    common = ["--scene", d / "scene", "--out", d / "run"]
    run("lift", *common, *FAST)
    run("refine", *common, "--labels", d / "scene" / "gt_labels.txt")
    run("fit", *common, *FAST)
    return d, common


def test_chain_writes_every_artifact(chain):
    d, _ = chain
    r = d / "run"
    for name in ("seg.gsl", "stage1_log.csv", "labels_raw.txt", "labels.txt", "joint_log.csv", "config.json"):
        assert (r / name).exists(), name
    av = io.load_avatar(r / "avatar")
    assert [l.name for l in av.ordered()] == ["skin", "upper", "lower"]
    gt, _ = io.load_labeling(d / "scene" / "gt_labels.txt")
    assert av.face_labels.labels.tolist() == gt.labels.tolist()
    assert json.loads((r / "config.json").read_text())["stage1"]["iterations"] == 15


def test_animate_render_extract_eval(chain):
    d, common = chain
    r = d / "run"
    run("animate", *common)
    npz = np.load(r / "posed_splats.npz")
    assert {"upper/means", "lower/means"} <= set(npz.files)
    assert len(list(r.glob("posed_*.png"))) == 3

    nj = io.load_avatar(r / "avatar").anchor_mesh.num_joints
    pose = {"rotations": [[1, 0, 0, 0]] * nj, "root_translation": [0.1, 0, 0]}
    (d / "pose.json").write_text(json.dumps(pose))
    run("animate", "--scene", d / "scene", "--out", d / "moved", "--avatar", r / "avatar", "--pose", d / "pose.json")
    moved = np.load(d / "moved" / "posed_splats.npz")
    np.testing.assert_allclose(moved["upper/means"] - npz["upper/means"], np.tile([0.1, 0, 0], (len(npz["upper/means"]), 1)), atol=1e-12)

    run("render", *common, "--labels")
    assert len(list((r / "renders").glob("rgb_*.png"))) == 3
    assert len(list((r / "renders").glob("label_*.png"))) == 3

    run("extract", *common, "--layer", "upper")
    v, f, _ = io.read_obj(r / "upper.obj")
    assert len(f) and f.max() < len(v)

    run("eval", *common, "--gt", d / "scene" / "gt_avatar")
    m = json.loads((r / "metrics.json").read_text())
    assert 0 <= m["miou"] <= 1 and m["chamfer_mm"] > 0 and m["pen_mode"] == "nearest"
    header, values = (r / "metrics.csv").read_text().splitlines()
    assert header.split(",") == list(m)


def test_stack_reorder_and_transfer(chain, tmp_path):
    d, common = chain
    run("stack", *common, "--order", "skin,lower,upper", "--dest", tmp_path / "re")
    assert [l.name for l in io.load_avatar(tmp_path / "re").ordered()] == ["skin", "lower", "upper"]

    one = synth.SceneSpec(bands=[synth.BandSpec("upper", (0.0, 0.42), offset=0.006)],
                          views={"count": 2, "resolution": 16}, body_options=TINY)
    run("synth", "--out", tmp_path / "one", "--spec", write_spec(tmp_path / "one.json", one))
    run("stack", "--out", tmp_path, "--target", tmp_path / "one" / "gt_avatar",
        "--source", d / "scene" / "gt_avatar", "--layer", "lower", "--rank", 1, "--dest", tmp_path / "moved")
    got = io.load_avatar(tmp_path / "moved")
    assert [l.name for l in got.ordered()] == ["skin", "lower", "upper"]


def test_stack_rejects_incomplete_order(chain, tmp_path, capsys):
    _, common = chain
    assert main(["stack", *map(str, common), "--order", "skin,upper", "--dest", str(tmp_path / "x")]) == 2
    assert json.loads(capsys.readouterr().err.strip().splitlines()[-1])["error"] == "ConfigError"


def test_refine_is_idempotent(chain, tmp_path):
    d, _ = chain
    scene = ["--scene", str(d / "scene")]
    run("refine", *scene, "--out", tmp_path / "a", "--labels", d / "run" / "labels_raw.txt")
    run("refine", *scene, "--out", tmp_path / "b", "--labels", tmp_path / "a" / "labels.txt")
    assert (tmp_path / "a" / "labels.txt").read_text() == (tmp_path / "b" / "labels.txt").read_text()


def test_missing_artifact_is_reported_as_json(chain, tmp_path, capsys):
    d, _ = chain
    code = main(["fit", "--scene", str(d / "scene"), "--out", str(tmp_path / "empty")])
    assert code == 2
    rec = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert rec["command"] == "fit" and rec["error"] == "MissingArtifact"
    assert "anchorsplat lift" in rec["message"]


def test_bad_config_key_exit_code(tmp_path, capsys):
    assert main(["lift", "--out", str(tmp_path), "--stage1.nonsense", "3"]) == 2
    assert json.loads(capsys.readouterr().err)["error"] == "ConfigError"
    assert main(["lift", "--out", str(tmp_path)]) == 2  # no mesh path configured


def test_synth_is_byte_deterministic(tmp_path):
    spec = write_spec(tmp_path / "s.json", synth.SceneSpec.capsule_two_bands(views={"count": 2, "resolution": 16}, body_options=TINY))
    run("synth", "--out", tmp_path / "a", "--spec", spec, "--seed", 3)
    run("synth", "--out", tmp_path / "b", "--spec", spec, "--seed", 3)
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert files
    for rel in files:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes(), rel


@pytest.fixture(scope="module")
def self_eval(chain):
    d, _ = chain
    gt = d / "scene" / "gt_avatar"
    run("eval", "--scene", d / "scene", "--out", d / "self", "--avatar", gt, "--gt", gt)
    return json.loads((d / "self" / "metrics.json").read_text())


def test_eval_of_ground_truth_against_itself(self_eval):
    assert self_eval["chamfer_mm"] == 0
    assert self_eval["miou"] == 1 and self_eval["macc"] == 1 and self_eval["mf1"] == 1
    assert self_eval["psnr"] > 40  # limited by 8-bit images on disk


@pytest.mark.xfail(strict=True, reason="extracted band vertices fall inside the coarse body's vertex tangent planes")
def test_eval_of_ground_truth_has_no_penetration(self_eval):
    assert self_eval["pen_rate_percent"] == 0


def test_console_script_help():
    out = subprocess.run([sys.executable, "-m", "anchorsplat.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for verb in ("synth", "lift", "refine", "fit", "animate", "stack", "extract", "eval", "render"):
        assert verb in out.stdout
