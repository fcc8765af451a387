import hashlib
import json

import pytest

from gausssurf import cli

SMALL = ["--n-gaussians", "400", "--n-cameras", "6", "--image-size", "32", "--n-heldout", "2"]


def tree_digest(root, skip=("manifest.json",)):
    out = {}
    for p in sorted(root.rglob("*")):
        if p.is_file() and p.name not in skip:
            out[str(p.relative_to(root))] = hashlib.sha256(p.read_bytes()).hexdigest()
    return out


def synth(out, *extra):
    return cli.run(["synth", "--out", str(out), "--seed", "3", "--threads", "1", *SMALL, *extra])


def test_synth_writes_expected_files_and_is_deterministic(tmp_path):
    assert synth(tmp_path / "a") == 0
    assert synth(tmp_path / "b") == 0
    a = tree_digest(tmp_path / "a")
    assert a == tree_digest(tmp_path / "b")
    for name in ("scene.ply", "cameras.json", "gt.json", "heldout_cameras.json", "images/view_000.png"):
        assert name in a
    man = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert man["command"] == "synth" and man["seed"] == 3
    assert man["config"]["n_gaussians"] == 400
    assert "scene.ply" in man["outputs"] and "numpy" in man["versions"]
    other = json.loads((tmp_path / "b" / "manifest.json").read_text())
    assert man["config_hash"] == other["config_hash"]


def test_usage_errors_exit_one(tmp_path, capsys):
    assert cli.run(["synth", "--bogus"]) == 1
    assert cli.run([]) == 1
    assert cli.run(["train", "--out", str(tmp_path)]) == 1   # --scene missing
    assert "usage" in capsys.readouterr().err.lower()


def test_config_precedence(tmp_path):
    cfg = tmp_path / "c.toml"
    cfg.write_text('seed = 9\nn_gaussians = 123\n[synth]\nnoise = 0.0\nn_cameras = 5\n')
    ns = cli.build_parser().parse_args(["synth", "--config", str(cfg), "--n-cameras", "7"])
    eff = cli.effective_config("synth", ns)
    assert eff["seed"] == 9 and eff["n_gaussians"] == 123 and eff["noise"] == 0.0
    assert eff["n_cameras"] == 7                      # flag beats file
    assert eff["image_size"] == cli.DEFAULTS["synth"]["image_size"]
    jcfg = tmp_path / "c.json"
    jcfg.write_text(json.dumps({"synth": {"radius": 2.5}}))
    eff = cli.effective_config("synth", cli.build_parser().parse_args(["synth", "--config", str(jcfg)]))
    assert eff["radius"] == 2.5


def test_threads_from_environment(monkeypatch):
    monkeypatch.setenv("GAUSSSURF_THREADS", "3")
    eff = cli.effective_config("synth", cli.build_parser().parse_args(["synth"]))
    assert eff["threads"] == 3
    eff = cli.effective_config("synth", cli.build_parser().parse_args(["synth", "--threads", "2"]))
    assert eff["threads"] == 2


def test_config_hash_ignores_output_folder():
    a = {"seed": 1, "out": "x"}
    assert cli.config_hash(a) == cli.config_hash({"seed": 1, "out": "y"})
    assert cli.config_hash(a) != cli.config_hash({"seed": 2, "out": "x"})


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    d = tmp_path_factory.mktemp("pipe")
    s = str(d)
    common = ["--seed", "0", "--threads", "1"]
    assert synth(d) == 0
    assert cli.run(["train", "--out", s, "--scene", f"{s}/scene.ply", "--cameras", f"{s}/cameras.json",
                    "--images", f"{s}/images", "--iters", "20", "--n-reg-points", "200", *common]) == 0
    assert cli.run(["extract-mesh", "--out", s, "--scene", f"{s}/trained.ply", "--cameras", f"{s}/cameras.json",
                    "--grid", "32", "--target-verts", "300", "--rays-per-view", "300", *common]) == 0
    assert cli.run(["bind", "--out", s, "--mesh", f"{s}/mesh.ply", "--scene", f"{s}/trained.ply",
                    "--n-per-tri", "1", *common]) == 0
    assert cli.run(["refine", "--out", s, "--bound", f"{s}/bound", "--cameras", f"{s}/cameras.json",
                    "--images", f"{s}/images", "--heldout-cameras", f"{s}/heldout_cameras.json",
                    "--heldout-images", f"{s}/heldout_images", "--iters", "4", *common]) == 0
    return d


def test_pipeline_artifacts(pipeline):
    for name in ("trained.ply", "train_history.json", "mesh.ply", "extract.json", "bound.bound.bin",
                 "refined.bound.json", "refined_flat.ply", "refine_history.json"):
        assert (pipeline / name).exists(), name
    hist = json.loads((pipeline / "refine_history.json").read_text())
    assert [h["step"] for h in hist] == [0, 2, 4]
    assert all(h["psnr"] > 0 for h in hist)


def test_eval_writes_reports(pipeline):
    s = str(pipeline)
    assert cli.run(["eval", "--out", s, "--mesh", f"{s}/mesh.ply", "--gt", f"{s}/gt.json",
                    "--scene", f"{s}/trained.ply", "--cameras", f"{s}/cameras.json",
                    "--images", f"{s}/images", "--n-samples", "2000"]) == 0
    rep = json.loads((pipeline / "report.json").read_text())
    assert rep["summary"]["chamfer"] > 0 and rep["summary"]["chamfer"] <= rep["summary"]["hausdorff"]
    assert len(rep["views"]) == 6
    assert (pipeline / "report.csv").read_text().startswith("view,psnr,ssim,identical")


def test_render_command(pipeline):
    s = str(pipeline)
    assert cli.run(["render", "--out", s, "--bound", f"{s}/refined", "--cameras", f"{s}/heldout_cameras.json"]) == 0
    assert len(list((pipeline / "renders").glob("*.png"))) == 2


def test_runtime_error_exits_two(pipeline, capsys):
    s = str(pipeline)
    code = cli.run(["extract-mesh", "--out", s + "/hi", "--scene", f"{s}/trained.ply",
                    "--cameras", f"{s}/cameras.json", "--lambda", "50"])
    assert code == 2
    assert "lambda" in capsys.readouterr().err
    assert cli.run(["train", "--scene", s + "/missing.ply", "--cameras", f"{s}/cameras.json",
                    "--images", f"{s}/images", "--out", s + "/x"]) == 2
