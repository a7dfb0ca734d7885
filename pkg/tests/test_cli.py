import json

import numpy as np
import pytest

from unmix_gmm import io as uio
from unmix_gmm.cli import run
from unmix_gmm.core import GaussianComponent, GmmBundle, PixelBlock, ProjectionModel
from unmix_gmm.synth import bimodal_library


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    uio.save_library(bimodal_library(n_classes=3, per_class=30, bands=12, seed=2), d / "lib.csv")
    (d / "spec.json").write_text(json.dumps({"counts": [2, 2, 2], "rows": 6, "cols": 5, "seed": 1}))
    return d


def call(*argv):
    return run([str(a) for a in argv] + ["--log-level", "WARNING"])


def test_full_chain(workdir):
    d = workdir
    assert call("pca", "--library", d / "lib.csv", "--dim", 4, "--out", d / "proj.json") == 0
    assert call(
        "select", "--library", d / "lib.csv", "--projection", d / "proj.json",
        "--candidates", "1,2", "--repeats", 2, "--out", d / "cvic.json",
    ) == 0
    cvic = json.loads((d / "cvic.json").read_text())
    assert len(cvic["chosen"]) == 3 and len(cvic["repeat_choices"]) == 2
    assert call("fit", "--library", d / "lib.csv", "--projection", d / "proj.json", "--cvic", d / "cvic.json", "--out", d / "b.json") == 0
    assert uio.load_bundle(d / "b.json").component_counts == tuple(cvic["chosen"])
    assert call("fit", "--library", d / "lib.csv", "--projection", d / "proj.json", "--force-k", 1, "--out", d / "b1.json") == 0
    assert call("synth", "--library", d / "lib.csv", "--spec", d / "spec.json",
                "--out-pixels", d / "px.csv", "--out-truth", d / "truth" / "img.csv", "--out-picks", d / "picks.json") == 0
    assert json.loads((d / "px.csv.shape.json").read_text()) == {"rows": 6, "cols": 5}
    assert call("unmix", "--bundle", d / "b.json", "--pixels", d / "px.csv", "--shape", d / "px.csv.shape.json",
                "--out", d / "est" / "img.csv", "--diagnostics", d / "diag.json") == 0
    est = uio.load_abundances(d / "est" / "img.csv")
    assert est.n_pixels == 30 and est.class_names == ("class_0", "class_1", "class_2")
    assert "objective" in json.loads((d / "diag.json").read_text())
    assert "# input bundle sha256:" in (d / "est" / "img.csv").read_text()
    assert call("eval", "--est", d / "est", "--truth", d / "truth", "--out", d / "rep.json", "--points", d / "pts.csv") == 0
    rep = json.loads((d / "rep.json").read_text())
    assert rep["images"] == ["img.csv"] and len(rep["individual"]["mad"]) == 3
    assert (d / "pts.csv").read_text().count("\nimg.csv,") == 3


def test_pca_on_pixels(workdir, tmp_path):
    uio.save_pixels(PixelBlock(np.random.default_rng(0).random((20, 12))), tmp_path / "p.csv")
    assert call("pca", "--library", workdir / "lib.csv", "--pixels", tmp_path / "p.csv", "--dim", 3, "--out", tmp_path / "p.json") == 0
    assert uio.load_projection(tmp_path / "p.json").dim == 3


def test_help_exits_zero(capsys):
    assert run(["--help"]) == 0
    assert "pipeline" in capsys.readouterr().out


@pytest.mark.parametrize(
    "argv",
    [
        [],
        ["frobnicate"],
        ["pca", "--library", "x.csv"],
        ["fit", "--library", "a", "--projection", "b", "--out", "c"],
        ["select", "--library", "a", "--projection", "b", "--out", "c", "--candidates", "x"],
    ],
)
def test_usage_errors_exit_one(argv):
    assert run(argv) == 1


def test_missing_file_exits_one(tmp_path):
    assert call("pca", "--library", tmp_path / "nope.csv", "--out", tmp_path / "p.json") == 1


def test_malformed_library_exits_one(tmp_path):
    (tmp_path / "lib.csv").write_text("class,band_0\nA,zzz\n")
    assert call("pca", "--library", tmp_path / "lib.csv", "--dim", 1, "--out", tmp_path / "p.json") == 1


def test_numerical_failure_exits_two(tmp_path):
    # Covariances so small that alpha**2 * Sigma underflows to zero.
    tiny = 5e-324 * np.eye(2)
    comps = ((GaussianComponent(1.0, [0.0, 0.0], tiny),), (GaussianComponent(1.0, [1.0, 1.0], tiny),))
    uio.save_bundle(GmmBundle(("a", "b"), comps, ProjectionModel.identity(2), np.zeros((2, 2))), tmp_path / "b.json")
    uio.save_pixels(PixelBlock(np.array([[0.5, 0.5]])), tmp_path / "p.csv")
    assert call("unmix", "--bundle", tmp_path / "b.json", "--pixels", tmp_path / "p.csv", "--out", tmp_path / "a.csv") == 2


def test_too_many_combinations_exits_one(workdir, tmp_path):
    d = workdir
    call("pca", "--library", d / "lib.csv", "--dim", 4, "--out", tmp_path / "proj.json")
    call("fit", "--library", d / "lib.csv", "--projection", tmp_path / "proj.json", "--counts", "2,2,2", "--out", tmp_path / "b.json")
    uio.save_pixels(PixelBlock(np.full((1, 12), 0.3)), tmp_path / "p.csv")
    assert call("unmix", "--bundle", tmp_path / "b.json", "--pixels", tmp_path / "p.csv",
                "--out", tmp_path / "a.csv", "--max-combinations", 4) == 1


def test_pipeline_command(tmp_path):
    cfg = {
        "library": {"synthetic": {"n_classes": 2, "per_class": 20, "bands": 8, "seed": 1}},
        "projection": {"dim": 3},
        "force_K": 1,
        "synth": {"n_images": 2, "rows": 4, "cols": 4, "counts": [2, 2]},
    }
    (tmp_path / "c.json").write_text(json.dumps(cfg))
    assert call("pipeline", "--config", tmp_path / "c.json", "--out-dir", tmp_path / "out") == 0
    rep = json.loads((tmp_path / "out" / "report.json").read_text())
    assert list(rep["configs"]) == ["force_K=1"]
    assert "bland_altman" in rep["configs"]["force_K=1"]


@pytest.mark.parametrize("command", ["pca", "select", "fit", "unmix", "synth", "eval", "pipeline"])
def test_subcommand_help_exits_zero(command, capsys):
    assert run([command, "--help"]) == 0
    assert "--out" in capsys.readouterr().out or command == "pipeline"


def test_version_flag(capsys):
    from unmix_gmm import __version__

    assert run(["--version"]) == 0
    assert __version__ in capsys.readouterr().out


def test_failed_command_leaves_no_output(tmp_path):
    (tmp_path / "lib.csv").write_text("class,band_0\nA,zzz\n")
    assert call("pca", "--library", tmp_path / "lib.csv", "--dim", 1, "--out", tmp_path / "p.json") == 1
    assert sorted(p.name for p in tmp_path.iterdir()) == ["lib.csv"]


def test_outputs_record_version_and_digests(workdir, tmp_path):
    from unmix_gmm import __version__
    from unmix_gmm.pipeline import sha256_file

    lib = workdir / "lib.csv"
    assert call("pca", "--library", lib, "--dim", 3, "--out", tmp_path / "p.json") == 0
    assert call("fit", "--library", lib, "--projection", tmp_path / "p.json", "--force-k", 1, "--out", tmp_path / "b.json") == 0
    text = (tmp_path / "b.json").read_text()
    assert __version__ in text and sha256_file(lib) in text


def test_toml_config_matches_json(tmp_path):
    from unmix_gmm.pipeline import load_config

    (tmp_path / "c.toml").write_text('seed = 4\nforce_K = 1\n\n[synth]\nn_images = 2\ncounts = [2, 2]\n')
    (tmp_path / "c.json").write_text(json.dumps({"seed": 4, "force_K": 1, "synth": {"n_images": 2, "counts": [2, 2]}}))
    assert load_config(tmp_path / "c.toml") == load_config(tmp_path / "c.json")


def test_module_entry_point():
    import subprocess
    import sys

    out = subprocess.run([sys.executable, "-m", "unmix_gmm", "--version"], capture_output=True, text=True, check=True)
    assert out.stdout.startswith("unmix-gmm ")
