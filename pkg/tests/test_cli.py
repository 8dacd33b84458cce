import json
import os
import subprocess
import sys

import numpy as np
import pytest

from flowcorr import __version__
from flowcorr.cli import main
from flowcorr.embedding import load_embedding
from flowcorr.geometry import save_landmarks, save_mesh
from flowcorr.harness import make_isometric_pair
from flowcorr.matching import load_correspondence
from flowcorr.metrics import EvalReport

TINY = {"steps": 30, "batch": 64, "hidden_widths": [8], "time_features": 2}


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def assert_error(code, err, prefix):
    assert code != 0
    lines = err.strip().splitlines()
    assert len(lines) == 1 and lines[0].startswith(f"error[{prefix}]"), err


@pytest.fixture
def workdir(tmp_path):
    pair = make_isometric_pair(300, np.pi / 2, 0)
    save_mesh(pair.shape_a, tmp_path / "a.off")
    save_mesh(pair.shape_b, tmp_path / "b.off")
    save_landmarks(pair.shape_a.landmark_ids, tmp_path / "lm.txt")
    (tmp_path / "tiny.json").write_text(json.dumps(TINY))
    return tmp_path


@pytest.fixture
def embedded(workdir, capsys):
    for side in ("a", "b"):
        code, _, _ = run(capsys, "embed", workdir / f"{side}.off", "--landmarks", workdir / "lm.txt",
                         "--out", workdir / f"{side}.csv")
        assert code == 0
    return workdir


@pytest.fixture
def trained(embedded, capsys):
    for side in ("a", "b"):
        code, out, _ = run(capsys, "train", embedded / f"{side}.csv", "--config", embedded / "tiny.json",
                           "--out", embedded / f"{side}.flow")
        assert code == 0 and out.startswith("final_loss ")
    return embedded


def test_version(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--version"])
    assert exc.value.code == 0
    assert __version__ in capsys.readouterr().out


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "flowcorr", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for cmd in ("sample", "embed", "train", "match", "eval", "bench"):
        assert cmd in proc.stdout


def test_sample(data_path, tmp_path, capsys):
    code, _, _ = run(capsys, "sample", data_path("cube.off"), "-n", 50, "--out", tmp_path / "s.xyz")
    assert code == 0
    pts = np.loadtxt(tmp_path / "s.xyz")
    assert pts.shape == (50, 3)
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    # every sample lies on some face of the cube
    assert np.all((np.isclose(pts, lo) | np.isclose(pts, hi)).any(axis=1))


def test_embed_writes_landmark_columns_and_is_repeatable(embedded, capsys):
    E = load_embedding(embedded / "a.csv")
    assert (E.n, E.d) == (300, 5)
    first = (embedded / "a.csv").read_bytes()
    run(capsys, "embed", embedded / "a.off", "--landmarks", embedded / "lm.txt", "--out", embedded / "a.csv")
    assert (embedded / "a.csv").read_bytes() == first


def test_embed_missing_landmarks_names_the_path(workdir, capsys):
    missing = workdir / "nope.txt"
    code, _, err = run(capsys, "embed", workdir / "a.off", "--landmarks", missing, "--out", workdir / "e.csv")
    assert_error(code, err, "E_IO")
    assert str(missing) in err
    assert not (workdir / "e.csv").exists()


def test_embed_requires_out(workdir, capsys):
    code, _, err = run(capsys, "embed", workdir / "a.off", "--landmarks", workdir / "lm.txt")
    assert_error(code, err, "E_PARAMETER")


def test_train_is_bit_identical_on_rerun(trained, capsys):
    first = (trained / "a.flow").read_bytes()
    run(capsys, "train", trained / "a.csv", "--config", trained / "tiny.json", "--out", trained / "a.flow")
    assert (trained / "a.flow").read_bytes() == first


def test_train_malformed_config_names_the_key(embedded, capsys):
    (embedded / "bad.json").write_text(json.dumps({"stepz": 3}))
    code, _, err = run(capsys, "train", embedded / "a.csv", "--config", embedded / "bad.json",
                       "--out", embedded / "x.flow")
    assert_error(code, err, "E_PARAMETER")
    assert "stepz" in err
    assert not (embedded / "x.flow").exists()
    (embedded / "bad.json").write_text("{not json")
    code, _, err = run(capsys, "train", embedded / "a.csv", "--config", embedded / "bad.json",
                       "--out", embedded / "x.flow")
    assert_error(code, err, "E_PARAMETER")


def test_fuse_self_match_is_identity(trained, capsys):
    code, _, _ = run(capsys, "match", trained / "a.csv", trained / "a.csv", "--method", "fuse",
                     "--src-model", trained / "a.flow", "--tgt-model", trained / "a.flow", "--steps", 100,
                     "--out", trained / "self.csv")
    assert code == 0
    corr = load_correspondence(trained / "self.csv")
    assert np.mean(corr == np.arange(len(corr))) >= 0.99
    meta = json.loads((trained / "self.csv.json").read_text())
    assert meta["method"] == "fuse" and meta["steps"] == 100


@pytest.mark.parametrize("method", ["knn", "sinkhorn", "knn-in-gauss"])
def test_other_methods_run(trained, capsys, method):
    code, _, _ = run(capsys, "match", trained / "a.csv", trained / "b.csv", "--method", method,
                     "--src-model", trained / "a.flow", "--tgt-model", trained / "b.flow",
                     "--out", trained / f"{method}.csv")
    assert code == 0
    assert len(load_correspondence(trained / f"{method}.csv")) == 300


def test_match_unknown_method_lists_valid_ones(embedded, capsys):
    code, _, err = run(capsys, "match", embedded / "a.csv", embedded / "b.csv", "--method", "magic",
                       "--out", embedded / "c.csv")
    assert_error(code, err, "E_PARAMETER")
    for m in ("fuse", "knn", "knn-in-gauss", "sinkhorn"):
        assert m in err


def test_match_dimension_mismatch(embedded, capsys):
    run(capsys, "embed", embedded / "b.off", "--kind", "xyz", "--out", embedded / "bx.csv")
    code, _, err = run(capsys, "match", embedded / "a.csv", embedded / "bx.csv", "--method", "knn",
                       "--out", embedded / "c.csv")
    assert_error(code, err, "E_CONTRACT")
    assert not (embedded / "c.csv").exists()


def test_fuse_needs_models(embedded, capsys):
    code, _, err = run(capsys, "match", embedded / "a.csv", embedded / "b.csv", "--out", embedded / "c.csv")
    assert_error(code, err, "E_PARAMETER")


def test_eval_identity_is_zero(embedded, capsys):
    (embedded / "ident.csv").write_text("".join(f"{i}\n" for i in range(300)))
    code, out, _ = run(capsys, "eval", embedded / "ident.csv", "--gt", "identity",
                       "--source", embedded / "a.off", "--target", embedded / "b.off",
                       "--out", embedded / "r.json")
    assert code == 0
    rep = EvalReport.load(embedded / "r.json")
    assert rep.euclidean_error == 0 and rep.geodesic_error == 0 and rep.coverage == 1
    names = [line.split()[0] for line in out.strip().splitlines()]
    assert names == ["euclidean_error", "geodesic_error", "dirichlet_energy", "coverage"]
    assert EvalReport.from_json(rep.to_json()) == rep


def test_eval_with_embeddings_reports_divergences(embedded, capsys):
    (embedded / "ident.csv").write_text("".join(f"{i}\n" for i in range(300)))
    code, out, _ = run(capsys, "eval", embedded / "ident.csv", "--gt", "identity",
                       "--source", embedded / "a.off", "--target", embedded / "b.off",
                       "--source-embedding", embedded / "a.csv", "--target-embedding", embedded / "b.csv",
                       "--out", embedded / "r.json")
    assert code == 0 and "js_before" in out


def test_eval_length_mismatch(embedded, capsys):
    (embedded / "short.csv").write_text("0\n1\n")
    code, _, err = run(capsys, "eval", embedded / "short.csv", "--gt", "identity",
                       "--source", embedded / "a.off", "--target", embedded / "b.off",
                       "--out", embedded / "r.json")
    assert_error(code, err, "E_VALIDATION")
    assert not (embedded / "r.json").exists()


def test_bench_missing_spec(tmp_path, capsys):
    code, _, err = run(capsys, "bench", tmp_path / "none.json")
    assert_error(code, err, "E_IO")
    assert "none.json" in err


def test_bench_runs_and_is_deterministic(tmp_path, capsys):
    spec = {"pairs": [{"family": "cylinder-bend", "resolution": 200}], "methods": ["knn", "fuse"],
            "train": TINY, "output_dir": "out"}
    (tmp_path / "spec.json").write_text(json.dumps(spec))
    code, out, _ = run(capsys, "bench", tmp_path / "spec.json")
    assert code == 0 and "cylinder-bend" in out
    first = (tmp_path / "out" / "metrics.csv").read_bytes()
    code, _, _ = run(capsys, "bench", tmp_path / "spec.json")
    assert (tmp_path / "out" / "metrics.csv").read_bytes() == first
    code, _, _ = run(capsys, "bench", tmp_path / "spec.json", "--out", tmp_path / "elsewhere")
    assert (tmp_path / "elsewhere" / "metrics.csv").read_bytes() == first


def test_bundled_demo_spec_parses():
    from flowcorr.harness import ExperimentSpec
    path = os.path.join(os.path.dirname(__file__), "..", "demos", "demo_bench.json")
    spec = ExperimentSpec.load(path)
    assert len(spec.expand()) >= 2
