import csv
import json

import numpy as np
import pytest

from koopstitch import dynamics, edmd
from koopstitch.cli import main
from koopstitch.lifting import Dictionary

A = np.array([[0.9, 0.1], [-0.2, 0.7]])


def read_csv(path):
    with open(path) as fh:
        return list(csv.reader(fh))


def report(path):
    return json.loads(path.read_text())


@pytest.fixture
def linear_csv(tmp_path):
    sys_ = dynamics.get_system("toggle_switch")  # only the 2-D CSV layout matters here
    rng = np.random.default_rng(4)
    trajs = []
    for i in range(4):
        xs = [rng.normal(size=2)]
        for _ in range(25):
            xs.append(A @ xs[-1])
        trajs.append(dynamics.Trajectory(sys_, 1.0, np.array(xs), i))
    path = tmp_path / "linear.csv"
    dynamics.write_trajectories_csv(path, trajs)
    return path


def write_model(path, K, dim):
    m = edmd.KoopmanModel(np.asarray(K, float), Dictionary("coordinate", dim), label="syn")
    edmd.save_model(m, path)
    return path


def test_simulate_single_step_single_ic(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"steps": 1, "ic_grid": {"lower": [1, 2], "upper": [3, 3],
                                                       "counts": [1, 1]}}))
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    rows = read_csv(tmp_path / "o" / "trajectories.csv")
    assert rows[0] == ["traj_id", "t", "x1", "x2"] and len(rows) == 3
    assert [float(v) for v in rows[1][2:]] == [1.0, 2.0]


def test_default_simulation_shape(pipeline_out):
    trajs = dynamics.read_trajectories_csv(pipeline_out / "trajectories.csv",
                                           dynamics.get_system("toggle_switch"))
    assert len(trajs) == 81 and all(len(t.states) == 1001 for t in trajs)
    cfg = report(pipeline_out / "config.json")
    assert cfg["dictionary"] == {"kind": "gaussian_rbf", "N": 30, "sigma": 0.4, "seed": 0,
                                 "constant": False}


def test_pipeline_models_and_spectra(pipeline_out):
    g = edmd.load_model(pipeline_out / "model_global.json")
    left = edmd.load_model(pipeline_out / "model_left.json")
    assert g.K.shape == (30, 30) and left.label == "left"
    mults = report(pipeline_out / "pipeline_report.json")["unit_multiplicity"]
    assert mults == {"all": 2, "left": 1, "right": 1, "stitched": 2}
    for name in ("global", "left", "right", "stitched"):
        d = pipeline_out / f"spectrum_{name}"
        assert (d / "eigenvalues.csv").exists() and (d / "field_0.csv").exists()
        assert (d / "partition.csv").exists()
    assert read_csv(pipeline_out / "mask.csv")[0] == ["row", "col", "value"]
    assert report(pipeline_out / "stitch_report.json")["L"] == 60


def test_pipeline_discovery(pipeline_out):
    r = report(pipeline_out / "discovery" / "discovery_report.json")
    assert r["monotonicity"] == "pass" and r["final_multiplicity"] == 2
    assert len(r["multiplicity_increases_at"]) == 1
    hist = (pipeline_out / "discovery" / "history.jsonl").read_text().splitlines()
    assert len(hist) == 81


def test_spectrum_prints_multiplicity(pipeline_out, tmp_path, capsys):
    assert main(["spectrum", "--model", str(pipeline_out / "model_global.json"),
                 "--out", str(tmp_path / "s"), "--block-diag", "support"]) == 0
    assert "unit multiplicity: 2" in capsys.readouterr().out
    bd = report(tmp_path / "s" / "spectrum_report.json")["block_diagonalization"]
    assert sum(bd["block_sizes"]) == 30


def test_spectrum_of_identity(tmp_path, capsys):
    path = write_model(tmp_path / "eye.json", np.eye(3), 3)
    assert main(["spectrum", "--model", str(path), "--out", str(tmp_path / "s")]) == 0
    assert "unit multiplicity: 3" in capsys.readouterr().out
    rows = read_csv(tmp_path / "s" / "eigenvalues.csv")[1:]
    assert len(rows) == 3


def test_fit_linear_coordinate(linear_csv, tmp_path):
    out = tmp_path / "lin.json"
    assert main(["fit", "--data", str(linear_csv), "--dictionary-kind", "coordinate",
                 "--lag", "1", "--model-out", str(out)]) == 0
    m = edmd.load_model(out)
    assert np.linalg.norm(m.K - A) < 1e-10
    rep = report(out.with_suffix(".report.json"))
    assert rep["training_stats"]["svd_rank"] == 2


def test_predict_linear(tmp_path):
    path = write_model(tmp_path / "a.json", A, 2)
    x0 = np.random.default_rng(2).normal(size=2)
    csv_path = tmp_path / "p.csv"
    assert main(["predict", "--model", str(path), "--x0", ",".join(repr(float(v)) for v in x0), "-n", "5",
                 "--csv", str(csv_path)]) == 0
    rows = read_csv(csv_path)
    assert rows[0] == ["step", "psi1", "psi2"] and len(rows) == 7
    got = np.array([float(v) for v in rows[-1][1:]])
    assert np.allclose(got, np.linalg.matrix_power(A, 5) @ x0, atol=1e-8)
    assert main(["predict", "--model", str(path), "--x0", "1,2", "-n", "0",
                 "--csv", str(csv_path)]) == 0
    assert len(read_csv(csv_path)) == 2


def test_stitched_predict_label(pipeline_out, tmp_path):
    csv_path = tmp_path / "p.csv"
    assert main(["predict", "--model", str(pipeline_out / "stitched.json"), "--x0", "2.5,0.1",
                 "-n", "100", "--csv", str(csv_path)]) == 0
    rows = read_csv(csv_path)
    assert rows[0][:3] == ["step", "label", "psi1"] and len(rows) == 102
    assert {r[1] for r in rows[1:]} == {"right"}


def test_stitch_single_and_duplicate(pipeline_out, tmp_path):
    left = str(pipeline_out / "model_left.json")
    assert main(["stitch", left, "--out", str(tmp_path / "one")]) == 0
    assert report(tmp_path / "one" / "stitch_report.json")["L"] == 30
    assert main(["stitch", left, left, "--out", str(tmp_path / "dup")]) == 2


def test_discover_full_seed_has_no_refits(pipeline_out, tmp_path):
    assert main(["discover", "--data", str(pipeline_out / "trajectories.csv"),
                 "--seed-subset", "all", "--out", str(tmp_path)]) == 0
    r = report(tmp_path / "discovery" / "discovery_report.json")
    assert r["refits"] == 0 and r["final_multiplicity"] == 2


def test_exit_codes(tmp_path):
    assert main(["fit", "--data", str(tmp_path / "missing.csv"), "--out", str(tmp_path)]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"nope": 1}))
    assert main(["simulate", "--config", str(bad), "--out", str(tmp_path)]) == 2
    assert main(["simulate", "--system", "second_order", "--dt", "50", "--steps", "5",
                 "--out", str(tmp_path / "boom")]) == 3
    eye = write_model(tmp_path / "eye.json", np.eye(2), 2)
    assert main(["predict", "--model", str(eye), "--x0", "1,x", "--out", str(tmp_path)]) == 2
    with pytest.raises(SystemExit):
        main(["frobnicate"])
