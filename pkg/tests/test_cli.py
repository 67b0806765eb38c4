import json
import os

import numpy as np
import pytest

from convreg.bench import make_affine
from convreg.cli import main
from convreg.convexfit import MaxAffineFunc
from convreg.geom import HPolytope, regular_simplex
from convreg.sampling import (DistributionDescriptor, NoiseModel, RngStream,
                              make_dataset)


@pytest.fixture()
def small_csv(tmp_path):
    tri = regular_simplex(2)
    omega = HPolytope.from_simplex(tri)
    dist = DistributionDescriptor("uniform-polytope", omega)
    truth = make_affine([0.3, -0.2], 0.1)
    ds = make_dataset(truth, dist, NoiseModel("gaussian", 0.05), 60,
                      RngStream(0))
    path = tmp_path / "data.csv"
    ds.to_csv(str(path))
    return path


def test_cli_fit(tmp_path, small_csv):
    out = tmp_path / "model.json"
    rep = tmp_path / "report.json"
    rc = main(["fit", "--data", str(small_csv), "--mode", "lipschitz",
               "--L", "1.0", "--sigma", "0.05", "--support", "simplex",
               "--out", str(out), "--report", str(rep), "--uncalibrated"])
    assert rc == 0
    model = MaxAffineFunc.load(str(out))
    assert model.lipschitz <= 1.0 + 1e-8
    payload = json.loads(rep.read_text())
    assert payload["counts"]["n"] == 60


def test_cli_bench_scaling_and_threshold(tmp_path):
    out = tmp_path / "curve.json"
    rc = main(["bench", "scaling", "--estimator", "best-affine-oracle",
               "--d", "2", "--truth", "quadratic", "--grid",
               "64,128,256,1024", "--seeds", "2", "--out", str(out)])
    assert rc == 0
    payload = json.loads(out.read_text())
    assert abs(payload["slope"]) < 0.15
    # impossible slope expectation trips the threshold exit code
    rc2 = main(["bench", "scaling", "--estimator", "best-affine-oracle",
                "--d", "2", "--truth", "quadratic", "--grid",
                "64,128,256,1024", "--seeds", "2", "--out", str(out),
                "--expect-slope", "-2.0", "--expect-tol", "0.1"])
    assert rc2 == 2


def test_cli_approx(tmp_path):
    out = tmp_path / "approx.json"
    rc = main(["approx", "--d", "2", "--k", "8,32", "--seeds", "2",
               "--out", str(out)])
    assert rc == 0
    payload = json.loads(out.read_text())
    assert payload["rows"][1]["mse"] < payload["rows"][0]["mse"]


def test_cli_geom_wetpart(tmp_path):
    out = tmp_path / "wet.json"
    rc = main(["geom", "--experiment", "wetpart", "--d", "2", "--seeds", "1",
               "--out", str(out)])
    assert rc == 0
    payload = json.loads(out.read_text())
    assert payload["stats"]["wet_volume"][0] == 1.0


def test_cli_calibrate(tmp_path):
    out = tmp_path / "calib.json"
    rc = main(["--seed", "3", "calibrate", "--d", "2", "--m", "3000",
               "--out", str(out)])
    assert rc == 0
    payload = json.loads(out.read_text())
    assert "2" in payload["dims"]


def test_cli_error_exit():
    rc = main(["fit", "--data", "/nonexistent.csv", "--out", "/tmp/x.json"])
    assert rc == 1


def test_cli_env_seed(tmp_path, small_csv, monkeypatch):
    out1 = tmp_path / "m1.json"
    out2 = tmp_path / "m2.json"
    monkeypatch.setenv("CONVREG_SEED", "99")
    main(["fit", "--data", str(small_csv), "--support", "simplex",
          "--out", str(out1), "--uncalibrated"])
    main(["fit", "--data", str(small_csv), "--support", "simplex",
          "--out", str(out2), "--uncalibrated"])
    m1 = MaxAffineFunc.load(str(out1))
    m2 = MaxAffineFunc.load(str(out2))
    assert np.array_equal(m1.A, m2.A)
