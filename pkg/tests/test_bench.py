import math

import numpy as np
import pytest

from convreg.bench import (GroundTruth, fit_loglog_slope, geo_experiments,
                           make_affine, make_max_affine, make_quadratic,
                           matched_simplicial_truth, mc_risk,
                           norm_gap_diagnostic, random_max_affine,
                           save_curve_svg, scaling_study, truth_from_spec)
from convreg.geom import HPolytope, regular_simplex
from convreg.sampling import DistributionDescriptor, RngStream

TRI = regular_simplex(2)
DIST = DistributionDescriptor("uniform-polytope", HPolytope.from_simplex(TRI))


def test_mc_risk_trivial():
    truth = make_affine([0.2, 0.1], 0.0)
    mean, se = mc_risk(truth, truth, DIST, 500, RngStream(0))
    assert mean == 0.0 and se == 0.0
    shifted = GroundTruth("affine", lambda X: truth(X) + 1.0,
                          truth.lipschitz, truth.range_bound + 1)
    mean, se = mc_risk(shifted, truth, DIST, 500, RngStream(1))
    assert mean == pytest.approx(1.0, abs=1e-12) and se == pytest.approx(0.0)


def test_mc_risk_quadratic_form_oracle():
    # model 0 against an affine truth: risk = E[(a.X + b)^2], computable
    # from the exact first/second moments of the uniform simplex law
    a = np.array([0.4, -0.3])
    b = 0.1
    truth = make_affine(a, b)
    zero = GroundTruth("zero", lambda X: np.zeros(len(X)), 0.0, 0.0)
    V = TRI.vertices
    # uniform-simplex moments: E[w_i] = 1/3, E[w_i w_j] = (1+delta_ij)/12
    mu = V.mean(axis=0)
    second = np.zeros((2, 2))
    for i in range(3):
        for j in range(3):
            second += (2.0 if i == j else 1.0) / 12.0 * np.outer(V[i], V[j])
    exact = float(a @ second @ a + 2 * b * a @ mu + b * b)
    mean, se = mc_risk(zero, truth, DIST, 200_000, RngStream(2))
    assert abs(mean - exact) < 3 * se


def test_mc_risk_requires_min_samples():
    truth = make_affine([0.1, 0.1], 0.0)
    with pytest.raises(ValueError):
        mc_risk(truth, truth, DIST, 50, RngStream(3))


def test_fit_loglog_slope_recovers_exponent():
    ns = [64, 256, 1024, 4096]
    means = [10.0 * n ** -0.5 for n in ns]
    ses = [m * 0.01 for m in means]
    slope, ci, degen = fit_loglog_slope(ns, means, ses)
    assert not degen
    assert slope == pytest.approx(-0.5, abs=1e-9)
    assert ci < 0.05


def test_fit_loglog_slope_degenerate():
    slope, ci, degen = fit_loglog_slope([64, 256], [0.0, 0.0], [0.0, 0.0])
    assert degen


def test_truth_constructors():
    q = make_quadratic(np.zeros(2), coef=1.0)
    X = RngStream(4).generator().uniform(-0.5, 0.5, (100, 2))
    assert (q(X) >= 0).all()
    m = random_max_affine(2, 4, RngStream(5), scale=1.0)
    assert m.lipschitz <= 1.0 + 1e-12
    t = truth_from_spec("max-affine:3", 2, RngStream(6))
    assert t.params["pieces"] == 3
    with pytest.raises(ValueError):
        truth_from_spec("bogus", 2, RngStream(7))


def test_matched_truth_is_convex_and_partitioned():
    truth, decomp, omega = matched_simplicial_truth(3, 2)
    assert len(decomp) == 2 * 3 * 4 + 1
    rng = RngStream(8)
    import convreg.sampling as samp
    X1 = samp.sample_simplex(omega, 800, rng.substream(0))
    X2 = samp.sample_simplex(omega, 800, rng.substream(1))
    lam = rng.substream(2).generator().random(800)
    mid = lam[:, None] * X1 + (1 - lam[:, None]) * X2
    gap = truth(mid) - (lam * truth(X1) + (1 - lam) * truth(X2))
    assert gap.max() <= 1e-10
    # pieces cover omega and are exactly affine for the truth
    loc = decomp.locate(X1)
    assert (loc >= 0).all()
    for i in (0, len(decomp) - 1):
        idx = loc == i
        if idx.sum() >= 4:
            from convreg.robust import ols_affine_regression
            fit, _ = ols_affine_regression(X1[idx], truth(X1[idx]))
            assert np.abs(fit(X1[idx]) - truth(X1[idx])).max() < 1e-9
    assert abs(decomp.volume() - omega.volume) < 1e-9 * omega.volume


def test_scaling_study_oracle_truth_degenerate():
    curve = scaling_study("oracle-truth", 2, "quadratic",
                          [64, 128, 256, 1024], 3, sigma=0.1, seed=9,
                          risk_samples=500)
    assert curve.degenerate


def test_scaling_study_best_affine_flat():
    curve = scaling_study("best-affine-oracle", 2, "quadratic",
                          [64, 128, 256, 1024], 3, sigma=0.1, seed=10,
                          risk_samples=3000)
    assert not curve.degenerate
    assert abs(curve.slope) <= 0.1


def test_geo_facets_exponent_d2():
    res = geo_experiments("facets", 2, [256, 512, 1024, 2048, 4096], 6,
                          RngStream(11))
    assert res.exponent == pytest.approx(1 / 3, abs=0.1)


def test_geo_coverage_profile():
    res = geo_experiments("coverage", 2, [64, 128, 256, 512, 1024], 6,
                          RngStream(12))
    ratios = res.stats["ratios"]
    assert max(ratios) / min(ratios) <= 4.0
    assert res.stats["uncovered"][-1] < res.stats["uncovered"][0]


def test_geo_wetpart_trivial_and_trend():
    res = geo_experiments("wetpart", 2, [0], 1, RngStream(13),
                          eps_grid=[1.0, 0.5, 0.2, 0.05])
    vols = res.stats["wet_volume"]
    assert vols[0] == 1.0
    assert all(a >= b for a, b in zip(vols, vols[1:]))


def test_norm_gap_zero_for_equal_functions():
    rng = RngStream(14)
    f = random_max_affine(2, 3, rng.substream(0))
    import convreg.sampling as samp
    X = samp.sample_simplex(TRI, 500, rng.substream(1))
    emp = float(((f(X) - f(X)) ** 2).mean())
    assert emp == 0.0


def test_norm_gap_diagnostic_trend():
    rep = norm_gap_diagnostic(2, [200, 800], 4, RngStream(15), pairs=4,
                              pop_samples=50_000)
    g1 = rep["per_m"][0]["max_gap"]
    g2 = rep["per_m"][1]["max_gap"]
    # quadrupling m roughly halves the max CLT gap
    assert g2 < g1
    assert g2 > g1 / 8


def test_save_curve_svg(tmp_path):
    curve = scaling_study("best-affine-oracle", 2, "quadratic",
                          [64, 128, 256, 1024], 2, sigma=0.1, seed=16,
                          risk_samples=500)
    path = tmp_path / "curve.svg"
    save_curve_svg(curve, path, reference_slope=-0.5)
    assert path.read_text().startswith("<?xml")
