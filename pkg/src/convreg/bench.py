"""Experiment harness: synthetic truths, Monte-Carlo risk, scaling-slope
studies, stochastic-geometry experiments, and the empirical-norm-gap
diagnostic.  All outputs carry seeds and config digests so reruns are
bit-exact.
"""

import json
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import geom
from .convexfit import MaxAffineFunc, convex_lse, lipschitz
from .geom import HPolytope, Simplex, convex_hull, min_cap_fractions, regular_simplex
from .pipeline import (Decomposition, PipelineConfig, full_estimator,
                       simplified_estimator)
from .robust import ols_affine_regression
from .sampling import (DistributionDescriptor, NoiseModel, RngStream,
                       make_dataset, sample_polytope, sample_simplex)


# ---------------------------------------------------------------------------
# Ground truths
# ---------------------------------------------------------------------------

@dataclass
class GroundTruth:
    """Convex target with exact Lipschitz and range constants on its domain."""
    kind: str
    fn: object
    lipschitz: float
    range_bound: float
    params: dict = field(default_factory=dict)

    def __call__(self, X):
        return self.fn(np.atleast_2d(np.asarray(X, dtype=float)))


def make_affine(a, b):
    a = np.asarray(a, dtype=float)
    L = float(np.linalg.norm(a))
    return GroundTruth("affine", lambda X: X @ a + b, L, L + abs(b),
                       {"a": a.tolist(), "b": b})


def make_max_affine(A, b):
    A = np.atleast_2d(np.asarray(A, dtype=float))
    b = np.asarray(b, dtype=float)
    L = float(np.linalg.norm(A, axis=1).max())
    R = L + float(np.abs(b).max())
    return GroundTruth("max-affine", lambda X: (X @ A.T + b).max(axis=1),
                       L, R, {"pieces": len(b)})


def random_max_affine(d, k, rng, scale=1.0):
    gen = rng.generator()
    A = gen.standard_normal((k, d))
    A *= scale / max(np.linalg.norm(A, axis=1).max(), 1e-12)
    b = scale * 0.3 * gen.standard_normal(k)
    return make_max_affine(A, b)


def make_quadratic(center, coef=1.0, offset=0.0, radius=1.0):
    c = np.asarray(center, dtype=float)
    L = 2.0 * coef * 2.0 * radius
    return GroundTruth("quadratic",
                       lambda X: coef * ((X - c) ** 2).sum(axis=1) + offset,
                       L, coef * (2 * radius) ** 2 + abs(offset),
                       {"coef": coef})


def make_norm_like(center, coef=1.0, offset=0.0):
    c = np.asarray(center, dtype=float)
    return GroundTruth("norm-like",
                       lambda X: coef * np.linalg.norm(X - c, axis=1) + offset,
                       coef, 2 * coef + abs(offset), {})


def truth_from_spec(spec, d, rng):
    """Parse CLI truth descriptors: affine, max-affine:<k>, quadratic, norm."""
    if spec == "affine":
        gen = rng.generator()
        a = gen.standard_normal(d)
        a /= 2 * np.linalg.norm(a)
        return make_affine(a, float(gen.uniform(-0.2, 0.2)))
    if spec.startswith("max-affine"):
        k = int(spec.split(":")[1]) if ":" in spec else 3
        return random_max_affine(d, k, rng)
    if spec == "quadratic":
        return make_quadratic(np.zeros(d), coef=1.0)
    if spec == "norm":
        return make_norm_like(np.zeros(d))
    raise ValueError(f"unknown truth spec {spec!r}")


# ---------------------------------------------------------------------------
# Risk evaluation
# ---------------------------------------------------------------------------

def mc_risk(model, truth, dist, M, rng):
    """Monte-Carlo squared-error risk of model against truth under dist."""
    if M < 100:
        raise ValueError("M must be >= 100")
    X = dist.sample(M, rng)
    diff = np.asarray(model(X), dtype=float) - np.asarray(truth(X), dtype=float)
    sq = diff ** 2
    return float(sq.mean()), float(sq.std() / math.sqrt(M))


@dataclass
class RiskCurve:
    estimator: str
    d: int
    grid: list
    mean_risk: list
    stderr: list
    seeds: int
    slope: float
    slope_ci: float
    degenerate: bool = False
    notes: dict = field(default_factory=dict)

    def to_json(self):
        return json.dumps(self.__dict__, indent=2, default=str)


def fit_loglog_slope(ns, means, stderrs):
    """Weighted least-squares slope of log risk against log n.

    Returns (slope, halfwidth of a ~95% interval, degenerate flag); the
    fit is flagged degenerate when risks hit the floor of numerical noise.
    """
    ns = np.asarray(ns, dtype=float)
    means = np.asarray(means, dtype=float)
    stderrs = np.asarray(stderrs, dtype=float)
    if (means <= 1e-14).any():
        return 0.0, float("inf"), True
    x = np.log(ns)
    yv = np.log(means)
    w = (means / np.maximum(stderrs, 1e-12 * means)) ** 2   # delta method
    W = np.sum(w)
    xb = np.sum(w * x) / W
    yb = np.sum(w * yv) / W
    sxx = np.sum(w * (x - xb) ** 2)
    slope = float(np.sum(w * (x - xb) * (yv - yb)) / sxx)
    resid = yv - yb - slope * (x - xb)
    dof = max(len(ns) - 2, 1)
    sigma2 = float(np.sum(w * resid ** 2) / dof)
    ci = 1.96 * math.sqrt(sigma2 / sxx)
    return slope, ci, False


# ---------------------------------------------------------------------------
# Matched simplicial truths (radial max-affine on ringed simplices)
# ---------------------------------------------------------------------------

def matched_simplicial_truth(d, rings, amplitude=1.0):
    """A convex function exactly affine on a ringed cone decomposition.

    The domain simplex splits into `rings` equal-volume concentric shells
    around the barycenter plus a core; each shell splits per facet cone
    into d staircase simplices, giving 1 + rings*d*(d+1) pieces.  The
    function is a piecewise-linear convex profile of the simplex gauge, so
    it is affine on every piece and globally a max-affine function.
    Returns (GroundTruth, Decomposition, omega Simplex).
    """
    omega = regular_simplex(d)
    V = omega.vertices
    G = omega.facet_normals / omega.facet_offsets[:, None]   # gauge rows

    k = rings * d * (d + 1) + 1
    radii = [((k - d * (d + 1) * j) / k) ** (1.0 / d) for j in range(rings + 1)]
    knots = np.array([0.0] + sorted(radii))

    simplices = []
    for i in range(d + 1):
        Fv = np.delete(V, i, axis=0)
        for j in range(rings):
            A = radii[j] * Fv
            B = radii[j + 1] * Fv
            for kk in range(d):
                simplices.append(Simplex(np.vstack([B[:kk + 1], A[kk:]])))
    simplices.append(Simplex(radii[rings] * V))

    # flat on the core (the gauge itself kinks there), quadratic knots out
    prof = amplitude * np.maximum(knots ** 2, radii[rings] ** 2)

    def fn(X):
        rho = (np.atleast_2d(X) @ G.T).max(axis=1)
        return np.interp(rho, knots, prof)

    L = amplitude * 2.0 * float(np.linalg.norm(G, axis=1).max())
    truth = GroundTruth("matched-simplicial", fn, L, amplitude,
                        {"rings": rings, "pieces": len(simplices)})
    return truth, Decomposition(simplices), omega


# ---------------------------------------------------------------------------
# Scaling studies
# ---------------------------------------------------------------------------

def _omega_for(d):
    """Default support: the regular simplex, as an H-polytope."""
    s = regular_simplex(d)
    return HPolytope.from_simplex(s), s


def run_estimator(name, data, omega, cfg, rng, truth=None, decomp=None):
    if name == "full":
        model, _ = full_estimator(data, omega, cfg, rng)
        return model
    if name == "simplified":
        # gradient re-selection is disabled here so the extension policy
        # is identical at every grid size (its cost scales with sites)
        model, _ = simplified_estimator(data, decomp, omega, cfg.fit_mode(),
                                        rng=rng, mp_select_gradients=False)
        return model
    if name == "lse":
        return convex_lse(data.X, data.y, cfg.fit_mode())
    if name == "oracle-truth":
        return truth
    if name == "best-affine-oracle":
        fit, _ = ols_affine_regression(data.X, truth(data.X))
        return MaxAffineFunc(fit.a[None, :], np.array([fit.b]))
    raise ValueError(f"unknown estimator {name!r}")


def scaling_study(estimator, d, truth_spec, n_grid, seeds, cfg_base=None, *,
                  sigma=0.1, risk_samples=4000, seed=0, rings_rule=None):
    """Risk-vs-n study with a weighted log-log slope fit.

    For the 'simplified' estimator, a matched simplicial truth replaces
    truth_spec: the decomposition grows with n (ring count tracking
    n^{d/(d+4)}) and is handed to the estimator as an oracle.
    """
    if max(n_grid) < 16 * min(n_grid):
        raise ValueError("grid must span at least a factor 16 in n")
    master = RngStream(seed)
    omega_h, omega_s = _omega_for(d)
    dist = DistributionDescriptor("uniform-polytope", omega_h)
    means, ses, kept_ns = [], [], []
    per_point = {}
    for gi, n in enumerate(n_grid):
        decomp = truth = None
        if estimator == "simplified":
            k_target = n ** (d / (d + 4.0))
            rings = (rings_rule(n) if rings_rule is not None else
                     max(1, round((k_target - 1) / (d * (d + 1)))))
            truth, decomp, _ = matched_simplicial_truth(d, rings)
        else:
            truth = truth_from_spec(truth_spec, d, master.substream(1000 + gi))
        risks = []
        for s in range(seeds):
            rng = master.substream(gi * 10_000 + s)
            cfg = cfg_base or PipelineConfig(d=d, n=n, L=max(truth.lipschitz, 1.0))
            cfg.n = n
            cfg.sigma = sigma
            try:
                data = make_dataset(truth, dist, NoiseModel("gaussian", sigma),
                                    n, rng.substream(0))
                model = run_estimator(estimator, data, omega_h, cfg,
                                      rng.substream(1), truth=truth,
                                      decomp=decomp)
                r, _ = mc_risk(model, truth, dist, risk_samples,
                               rng.substream(2))
                risks.append(r)
            except Exception as exc:   # run failures recorded, point may drop
                per_point.setdefault("failures", []).append(
                    {"n": n, "seed": s, "error": repr(exc)})
        if len(risks) < max(1, seeds // 2):
            continue
        kept_ns.append(n)
        means.append(float(np.mean(risks)))
        ses.append(float(np.std(risks) / math.sqrt(len(risks))))
    slope, ci, degen = fit_loglog_slope(kept_ns, means, ses)
    return RiskCurve(estimator, d, list(kept_ns), means, ses, seeds,
                     slope, ci, degenerate=degen,
                     notes={"truth": truth_spec, "sigma": sigma,
                            "seed": seed, **per_point})


# ---------------------------------------------------------------------------
# Stochastic-geometry experiments
# ---------------------------------------------------------------------------

@dataclass
class GeoExperimentResult:
    experiment: str
    d: int
    sizes: list
    stats: dict
    exponent: float = None
    exponent_ci: float = None
    notes: dict = field(default_factory=dict)

    def to_json(self):
        return json.dumps(self.__dict__, indent=2, default=str)


def _sample_ball(d, m, gen):
    Z = gen.standard_normal((m, d))
    Z /= np.linalg.norm(Z, axis=1)[:, None]
    r = gen.uniform(size=m) ** (1.0 / d)
    return Z * r[:, None]


def geo_experiments(experiment, d, sizes, seeds, rng, *, probes=4000,
                    eps_grid=None):
    """Stochastic-geometry measurements.

    facets:   hull facet counts of uniform ball samples, exponent fit.
    coverage: uncovered volume of hulls of uniform simplex samples,
              compared against the m^-1 log^{d-1} m profile.
    wetpart:  outer-level-set volume against the eps log(1/eps)^{d-1}
              profile on the regular simplex.
    """
    sizes = sorted(sizes)
    if experiment in ("facets", "coverage") and min(sizes) < 2 * (d + 1):
        raise ValueError("sizes must be at least 2(d+1)")
    simplex = regular_simplex(d)
    out = {"per_size": []}
    if experiment == "facets":
        means = []
        for m in sizes:
            counts = []
            for s in range(seeds):
                gen = rng.substream(m * 131 + s).generator()
                try:
                    hull = convex_hull(_sample_ball(d, m, gen))
                    counts.append(hull.n_facets)
                except geom.GeometryError as exc:
                    out.setdefault("failures", []).append(repr(exc))
            means.append(float(np.mean(counts)))
            out["per_size"].append({"m": m, "mean_facets": means[-1]})
        x = np.log(sizes)
        yv = np.log(means)
        slope, icept = np.polyfit(x, yv, 1)
        resid = yv - (slope * x + icept)
        ci = 1.96 * float(np.sqrt(resid.var() / ((x - x.mean()) ** 2).sum()))
        return GeoExperimentResult(experiment, d, sizes,
                                   {"mean_facets": means},
                                   exponent=float(slope), exponent_ci=ci)
    if experiment == "coverage":
        probe_pts = sample_simplex(simplex, probes, rng.substream(7))
        fracs, ratios = [], []
        for m in sizes:
            uncovered = []
            for s in range(seeds):
                sub = rng.substream(m * 977 + s)
                P = sample_simplex(simplex, m, sub)
                try:
                    hull = convex_hull(P)
                except geom.GeometryError as exc:
                    out.setdefault("failures", []).append(repr(exc))
                    continue
                uncovered.append(float(1.0 - hull.contains_many(probe_pts).mean()))
            fr = float(np.mean(uncovered))
            profile = math.log(m) ** (d - 1) / m
            fracs.append(fr)
            ratios.append(fr / profile)
            out["per_size"].append({"m": m, "uncovered": fr,
                                    "ratio_to_profile": ratios[-1]})
        slope, _, _ = fit_loglog_slope(sizes, fracs,
                                       [f * 0.05 + 1e-9 for f in fracs])
        return GeoExperimentResult(experiment, d, sizes,
                                   {"uncovered": fracs, "ratios": ratios},
                                   exponent=slope,
                                   notes={"ratio_spread":
                                          float(max(ratios) / min(ratios))})
    if experiment == "wetpart":
        eps_grid = eps_grid or [1.0, 0.5, 0.25, 0.1, 0.05, 0.02]
        probe_pts = sample_simplex(simplex, probes, rng.substream(8))
        phi = min_cap_fractions(simplex, probe_pts, n_dirs=256)
        vols, ratios = [], []
        for eps in eps_grid:
            v = float((phi <= eps).mean())
            vols.append(v)
            profile = eps * max(math.log(1.0 / eps), 1e-9) ** (d - 1) if eps < 1 else 1.0
            ratios.append(v / profile if profile > 0 else float("nan"))
        out["per_size"] = [{"eps": e, "wet_volume": v, "ratio": r}
                           for e, v, r in zip(eps_grid, vols, ratios)]
        return GeoExperimentResult(experiment, d, eps_grid,
                                   {"wet_volume": vols, "ratios": ratios},
                                   notes={"probes": probes})
    raise ValueError(f"unknown experiment {experiment!r}")


# ---------------------------------------------------------------------------
# Empirical-norm-gap diagnostic
# ---------------------------------------------------------------------------

def norm_gap_diagnostic(d, m_grid, seeds, rng, *, pairs=8, pop_samples=200_000):
    """Max gap between empirical and population squared distances of
    random 1-Lipschitz max-affine pairs, across sample sizes.

    Reports, per m, the largest |empirical - population| over the pairs
    and the implied constant in the population + C m^{-4/d} envelope.
    """
    simplex = regular_simplex(d)
    results = {"per_m": []}
    fs = [random_max_affine(d, 3, rng.substream(500 + i)) for i in range(pairs)]
    gs = [random_max_affine(d, 3, rng.substream(700 + i)) for i in range(pairs)]
    Xp = sample_simplex(simplex, pop_samples, rng.substream(3))
    pops = [float(((f(Xp) - g(Xp)) ** 2).mean()) for f, g in zip(fs, gs)]
    for m in m_grid:
        max_gap = 0.0
        max_excess = 0.0
        for s in range(seeds):
            Xe = sample_simplex(simplex, m, rng.substream(m * 37 + s))
            for (f, g, pop) in zip(fs, gs, pops):
                emp = float(((f(Xe) - g(Xe)) ** 2).mean())
                gap = abs(emp - pop)
                max_gap = max(max_gap, gap)
                max_excess = max(max_excess, (gap - 0.5 * pop) * m ** (4.0 / d))
        results["per_m"].append({"m": m, "max_gap": max_gap,
                                 "envelope_const": max_excess})
    results["pairs"] = pairs
    results["populations"] = pops
    return results


# ---------------------------------------------------------------------------
# SVG emission
# ---------------------------------------------------------------------------

def save_curve_svg(curve, path, reference_slope=None):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4.5))
    ns = np.asarray(curve.grid, dtype=float)
    ax.errorbar(ns, curve.mean_risk, yerr=curve.stderr, fmt="o-",
                label=f"{curve.estimator} (slope {curve.slope:.2f})")
    if reference_slope is not None and len(ns):
        ref = curve.mean_risk[0] * (ns / ns[0]) ** reference_slope
        ax.plot(ns, ref, "--", label=f"reference slope {reference_slope:.2f}")
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("n")
    ax.set_ylabel("risk")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
