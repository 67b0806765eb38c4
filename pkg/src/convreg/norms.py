"""Norm estimators for convex functions observed with noise on a simplex.

Two estimators drive the pipeline's per-simplex error budgets:

* an L1-norm estimator combining a boundary-shell mean, the L1 norm of a
  capped affine fit on the shrunken simplex, and a residual mean taken
  against the ball-average density below;
* an L2-norm estimator taking the best of dyadic cap-level-set means
  (scaled by the level-set mass) and the L1 route, squared and rescaled
  by a frozen calibration constant.

The ball-average density on a simplex S averages normalised indicator
balls of maximal inscribed radius:

    p(x) = mean over uniform y in S of  1{|x-y| <= r(y)} / U(B_y),

which integrates affine functions exactly like the uniform measure and is
bounded by alpha_d = 2^d (d+1)/(d-1) v_{d-1}/v_d.  It is evaluated by
Monte Carlo and clipped at that bound.

All norms are with respect to the uniform probability measure on the
simplex.  Estimator scale bands are calibrated once on a frozen suite and
stored in a versioned JSON file; the estimators refuse to run for a
dimension with no calibration entry unless uncalibrated=True.
"""

import json
import math
import os
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from . import geom
from .geom import Simplex, shrink, simplex_map, min_cap_fractions
from .robust import median_of_means, robust_affine_regression
from .sampling import RngStream, sample_simplex, sample_density_rejection

CALIBRATION_VERSION = 1
# Shrinkage toward the barycenter separating shell from core: 1/(2d).
SHRINK_RULE = lambda d: 1.0 / (2.0 * d)


class InsufficientSamples(RuntimeError):
    def __init__(self, region, have=None, need=None):
        super().__init__(f"insufficient samples in region {region!r}"
                         + (f" ({have} < {need})" if have is not None else ""))
        self.region = region


class CalibrationMissing(RuntimeError):
    pass


def unit_ball_volume(d):
    return math.pi ** (d / 2.0) / math.gamma(d / 2.0 + 1.0)


def density_bound(d):
    """Uniform bound on the ball-average density: 2^d (d+1)/(d-1) v_{d-1}/v_d."""
    if d < 2:
        raise ValueError("density bound needs d >= 2")
    return 2.0 ** d * (d + 1.0) / (d - 1.0) * unit_ball_volume(d - 1) / unit_ball_volume(d)


@dataclass
class NormEstimate:
    value: float
    kind: str                       # 'L1' or 'L2-squared'
    delta: float
    m: int
    branch: str
    details: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# Ball-average density
# ---------------------------------------------------------------------------

class PDensity:
    """Monte-Carlo evaluator of the ball-average density on a simplex.

    Evaluation transports x to the regular simplex (where the density is
    defined), averages the indicator kernel over a shared pool of M_in
    uniform inner points, and clips at the exact bound alpha_d.  The
    kernel is heavy-tailed only inside a thin boundary strip (interior
    points cannot meet balls smaller than half their facet distance), so
    strip points are always evaluated on a larger fresh pool before
    clipping; that keeps the clip from biting on pure Monte-Carlo spikes
    without selecting on the noise itself.  Standard errors of the raw
    average are reported alongside.
    """

    def __init__(self, simplex, m_inner=20_000, rng=None, strip_mult=8.0,
                 refine_factor=16):
        self.simplex = simplex
        self.d = simplex.dim
        self.m_inner = int(m_inner)
        self.strip_mult = float(strip_mult)
        self.refine_factor = int(refine_factor)
        self.rng = rng if rng is not None else RngStream(0)
        self.alpha = density_bound(self.d)
        self._reg = geom.regular_simplex(self.d)
        self._to_reg = simplex_map(simplex, self._reg)
        self._Y, self._r2, self._w = self._pool(self.rng, self.m_inner)
        self._fine = None

    def _pool(self, rng, m):
        gen = rng.generator()
        W = gen.dirichlet(np.ones(self.d + 1), size=m)
        Y = W @ self._reg.vertices
        r = geom.inscribed_radius_many(self._reg, Y)
        # kernel weight 1/U(B_y) = vol(S)/vol(B_y)
        w = self._reg.volume / (unit_ball_volume(self.d) * r ** self.d)
        return Y, r ** 2, w

    @staticmethod
    def _kernel_means(Z, Y, r2, w, return_stderr=False):
        m = len(Y)
        out = np.empty(len(Z))
        se = np.empty(len(Z)) if return_stderr else None
        y2 = (Y ** 2).sum(axis=1)
        thresh = r2 - y2    # |z-y|^2 <= r^2  <=>  |z|^2 - 2 z.y <= r^2 - |y|^2
        chunk = max(1, int(4e7) // m)
        for i0 in range(0, len(Z), chunk):
            Zc = Z[i0:i0 + chunk]
            lhs = (Zc ** 2).sum(axis=1)[:, None] - 2.0 * (Zc @ Y.T)
            ind = lhs <= thresh[None, :]
            out[i0:i0 + chunk] = (ind @ w) / m
            if return_stderr:
                K = ind * w[None, :]
                se[i0:i0 + chunk] = K.std(axis=1) / math.sqrt(m)
        return out, se

    def _strip_width(self):
        # spikes need a pool ball of radius below sqrt(vol/(v_d alpha m));
        # a point at facet distance t only meets balls of radius >= t/2
        v = self._reg.volume
        base = (v / (unit_ball_volume(self.d) * self.alpha * self.m_inner))
        return self.strip_mult * base ** (1.0 / self.d)

    def evaluate(self, X, return_stderr=False):
        """Density values at rows of X (points in the original simplex)."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        Z = self._to_reg.apply(X)
        out, se = self._kernel_means(Z, self._Y, self._r2, self._w,
                                     return_stderr)
        margin = geom.inscribed_radius_many(self._reg, Z)
        hot = np.flatnonzero(margin < self._strip_width())
        if len(hot):
            if self._fine is None:
                self._fine = self._pool(self.rng.substream(1),
                                        self.refine_factor * self.m_inner)
            out[hot], _ = self._kernel_means(Z[hot], *self._fine)
        clipped = np.minimum(out, self.alpha)
        if return_stderr:
            return clipped, se
        return clipped

    def __call__(self, X):
        return self.evaluate(X)


def p_density_eval(simplex, x, m_inner=20_000, rng=None, return_stderr=False):
    """One-shot density evaluation at a single point inside the simplex."""
    x = np.asarray(x, dtype=float)
    if not simplex.contains(x, tol=1e-9):
        raise geom.GeometryError("point outside simplex")
    pd = PDensity(simplex, m_inner=m_inner, rng=rng)
    vals = pd.evaluate(x[None, :], return_stderr=return_stderr)
    if return_stderr:
        return float(vals[0][0]), float(vals[1][0])
    return float(vals[0])


# ---------------------------------------------------------------------------
# Calibration files
# ---------------------------------------------------------------------------

def load_calibration(path=None):
    """Load the calibration map {d: constants}; packaged default if no path.

    Honours the CONVREG_CALIBRATION environment variable when set.
    """
    if path is None:
        path = os.environ.get("CONVREG_CALIBRATION")
    if path is None:
        ref = resources.files("convreg").joinpath("calibration.json")
        if not ref.is_file():
            return {}
        raw = json.loads(ref.read_text())
    else:
        with open(path) as fh:
            raw = json.load(fh)
    return {int(k): v for k, v in raw.get("dims", {}).items()}


def save_calibration(dims, path):
    payload = {"version": CALIBRATION_VERSION,
               "dims": {str(k): v for k, v in dims.items()}}
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)


def _calibration_entry(calibration, d, uncalibrated):
    if uncalibrated:
        return {"c1": 0.0, "C1": float("inf"), "l2_scale": 1.0,
                "c_sandwich": 0.0, "C_sandwich": float("inf")}
    if calibration is None:
        calibration = load_calibration()
    entry = calibration.get(d)
    if entry is None:
        raise CalibrationMissing(
            f"no calibration entry for d={d}; run `convreg calibrate --d {d}` "
            "or pass uncalibrated=True")
    return entry


# ---------------------------------------------------------------------------
# L1 estimator
# ---------------------------------------------------------------------------

def l1_norm_estimate(X, y, simplex, sigma, delta, rng, *,
                     calibration=None, uncalibrated=False,
                     density_budget=4096, density_inner=20_000,
                     quad_points=4096, min_region=None):
    """L1 norm of the convex signal under uniform covariates on the simplex.

    Sums three sub-estimators: (1) the mean response over the boundary
    shell scaled by the shell volume fraction, (2) the L1 norm of a
    least-squares affine fit on the shrunken core (numeric integration),
    and (3) the mean of core residuals reweighted to the ball-average
    density by rejection.  All three are positively homogeneous in the
    responses under a shared stream, so the estimate is too.
    """
    _calibration_entry(calibration, simplex.dim, uncalibrated)
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    d = simplex.dim
    if min_region is None:
        min_region = 4 * (d + 1)
    delta_shrink = SHRINK_RULE(d)
    core = shrink(simplex, delta_shrink)
    in_core = core.contains_many(X, tol=0.0)
    shell_idx = np.flatnonzero(~in_core)
    core_idx = np.flatnonzero(in_core)
    if len(shell_idx) < min_region:
        raise InsufficientSamples("shell", len(shell_idx), min_region)
    order = rng.substream(0).generator().permutation(len(core_idx))
    half_a = core_idx[order[0::2]]
    half_b = core_idx[order[1::2]]
    if min(len(half_a), len(half_b)) < min_region:
        raise InsufficientSamples("core", len(core_idx), 2 * min_region)

    shell_vol = 1.0 - (1.0 - delta_shrink) ** d
    f_shell = shell_vol * median_of_means(y[shell_idx], delta,
                                          rng.substream(1)).value

    w_hat, _ = robust_affine_regression(X[half_a], y[half_a], L=None)
    quad = sample_simplex(core, quad_points, rng.substream(2))
    f_affine = (1.0 - shell_vol) * float(np.abs(w_hat(quad)).mean())

    # residual mean against the ball-average density on the core
    sub = half_b
    if len(sub) > density_budget:
        pick = rng.substream(3).generator().choice(len(sub), density_budget,
                                                   replace=False)
        sub = sub[pick]
    pd = PDensity(core, m_inner=density_inner, rng=rng.substream(4))
    _, keep = sample_density_rejection(core, pd.evaluate, pd.alpha, X[sub],
                                       rng.substream(5), return_mask=True)
    kept_idx = sub[keep]
    if len(kept_idx) < min_region:
        raise InsufficientSamples("density-rejection", len(kept_idx), min_region)
    resid = y[kept_idx] - w_hat(X[kept_idx])
    f_resid = median_of_means(resid, delta, rng.substream(6)).value

    total = f_shell + f_affine + f_resid
    parts = {"shell": f_shell, "affine": f_affine, "residual": f_resid}
    branch = max(parts, key=lambda k: abs(parts[k]))
    return NormEstimate(max(total, 0.0), "L1", delta, len(X), branch,
                        details={**parts, "kept": int(len(kept_idx)),
                                 "shrink": delta_shrink})


# ---------------------------------------------------------------------------
# L2 estimator
# ---------------------------------------------------------------------------

def level_grid(m, d, grid_const=4.0):
    """Dyadic cap-level grid eps_j = 4^j, j = i_min..0.

    The floor keeps the smallest level populated: eps_min is of order
    d log(m)/m, so a level set of that mass still catches a constant
    number of samples.
    """
    eps_min = min(1.0, grid_const * d * math.log(max(m, 2)) / max(m, 2))
    i_min = min(0, math.floor(math.log2(eps_min) / 2.0))
    return [(j, 4.0 ** j) for j in range(i_min, 1)]


def l2_norm_estimate(X, y, simplex, sigma, delta, L, rng, *,
                     calibration=None, uncalibrated=False,
                     n_dirs=128, refine_steps=0, grid_const=4.0,
                     min_region=None, l1_kwargs=None):
    """Squared L2 norm of the convex signal, clipped at 4 L^2.

    Takes the larger of (a) the best dyadic level-set term
    sqrt(mass) * mean-over-level and (b) the L1-route estimate, squares
    it, and rescales by the frozen per-dimension calibration constant.
    Branch 'alternative-1' marks the L1 route, 'alternative-2' the
    level-set route.
    """
    entry = _calibration_entry(calibration, simplex.dim, uncalibrated)
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    d = simplex.dim
    m = len(X)
    if min_region is None:
        min_region = 4 * (d + 1)

    phi = min_cap_fractions(simplex, X, n_dirs=n_dirs,
                            refine_steps=refine_steps)
    level_terms = []
    for j, eps in level_grid(m, d, grid_const):
        inside = phi <= eps
        cnt = int(inside.sum())
        if cnt < min_region:
            continue
        mom = median_of_means(y[inside], delta, rng.substream(100 + j))
        level_terms.append((j, math.sqrt(cnt / m) * mom.value, cnt))

    l1_value = None
    try:
        l1_est = l1_norm_estimate(X, y, simplex, sigma, delta,
                                  rng.substream(7), calibration=calibration,
                                  uncalibrated=True,
                                  **(l1_kwargs or {}))
        l1_value = l1_est.value
    except InsufficientSamples:
        pass

    if not level_terms and l1_value is None:
        raise InsufficientSamples("all-level-sets-and-l1")

    best_level = max((t for _, t, _ in level_terms), default=-math.inf)
    cand = {"alternative-2": best_level,
            "alternative-1": l1_value if l1_value is not None else -math.inf}
    branch = max(cand, key=lambda k: cand[k])
    raw = max(cand[branch], 0.0)
    value = min(entry["l2_scale"] * raw ** 2, 4.0 * L ** 2)
    return NormEstimate(value, "L2-squared", delta, m, branch,
                        details={"raw": raw, "levels": level_terms,
                                 "l1_value": l1_value,
                                 "scale": entry["l2_scale"]})


# ---------------------------------------------------------------------------
# Calibration pass
# ---------------------------------------------------------------------------

def _suite_functions(d, held_out=False):
    """Frozen convex test functions on the regular simplex.

    The calibration suite (10 functions) and the held-out suite (8) are
    disjoint; all are convex with mixed sign, curvature, and anisotropy.
    """
    reg = geom.regular_simplex(d)
    c = reg.barycenter
    r = 0.4
    if not held_out:
        fns = [
            ("quad-centered", lambda X: ((X - c) ** 2).sum(1) - 0.1),
            ("quad-weighted", lambda X: (np.arange(1, d + 1) * (X - c) ** 2).sum(1) * 2.0),
            ("abs-crease", lambda X: np.abs(X[:, 0] - c[0])),
            ("max-2affine", lambda X: np.maximum(X @ np.full(d, 0.5), -X @ np.full(d, 0.3) + 0.05)),
            ("norm-cone", lambda X: np.linalg.norm(X - c, axis=1) - 0.1),
            ("exp-dir", lambda X: np.exp(X[:, 0]) - 1.2),
            ("quad-offcenter", lambda X: ((X - c - 0.15) ** 2).sum(1) - 0.05),
            ("max-3affine", lambda X: np.max(np.stack([
                X[:, 0] - c[0], c[0] - X[:, 0], 0.5 * X[:, min(1, d - 1)] + 0.02
            ]), axis=0)),
            ("softplus-ish", lambda X: np.log1p(np.exp(4 * (X[:, 0] - c[0]))) / 4 - 0.15),
            ("steep-quad", lambda X: 4.0 * ((X - c) ** 2).sum(1) - 0.2),
        ]
    else:
        fns = [
            ("h-quad", lambda X: 1.5 * ((X - c) ** 2).sum(1) - 0.12),
            ("h-abs2", lambda X: np.abs(X[:, min(1, d - 1)] - c[min(1, d - 1)]) - 0.02),
            ("h-max2", lambda X: np.maximum(0.7 * X[:, 0] - 0.02, -0.4 * X[:, 0])),
            ("h-cone", lambda X: 0.8 * np.linalg.norm(X - c + 0.05, axis=1) - 0.15),
            ("h-exp", lambda X: np.exp(-X[:, 0]) - 1.1),
            ("h-aniso", lambda X: ((np.linspace(0.5, 2.0, d) * (X - c)) ** 2).sum(1)),
            ("h-max3", lambda X: np.max(np.stack([
                0.6 * X[:, 0], -0.6 * X[:, 0] - 0.03, 0.3 * X[:, min(1, d - 1)] + 0.01
            ]), axis=0)),
            ("h-shifted", lambda X: ((X - c + 0.1) ** 2).sum(1) * 2.0 - 0.1),
        ]
    return reg, fns


def true_norms(fn, simplex, rng, m=1_000_000):
    """Plain Monte-Carlo quadrature of |g| and g^2 on the simplex."""
    Q = sample_simplex(simplex, m, rng)
    v = fn(Q)
    return float(np.abs(v).mean()), float((v ** 2).mean())


def calibrate(d, m=100_000, seed=20_240_501, safety=4.0, l2_kwargs=None,
              l1_kwargs=None, progress=None, truth_m=None):
    """One calibration pass: run both estimators on the frozen suite with
    noiseless responses, record ratio extremes widened by the safety
    factor, and centre the L2 scale so the scaled estimate upper-bounds
    the truth on the suite."""
    reg, fns = _suite_functions(d)
    master = RngStream(seed)
    if truth_m is None:
        truth_m = max(200_000, 4 * m)
    l1_ratios, l2_raw_ratios = [], []
    for i, (name, fn) in enumerate(fns):
        rng = master.substream(i)
        X = sample_simplex(reg, m, rng.substream(0))
        y = fn(X)
        t1, t2 = true_norms(fn, reg, rng.substream(1), m=truth_m)
        est1 = l1_norm_estimate(X, y, reg, 0.0, 0.05, rng.substream(2),
                                uncalibrated=True, **(l1_kwargs or {}))
        est2 = l2_norm_estimate(X, y, reg, 0.0, 0.05, 1e9, rng.substream(3),
                                uncalibrated=True, **(l2_kwargs or {}))
        l1_ratios.append(est1.value / t1)
        l2_raw_ratios.append(est2.details["raw"] ** 2 / t2)
        if progress:
            progress(f"{name}: L1 ratio {l1_ratios[-1]:.3f} "
                     f"L2 raw ratio {l2_raw_ratios[-1]:.3f}")
    l1_ratios = np.array(l1_ratios)
    l2_raw = np.array(l2_raw_ratios)
    scale = 1.0 / float(l2_raw.min())       # scaled raw ratios >= 1 on suite
    scaled = l2_raw * scale
    entry = {
        "c1": float(l1_ratios.min() / safety),
        "C1": float(l1_ratios.max() * safety),
        "l2_scale": scale,
        "c_sandwich": float(scaled.min() / safety),
        "C_sandwich": float(scaled.max() * safety),
        "suite_m": m,
        "seed": seed,
        "version": CALIBRATION_VERSION,
    }
    return entry
