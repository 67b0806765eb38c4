"""End-to-end estimators.

* simplicial_approximation: piecewise-affine upper approximation of a
  convex function from the lower envelope of uniform epigraph samples.
* triangulation_cover: data-driven triangulation of most of a simplex by
  block hulls and coning.
* simplified_estimator: per-simplex affine regression on a known
  decomposition, patched and convexified.
* full_estimator: the two-part budgeted fit — per-candidate-simplex
  regression and squared-error budgets on one half of the data, then a
  global convex program constrained to those budgets on fresh
  within-simplex draws, clipped and convexified.
* sigma_upper_bound: nearest-neighbour difference estimate of the noise
  variance.
"""

import hashlib
import json
import math
import time
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import comb

from . import convexfit, geom, norms
from .convexfit import (FitMode, MaxAffineFunc, SimplexConstraint, bounded,
                        clip_upper, convex_lse, feasibility_fit, lipschitz,
                        mp_properize)
from .geom import GeometryError, Simplex, cone_triangulate, convex_hull, lower_envelope
from .norms import InsufficientSamples, l2_norm_estimate
from .robust import AffineFunc, ols_affine_regression, robust_affine_regression
from .sampling import Dataset, RngStream, sample_polytope, sample_simplex, sample_epigraph

# variance of a squared standard normal's median: median(chi^2_1)
_CHI2_MEDIAN = 0.45493642311957174


@dataclass
class Decomposition:
    """Interior-disjoint simplices covering part of a support region."""
    simplices: list
    complement_volume_fraction: float = 0.0
    attempts: int = 1
    flagged: bool = False
    notes: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.simplices)

    def locate(self, X, tol=1e-9):
        """Index of the first simplex containing each row (-1 outside)."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        loc = np.full(len(X), -1, dtype=int)
        for i, s in enumerate(self.simplices):
            todo = loc < 0
            if not todo.any():
                break
            hit = np.zeros(len(X), dtype=bool)
            hit[todo] = s.contains_many(X[todo], tol=tol)
            loc[hit & todo] = i
        return loc

    def overlap_fraction(self, probes):
        """Fraction of probe points strictly inside two or more pieces."""
        X = np.atleast_2d(np.asarray(probes, dtype=float))
        count = np.zeros(len(X), dtype=int)
        for s in self.simplices:
            count += s.contains_many(X, tol=-1e-9).astype(int)
        return float((count >= 2).mean())

    def volume(self):
        return float(sum(s.volume for s in self.simplices))


@dataclass
class PipelineConfig:
    """Knobs of the full estimator; defaults follow the construction's
    parameter rules, with desk-scale caps recorded in the report."""
    d: int
    n: int
    mode: str = "lipschitz"            # 'lipschitz' | 'bounded'
    L: float = 1.0
    gamma: float = None
    sigma: float = None                # None -> estimated from the data
    simplex_cap: int = 100_000         # max candidate simplices enumerated
    max_active_simplices: int = 16     # candidates carried into the programs
    count_const: float = 1.0           # per-simplex point floor multiplier
    budget_const: float = 4.0          # slack multiplier in the budgets
    z_per_simplex: int = 12            # fresh draws per simplex (site cap)
    mp_sites: int = None               # None -> k(n)
    wet_dirs: int = 128                # direction grid for level sets
    l1_density_budget: int = 2048
    p_density_inner: int = 4096
    seed: int = 0
    uncalibrated: bool = False

    def k_of_n(self, n=None):
        n = self.n if n is None else n
        return max(1, int(math.floor(n ** (self.d / (self.d + 4.0)))))

    def delta_of_n(self, n=None):
        n = self.n if n is None else n
        return min(0.25, float(n) ** -(self.d + 2))

    def min_points(self):
        floor = self.count_const * self.d * math.log(max(self.n, 2))
        return max(2 * (self.d + 1), int(math.ceil(floor)))

    def fit_mode(self):
        if self.mode == "lipschitz":
            return lipschitz(self.L)
        if self.mode == "bounded":
            if self.gamma is None:
                raise ValueError("bounded mode needs gamma")
            return bounded(self.gamma)
        raise ValueError(f"unknown mode {self.mode!r}")

    def range_bound(self):
        return self.L if self.mode == "lipschitz" else self.gamma

    def to_text(self):
        lines = []
        for k in sorted(self.__dataclass_fields__):
            lines.append(f"{k}={getattr(self, k)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        kv = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            k, v = line.split("=", 1)
            kv[k.strip()] = v.strip()
        types = {f.name: f.type for f in cls.__dataclass_fields__.values()}
        out = {}
        for k, v in kv.items():
            if v == "None":
                out[k] = None
            elif k in ("mode",):
                out[k] = v
            elif k in ("uncalibrated",):
                out[k] = v == "True"
            elif k in ("d", "n", "simplex_cap", "max_active_simplices",
                       "z_per_simplex", "mp_sites", "wet_dirs",
                       "l1_density_budget", "p_density_inner", "seed"):
                out[k] = int(v)
            else:
                out[k] = float(v)
        return cls(**out)

    def digest(self):
        return hashlib.sha1(self.to_text().encode()).hexdigest()[:12]


@dataclass
class FitReport:
    config_digest: str
    per_simplex: list = field(default_factory=list)
    counts: dict = field(default_factory=dict)
    solver: dict = field(default_factory=dict)
    timing: dict = field(default_factory=dict)
    notes: dict = field(default_factory=dict)

    def to_json(self):
        return json.dumps({
            "config_digest": self.config_digest,
            "per_simplex": self.per_simplex,
            "counts": self.counts,
            "solver": self.solver,
            "timing": self.timing,
            "notes": self.notes,
        }, indent=2, default=_jsonable)


def _jsonable(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    return str(v)


# ---------------------------------------------------------------------------
# Simplicial approximation
# ---------------------------------------------------------------------------

def simplicial_approximation(f, omega, k, rng, *, y_max=2.0,
                             facet_cap_mult=20.0, retries=10,
                             coverage_probes=4000):
    """Piecewise-affine convex upper approximation of f on omega.

    Samples floor(k^((d+2)/d)) uniform points in the epigraph slab of f
    over omega, hulls them in dimension d+1, and returns the lower
    envelope together with the decomposition into its projected pieces.
    f must be convex with range in [0, y_max/2] on omega (callers rescale).
    Retries when the piece count exceeds facet_cap_mult * k; the last
    attempt is returned flagged if every retry overflows.
    """
    d = omega.dim
    n_pts = max(d + 2, int(math.floor(k ** ((d + 2.0) / d))))
    best = None
    attempts = 0
    for attempt in range(max(1, retries)):
        attempts += 1
        sub = rng.substream(attempt)
        P, _ = sample_epigraph(f, omega, y_max, n_pts, sub.substream(0))
        try:
            hull = convex_hull(P)
            env = lower_envelope(hull)
        except GeometryError:
            continue
        if best is None or len(env.pieces) < len(best[0].pieces):
            best = (env, sub)
        if len(env.pieces) <= facet_cap_mult * k:
            best = (env, sub)
            break
    if best is None:
        raise GeometryError("epigraph hull failed on every attempt")
    env, sub = best
    flagged = len(env.pieces) > facet_cap_mult * k

    probes, _ = sample_polytope(omega, coverage_probes, sub.substream(1))
    covered = env.covers(probes)
    decomp = Decomposition(
        [s for s, _, _ in env.pieces],
        complement_volume_fraction=float(1.0 - covered.mean()),
        attempts=attempts,
        flagged=flagged,
        notes={"requested_k": k, "epigraph_points": n_pts,
               "pieces": len(env.pieces)},
    )
    return decomp, env


# ---------------------------------------------------------------------------
# Triangulation cover
# ---------------------------------------------------------------------------

@dataclass
class CoverResult:
    simplices: list
    block: int
    uncovered_estimate: float
    facet_count: int
    flag: str = ""

    def __iter__(self):
        return iter(self.simplices)

    def __len__(self):
        return len(self.simplices)


def triangulation_cover(target, points, rng, *, block_const=0.5,
                        probes=2048, threshold_mult=3.0):
    """Triangulate most of `target` with simplices on the given points.

    Splits the points into ~block_const * d * log(m) blocks, hulls each,
    and picks a block whose facet count and uncovered volume are within
    threshold_mult of the across-block means (the blocks are i.i.d.
    realisations, so their means estimate the expectations).  The winner
    is cone-triangulated from an interior input point.
    """
    X = np.asarray(points, dtype=float)
    m, d = X.shape
    need = max(2 * (d + 1), int(math.ceil(8 * d * math.log(max(m, 2)))))
    if m < need:
        raise ValueError(f"need at least {need} points, got {m}")
    B = max(1, int(math.ceil(block_const * d * math.log(m))))
    B = min(B, m // (d + 2))
    gen = rng.substream(0).generator()
    perm = gen.permutation(m)
    blocks = np.array_split(perm, B)
    probe_pts = sample_simplex(target, probes, rng.substream(1))

    hulls, stats = [], []
    for idx in blocks:
        try:
            hull = convex_hull(X[idx])
        except GeometryError:
            hulls.append(None)
            stats.append((np.inf, np.inf))
            continue
        unc = float(1.0 - hull.contains_many(probe_pts).mean())
        hulls.append((hull, idx))
        stats.append((hull.n_facets, unc))
    valid = [i for i, h in enumerate(hulls) if h is not None]
    if not valid:
        raise GeometryError("every block hull was degenerate")
    fmean = np.mean([stats[i][0] for i in valid])
    umean = np.mean([stats[i][1] for i in valid])
    passing = [i for i in valid
               if stats[i][0] <= threshold_mult * fmean
               and stats[i][1] <= threshold_mult * umean]
    flag = ""
    if passing:
        pick = min(passing, key=lambda i: stats[i][1])
    else:
        pick = min(valid, key=lambda i: stats[i][1])
        flag = "threshold missed"
    hull, idx = hulls[pick]

    margins = (hull.facet_offsets[None, :]
               - X @ hull.facet_normals.T).min(axis=1)
    apex_i = int(np.argmax(margins))
    if margins[apex_i] <= 1e-12:
        raise GeometryError("no input point strictly inside the block hull")
    simplices = cone_triangulate(hull, X[apex_i])
    return CoverResult(simplices, pick, stats[pick][1], int(stats[pick][0]),
                       flag)


# ---------------------------------------------------------------------------
# Simplified estimator (known decomposition)
# ---------------------------------------------------------------------------

def simplified_estimator(data, decomp, omega, mode, *, rng=None,
                         mp_sites=None, outside_value=1.0, min_pts=None,
                         mp_select_gradients=True):
    """Per-simplex affine regression on a known decomposition, patched
    together, set to a constant outside the covered region, and projected
    to a convex function.

    Pieces with fewer than max(d+2, 2d) data points fall back to the zero
    function.  Returns (model, report dict).
    """
    X, y = data.X, data.y
    n, d = X.shape
    if len(decomp) == 0:
        raise ValueError("empty decomposition")
    if rng is None:
        rng = RngStream(0)
    if min_pts is None:
        min_pts = max(d + 2, 2 * d)
    loc = decomp.locate(X)
    fits = []
    fitted = 0
    for i, s in enumerate(decomp.simplices):
        idx = loc == i
        if idx.sum() >= min_pts:
            fit, _ = ols_affine_regression(X[idx], y[idx])
            fitted += 1
        else:
            fit = AffineFunc(np.zeros(d), 0.0)
        fits.append(fit)
    A = np.array([f.a for f in fits])
    b = np.array([f.b for f in fits])

    def f_tilde(Xq):
        Xq = np.atleast_2d(np.asarray(Xq, dtype=float))
        locq = decomp.locate(Xq)
        out = np.full(len(Xq), float(outside_value))
        ok = locq >= 0
        out[ok] = np.einsum("ij,ij->i", Xq[ok], A[locq[ok]]) + b[locq[ok]]
        return out

    k = mp_sites if mp_sites is not None else max(
        d + 2, int(math.floor(n ** (d / (d + 4.0)))))

    def sampler(m, r):
        return sample_polytope(omega, m, r)[0]

    model = mp_properize(f_tilde, sampler, k, mode, rng.substream(11),
                         select_gradients=mp_select_gradients)
    report = {"pieces": len(decomp), "fitted_pieces": fitted,
              "mp_sites": k,
              "per_piece_counts": np.bincount(loc[loc >= 0],
                                              minlength=len(decomp)).tolist()}
    return model, report


# ---------------------------------------------------------------------------
# Full estimator
# ---------------------------------------------------------------------------

def _candidate_index_sets(n_aux, d, cap, gen):
    total = comb(n_aux, d + 1, exact=True)
    if total <= cap:
        return list(combinations(range(n_aux), d + 1)), False
    seen = set()
    out = []
    while len(out) < cap:
        pick = tuple(sorted(gen.choice(n_aux, d + 1, replace=False).tolist()))
        if pick not in seen:
            seen.add(pick)
            out.append(pick)
    return out, True


def full_estimator(data, omega, cfg, rng=None):
    """Two-part budgeted convex regression; returns (model, FitReport).

    Part one draws auxiliary covariates, enumerates candidate simplices on
    them (capped), and for each candidate holding enough first-half points
    fits a capped affine regressor and a squared-error budget from the
    second-half residuals.  Part two draws fresh points inside each
    retained simplex, imposes the budgets through the global convex
    program, clips at the range bound (Lipschitz mode), and convexifies.
    """
    t_start = time.time()
    if rng is None:
        rng = RngStream(cfg.seed)
    X1, y1 = data.d1()
    X2, y2 = data.d2()
    n, d = data.X.shape
    if n < d + 1:
        raise ValueError("need at least d+1 observations")
    mode = cfg.fit_mode()
    bound = cfg.range_bound()
    sigma = cfg.sigma if cfg.sigma is not None else math.sqrt(
        sigma_upper_bound(data))
    delta = cfg.delta_of_n(n)
    calib = None if cfg.uncalibrated else norms.load_calibration()

    report = FitReport(config_digest=cfg.digest())
    report.counts["n"] = n

    # Part I: auxiliary draws and candidate enumeration
    aux, _ = sample_polytope(omega, n, rng.substream(0))
    gen = rng.substream(1).generator()
    cand_sets, capped = _candidate_index_sets(len(aux), d, cfg.simplex_cap, gen)
    report.counts["candidates"] = len(cand_sets)
    report.notes["enumeration_capped"] = capped

    min_pts = cfg.min_points()
    X1a = np.column_stack([X1, np.ones(len(X1))])
    eligible = []
    for ci, idx in enumerate(cand_sets):
        V = aux[list(idx)]
        T = np.vstack([V.T, np.ones(d + 1)])
        det = np.linalg.det(T)
        scale = max(np.abs(V).max(), 1e-30)
        if abs(det) <= 1e-12 * scale ** d:
            continue
        W = X1a @ np.linalg.inv(T).T      # barycentric weights of D1 points
        inside1 = W.min(axis=1) >= -1e-12
        c1 = int(inside1.sum())
        if c1 >= min_pts:
            eligible.append((ci, V, inside1, c1))
    report.counts["eligible"] = len(eligible)

    # spread selection: half by point count, half at random
    if len(eligible) > cfg.max_active_simplices:
        eligible.sort(key=lambda t: -t[3])
        top = cfg.max_active_simplices // 2
        head = eligible[:top]
        tailpick = rng.substream(2).generator().choice(
            len(eligible) - top, cfg.max_active_simplices - top, replace=False)
        head += [eligible[top + int(i)] for i in sorted(tailpick)]
        eligible = head
        report.notes["active_subsampled"] = True
    report.counts["active"] = len(eligible)

    constraints = []
    slack = cfg.budget_const * bound ** 2 * math.sqrt(d * math.log(max(n, 2)) / n)
    for j, (ci, V, inside1, c1) in enumerate(eligible):
        s = Simplex(V)
        sub = rng.substream(10 + j)
        if cfg.mode == "lipschitz":
            w_hat, _ = robust_affine_regression(X1[inside1], y1[inside1],
                                                L=cfg.L, rng=sub.substream(0))
        else:
            w_hat, _ = robust_affine_regression(X1[inside1], y1[inside1],
                                                L=None, rng=sub.substream(0))
        inside2 = s.contains_many(X2)
        c2 = int(inside2.sum())
        rec = {"id": ci, "count_d1": c1, "count_d2": c2,
               "w_a": w_hat.a.tolist(), "w_b": w_hat.b}
        ell2 = 4.0 * bound ** 2
        branch = "fallback-4bound2"
        if c2 >= 2 * (d + 1):
            resid = y2[inside2] - w_hat(X2[inside2])
            try:
                est = l2_norm_estimate(
                    X2[inside2], resid, s, sigma, delta, bound,
                    sub.substream(1), calibration=calib,
                    uncalibrated=cfg.uncalibrated, n_dirs=cfg.wet_dirs,
                    l1_kwargs={"density_budget": cfg.l1_density_budget,
                               "density_inner": cfg.p_density_inner})
                ell2 = est.value
                branch = est.branch
            except InsufficientSamples:
                pass
        rec["ell2"] = ell2
        rec["branch"] = branch
        report.per_simplex.append(rec)
        z = sample_simplex(s, min(n, cfg.z_per_simplex), sub.substream(2))
        constraints.append(SimplexConstraint(ci, z, w_hat, ell2 + slack))

    report.counts["constrained"] = len(constraints)
    report.counts["skipped"] = (report.counts["candidates"]
                                - report.counts["eligible"])
    if not constraints:
        # nothing qualified: fall back to the projection of the zero model
        report.notes["empty_constraint_set"] = True
        model = MaxAffineFunc(np.zeros((1, d)), np.zeros(1), mode=mode)
    else:
        t0 = time.time()
        model = feasibility_fit(constraints, mode)
        report.solver = dict(model.diagnostics)
        report.timing["feasibility_s"] = time.time() - t0

    f_improper = clip_upper(model, bound) if cfg.mode == "lipschitz" else model

    def sampler(m, r):
        return sample_polytope(omega, m, r)[0]

    k_mp = cfg.mp_sites if cfg.mp_sites is not None else cfg.k_of_n(n)
    t0 = time.time()
    final = mp_properize(f_improper, sampler, max(d + 2, k_mp), mode,
                         rng.substream(3))
    report.timing["mp_s"] = time.time() - t0
    report.timing["total_s"] = time.time() - t_start
    report.notes["sigma_used"] = sigma
    final.diagnostics["report_digest"] = report.config_digest
    return final, report


def sigma_upper_bound(data):
    """Noise-variance estimate from nearest-neighbour response differences.

    Half the median of squared differences between responses at
    nearest-neighbour covariates, rescaled by the median of a squared
    standard normal.  Heuristic: the signal contributes at the
    nearest-neighbour spacing scale.
    """
    X, y = data.X, data.y
    if len(y) < 4:
        raise ValueError("need at least 4 observations")
    tree = cKDTree(X)
    _, nn = tree.query(X, k=2)
    diff2 = (y - y[nn[:, 1]]) ** 2
    return float(np.median(diff2) / (2.0 * _CHI2_MEDIAN))
