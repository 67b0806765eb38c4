"""Convex-function fitting: max-affine models, the convex least-squares
program over values-plus-subgradients, the budgeted feasibility program,
and the projection that turns an arbitrary function into a convex one by
refitting it at fresh sites.

Both programs share the variable layout x = [y_1..y_S, vec(Xi)] with the
pairwise supporting-hyperplane constraints

    y_q >= y_p + xi_p . (z_q - z_p)        for all p, q,

plus either gradient-norm caps (Lipschitz mode) or value caps (bounded
mode).  They are solved by an interior-point conic solver behind a
certificate: a fit is accepted only if the pairwise/mode/budget violations
measured at the returned iterate pass the stated tolerance, and is flagged
otherwise.

The optimal values are unique but the subgradients are not, and the
max-affine extension away from the data hull depends on which ones are
reported.  A second pass therefore re-selects the subgradients at the
fitted values: constrained least squares pushing each piece to be tight at
its neighbouring sites, which reproduces exact data (affine inputs give
back their own gradient everywhere) and keeps the extension data-scaled.
"""

import json
import math
from dataclasses import dataclass, field

import cvxpy as cp
import numpy as np
import scipy.sparse as sp

from .robust import AffineFunc

VIOLATION_TOL = 1e-6
# interior-point effort tiers: tight below the site cutoff, defaults above
_TIGHT_SITES = 130
_TIGHT_OPTS = {"tol_gap_abs": 1e-12, "tol_gap_rel": 1e-12, "tol_feas": 1e-12}
# neighbours per site anchoring the subgradient-selection objective
_SELECT_NEIGHBOURS = 24


class FitError(RuntimeError):
    pass


class FeasibilityError(RuntimeError):
    """Raised when no point meets the constraint families within tolerance."""

    def __init__(self, residuals):
        self.residuals = residuals
        super().__init__("infeasible-or-unconverged: " + json.dumps(
            {k: float(v) for k, v in residuals.items()}))


@dataclass
class FitMode:
    kind: str                  # 'lipschitz' | 'bounded' | 'unconstrained'
    bound: float = None

    def __post_init__(self):
        if self.kind not in ("lipschitz", "bounded", "unconstrained"):
            raise ValueError(f"unknown mode {self.kind!r}")
        if self.kind != "unconstrained" and (self.bound is None or self.bound <= 0):
            raise ValueError(f"mode {self.kind} needs a positive bound")


def lipschitz(L):
    return FitMode("lipschitz", float(L))


def bounded(gamma):
    return FitMode("bounded", float(gamma))


def unconstrained():
    return FitMode("unconstrained")


class MaxAffineFunc:
    """Pointwise maximum of affine pieces; convex by construction."""

    def __init__(self, A, b, diagnostics=None, mode=None):
        self.A = np.atleast_2d(np.asarray(A, dtype=float))
        self.b = np.atleast_1d(np.asarray(b, dtype=float))
        if len(self.A) == 0:
            raise ValueError("need at least one affine piece")
        self.diagnostics = diagnostics or {}
        self.mode = mode

    @classmethod
    def from_pieces(cls, pieces, **kw):
        A = np.array([p.a for p in pieces])
        b = np.array([p.b for p in pieces])
        return cls(A, b, **kw)

    @property
    def pieces(self):
        return [AffineFunc(a, b) for a, b in zip(self.A, self.b)]

    @property
    def n_pieces(self):
        return len(self.b)

    @property
    def lipschitz(self):
        return float(np.linalg.norm(self.A, axis=1).max())

    def __call__(self, X):
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            return float((self.A @ X + self.b).max())
        return (X @ self.A.T + self.b[None, :]).max(axis=1)

    def to_json(self):
        return {"mode": (None if self.mode is None else
                         {"kind": self.mode.kind, "bound": self.mode.bound}),
                "pieces": [{"a": a.tolist(), "b": float(b)}
                           for a, b in zip(self.A, self.b)],
                "diagnostics": _plain(self.diagnostics)}

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=2)

    @classmethod
    def from_json(cls, payload):
        A = np.array([p["a"] for p in payload["pieces"]])
        b = np.array([p["b"] for p in payload["pieces"]])
        mode = payload.get("mode")
        fm = FitMode(mode["kind"], mode.get("bound")) if mode else None
        return cls(A, b, diagnostics=payload.get("diagnostics", {}), mode=fm)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_json(json.load(fh))


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj


def eval_max_affine(f, x):
    return f(x)


def clip_upper(f, cap):
    """Pointwise min{f, cap}.  Not convex in general; feed the result to
    mp_properize, which restores convexity at its sites."""
    def clipped(X):
        return np.minimum(np.asarray(f(X), dtype=float), cap)
    clipped.cap = cap
    return clipped


@dataclass
class SubgradientData:
    """Values y and subgradients xi at sites z."""
    z: np.ndarray
    y: np.ndarray
    xi: np.ndarray

    def max_pairwise_violation(self):
        own = np.einsum("ij,ij->i", self.xi, self.z)
        M = (self.y[:, None] + self.xi @ self.z.T - own[:, None]
             - self.y[None, :])
        return float(M.max(initial=0.0))

    def to_max_affine(self, mode=None, diagnostics=None):
        return MaxAffineFunc(self.xi, self.y - np.einsum("ij,ij->i", self.xi, self.z),
                             diagnostics=diagnostics, mode=mode)


@dataclass
class SimplexConstraint:
    """Empirical squared-deviation budget for one simplex: mean over its
    sites of (y - regressor)^2 must not exceed budget."""
    simplex_id: object
    Z: np.ndarray
    regressor: AffineFunc
    budget: float

    def __post_init__(self):
        self.Z = np.atleast_2d(np.asarray(self.Z, dtype=float))
        if self.budget < 0:
            raise ValueError("budget must be >= 0")


# ---------------------------------------------------------------------------
# Shared pieces of both programs
# ---------------------------------------------------------------------------

def _pairwise_matrix(Z):
    """Sparse rows encoding y_p - y_q + xi_p . (z_q - z_p) <= 0, p != q."""
    S, d = Z.shape
    p = np.repeat(np.arange(S), S)
    q = np.tile(np.arange(S), S)
    keep = p != q
    p, q = p[keep], q[keep]
    n = len(p)
    rows = np.arange(n)
    data = [np.ones(n), -np.ones(n)]
    ri = [rows, rows]
    ci = [p, q]
    D = Z[q] - Z[p]
    for j in range(d):
        ri.append(rows)
        ci.append(S + p * d + j)
        data.append(D[:, j])
    return sp.csr_matrix((np.concatenate(data),
                          (np.concatenate(ri), np.concatenate(ci))),
                         shape=(n, S + S * d))


def _mode_constraints(mode, y, Xi):
    if mode.kind == "lipschitz":
        return [cp.norm(Xi, 2, axis=1) <= mode.bound]
    if mode.kind == "bounded":
        return [cp.abs(y) <= mode.bound]
    return []


def _solve(problem, n_sites):
    import warnings as _warnings
    opts = dict(_TIGHT_OPTS) if n_sites <= _TIGHT_SITES else {}
    with _warnings.catch_warnings():
        # acceptance is decided by our own violation certificate, not the
        # solver's accuracy self-report
        _warnings.filterwarnings("ignore", message="Solution may be inaccurate")
        try:
            problem.solve(solver=cp.CLARABEL, **opts)
        except cp.error.SolverError:
            problem.solve(solver=cp.SCS, eps=1e-9, max_iters=200_000)
    return problem.status


def _certificate(data, mode, tol=VIOLATION_TOL):
    viol = {"pairwise": data.max_pairwise_violation()}
    if mode.kind == "lipschitz":
        viol["mode"] = float(max(np.linalg.norm(data.xi, axis=1).max()
                                 - mode.bound, 0.0))
    elif mode.kind == "bounded":
        viol["mode"] = float(max(np.abs(data.y).max() - mode.bound, 0.0))
    else:
        viol["mode"] = 0.0
    viol["ok"] = bool(max(viol["pairwise"], viol["mode"]) <= tol)
    return viol


def _clip_gradients(xi, mode):
    if mode.kind == "lipschitz":
        norms = np.linalg.norm(xi, axis=1)
        over = norms > mode.bound
        if over.any():
            xi = xi.copy()
            xi[over] *= (mode.bound / norms[over])[:, None]
    return xi


def _select_subgradients(Z, y, mode, slack=0.0):
    """Re-pick subgradients at fixed values: least-squares tightness.

    Among all xi feasible for the pairwise constraints at the given y
    (within `slack`), minimise the squared slack of each site's rows
    against its nearest neighbours.  Exact data is reproduced exactly
    (the true gradient zeroes every anchored row), and the selection is
    unique once each site's neighbours affinely span.  Returns None when
    no feasible selection exists or the solve fails.
    """
    S, d = Z.shape
    if S == 1:
        return np.zeros((1, d))
    p = np.repeat(np.arange(S), S)
    q = np.tile(np.arange(S), S)
    keep = p != q
    p, q = p[keep], q[keep]
    D = Z[q] - Z[p]
    r = y[q] - y[p]
    k = min(_SELECT_NEIGHBOURS, S - 1)
    dist = ((Z[:, None, :] - Z[None, :, :]) ** 2).sum(-1)
    np.fill_diagonal(dist, np.inf)
    cut = np.partition(dist, k - 1, axis=1)[:, k - 1]
    anchored = dist[p, q] <= cut[p] + 1e-300

    def solve(idx):
        Xi = cp.Variable((S, d))
        lhs = cp.sum(cp.multiply(Xi[p], D), axis=1)
        cons = [lhs <= r + slack]
        if mode.kind == "lipschitz":
            cons.append(cp.norm(Xi, 2, axis=1) <= mode.bound)
        prob = cp.Problem(cp.Minimize(cp.sum_squares(lhs[idx] - r[idx])), cons)
        try:
            _solve(prob, S)
        except Exception:
            return None
        if prob.status not in ("optimal", "optimal_inaccurate") or Xi.value is None:
            return None
        return np.asarray(Xi.value)

    xi = solve(np.flatnonzero(anchored))
    if xi is None:
        return None
    # second pass: re-anchor each site to the rows its first pass left
    # tight, which de-mixes sites whose neighbourhoods straddle creases
    resid = r - np.einsum("ij,ij->i", xi[p], D)
    scale_r = 1.0 + float(np.abs(r).mean())
    refined = np.zeros_like(anchored)
    for site in range(S):
        rows = np.flatnonzero(anchored & (p == site))
        if len(rows) == 0:
            continue
        tol_keep = max(10.0 * np.quantile(resid[rows], 0.25), 1e-9 * scale_r)
        tight = rows[resid[rows] <= tol_keep]
        refined[tight if len(tight) >= d else rows] = True
    xi2 = solve(np.flatnonzero(refined))
    xi = xi2 if xi2 is not None else xi
    return _envelope_gradient_overrides(Z, y, mode, xi, slack)


def _envelope_gradient_overrides(Z, y, mode, xi, slack):
    """Swap in supporting-plane gradients from the lifted lower hull.

    Each site adjacent to facets of the lower convex hull of (z, y) may
    take an adjacent facet's gradient; the most globally common gradient
    is preferred, which reproduces piecewise-affine data exactly instead
    of mixing gradients across creases.  A proposal is accepted only when
    it meets the mode cap and leaves every pairwise row within slack, so
    the result never loses feasibility (rows couple one site at a time).
    """
    from . import geom as _geom

    S, d = Z.shape
    if S < d + 2:
        return xi
    scale = 1.0 + float(np.abs(y).mean())
    try:
        hull = _geom.convex_hull(np.column_stack([Z, y]))
    except _geom.GeometryError:
        return xi
    grads, offs, facet_sites = [], [], []
    hv = hull.vertices
    site_of_vertex = {}
    for i, row in enumerate(hv):
        dist = ((Z - row[:d]) ** 2).sum(axis=1)
        j = int(np.argmin(dist))
        if dist[j] <= 1e-18 * max(scale, 1.0):
            site_of_vertex[i] = j
    for f, n, off in zip(hull.facet_indices, hull.facet_normals,
                         hull.facet_offsets):
        if n[d] >= -1e-9:
            continue
        grads.append(-n[:d] / n[d])
        offs.append(off / n[d])
        facet_sites.append([site_of_vertex[i] for i in f
                            if i in site_of_vertex])
    if not grads:
        return xi
    grads = np.array(grads)
    # commonality groups by rounded gradient
    keys = [tuple(np.round(g / max(scale, 1.0), 7)) for g in grads]
    counts = {}
    for kk in keys:
        counts[kk] = counts.get(kk, 0) + 1
    adj = [[] for _ in range(S)]
    for fi, sites in enumerate(facet_sites):
        for s in sites:
            adj[s].append(fi)
    xi = xi.copy()
    tol = slack + 1e-9 * scale
    for s_i in range(S):
        if not adj[s_i]:
            continue
        order = sorted(adj[s_i], key=lambda fi: (-counts[keys[fi]], fi))
        for fi in order:
            g = grads[fi]
            if mode.kind == "lipschitz" and np.linalg.norm(g) > mode.bound:
                continue
            w_vals = y[s_i] + (Z - Z[s_i]) @ g
            if (w_vals - y).max() <= tol:
                xi[s_i] = g
                break
    return xi


# ---------------------------------------------------------------------------
# Convex least squares
# ---------------------------------------------------------------------------

def convex_lse(points, values, mode=None, select_gradients=True):
    """Least-squares fit over convex functions, as a max-affine model.

    Minimises the mean squared deviation of fitted values from `values`
    subject to the pairwise subgradient constraints and the mode caps,
    then (by default) re-selects subgradients at the fitted values for a
    stable extension.  Diagnostics carry the objective, the violation
    certificate, and the solver status.
    """
    if mode is None:
        mode = unconstrained()
    Z = np.atleast_2d(np.asarray(points, dtype=float))
    v = np.atleast_1d(np.asarray(values, dtype=float))
    S, d = Z.shape
    if S < 1:
        raise FitError("need at least one point")
    x = cp.Variable(S + S * d)
    y = x[:S]
    Xi = cp.reshape(x[S:], (S, d), order="C")
    cons = [_pairwise_matrix(Z) @ x <= 0]
    cons += _mode_constraints(mode, y, Xi)
    prob = cp.Problem(cp.Minimize(cp.sum_squares(y - v) / S), cons)
    status = _solve(prob, S)
    if x.value is None:
        raise FitError(f"solver returned no iterate (status {status})")
    y_fit = np.asarray(y.value)
    xi_fit = x.value[S:].reshape(S, d)
    scale = 1.0 + float(np.mean(v ** 2))
    snapped = False
    if select_gradients and float(np.mean((y_fit - v) ** 2)) <= 1e-5 * scale:
        # near-interpolation: the data itself is likely feasible; snapping
        # to it removes the solver's flat-direction wobble at the sites
        xi_snap = _select_subgradients(Z, v, mode)
        if xi_snap is not None and SubgradientData(
                Z, v, xi_snap).max_pairwise_violation() <= VIOLATION_TOL:
            y_fit, xi_fit, snapped = v.copy(), xi_snap, True
    if select_gradients and not snapped:
        viol0 = SubgradientData(Z, y_fit, xi_fit).max_pairwise_violation()
        xi_sel = _select_subgradients(Z, y_fit, mode,
                                      slack=max(viol0, 0.0) + 1e-9 * scale)
        if xi_sel is not None:
            xi_fit = xi_sel
    data = SubgradientData(Z, y_fit, xi_fit)
    data.xi = _clip_gradients(data.xi, mode)
    cert = _certificate(data, mode)
    objective = float(np.mean((data.y - v) ** 2))
    converged = cert["ok"] and status in ("optimal", "optimal_inaccurate")
    diag = {"objective": objective, "status": status, "snapped": snapped,
            "violations": cert, "converged": converged}
    if not converged:
        diag["flag"] = "not converged"
    return data.to_max_affine(mode=mode, diagnostics=diag)


# ---------------------------------------------------------------------------
# Budgeted feasibility program
# ---------------------------------------------------------------------------

def feasibility_fit(constraints, mode, tol=VIOLATION_TOL,
                    select_gradients=True):
    """Find a convex function meeting every simplex budget and mode cap.

    Solves the selection problem: minimise the total budget usage subject
    to hard constraints (any feasible point is acceptable; pulling the
    fitted values toward the per-simplex regressors picks a statistically
    sensible one).  If that program is infeasible, re-solves for the
    minimax slack t and raises FeasibilityError with the per-family
    residual breakdown when t exceeds the tolerance.
    """
    if not constraints:
        raise FitError("constraint set is empty")
    Z = np.vstack([c.Z for c in constraints])
    S, d = Z.shape
    slices = []
    start = 0
    for c in constraints:
        slices.append(slice(start, start + len(c.Z)))
        start += len(c.Z)
    targets = [c.regressor(c.Z) for c in constraints]

    x = cp.Variable(S + S * d)
    y = x[:S]
    Xi = cp.reshape(x[S:], (S, d), order="C")
    pair = _pairwise_matrix(Z)
    quad = [cp.sum_squares(y[sl] - t) / (sl.stop - sl.start)
            for sl, t in zip(slices, targets)]

    def measured(yv, xiv):
        data = SubgradientData(Z, yv, xiv)
        fam = _certificate(data, mode, tol)
        worst_budget = 0.0
        for c, sl in zip(constraints, slices):
            u = float(np.mean((yv[sl] - c.regressor(c.Z)) ** 2))
            worst_budget = max(worst_budget, u - c.budget)
        fam["budget"] = max(worst_budget, 0.0)
        fam["ok"] = bool(max(fam["pairwise"], fam["mode"], fam["budget"]) <= tol)
        return data, fam

    # selection solve: hard constraints, regressor-fidelity objective
    cons = [pair @ x <= 0]
    cons += _mode_constraints(mode, y, Xi)
    cons += [q <= c.budget for q, c in zip(quad, constraints)]
    prob = cp.Problem(cp.Minimize(cp.sum(cp.hstack(quad))), cons)
    try:
        status = _solve(prob, S)
    except Exception:
        status = "solver_error"
    def finish(data, fam, stage, status):
        if select_gradients:
            viol0 = data.max_pairwise_violation()
            scale = 1.0 + float(np.abs(data.y).mean())
            xi_sel = _select_subgradients(Z, data.y, mode,
                                          slack=max(viol0, 0.0) + 1e-9 * scale)
            if xi_sel is not None:
                xi_sel = _clip_gradients(xi_sel, mode)
                _, fam_sel = measured(data.y, xi_sel)
                if fam_sel["ok"]:
                    data.xi = xi_sel
                    fam = fam_sel
        data.xi = _clip_gradients(data.xi, mode)
        return data.to_max_affine(mode=mode, diagnostics={
            "status": status, "violations": fam, "stage": stage,
            "converged": True})

    if x.value is not None and status in ("optimal", "optimal_inaccurate"):
        data, fam = measured(np.asarray(y.value), x.value[S:].reshape(S, d))
        if fam["ok"]:
            return finish(data, fam, "selection", status)

    # minimax-slack solve for the residual breakdown
    t = cp.Variable()
    cons2 = [pair @ x <= t, t >= 0]
    if mode.kind == "lipschitz":
        cons2.append(cp.norm(Xi, 2, axis=1) <= mode.bound + t)
    elif mode.kind == "bounded":
        cons2.append(cp.abs(y) <= mode.bound + t)
    cons2 += [q <= c.budget + t for q, c in zip(quad, constraints)]
    prob2 = cp.Problem(cp.Minimize(t), cons2)
    status2 = _solve(prob2, S)
    if x.value is None:
        raise FitError(f"feasibility solver failed (status {status2})")
    data, fam = measured(np.asarray(y.value), x.value[S:].reshape(S, d))
    fam["slack"] = float(t.value) if t.value is not None else float("nan")
    if not fam["ok"]:
        raise FeasibilityError(fam)
    return finish(data, fam, "minimax-slack", status2)


# ---------------------------------------------------------------------------
# Improper-to-proper projection
# ---------------------------------------------------------------------------

def mp_properize(f_tilde, support_sampler, k, mode, rng,
                 select_gradients=True):
    """Convexify an arbitrary function by least squares at fresh sites.

    Draws k sites from support_sampler(k, rng), evaluates f_tilde there,
    and fits the convex LSE in the given mode.  The fitted value vector is
    the Euclidean projection of the evaluated vector onto the mode's
    feasible cone, so distances to any feasible function can only shrink.
    """
    sites = support_sampler(k, rng)
    vals = np.asarray(f_tilde(sites), dtype=float)
    model = convex_lse(sites, vals, mode, select_gradients=select_gradients)
    model.diagnostics["projection_sites"] = int(k)
    model.projection_sites = sites
    return model
