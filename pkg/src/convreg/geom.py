"""d-dimensional convex geometry kernel.

Simplices and polytopes (vertex and halfspace forms), convex hulls,
lower envelopes of lifted point clouds, exact simplex/halfspace cut
volumes, and cap-probing membership tests for floating-body level sets.

Everything here is a pure function of its inputs; no global state.
"""

import math
import warnings
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.optimize import linprog
from scipy.spatial import ConvexHull, QhullError

# Relative determinant threshold below which a simplex is treated as flat.
DEGEN_TOL = 1e-12
# Internal seed for the quasi-random direction grids used by cap probes.
_DIRECTION_SEED = 7305881


class GeometryError(ValueError):
    pass


def _rng_for_directions(d, n_dirs):
    seq = np.random.SeedSequence((_DIRECTION_SEED, d, n_dirs))
    return np.random.Generator(np.random.Philox(seq))


# ---------------------------------------------------------------------------
# Simplex
# ---------------------------------------------------------------------------

class Simplex:
    """A nondegenerate d-simplex given by its d+1 vertices.

    Caches volume, unit outward facet normals/offsets, and the inverse
    barycentric matrix.  Facet i is the one opposite vertex i.
    """

    __slots__ = ("vertices", "dim", "volume", "facet_normals",
                 "facet_offsets", "_binv")

    def __init__(self, vertices):
        V = np.asarray(vertices, dtype=float)
        if V.ndim != 2 or V.shape[0] != V.shape[1] + 1:
            raise GeometryError("need d+1 vertices of dimension d")
        if not np.isfinite(V).all():
            raise GeometryError("non-finite vertex")
        d = V.shape[1]
        E = V[1:] - V[0]
        det = np.linalg.det(E)
        scale = max(np.abs(E).max(), 1e-30)
        if abs(det) <= DEGEN_TOL * scale**d:
            raise GeometryError("degenerate simplex")
        self.vertices = V
        self.dim = d
        self.volume = abs(det) / math.factorial(d)
        # barycentric solve matrix: weights = binv @ [x; 1]
        T = np.vstack([V.T, np.ones(d + 1)])
        self._binv = np.linalg.inv(T)
        normals = np.empty((d + 1, d))
        offsets = np.empty(d + 1)
        for i in range(d + 1):
            F = np.delete(V, i, axis=0)
            A = F[1:] - F[0]
            n = np.linalg.svd(A, full_matrices=True)[2][-1]
            n /= np.linalg.norm(n)
            off = n @ F[0]
            if n @ V[i] > off:      # orient outward: opposite vertex inside
                n, off = -n, -off
            normals[i] = n
            offsets[i] = off
        self.facet_normals = normals
        self.facet_offsets = offsets

    @property
    def barycenter(self):
        return self.vertices.mean(axis=0)

    def barycentric(self, x):
        """Barycentric weights of x; they sum to 1 and reproduce x."""
        x = np.asarray(x, dtype=float)
        return self._binv @ np.append(x, 1.0)

    def barycentric_many(self, X):
        X = np.asarray(X, dtype=float)
        Xa = np.column_stack([X, np.ones(len(X))])
        return Xa @ self._binv.T

    def contains(self, x, tol=1e-12):
        return bool(self.barycentric(x).min() >= -tol)

    def contains_many(self, X, tol=1e-12):
        return self.barycentric_many(X).min(axis=1) >= -tol

    def __repr__(self):
        return f"Simplex(d={self.dim}, vol={self.volume:.3g})"


def barycentric(simplex, x):
    return simplex.barycentric(x)


def contains(simplex, x, tol=1e-12):
    if tol < 0:
        raise GeometryError("tol must be >= 0")
    return simplex.contains(x, tol)


def inscribed_radius(simplex, y):
    """Radius of the largest ball centred at y inside the simplex."""
    y = np.asarray(y, dtype=float)
    if not simplex.contains(y, tol=1e-10):
        raise GeometryError("point outside simplex")
    return float((simplex.facet_offsets - simplex.facet_normals @ y).min())


def inscribed_radius_many(simplex, Y):
    """Vectorised facet-distance minimum; no containment check."""
    return (simplex.facet_offsets[None, :]
            - Y @ simplex.facet_normals.T).min(axis=1)


def shrink(simplex, delta):
    """Homothety about the barycenter: volume shrinks by (1-delta)^d."""
    if not 0 <= delta < 1:
        raise GeometryError("delta must lie in [0, 1)")
    c = simplex.barycenter
    return Simplex(c + (1.0 - delta) * (simplex.vertices - c))


@lru_cache(maxsize=32)
def regular_simplex(d):
    """Regular d-simplex centred at the origin with circumradius 1."""
    V = np.eye(d + 1)
    B = np.linalg.svd(np.eye(d + 1) - np.ones((d + 1, d + 1)) / (d + 1))[0][:, :d]
    W = (V - V.mean(axis=0)) @ B
    W /= np.linalg.norm(W[0])
    return Simplex(W)


# ---------------------------------------------------------------------------
# Affine maps between simplices
# ---------------------------------------------------------------------------

@dataclass
class AffineMap:
    """x -> linear @ x + shift, with cached determinant."""
    linear: np.ndarray
    shift: np.ndarray
    det: float = field(init=False)

    def __post_init__(self):
        self.linear = np.asarray(self.linear, dtype=float)
        self.shift = np.asarray(self.shift, dtype=float)
        self.det = float(np.linalg.det(self.linear))
        if self.det == 0.0:
            raise GeometryError("singular affine map")

    def apply(self, X):
        return np.asarray(X, dtype=float) @ self.linear.T + self.shift

    def inverse(self):
        Minv = np.linalg.inv(self.linear)
        return AffineMap(Minv, -Minv @ self.shift)


def simplex_map(src, dst):
    """Affine map sending src's vertices to dst's vertices in order."""
    A = src.vertices[1:] - src.vertices[0]
    B = dst.vertices[1:] - dst.vertices[0]
    M = np.linalg.solve(A, B).T
    return AffineMap(M, dst.vertices[0] - M @ src.vertices[0])


# ---------------------------------------------------------------------------
# Polytopes
# ---------------------------------------------------------------------------

class HPolytope:
    """Bounded intersection {x : normals @ x <= offsets}; unit normals."""

    def __init__(self, normals, offsets):
        N = np.asarray(normals, dtype=float)
        b = np.asarray(offsets, dtype=float)
        norms = np.linalg.norm(N, axis=1)
        if (norms <= 0).any():
            raise GeometryError("zero normal")
        self.normals = N / norms[:, None]
        self.offsets = b / norms
        self.dim = N.shape[1]
        self._bbox = None

    @classmethod
    def box(cls, lo, hi):
        lo = np.asarray(lo, dtype=float)
        hi = np.asarray(hi, dtype=float)
        d = len(lo)
        N = np.vstack([np.eye(d), -np.eye(d)])
        b = np.concatenate([hi, -lo])
        return cls(N, b)

    @classmethod
    def from_simplex(cls, simplex):
        return cls(simplex.facet_normals, simplex.facet_offsets)

    def contains(self, x, tol=1e-9):
        return bool((self.normals @ x - self.offsets).max() <= tol)

    def contains_many(self, X, tol=1e-9):
        return (X @ self.normals.T - self.offsets[None, :]).max(axis=1) <= tol

    def bounding_box(self):
        """Axis-aligned bounding box (lo, hi) via linear programs."""
        if self._bbox is None:
            d = self.dim
            lo = np.empty(d)
            hi = np.empty(d)
            for j in range(d):
                c = np.zeros(d)
                c[j] = 1.0
                r1 = linprog(c, A_ub=self.normals, b_ub=self.offsets,
                             bounds=[(None, None)] * d, method="highs")
                r2 = linprog(-c, A_ub=self.normals, b_ub=self.offsets,
                             bounds=[(None, None)] * d, method="highs")
                if not (r1.success and r2.success):
                    raise GeometryError("unbounded or empty polytope")
                lo[j], hi[j] = r1.fun, -r2.fun
            self._bbox = (lo, hi)
        return self._bbox

    def to_debug_json(self):
        return {"normals": self.normals.tolist(), "offsets": self.offsets.tolist()}


class VPolytope:
    """Simplicial polytope: vertices plus simplicial facets.

    Each facet is (vertex-index tuple of size d, unit outward normal);
    offsets[i] pairs with facet i so that normal @ x <= offset inside.
    """

    def __init__(self, vertices, facet_indices, facet_normals, facet_offsets,
                 volume=None):
        self.vertices = np.asarray(vertices, dtype=float)
        self.facet_indices = [tuple(int(i) for i in f) for f in facet_indices]
        self.facet_normals = np.asarray(facet_normals, dtype=float)
        self.facet_offsets = np.asarray(facet_offsets, dtype=float)
        self.dim = self.vertices.shape[1]
        self.volume = volume

    @property
    def n_facets(self):
        return len(self.facet_indices)

    def contains(self, x, tol=1e-9):
        return bool((self.facet_normals @ x - self.facet_offsets).max() <= tol)

    def contains_many(self, X, tol=1e-9):
        return (X @ self.facet_normals.T
                - self.facet_offsets[None, :]).max(axis=1) <= tol

    def to_debug_json(self):
        return {"vertices": self.vertices.tolist(),
                "facets": [list(f) for f in self.facet_indices]}


def convex_hull(points):
    """Convex hull with simplicial facets (qhull; joggle retry on ties).

    Returns a VPolytope whose vertex set is a subset of the input and
    whose facets are (d-1)-simplices.
    """
    P = np.asarray(points, dtype=float)
    if P.ndim != 2:
        raise GeometryError("points must be a 2-d array")
    m, d = P.shape
    if m < d + 1:
        raise GeometryError("degenerate input: fewer than d+1 points")
    center = P.mean(axis=0)
    sv = np.linalg.svd(P - center, compute_uv=False)
    if sv[-1] <= 1e-12 * max(sv[0], 1e-30):
        raise GeometryError("degenerate input: points lie in a hyperplane")
    try:
        hull = ConvexHull(P)
    except QhullError:
        warnings.warn("qhull failed on exact input; retrying with joggle")
        hull = ConvexHull(P, qhull_options="QJ")
    new_index = {int(v): i for i, v in enumerate(hull.vertices)}
    facets = [tuple(new_index[int(j)] for j in f) for f in hull.simplices]
    normals = hull.equations[:, :d]
    offsets = -hull.equations[:, d]
    return VPolytope(P[hull.vertices], facets, normals, offsets,
                     volume=float(hull.volume))


def cone_triangulate(poly, apex):
    """Triangulate a simplicial polytope by coning its facets to apex.

    apex must be strictly interior; the returned simplices have disjoint
    interiors and their volumes sum to the polytope volume.
    """
    apex = np.asarray(apex, dtype=float)
    margins = poly.facet_offsets - poly.facet_normals @ apex
    if margins.min() <= 1e-12:
        raise GeometryError("apex not strictly interior")
    out = []
    for f in poly.facet_indices:
        verts = np.vstack([poly.vertices[list(f)], apex])
        out.append(Simplex(verts))
    return out


# ---------------------------------------------------------------------------
# Piecewise-affine functions on simplicial complexes
# ---------------------------------------------------------------------------

class SimplicialFunc:
    """Function affine on each simplex of an interior-disjoint family.

    pieces: list of (Simplex, a, b) with value a @ x + b on that simplex.
    When built from the bottom of a convex hull (is_convex_envelope), the
    function is globally convex and evaluates as the max of its planes,
    which also extends it convexly outside the covered region.
    """

    def __init__(self, pieces, is_convex_envelope=False, domain_normals=None,
                 domain_offsets=None):
        self.pieces = [(s, np.asarray(a, dtype=float), float(b))
                       for s, a, b in pieces]
        if not self.pieces:
            raise GeometryError("empty piece list")
        self.A = np.array([a for _, a, _ in self.pieces])
        self.b = np.array([b for _, _, b in self.pieces])
        self.dim = self.pieces[0][0].dim
        self.is_convex_envelope = is_convex_envelope
        self.domain_normals = domain_normals
        self.domain_offsets = domain_offsets

    def piece_index(self, X, tol=1e-9):
        """Index of the first piece containing each row of X (-1 if none)."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        loc = np.full(len(X), -1, dtype=int)
        for i, (s, _, _) in enumerate(self.pieces):
            todo = loc < 0
            if not todo.any():
                break
            hit = np.zeros(len(X), dtype=bool)
            hit[todo] = s.contains_many(X[todo], tol=tol)
            loc[hit & todo] = i
        return loc

    def covers(self, X, tol=1e-9):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if self.domain_normals is not None:
            return (X @ self.domain_normals.T
                    - self.domain_offsets[None, :]).max(axis=1) <= tol
        return self.piece_index(X, tol=tol) >= 0

    def __call__(self, X):
        """Evaluate; envelope mode takes the max plane, else locates the
        containing piece (NaN outside the covered region)."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if self.is_convex_envelope:
            return (X @ self.A.T + self.b[None, :]).max(axis=1)
        loc = self.piece_index(X)
        out = np.full(len(X), np.nan)
        ok = loc >= 0
        out[ok] = np.einsum("ij,ij->i", X[ok], self.A[loc[ok]]) + self.b[loc[ok]]
        return out

    def check_continuity(self, tol=1e-8):
        """Verify adjoining pieces agree at shared-facet barycenters."""
        worst = 0.0
        n = len(self.pieces)
        for i in range(n):
            si, ai, bi = self.pieces[i]
            for j in range(i + 1, n):
                sj, aj, bj = self.pieces[j]
                shared = _shared_facet(si, sj)
                if shared is None:
                    continue
                c = shared.mean(axis=0)
                worst = max(worst, abs((ai @ c + bi) - (aj @ c + bj)))
        if worst > tol:
            raise GeometryError(f"discontinuous across a shared facet: {worst:.2e}")
        return worst


def _shared_facet(s1, s2, tol=1e-9):
    V1, V2 = s1.vertices, s2.vertices
    matches = []
    for v in V1:
        if (np.linalg.norm(V2 - v, axis=1) <= tol).any():
            matches.append(v)
    if len(matches) == s1.dim:
        return np.array(matches)
    return None


def lower_envelope(hull):
    """Lower envelope of a simplicial hull in dimension d+1.

    Facets whose outward normal points downward project to the graph
    pieces; vertical facets are skipped with a warning (measure zero for
    hulls of generic point clouds).
    """
    D = hull.dim
    d = D - 1
    pieces = []
    for f, n, off in zip(hull.facet_indices, hull.facet_normals,
                         hull.facet_offsets):
        if n[d] >= -1e-9:
            continue
        verts = hull.vertices[list(f)]
        a = -n[:d] / n[d]
        b = off / n[d]
        try:
            s = Simplex(verts[:, :d])
        except GeometryError:
            warnings.warn("skipping near-vertical lower facet")
            continue
        pieces.append((s, a, b))
    if not pieces:
        raise GeometryError("hull has no downward-facing facets")
    # restriction of the hull's facets to the projected domain
    proj = convex_hull(hull.vertices[:, :d])
    return SimplicialFunc(pieces, is_convex_envelope=True,
                          domain_normals=proj.facet_normals,
                          domain_offsets=proj.facet_offsets)


# ---------------------------------------------------------------------------
# Exact halfspace cuts and cap probing
# ---------------------------------------------------------------------------

def _cut_recursion(pos, neg):
    """Volume fraction on the nonnegative side from the two vertex-value
    groups.  Classic two-index recursion on the values; every intermediate
    quantity is a convex combination, so the result stays in [0, 1]."""
    J, K = len(pos), len(neg)
    if K == 0:
        return 1.0
    if J == 0:
        return 0.0
    V = np.zeros(K + 1)
    V[0] = 1.0
    for j in range(J):
        a = pos[j]
        for k in range(1, K + 1):
            V[k] = (a * V[k - 1] + neg[k - 1] * V[k]) / (a + neg[k - 1])
    return float(V[K])


def halfspace_volume_fraction(simplex, normal, offset):
    """Exact vol(simplex ∩ {normal @ x >= offset}) / vol(simplex)."""
    normal = np.asarray(normal, dtype=float)
    vals = simplex.vertices @ normal - offset
    frac = _cut_recursion(vals[vals >= 0.0], -vals[vals < 0.0])
    return min(max(frac, 0.0), 1.0)


def cap_fraction_profile(simplex, direction, offsets):
    """halfspace_volume_fraction for one direction, vectorised over offsets.

    Points with the same count of vertex projections above the offset share
    a split pattern, so the recursion runs bucket-wise over the array.
    """
    t = np.sort(simplex.vertices @ np.asarray(direction, dtype=float))[::-1]
    c = np.asarray(offsets, dtype=float)
    dp1 = len(t)
    out = np.empty(len(c))
    k_arr = np.searchsorted(-t, -c, side="left")   # count of t > c
    out[k_arr == 0] = 0.0
    out[k_arr == dp1] = 1.0
    for k in range(1, dp1):
        m = k_arr == k
        if not m.any():
            continue
        cc = c[m]
        a = t[:k][None, :] - cc[:, None]
        bneg = cc[:, None] - t[k:][None, :]
        K = dp1 - k
        V = np.zeros((len(cc), K + 1))
        V[:, 0] = 1.0
        for j in range(k):
            aj = a[:, j]
            for kk in range(1, K + 1):
                V[:, kk] = ((aj * V[:, kk - 1] + bneg[:, kk - 1] * V[:, kk])
                            / (aj + bneg[:, kk - 1]))
        out[m] = V[:, K]
    return np.clip(out, 0.0, 1.0)


def min_cap_fractions(simplex, X, n_dirs=128, refine_steps=0):
    """Smallest probed cap fraction through each row of X.

    Scans a fixed quasi-random direction grid (deterministic per (d,
    n_dirs)); optional local refinement perturbs each point's best
    direction with a shrinking step.  The result upper-bounds the true
    minimum cap fraction, so level-set membership derived from it is
    one-sided: never claimed too eagerly.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    d = simplex.dim
    rng = _rng_for_directions(d, n_dirs)
    dirs = rng.standard_normal((n_dirs, d))
    dirs /= np.linalg.norm(dirs, axis=1)[:, None]
    phi = np.full(len(X), np.inf)
    best = np.zeros(len(X), dtype=int)
    for i, u in enumerate(dirs):
        fr = cap_fraction_profile(simplex, u, X @ u)
        better = fr < phi
        phi[better] = fr[better]
        best[better] = i
    if refine_steps > 0:
        u_cur = dirs[best]
        step = 0.5
        for _ in range(refine_steps):
            pert = u_cur + step * rng.standard_normal(u_cur.shape)
            pert /= np.linalg.norm(pert, axis=1)[:, None]
            fr = _per_point_fractions(simplex, pert, X)
            better = fr < phi
            phi[better] = fr[better]
            u_cur[better] = pert[better]
            step *= 0.7
    return phi


def _per_point_fractions(simplex, dirs, X):
    """Cap fractions for per-point directions (row i of dirs with row i of X)."""
    t = dirs @ simplex.vertices.T            # (m, d+1)
    c = np.einsum("ij,ij->i", dirs, X)
    vals = t - c[:, None]
    out = np.empty(len(X))
    for i in range(len(X)):                  # small m only (refinement path)
        v = vals[i]
        out[i] = _cut_recursion(np.sort(v[v >= 0])[::-1],
                                np.sort(-v[v < 0])[::-1])
    return np.clip(out, 0.0, 1.0)


def wet_part_member(simplex, eps, x, n_dirs=512, refine_steps=20):
    """Whether x lies in the outer level set of cap fraction <= eps.

    One-sided: the probe can under-report membership near the level-set
    boundary, never over-report it.
    """
    if not 0 < eps <= 1:
        raise GeometryError("eps must lie in (0, 1]")
    x = np.asarray(x, dtype=float)
    if not simplex.contains(x, tol=1e-10):
        raise GeometryError("point outside simplex")
    if eps >= 1.0:
        return True
    phi = min_cap_fractions(simplex, x[None, :], n_dirs=n_dirs,
                            refine_steps=refine_steps)[0]
    return bool(phi <= eps)
