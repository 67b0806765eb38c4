import math

import numpy as np
import pytest

from convreg import geom
from convreg.geom import (GeometryError, HPolytope, Simplex, cone_triangulate,
                          convex_hull, halfspace_volume_fraction,
                          inscribed_radius, lower_envelope, min_cap_fractions,
                          regular_simplex, shrink, simplex_map,
                          wet_part_member)

RIGHT_TRIANGLE = Simplex([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])


def rand_simplex(d, rng, scale=1.0):
    while True:
        V = scale * rng.standard_normal((d + 1, d))
        try:
            return Simplex(V)
        except GeometryError:
            continue


# ---------------------------------------------------------------------------
# barycentric / contains
# ---------------------------------------------------------------------------

def test_barycentric_hand_oracle():
    # solve the 3x3 system by hand: x = w2, y = w3, w1 = 1 - x - y
    w = RIGHT_TRIANGLE.barycentric([0.25, 0.25])
    assert np.allclose(w, [0.5, 0.25, 0.25], atol=1e-12)


def test_barycentric_barycenter_and_vertices():
    rng = np.random.default_rng(0)
    for d in (1, 2, 3, 5):
        s = rand_simplex(d, rng)
        w = s.barycentric(s.barycenter)
        assert np.allclose(w, 1.0 / (d + 1), atol=1e-9)
        for i in range(d + 1):
            w = s.barycentric(s.vertices[i])
            e = np.zeros(d + 1)
            e[i] = 1.0
            assert np.allclose(w, e, atol=1e-8)


def test_barycentric_roundtrip_property():
    rng = np.random.default_rng(1)
    for _ in range(50):
        d = int(rng.integers(1, 6))
        s = rand_simplex(d, rng)
        x = rng.dirichlet(np.ones(d + 1)) @ s.vertices
        w = s.barycentric(x)
        assert abs(w.sum() - 1.0) < 1e-10
        assert np.allclose(w @ s.vertices, x, atol=1e-10)


def test_degenerate_simplex_rejected():
    with pytest.raises(GeometryError, match="degenerate"):
        Simplex([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]])


def test_contains():
    rng = np.random.default_rng(2)
    s = rand_simplex(3, rng)
    assert s.contains(s.barycenter)
    # vertex nudged outward along the opposite facet normal
    tol = 1e-9
    out = s.vertices[0] + 2 * tol * s.facet_normals[0] * 10
    assert not s.contains(out, tol=tol)
    for _ in range(20):
        w = rng.dirichlet(np.ones(4))
        assert s.contains(w @ s.vertices, tol=1e-12)


# ---------------------------------------------------------------------------
# convex hull
# ---------------------------------------------------------------------------

def test_hull_of_simplex_points():
    rng = np.random.default_rng(3)
    s = rand_simplex(3, rng)
    hull = convex_hull(s.vertices)
    assert hull.n_facets == 4
    assert len(hull.vertices) == 4


def test_hull_cross_polytope_octahedron():
    pts = np.vstack([np.eye(3), -np.eye(3)])
    hull = convex_hull(pts)
    assert hull.n_facets == 8
    assert abs(hull.volume - 4.0 / 3.0) < 1e-12


def test_hull_contains_all_inputs():
    rng = np.random.default_rng(4)
    s = rand_simplex(3, rng)
    W = rng.dirichlet(np.ones(4), 100)
    P = W @ s.vertices
    hull = convex_hull(P)
    assert hull.contains_many(P, tol=1e-9).all()


def test_hull_idempotent():
    rng = np.random.default_rng(5)
    P = rng.standard_normal((60, 3))
    h1 = convex_hull(P)
    h2 = convex_hull(h1.vertices)
    v1 = set(map(tuple, np.round(h1.vertices, 12)))
    v2 = set(map(tuple, np.round(h2.vertices, 12)))
    assert v1 == v2


def test_hull_degenerate_inputs():
    with pytest.raises(GeometryError, match="degenerate"):
        convex_hull(np.zeros((2, 2)))
    flat = np.column_stack([np.arange(5.0), np.arange(5.0)])
    with pytest.raises(GeometryError, match="degenerate"):
        convex_hull(flat)


# ---------------------------------------------------------------------------
# lower envelope
# ---------------------------------------------------------------------------

def test_envelope_single_bottom_facet():
    # tetrahedron in R^3 with one downward-facing facet
    pts = np.array([[0, 0, 0.0], [1, 0, 0.1], [0, 1, 0.2], [0.3, 0.3, 2.0]])
    env = lower_envelope(convex_hull(pts))
    assert len(env.pieces) == 1
    for x, z in [((0, 0), 0.0), ((1, 0), 0.1), ((0, 1), 0.2)]:
        assert abs(env(np.array([x]))[0] - z) < 1e-10


def test_envelope_interpolates_lifted_values():
    base = np.array([[0.0, 0.0], [1.0, 0.0], [0.5, 1.0]])
    lift = (base ** 2).sum(axis=1)
    pts = np.vstack([np.column_stack([base, lift]),
                     [[0.5, 0.4, 3.0]]])           # apex above
    env = lower_envelope(convex_hull(pts))
    vals = env(base)
    assert np.allclose(vals, lift, atol=1e-10)


def test_envelope_below_paraboloid_at_samples():
    rng = np.random.default_rng(6)
    X = rng.uniform(-1, 1, (50, 2))
    z = (X ** 2).sum(axis=1)
    env = lower_envelope(convex_hull(np.column_stack([X, z])))
    # envelope of points on a convex graph interpolates it from below
    assert (env(X) <= z + 1e-9).all()


def test_envelope_is_convex():
    rng = np.random.default_rng(7)
    X = rng.uniform(-1, 1, (40, 2))
    z = (X ** 2).sum(axis=1) + 0.1 * rng.uniform(size=40)
    env = lower_envelope(convex_hull(np.column_stack([X, z])))
    for _ in range(200):
        a, b = rng.uniform(-0.5, 0.5, (2, 2))
        lam = rng.uniform()
        mid = lam * a + (1 - lam) * b
        lhs = env(mid[None])[0]
        rhs = lam * env(a[None])[0] + (1 - lam) * env(b[None])[0]
        assert lhs <= rhs + 1e-9


def test_envelope_continuity_small():
    rng = np.random.default_rng(8)
    X = rng.uniform(-1, 1, (12, 2))
    z = (X ** 2).sum(axis=1)
    env = lower_envelope(convex_hull(np.column_stack([X, z])))
    assert env.check_continuity(tol=1e-8) <= 1e-8


# ---------------------------------------------------------------------------
# halfspace volume fraction
# ---------------------------------------------------------------------------

def test_fraction_trivial_sides():
    rng = np.random.default_rng(9)
    s = rand_simplex(3, rng)
    u = rng.standard_normal(3)
    lo = (s.vertices @ u).min() - 1.0
    hi = (s.vertices @ u).max() + 1.0
    assert halfspace_volume_fraction(s, u, lo) == 1.0
    assert halfspace_volume_fraction(s, u, hi) == 0.0


def test_fraction_similar_triangle_oracle():
    # cutting the unit right triangle at x >= 1/2 keeps a similar triangle
    # with half the legs: area ratio (1/2)^2
    fr = halfspace_volume_fraction(RIGHT_TRIANGLE, np.array([1.0, 0.0]), 0.5)
    assert abs(fr - 0.25) < 1e-12


def test_fraction_regular_simplex_barycenter_cut_mc():
    s = regular_simplex(3)
    u = s.vertices[0] / np.linalg.norm(s.vertices[0])
    c = float(u @ s.barycenter)
    fr = halfspace_volume_fraction(s, u, c)
    rng = np.random.default_rng(10)
    W = rng.dirichlet(np.ones(4), 1_000_000)
    mc = float(((W @ s.vertices) @ u >= c).mean())
    assert abs(fr - mc) < 2e-3


def test_fraction_complement_identity():
    rng = np.random.default_rng(11)
    for _ in range(40):
        d = int(rng.integers(1, 7))
        s = rand_simplex(d, rng)
        u = rng.standard_normal(d)
        c = float(u @ s.barycenter + 0.3 * rng.standard_normal())
        f1 = halfspace_volume_fraction(s, u, c)
        f2 = halfspace_volume_fraction(s, -u, -c)
        assert abs(f1 + f2 - 1.0) < 1e-10


def test_fraction_vertex_group_permutation_invariance():
    rng = np.random.default_rng(12)
    s = rand_simplex(4, rng)
    u = rng.standard_normal(4)
    c = float(u @ s.barycenter)
    base = halfspace_volume_fraction(s, u, c)
    for _ in range(5):
        perm = rng.permutation(5)
        sp = Simplex(s.vertices[perm])
        assert abs(halfspace_volume_fraction(sp, u, c) - base) < 1e-12


def test_cap_profile_matches_scalar():
    rng = np.random.default_rng(13)
    s = rand_simplex(3, rng)
    u = rng.standard_normal(3)
    cs = np.linspace((s.vertices @ u).min() - 0.1,
                     (s.vertices @ u).max() + 0.1, 23)
    prof = geom.cap_fraction_profile(s, u, cs)
    scalar = [halfspace_volume_fraction(s, u, c) for c in cs]
    assert np.allclose(prof, scalar, atol=1e-12)


# ---------------------------------------------------------------------------
# inscribed radius / shrink
# ---------------------------------------------------------------------------

def test_inscribed_radius_regular_symmetry():
    for d in (2, 3, 4):
        s = regular_simplex(d)
        r = inscribed_radius(s, s.barycenter)
        # circumradius 1: inradius is 1/d for the regular simplex
        assert abs(r - 1.0 / d) < 1e-10


def test_inscribed_radius_on_facet_and_oracle():
    s = RIGHT_TRIANGLE
    mid = 0.5 * (s.vertices[0] + s.vertices[1])
    assert inscribed_radius(s, mid) < 1e-12
    rng = np.random.default_rng(14)
    for _ in range(10):
        y = rng.dirichlet([2, 2, 2]) @ s.vertices
        # direct point-line distances for the three sides
        d1 = y[1]                       # to y = 0
        d2 = y[0]                       # to x = 0
        d3 = (1 - y[0] - y[1]) / math.sqrt(2)
        assert abs(inscribed_radius(s, y) - min(d1, d2, d3)) < 1e-12
    with pytest.raises(GeometryError, match="outside"):
        inscribed_radius(s, np.array([2.0, 2.0]))


def test_shrink_laws():
    rng = np.random.default_rng(15)
    for d in (1, 2, 4):
        s = rand_simplex(d, rng)
        assert np.allclose(shrink(s, 0.0).vertices, s.vertices)
        t = shrink(s, 0.5)
        assert abs(t.volume - 0.5 ** d * s.volume) < 1e-10 * s.volume
        assert np.allclose(t.barycenter, s.barycenter, atol=1e-12)
        expect = s.barycenter + 0.5 * (s.vertices - s.barycenter)
        assert np.allclose(t.vertices, expect, atol=1e-12)
    with pytest.raises(GeometryError):
        shrink(RIGHT_TRIANGLE, 1.0)


# ---------------------------------------------------------------------------
# wet-part membership
# ---------------------------------------------------------------------------

def test_wet_part_vertex_and_whole():
    s = regular_simplex(2)
    v = s.vertices[0] * 0.999999          # just inside
    assert wet_part_member(s, 1e-3, v, n_dirs=64, refine_steps=5)
    assert wet_part_member(s, 1.0, s.barycenter, n_dirs=8, refine_steps=0)


def test_wet_part_barycenter_triangle():
    # the smallest cap through a triangle's barycenter has fraction 4/9
    s = regular_simplex(2)
    assert not wet_part_member(s, 1e-6, s.barycenter)
    phi = min_cap_fractions(s, s.barycenter[None, :], n_dirs=512,
                            refine_steps=20)[0]
    assert phi >= 4.0 / 9.0 - 1e-9
    assert phi < 4.0 / 9.0 + 5e-3


def test_wet_part_monotone_in_eps():
    s = regular_simplex(3)
    rng = np.random.default_rng(16)
    X = rng.dirichlet(np.ones(4), 50) @ s.vertices
    phi = min_cap_fractions(s, X, n_dirs=64)
    eps_grid = [0.02, 0.05, 0.1, 0.3, 0.9]
    members = [(phi <= e) for e in eps_grid]
    for a, b in zip(members[:-1], members[1:]):
        assert (~a | b).all()          # member at eps implies member at eps'


def test_wet_part_outside_raises():
    s = regular_simplex(2)
    with pytest.raises(GeometryError):
        wet_part_member(s, 0.5, np.array([5.0, 5.0]))


# ---------------------------------------------------------------------------
# cone triangulation
# ---------------------------------------------------------------------------

def test_cone_triangulate_simplex():
    rng = np.random.default_rng(17)
    s = rand_simplex(3, rng)
    poly = convex_hull(s.vertices)
    parts = cone_triangulate(poly, s.barycenter)
    assert len(parts) == 4
    assert abs(sum(p.volume for p in parts) - s.volume) < 1e-9 * s.volume


def test_cone_triangulate_square():
    sq = convex_hull(np.array([[0, 0], [1, 0], [1, 1], [0, 1.0]]))
    parts = cone_triangulate(sq, np.array([0.5, 0.5]))
    assert len(parts) == 4
    areas = sorted(p.volume for p in parts)
    assert np.allclose(areas, 0.25, atol=1e-12)


def test_cone_triangulate_random_3poly_volume():
    rng = np.random.default_rng(18)
    P = rng.standard_normal((30, 3))
    hull = convex_hull(P)
    inner = P[hull.contains_many(P, tol=-1e-6)]
    apex = P.mean(axis=0)
    parts = cone_triangulate(hull, apex)
    vol = sum(p.volume for p in parts)
    assert abs(vol - hull.volume) < 1e-9 * hull.volume


def test_cone_triangulate_apex_outside():
    sq = convex_hull(np.array([[0, 0], [1, 0], [1, 1], [0, 1.0]]))
    with pytest.raises(GeometryError, match="interior"):
        cone_triangulate(sq, np.array([2.0, 2.0]))


# ---------------------------------------------------------------------------
# affine maps
# ---------------------------------------------------------------------------

def test_simplex_map_roundtrip():
    rng = np.random.default_rng(19)
    a = rand_simplex(3, rng)
    b = rand_simplex(3, rng)
    T = simplex_map(a, b)
    assert np.allclose(T.apply(a.vertices), b.vertices, atol=1e-9)
    Tinv = T.inverse()
    assert np.allclose(Tinv.apply(b.vertices), a.vertices, atol=1e-9)
    assert abs(T.det * Tinv.det - 1.0) < 1e-9


# ---------------------------------------------------------------------------
# halfspace polytopes
# ---------------------------------------------------------------------------

def test_hpolytope_box_and_bbox():
    box = HPolytope.box([0, 0], [2, 1])
    lo, hi = box.bounding_box()
    assert np.allclose(lo, [0, 0], atol=1e-7)
    assert np.allclose(hi, [2, 1], atol=1e-7)
    assert box.contains(np.array([1.0, 0.5]))
    assert not box.contains(np.array([3.0, 0.5]))
