from math import factorial

import numpy as np
import pytest

from nefem._quad_data import RULES
from nefem.mesh import InterfaceGeometry
from nefem.quadrature import (QuadratureError, cut_element_rule, edge_rule,
                              map_rule, reference_rule)

UNIT_RIGHT = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])


def _area(tri):
    return 0.5 * ((tri[1, 0] - tri[0, 0]) * (tri[2, 1] - tri[0, 1])
                  - (tri[2, 0] - tri[0, 0]) * (tri[1, 1] - tri[0, 1]))


def test_degree1_is_centroid_class():
    rule = reference_rule(1)
    # integrates x and y exactly
    for mono, exact in (((1, 0), 1.0 / 6.0), ((0, 1), 1.0 / 6.0)):
        p, q = mono
        got = 0.5 * np.sum(rule.weights * rule.points[:, 1] ** p
                           * rule.points[:, 2] ** q)
        assert abs(got - exact) < 1e-15


@pytest.mark.parametrize("degree", sorted(RULES))
def test_monomial_exactness_all_embedded(degree):
    rule = reference_rule(degree)
    assert rule.degree == degree
    x, y = rule.points[:, 1], rule.points[:, 2]
    for p in range(degree + 1):
        for q in range(degree + 1 - p):
            exact = factorial(p) * factorial(q) / factorial(p + q + 2)
            got = 0.5 * np.sum(rule.weights * x ** p * y ** q)
            assert abs(got - exact) / exact < 1e-12, (degree, p, q)


def test_weights_positive_and_normalized():
    for degree in sorted(RULES):
        rule = reference_rule(degree)
        assert (rule.weights > 0).all()
        assert abs(rule.weights.sum() - 1.0) < 1e-14


def test_degree20_has_78_points():
    assert reference_rule(20).num_points == 78


def test_requested_degree_above_maximum():
    with pytest.raises(QuadratureError):
        reference_rule(21)


def test_smallest_rule_at_least_requested():
    degrees = sorted(RULES)
    for want in range(1, 21):
        rule = reference_rule(want)
        assert rule.degree >= want
        assert rule.degree == min(d for d in degrees if d >= want)


# ---------------------------------------------------------------------------
# mapping
# ---------------------------------------------------------------------------

def test_map_identity_on_reference():
    rule = reference_rule(4)
    pts, w = map_rule(rule, UNIT_RIGHT)
    assert np.allclose(pts, rule.points[:, 1:])
    assert abs(w.sum() - 0.5) < 1e-14


def test_map_translation():
    rule = reference_rule(4)
    shifted = UNIT_RIGHT + np.array([2.0, -1.0])
    pts, w = map_rule(rule, shifted)
    ref_pts, ref_w = map_rule(rule, UNIT_RIGHT)
    assert np.allclose(pts, ref_pts + np.array([2.0, -1.0]))
    assert np.allclose(w, ref_w)


def test_map_measures_area():
    rng = np.random.default_rng(3)
    for _ in range(10):
        tri = rng.uniform(-2, 2, size=(3, 2))
        area = _area(tri)
        if area < 1e-3:
            continue
        _, w = map_rule(reference_rule(6), tri)
        assert abs(w.sum() - area) < 1e-12 * max(1.0, area)


def test_map_degenerate_raises():
    tri = np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]])
    with pytest.raises(QuadratureError):
        map_rule(reference_rule(2), tri)


# ---------------------------------------------------------------------------
# edge rules
# ---------------------------------------------------------------------------

def test_edge_rule_constant():
    pts, w = edge_rule(5, (0.0, 0.0), (1.0, 0.0))
    assert abs(w.sum() - 1.0) < 1e-14


def test_edge_rule_quadratic():
    pts, w = edge_rule(2, (0.0, 0.0), (1.0, 0.0))
    assert abs(np.sum(w * pts[:, 0] ** 2) - 1.0 / 3.0) < 1e-14


def test_edge_rule_oscillatory_vs_composite_oracle():
    # DERIVED oracle: composite 4-point Gauss on 2000 panels
    f = lambda x: np.sin(50.0 * np.pi * x)
    t4, w4 = np.polynomial.legendre.leggauss(4)
    panels = np.linspace(0.0, 1.0, 2001)
    a, b = panels[:-1], panels[1:]
    xs = 0.5 * (a[:, None] + b[:, None]) + 0.5 * (b - a)[:, None] * t4[None, :]
    oracle = np.sum(0.5 * (b - a)[:, None] * w4[None, :] * f(xs))
    pts, w = edge_rule(30, (0.0, 0.0), (1.0, 0.0))
    assert abs(np.sum(w * f(pts[:, 0])) - oracle) < 1e-10


# ---------------------------------------------------------------------------
# cut-element rules
# ---------------------------------------------------------------------------

GEOM = InterfaceGeometry(center=(0.0, 0.15), radius=0.5)


def _cut_triangle():
    # triangle straddling the circle near (0.5, 0.15)
    return np.array([[0.42, 0.10], [0.58, 0.10], [0.42, 0.26]])


def test_uncut_element_rejected():
    tri = np.array([[0.8, 0.8], [0.9, 0.8], [0.8, 0.9]])
    with pytest.raises(QuadratureError):
        cut_element_rule(tri, GEOM, reference_rule(4))


def test_cut_rule_partitions_area():
    tri = _cut_triangle()
    area = _area(tri)
    cut = cut_element_rule(tri, GEOM, reference_rule(20))
    assert abs(cut.weights.sum() - area) < 1e-12 * area
    assert (cut.weights > 0).all()


def test_cut_rule_side_tags_match_level_set():
    cut = cut_element_rule(_cut_triangle(), GEOM, reference_rule(20))
    assert (cut.sides == (GEOM.level_set(cut.points) < 0)).all()
    assert cut.sides.min() == 0 and cut.sides.max() == 1


def test_cut_rule_indicator_vs_monte_carlo():
    # DERIVED oracle: 1e7-sample Monte-Carlo sign test for the inside area
    tri = _cut_triangle()
    area = _area(tri)
    cut = cut_element_rule(tri, GEOM, reference_rule(20))
    inside_quad = cut.weights[cut.sides == 1].sum()
    rng = np.random.default_rng(11)
    n = 10_000_000
    u = rng.random((n, 2))
    flip = u.sum(axis=1) > 1
    u[flip] = 1.0 - u[flip]
    pts = tri[0] + u[:, :1] * (tri[1] - tri[0]) + u[:, 1:] * (tri[2] - tri[0])
    frac = np.mean(GEOM.level_set(pts) < 0)
    mc = frac * area
    stderr = area * np.sqrt(frac * (1 - frac) / n)
    h = 0.16 * np.sqrt(2)
    assert abs(inside_quad - mc) < 4 * stderr + h ** 3


def test_cut_rule_sector_exact():
    # circle centered at a vertex: inside region is an exact sector
    geom = InterfaceGeometry(center=(0.0, 0.0), radius=0.5)
    tri = np.array([[0.0, 0.0], [2.0, 0.0], [0.0, 2.0]])
    cut = cut_element_rule(tri, geom, reference_rule(20))
    inside = cut.weights[cut.sides == 1].sum()
    sector = 0.25 * np.pi * 0.5 ** 2
    # chord linearization of the arc: O(h^3)-class geometric error
    assert abs(inside - sector) < 2e-2 * sector
    assert abs(cut.weights.sum() - 2.0) < 1e-12


def test_snapped_vertex_chord_split():
    # vertex exactly on the circle, opposite edge crossed once
    geom = InterfaceGeometry(center=(0.0, 0.0), radius=0.5)
    tri = np.array([[0.5, 0.0], [0.9, 0.7], [-0.2, 0.6]])
    cut = cut_element_rule(tri, geom, reference_rule(8))
    area = _area(tri)
    assert abs(cut.weights.sum() - area) < 1e-12
    assert cut.sides.min() == 0 and cut.sides.max() == 1


def test_grazing_fallback_counts_diagnostic():
    # all vertices outside, circle bulging slightly through one edge
    geom = InterfaceGeometry(center=(0.0, 0.0), radius=0.5)
    eps = 1e-4
    tri = np.array([[-0.45, 0.5 - eps], [0.45, 0.5 - eps], [0.0, 1.2]])
    diag = {}
    cut = cut_element_rule(tri, geom, reference_rule(4), diagnostics=diag)
    assert diag.get("degenerate_cuts", 0) == 1
    area = _area(tri)
    assert abs(cut.weights.sum() - area) < 1e-12 * area
