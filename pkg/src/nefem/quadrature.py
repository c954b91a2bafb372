"""Quadrature on triangles and edges.

Embedded symmetric Gauss-type rules on the reference triangle (degrees 1-20,
the degree-20 rule has 78 points), affine mapping to physical elements,
Gauss-Legendre edge rules, and interface-aligned composite rules on cut
elements.  Reference weights sum to 1; physical weights to the element area.
"""

from dataclasses import dataclass
from math import factorial

import numpy as np

from ._quad_data import RULES
from .mesh import MeshError


class QuadratureError(ValueError):
    pass


@dataclass(frozen=True)
class QuadratureRule:
    points: np.ndarray    # (n, 3) barycentric
    weights: np.ndarray   # (n,) sum to 1
    degree: int

    @property
    def num_points(self):
        return self.points.shape[0]


@dataclass(frozen=True)
class CutRule:
    points: np.ndarray    # (n, 2) physical
    weights: np.ndarray   # (n,) sum to element area
    sides: np.ndarray     # (n,) 0 outside / 1 inside


_ORBIT_PERMS = {
    "S3": [(0, 0, 0)],
    "S21": [(0, 0, 1), (0, 1, 0), (1, 0, 0)],
    "S111": [(0, 1, 2), (0, 2, 1), (1, 0, 2), (1, 2, 0), (2, 0, 1), (2, 1, 0)],
}


def _expand(orbits):
    pts, ws = [], []
    for kind, params, w in orbits:
        if kind == "S3":
            vals = (1.0 / 3.0,)
        elif kind == "S21":
            a = params[0]
            vals = (a, 1.0 - 2.0 * a)
        else:
            a, b = params
            vals = (a, b, 1.0 - a - b)
        for perm in _ORBIT_PERMS[kind]:
            pts.append([vals[perm[0]], vals[perm[1]], vals[perm[2]]])
            ws.append(w)
    return np.array(pts), np.array(ws)


_cache = {}


def _monomial_exactness(rule):
    """Max relative error integrating x^p y^q, p+q <= degree, on the
    reference triangle against p! q! / (p+q+2)!."""
    x = rule.points[:, 1]
    y = rule.points[:, 2]
    worst = 0.0
    for p in range(rule.degree + 1):
        for q in range(rule.degree + 1 - p):
            exact = factorial(p) * factorial(q) / factorial(p + q + 2)
            approx = 0.5 * np.sum(rule.weights * x ** p * y ** q)
            worst = max(worst, abs(approx - exact) / exact)
    return worst


def reference_rule(requested_degree):
    """Smallest embedded symmetric rule of degree >= requested_degree.

    Every rule is checked once (per process) for monomial exactness to
    1e-12 relative before being handed out.
    """
    degrees = sorted(RULES)
    if requested_degree > degrees[-1]:
        raise QuadratureError(
            f"requested degree {requested_degree} exceeds the embedded "
            f"maximum {degrees[-1]}")
    degree = next(d for d in degrees if d >= requested_degree)
    if degree not in _cache:
        pts, ws = _expand(RULES[degree])
        rule = QuadratureRule(points=pts, weights=ws, degree=degree)
        if not (ws > 0).all():
            raise QuadratureError(f"embedded degree-{degree} rule has "
                                  "non-positive weights")
        if abs(ws.sum() - 1.0) > 1e-14:
            raise QuadratureError(f"embedded degree-{degree} rule weights "
                                  f"sum to {ws.sum()!r}")
        err = _monomial_exactness(rule)
        if err > 1e-12:
            raise QuadratureError(f"embedded degree-{degree} rule fails the "
                                  f"monomial check: {err:.2e}")
        _cache[degree] = rule
    return _cache[degree]


def map_rule(rule, coords):
    """Map a reference rule to a physical triangle given by coords (3, 2)."""
    coords = np.asarray(coords, dtype=float)
    area = 0.5 * ((coords[1, 0] - coords[0, 0]) * (coords[2, 1] - coords[0, 1])
                  - (coords[2, 0] - coords[0, 0]) * (coords[1, 1] - coords[0, 1]))
    if area <= 0.0:
        raise QuadratureError(f"degenerate or mis-oriented element, area {area}")
    return rule.points @ coords, rule.weights * area


def edge_rule(order, p0, p1):
    """Gauss-Legendre rule with `order` points on the segment p0-p1;
    weights sum to the segment length."""
    if order < 1:
        raise QuadratureError("edge rule needs at least one point")
    p0 = np.asarray(p0, dtype=float)
    p1 = np.asarray(p1, dtype=float)
    t, w = np.polynomial.legendre.leggauss(order)
    t = 0.5 * (t + 1.0)
    length = np.linalg.norm(p1 - p0)
    if length == 0.0:
        raise QuadratureError("degenerate edge")
    pts = p0[None, :] + t[:, None] * (p1 - p0)[None, :]
    return pts, 0.5 * w * length


def _crossing(p0, p1, geom):
    """Transversal crossing parameters of segment p0-p1 with the circle."""
    d = p1 - p0
    f = p0 - np.asarray(geom.center, dtype=float)
    a = d @ d
    b = 2.0 * (f @ d)
    c = f @ f - geom.radius ** 2
    disc = b * b - 4.0 * a * c
    if disc <= 4.0 * np.finfo(float).eps * a * geom.radius ** 2:
        return []
    sq = np.sqrt(disc)
    q = -0.5 * (b + np.copysign(sq, b))
    out = []
    for t in (q / a, c / q if q != 0.0 else np.inf):
        if 1e-12 < t < 1.0 - 1e-12:
            out.append(float(t))
    return sorted(out)


def cut_element_rule(coords, geom, base, snap_tol=1e-12, diagnostics=None):
    """Composite rule on a cut element, aligned with the interface chord.

    Edge-circle crossings are computed with the quadratic formula; the chord
    between the two crossings splits the triangle into three sub-triangles
    (one containing the lone vertex, two covering the remaining quad).  The
    base rule is applied on each sub-triangle and every mapped point is
    tagged with the exact level-set side (the chord only defines the split).

    Degenerate crossing patterns (tangential grazing, a bulge through a
    single edge) fall back to the plain element rule with exact per-point
    tags and are counted in `diagnostics`.
    """
    coords = np.asarray(coords, dtype=float)
    phi = geom.level_set(coords)
    h = max(np.linalg.norm(coords[1] - coords[0]),
            np.linalg.norm(coords[2] - coords[1]),
            np.linalg.norm(coords[0] - coords[2]))
    snapped = np.abs(phi) < snap_tol * h
    sign = np.where(phi < 0, -1, 1)
    sign[snapped] = 0

    edge_pairs = ((0, 1), (1, 2), (2, 0))
    crossings = {}
    for (ia, ib) in edge_pairs:
        if sign[ia] * sign[ib] < 0:
            ts = _crossing(coords[ia], coords[ib], geom)
            if ts:
                crossings[(ia, ib)] = coords[ia] + ts[0] * (coords[ib] - coords[ia])

    ncross_total = sum(len(_crossing(coords[ia], coords[ib], geom))
                       for ia, ib in edge_pairs)
    if sign.min() >= 0 or sign.max() <= 0:
        if not snapped.any() and ncross_total < 2:
            raise QuadratureError("element is not cut by the interface")

    def tagged(pts, ws):
        return CutRule(points=pts, weights=ws,
                       sides=geom.side(pts).astype(np.int8))

    def from_subtris(subtris):
        all_pts, all_ws = [], []
        for tri in subtris:
            tri = np.asarray(tri)
            a2 = ((tri[1, 0] - tri[0, 0]) * (tri[2, 1] - tri[0, 1])
                  - (tri[2, 0] - tri[0, 0]) * (tri[1, 1] - tri[0, 1]))
            if a2 < 0:
                tri = tri[[0, 2, 1]]
            p, w = map_rule(base, tri)
            all_pts.append(p)
            all_ws.append(w)
        return tagged(np.vstack(all_pts), np.concatenate(all_ws))

    if len(crossings) == 2:
        (e1, _), (e2, _) = sorted(crossings.items())
        lone = (set(e1) & set(e2)).pop()
        others = sorted(set(range(3)) - {lone})
        # pair each crossing point with the non-lone vertex on its edge
        pA = next(p for e, p in crossings.items() if others[0] in e)
        pB = next(p for e, p in crossings.items() if others[1] in e)
        V = coords[lone]
        A = coords[others[0]]
        B = coords[others[1]]
        return from_subtris([[V, pA, pB], [pA, A, B], [pA, B, pB]])

    if len(crossings) == 1 and snapped.sum() == 1:
        # chord from a snapped vertex to the crossing on the opposite edge
        v0 = int(np.nonzero(snapped)[0][0])
        (ia, ib), R = next(iter(crossings.items()))
        if v0 not in (ia, ib):
            A, B = coords[ia], coords[ib]
            return from_subtris([[coords[v0], A, R], [coords[v0], R, B]])

    if diagnostics is not None:
        diagnostics["degenerate_cuts"] = diagnostics.get("degenerate_cuts", 0) + 1
    pts, ws = map_rule(base, coords)
    return tagged(pts, ws)
