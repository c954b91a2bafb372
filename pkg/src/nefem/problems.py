"""Experiment problem definitions, error norms, and fine-mesh P1 references.

Three built-in problems:

* ``example1`` -- oscillatory coefficient a_eps, constant source, zero
  Dirichlet data; no closed-form solution (errors against a fine reference).
* ``example2`` -- manufactured locally-oscillatory solution, unit
  coefficient, source from the analytic Laplacian.
* ``example3`` -- circular-interface problem with piecewise-constant
  coefficient, closed-form solution on both sides, nonhomogeneous Dirichlet
  data, and a quasi-distance input channel for the enrichment networks.
"""

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .linsolve import SolverConfig, solve_spd
from .mesh import InterfaceGeometry
from .quadrature import reference_rule


class ProblemError(ValueError):
    pass


@dataclass
class ProblemSpec:
    name: str
    coefficient: object                 # (pts, side) -> (n,)
    source: object                      # (pts, side) -> (n,)
    dirichlet: object                   # x -> value on the boundary
    grad_coefficient: object = None     # pts -> (n, 2); needed by estimator
    exact: object = None                # (pts, side) -> (n,)
    exact_grad: object = None           # (pts, side) -> (n, 2)
    interface: InterfaceGeometry = None
    distance: object = None             # x -> (D, grad D)
    distance_batch: object = None       # pts -> ((n,), (n, 2))

    def h1_seminorm(self, equad):
        """|u|_H1 of the exact solution via the run quadrature."""
        if self.exact_grad is None:
            raise ProblemError(f"{self.name} has no exact gradient")
        g = self.exact_grad(equad.pts, equad.side)
        return float(np.sqrt(np.sum(equad.w * np.sum(g * g, axis=1))))


def example1(eps=0.02, P=1.5):
    """-div(a_eps grad u) = -1 on the unit square, u = 0 on the boundary,
    with a_eps = 1/((2 + P sin(2 pi x/eps)) (2 + P sin(2 pi y/eps)))."""
    if not (0.0 < P < 2.0):
        raise ProblemError(f"P={P} must lie in (0, 2) to keep the "
                           "coefficient positive")
    if eps <= 0.0:
        raise ProblemError("eps must be positive")
    om = 2.0 * np.pi / eps

    def s(t):
        return 2.0 + P * np.sin(om * t)

    def coefficient(pts, side=None):
        return 1.0 / (s(pts[:, 0]) * s(pts[:, 1]))

    def grad_coefficient(pts):
        a = coefficient(pts)
        gx = -a * P * om * np.cos(om * pts[:, 0]) / s(pts[:, 0])
        gy = -a * P * om * np.cos(om * pts[:, 1]) / s(pts[:, 1])
        return np.column_stack([gx, gy])

    return ProblemSpec(
        name="example1",
        coefficient=coefficient,
        grad_coefficient=grad_coefficient,
        source=lambda pts, side=None: np.full(pts.shape[0], -1.0),
        dirichlet=lambda x: 0.0,
    )


def _example2_factors():
    def g(t):
        return np.exp(-100.0 * (t - 0.5) ** 2)

    def dg(t):
        return -200.0 * (t - 0.5) * g(t)

    def d2g(t):
        return (40_000.0 * (t - 0.5) ** 2 - 200.0) * g(t)

    w = 50.0 * np.pi

    def X(t):
        return np.sin(2 * np.pi * t) + g(t) * np.sin(w * (t - 0.5))

    def dX(t):
        return (2 * np.pi * np.cos(2 * np.pi * t)
                + dg(t) * np.sin(w * (t - 0.5))
                + w * g(t) * np.cos(w * (t - 0.5)))

    def d2X(t):
        return (-4 * np.pi ** 2 * np.sin(2 * np.pi * t)
                + d2g(t) * np.sin(w * (t - 0.5))
                + 2 * w * dg(t) * np.cos(w * (t - 0.5))
                - w ** 2 * g(t) * np.sin(w * (t - 0.5)))

    return X, dX, d2X


def example2():
    """Manufactured solution with a localized high-frequency cross pattern:
    u(x, y) = X(x) X(y) with X(t) = sin(2 pi t) + exp(-100 (t-1/2)^2)
    sin(50 pi (t-1/2)); a = 1, f = -Lap u, homogeneous Dirichlet data."""
    X, dX, d2X = _example2_factors()

    def exact(pts, side=None):
        return X(pts[:, 0]) * X(pts[:, 1])

    def exact_grad(pts, side=None):
        return np.column_stack([dX(pts[:, 0]) * X(pts[:, 1]),
                                X(pts[:, 0]) * dX(pts[:, 1])])

    def source(pts, side=None):
        return -(d2X(pts[:, 0]) * X(pts[:, 1])
                 + X(pts[:, 0]) * d2X(pts[:, 1]))

    return ProblemSpec(
        name="example2",
        coefficient=lambda pts, side=None: np.ones(pts.shape[0]),
        grad_coefficient=lambda pts: np.zeros((pts.shape[0], 2)),
        source=source,
        dirichlet=lambda x: 0.0,
        exact=exact,
        exact_grad=exact_grad,
    )


def example3(a1=0.1, a2=1.0, R=0.5, xm=(0.0, 0.15), bounds=(-1, 1, -1, 1),
             literal_distance=False):
    """Circular-interface problem on [-1,1]^2.

    Coefficient a1 inside the circle (radius R around xm), a2 outside; the
    closed-form solution is -2 a2 r^4 inside and -a1 r^2 + a1/4 - a2/8
    outside (r = |x - xm|), which matches value and flux across the
    interface.  The default quasi-distance is D = |r - R| (zero jump, normal
    derivative jump of magnitude 2 on the interface); `literal_distance`
    switches to the smooth D = r, which carries no interface kink.
    """
    x0, x1, y0, y1 = bounds
    xm = np.asarray(xm, dtype=float)
    if not (x0 < xm[0] - R and xm[0] + R < x1 and y0 < xm[1] - R
            and xm[1] + R < y1):
        raise ProblemError("interface circle touches the domain boundary")
    geom = InterfaceGeometry(center=(float(xm[0]), float(xm[1])), radius=R)

    def r2(pts):
        d = pts - xm
        return np.einsum("nd,nd->n", d, d)

    def coefficient(pts, side):
        return np.where(side == 1, a1, a2)

    def source(pts, side):
        return np.where(side == 1, 32.0 * a1 * a2 * r2(pts),
                        4.0 * a1 * a2)

    def exact(pts, side):
        rr = r2(pts)
        inner = -2.0 * a2 * rr ** 2
        outer = -a1 * rr + 0.25 * a1 - 0.125 * a2
        return np.where(side == 1, inner, outer)

    def exact_grad(pts, side):
        d = pts - xm
        rr = r2(pts)[:, None]
        inner = -8.0 * a2 * rr * d
        outer = -2.0 * a1 * d
        return np.where(side[:, None] == 1, inner, outer)

    def dirichlet(x):
        rr = float((x[0] - xm[0]) ** 2 + (x[1] - xm[1]) ** 2)
        return -a1 * rr + 0.25 * a1 - 0.125 * a2

    if literal_distance:
        def distance(x):
            d = np.asarray(x, dtype=float) - xm
            r = np.hypot(d[0], d[1])
            return r, d / max(r, 1e-300)

        def distance_batch(pts):
            d = pts - xm
            r = np.hypot(d[:, 0], d[:, 1])
            return r, d / np.maximum(r, 1e-300)[:, None]
    else:
        def distance(x):
            d = np.asarray(x, dtype=float) - xm
            r = np.hypot(d[0], d[1])
            return abs(r - R), np.sign(r - R) * d / max(r, 1e-300)

        def distance_batch(pts):
            d = pts - xm
            r = np.hypot(d[:, 0], d[:, 1])
            Dg = np.sign(r - R)[:, None] * d / np.maximum(r, 1e-300)[:, None]
            return np.abs(r - R), Dg

    return ProblemSpec(
        name="example3",
        coefficient=coefficient,
        source=source,
        dirichlet=dirichlet,
        exact=exact,
        exact_grad=exact_grad,
        interface=geom,
        distance=distance,
        distance_batch=distance_batch,
    )


# ---------------------------------------------------------------------------
# error norms
# ---------------------------------------------------------------------------

def truth_at_quadrature(problem_or_field, equad):
    """Exact values and gradients at every quadrature point, either from a
    problem's closed-form solution or from a fine-mesh reference field."""
    obj = problem_or_field
    if isinstance(obj, ReferenceField):
        return obj.eval_batch(equad.pts)
    if obj.exact is None or obj.exact_grad is None:
        raise ProblemError(f"{obj.name} has no exact solution; pass a "
                           "reference field")
    return obj.exact(equad.pts, equad.side), obj.exact_grad(equad.pts,
                                                            equad.side)


def error_norms(assembler, u_full, truth=None):
    """(L2 error, H1-seminorm error, energy error) of the discrete solution
    against `truth` (a problem with exact data, a ReferenceField, or a
    (values, gradients) pair aligned with the assembler's quadrature)."""
    if truth is None:
        truth = assembler.problem
    if isinstance(truth, tuple):
        tv, tg = truth
    else:
        tv, tg = truth_at_quadrature(truth, assembler.equad)
    vals, grads = assembler.solution_at_quadrature(u_full)
    eq = assembler.equad
    dv = vals - tv
    dg = grads - tg
    g2 = np.sum(dg * dg, axis=1)
    e_l2 = float(np.sqrt(np.sum(eq.w * dv * dv)))
    e_h1 = float(np.sqrt(np.sum(eq.w * g2)))
    e_e = float(np.sqrt(np.sum(eq.w * eq.a * g2)))
    return e_l2, e_h1, e_e


# ---------------------------------------------------------------------------
# fine-mesh P1 reference
# ---------------------------------------------------------------------------

@dataclass
class ReferenceField:
    """P1 nodal field on a structured mesh, evaluable anywhere via the
    structured point location."""

    nx: int
    ny: int
    bounds: tuple
    coefficients: np.ndarray   # ((nx+1)*(ny+1),) row-major nodal values

    def eval_batch(self, pts):
        x0, x1, y0, y1 = self.bounds
        dx = (x1 - x0) / self.nx
        dy = (y1 - y0) / self.ny
        fx = (pts[:, 0] - x0) / dx
        fy = (pts[:, 1] - y0) / dy
        i = np.clip(np.floor(fx).astype(np.int64), 0, self.nx - 1)
        j = np.clip(np.floor(fy).astype(np.int64), 0, self.ny - 1)
        fx = fx - i
        fy = fy - j
        stride = self.nx + 1
        c00 = self.coefficients[j * stride + i]
        c10 = self.coefficients[j * stride + i + 1]
        c11 = self.coefficients[(j + 1) * stride + i + 1]
        c01 = self.coefficients[(j + 1) * stride + i]
        lower = fx >= fy
        vals = np.where(lower,
                        c00 * (1 - fx) + c10 * (fx - fy) + c11 * fy,
                        c00 * (1 - fy) + c11 * fx + c01 * (fy - fx))
        gx = np.where(lower, (c10 - c00) / dx, (c11 - c01) / dx)
        gy = np.where(lower, (c11 - c10) / dy, (c01 - c00) / dy)
        return vals, np.column_stack([gx, gy])

    def nodal_values(self):
        return self.coefficients


def fem_reference(problem, nx, degree=20, config=None, chunk_cells=16_384):
    """Plain P1 Galerkin solve on an nx*nx structured mesh, assembled in
    vectorized chunks (hat gradients are constant, so only the coefficient
    mass and three source moments per element are integrated).

    Supports the non-interface problems; Example 3 has a closed-form
    solution and never needs a reference."""
    if problem.interface is not None:
        raise ProblemError("P1 reference fields are for smooth problems")
    if config is None:
        config = SolverConfig()
    rule = reference_rule(degree)
    bounds = (0.0, 1.0, 0.0, 1.0)
    x0, x1, y0, y1 = bounds
    ny = nx
    dx = (x1 - x0) / nx
    dy = (y1 - y0) / ny
    N = (nx + 1) * (ny + 1)
    stride = nx + 1

    # per-orientation constant hat gradients
    dlam_low = np.array([[-1.0 / dx, 0.0],
                         [1.0 / dx, -1.0 / dy],
                         [0.0, 1.0 / dy]])
    dlam_up = np.array([[0.0, -1.0 / dy],
                        [1.0 / dx, 0.0],
                        [-1.0 / dx, 1.0 / dy]])
    G_low = dlam_low @ dlam_low.T
    G_up = dlam_up @ dlam_up.T
    area = 0.5 * dx * dy
    bary = rule.points
    wts = rule.weights * area

    cells = np.arange(nx * ny, dtype=np.int64)
    rows_all, cols_all, data_all = [], [], []
    F = np.zeros(N)
    for lo in range(0, cells.shape[0], chunk_cells):
        cc = cells[lo:lo + chunk_cells]
        ci = cc % nx
        cj = cc // nx
        v00 = cj * stride + ci
        v10 = v00 + 1
        v01 = v00 + stride
        v11 = v01 + 1
        for tri, G in (((v00, v10, v11), G_low), ((v00, v11, v01), G_up)):
            verts = np.stack(tri, axis=1)                      # (C, 3)
            vx = x0 + (verts % stride) * dx
            vy = y0 + (verts // stride) * dy
            px = bary[None, :, 0] * vx[:, 0, None] \
                + bary[None, :, 1] * vx[:, 1, None] \
                + bary[None, :, 2] * vx[:, 2, None]
            py = bary[None, :, 0] * vy[:, 0, None] \
                + bary[None, :, 1] * vy[:, 1, None] \
                + bary[None, :, 2] * vy[:, 2, None]
            pts = np.column_stack([px.ravel(), py.ravel()])
            side = np.zeros(pts.shape[0], dtype=np.int8)
            aq = problem.coefficient(pts, side).reshape(px.shape)
            fq = problem.source(pts, side).reshape(px.shape)
            s_a = aq @ wts                                     # (C,)
            fmom = np.einsum("cq,q,qv->cv", fq, wts, bary)     # (C, 3)
            Aloc = s_a[:, None, None] * G[None, :, :]
            rows_all.append(np.repeat(verts, 3, axis=1).ravel())
            cols_all.append(np.tile(verts, (1, 3)).ravel())
            data_all.append(Aloc.ravel())
            np.add.at(F, verts.ravel(), fmom.ravel())
    A = sp.coo_matrix((np.concatenate(data_all),
                       (np.concatenate(rows_all), np.concatenate(cols_all))),
                      shape=(N, N)).tocsr()

    ii = np.arange(N) % stride
    jj = np.arange(N) // stride
    bnd = np.nonzero((ii == 0) | (ii == nx) | (jj == 0) | (jj == ny))[0]
    free = np.setdiff1d(np.arange(N), bnd)
    xb = x0 + ii[bnd] * dx
    yb = y0 + jj[bnd] * dy
    gvals = np.array([problem.dirichlet(np.array([xv, yv]))
                      for xv, yv in zip(xb, yb)])
    Ac = A.tocsc()
    A_red = Ac[:, free][free, :].tocsr()
    F_red = F[free] - Ac[:, bnd][free, :] @ gvals
    c = solve_spd(A_red, F_red, config)
    coeffs = np.zeros(N)
    coeffs[free] = c
    coeffs[bnd] = gvals
    return ReferenceField(nx=nx, ny=ny, bounds=bounds, coefficients=coeffs)
