"""Generate symmetric Gauss-type quadrature rules on the reference triangle.

Builds fully symmetric (D3-invariant) rules with positive weights and strictly
interior points by moment fitting in the orthonormal Dubiner basis:

1. an oversized exact rule is found by non-negative least squares over a dense
   pool of symmetry orbits,
2. orbits are eliminated greedily, re-solving the nonlinear moment system with
   Levenberg-Marquardt after each removal,
3. the surviving orbits are polished with Gauss-Newton to machine precision.

The output is written as importable Python source (orbit-compact form) for
embedding into the package.  Counts are checked against the expected point
budget for the top-degree rule (78 points at degree 20).

Usage: python3 tools/gen_triangle_rules.py [outfile]
"""

import sys

import numpy as np
from scipy.optimize import least_squares, nnls
from scipy.special import eval_jacobi, roots_legendre


# ----------------------------------------------------------------------------
# Dubiner orthonormal basis on T = {(x, y): x, y >= 0, x + y <= 1}
# ----------------------------------------------------------------------------

def _jacobi_all(nmax, alpha, beta, x):
    """P_0..P_nmax^(alpha,beta)(x) via the three-term recurrence, (nmax+1, P)."""
    x = np.asarray(x, dtype=float)
    out = np.empty((nmax + 1,) + x.shape)
    out[0] = 1.0
    if nmax == 0:
        return out
    out[1] = (alpha + 1.0) + (alpha + beta + 2.0) * (x - 1.0) / 2.0
    for n in range(2, nmax + 1):
        c = 2.0 * n + alpha + beta
        a1 = 2.0 * n * (n + alpha + beta) * (c - 2.0)
        a2 = (c - 1.0) * (alpha * alpha - beta * beta)
        a3 = (c - 1.0) * c * (c - 2.0)
        a4 = 2.0 * (n + alpha - 1.0) * (n + beta - 1.0) * c
        out[n] = ((a2 + a3 * x) * out[n - 1] - a4 * out[n - 2]) / a1
    return out


def dubiner_pairs(degree):
    return [(i, j) for d in range(degree + 1) for i in range(d + 1) for j in [d - i]]


_pair_idx_cache = {}


def _pair_indices(pairs):
    key = tuple(pairs)
    if key not in _pair_idx_cache:
        I = np.array([i for i, _ in pairs])
        J = np.array([j for _, j in pairs])
        norms = np.sqrt(2.0 * (2.0 * I + 1.0) * (I + J + 1.0))
        _pair_idx_cache[key] = (I, J, norms)
    return _pair_idx_cache[key]


def dubiner_eval(pairs, x, y, want_grad=False):
    """Values (and optionally x/y gradients) of orthonormal Dubiner modes."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    deg = max(i + j for i, j in pairs)
    I, J, norms = _pair_indices(pairs)
    ym = np.minimum(y, 1.0 - 1e-14)
    a = 2.0 * x / (1.0 - ym) - 1.0
    b = 2.0 * y - 1.0
    P = _jacobi_all(deg, 0.0, 0.0, a)
    pw = np.cumprod(np.vstack([np.ones_like(ym)[None],
                               np.repeat((1.0 - ym)[None], deg, axis=0)]),
                    axis=0)
    vals = np.empty((len(pairs),) + x.shape)
    grads = np.empty((len(pairs), 2) + x.shape) if want_grad else None
    if want_grad:
        dPsrc = _jacobi_all(max(deg - 1, 0), 1.0, 1.0, a)
        da_dx = 2.0 / (1.0 - ym)
        da_dy = 2.0 * x / (1.0 - ym) ** 2
    for i in range(deg + 1):
        rows = np.nonzero(I == i)[0]
        if rows.size == 0:
            continue
        Qi = _jacobi_all(deg - i, 2.0 * i + 1.0, 0.0, b)
        Qj = Qi[J[rows]]
        base = P[i] * pw[i]
        vals[rows] = norms[rows, None] * base * Qj
        if want_grad:
            dPi = 0.5 * (i + 1.0) * dPsrc[i - 1] if i > 0 else np.zeros_like(a)
            if deg - i >= 1:
                dsrc = _jacobi_all(deg - i - 1, 2.0 * i + 2.0, 1.0, b)
                fac = 0.5 * (np.arange(1, deg - i + 1) + 2.0 * i + 2.0)
                dQi = np.vstack([np.zeros_like(b)[None],
                                 fac[:, None] * dsrc[:deg - i]])
            else:
                dQi = np.zeros_like(Qi)
            dQj = dQi[J[rows]]
            pw1 = i * pw[i - 1] if i > 0 else np.zeros_like(x)
            grads[rows, 0] = norms[rows, None] * dPi * da_dx * pw[i] * Qj
            grads[rows, 1] = norms[rows, None] * (
                dPi * da_dy * pw[i] * Qj - P[i] * pw1 * Qj
                + base * dQj * 2.0)
    return (vals, grads) if want_grad else vals


def reference_moments(pairs):
    """ [integral of phi_k over T] via a Duffy-mapped tensor Gauss rule."""
    n = 48
    t, w = roots_legendre(n)
    t = 0.5 * (t + 1.0)
    w = 0.5 * w
    U, V = np.meshgrid(t, t, indexing="ij")
    W = np.outer(w, w) * (1.0 - V)
    X = U * (1.0 - V)
    vals = dubiner_eval(pairs, X.ravel(), V.ravel())
    return vals @ W.ravel()


# ----------------------------------------------------------------------------
# Symmetry orbits (barycentric): S3 centroid, S21(a) -> 3 pts, S111(a,b) -> 6
# ----------------------------------------------------------------------------

def orbit_points(kind, params):
    if kind == "S3":
        bary = [(1 / 3, 1 / 3, 1 / 3)]
    elif kind == "S21":
        a = params[0]
        c = 1.0 - 2.0 * a
        bary = [(a, a, c), (a, c, a), (c, a, a)]
    else:  # S111
        a, b = params
        c = 1.0 - a - b
        bary = [(a, b, c), (a, c, b), (b, a, c), (b, c, a), (c, a, b), (c, b, a)]
    pts = np.array([(l2, l3) for (_, l2, l3) in bary])
    return pts


ORBIT_SIZE = {"S3": 1, "S21": 3, "S111": 6}
ORBIT_NPAR = {"S3": 0, "S21": 1, "S111": 2}


def orbit_param_grads(kind, params):
    """d(point)/d(param) for every point of the orbit, shape (npts, npar, 2)."""
    if kind == "S3":
        return np.zeros((1, 0, 2))
    if kind == "S21":
        # bary (a,a,c),(a,c,a),(c,a,a) with c = 1-2a; coords are (l2, l3)
        return np.array([[[1.0, -2.0]], [[-2.0, 1.0]], [[1.0, 1.0]]])
    # S111: perms of (a,b,c), c = 1-a-b, coords (l2, l3)
    g = []
    for (i2, i3) in [(1, 2), (2, 1), (0, 2), (2, 0), (0, 1), (1, 0)]:
        row = np.zeros((2, 2))
        for ax, idx in [(0, i2), (1, i3)]:
            if idx == 0:
                row[0, ax] += 1.0
            elif idx == 1:
                row[1, ax] += 1.0
            else:
                row[0, ax] -= 1.0
                row[1, ax] -= 1.0
        g.append(row)
    return np.array(g)


def pack(orbits):
    x = []
    for kind, params, w in orbits:
        x.extend(params)
        x.append(w)
    return np.array(x)


def unpack(x, structure):
    orbits, k = [], 0
    for kind in structure:
        npar = ORBIT_NPAR[kind]
        orbits.append((kind, tuple(x[k:k + npar]), x[k + npar]))
        k += npar + 1
    return orbits


def residual_and_jac(x, structure, pairs, target):
    orbits = unpack(x, structure)
    all_pts = [orbit_points(kind, params) for kind, params, _ in orbits]
    offs = np.cumsum([0] + [p.shape[0] for p in all_pts])
    P = np.vstack(all_pts)
    vals, grads = dubiner_eval(pairs, P[:, 0], P[:, 1], want_grad=True)
    r = -target.copy()
    J = np.zeros((len(pairs), len(x)))
    col = 0
    for o, (kind, params, w) in enumerate(orbits):
        lo, hi = offs[o], offs[o + 1]
        v = vals[:, lo:hi]
        g = grads[:, :, lo:hi]
        r += w * v.sum(axis=1)
        pg = orbit_param_grads(kind, params)
        npar = ORBIT_NPAR[kind]
        for p in range(npar):
            # sum over orbit points of grad(phi) . d(point)/d(param)
            J[:, col + p] = w * np.einsum("kdp,pd->k", g, pg[:, p, :])
        J[:, col + npar] = v.sum(axis=1)
        col += npar + 1
    return r, J


def solve_lm(orbits, pairs, target, max_nfev=250):
    structure = [o[0] for o in orbits]
    x0 = pack(orbits)
    res = least_squares(
        lambda x: np.nan_to_num(residual_and_jac(x, structure, pairs, target)[0],
                                nan=1e6, posinf=1e6, neginf=-1e6),
        x0,
        jac=lambda x: np.nan_to_num(residual_and_jac(x, structure, pairs, target)[1],
                                    nan=0.0, posinf=1e6, neginf=-1e6),
        method="lm", xtol=1e-15, ftol=1e-15, gtol=1e-15, max_nfev=max_nfev,
    )
    return unpack(res.x, structure), np.max(np.abs(res.fun))


def gauss_newton_polish(orbits, pairs, target, iters=4):
    structure = [o[0] for o in orbits]
    x = pack(orbits)
    for _ in range(iters):
        r, J = residual_and_jac(x, structure, pairs, target)
        dx, *_ = np.linalg.lstsq(J, -r, rcond=None)
        x = x + dx
    r, _ = residual_and_jac(x, structure, pairs, target)
    return unpack(x, structure), np.max(np.abs(r))


def admissible(orbits, tol=1e-7):
    for kind, params, w in orbits:
        if w <= tol:
            return False
        pts = orbit_points(kind, params)
        lam = np.column_stack([1.0 - pts.sum(axis=1), pts])
        if lam.min() <= tol:
            return False
    # orbits of the same kind must stay distinct
    for kind in ("S21", "S111"):
        ps = [np.sort(np.array(p)) for k, p, _ in orbits if k == kind]
        for i in range(len(ps)):
            for j in range(i + 1, len(ps)):
                if np.max(np.abs(ps[i] - ps[j])) < 1e-5:
                    return False
    return True


def npoints(orbits):
    return sum(ORBIT_SIZE[k] for k, _, _ in orbits)


# ----------------------------------------------------------------------------
# Pipeline: NNLS seed -> greedy orbit elimination -> polish
# ----------------------------------------------------------------------------

def nnls_seed(degree, pairs, target, rng):
    pool = [("S3", ())]
    for a in np.linspace(0.003, 0.498, 260):
        pool.append(("S21", (a,)))
    na = 90
    for a in np.linspace(0.004, 0.96, na):
        for b in np.linspace(0.003, (1.0 - a) / 2.0 * 0.985, 26):
            if abs(a - b) > 1e-3:
                pool.append(("S111", (a, b)))
    A = np.zeros((len(pairs), len(pool)))
    for j, (kind, params) in enumerate(pool):
        pts = orbit_points(kind, params)
        A[:, j] = dubiner_eval(pairs, pts[:, 0], pts[:, 1]).sum(axis=1)
    w, rnorm = nnls(A, target, maxiter=20 * A.shape[1])
    active = np.nonzero(w > 1e-12)[0]
    orbits = [(pool[j][0], pool[j][1], w[j]) for j in active]
    orbits, resid = solve_lm(orbits, pairs, target)
    return orbits, resid


def _kick(orbits, rng, scale):
    out = []
    for kind, params, w in orbits:
        params = tuple(p + rng.normal(0.0, scale) for p in params)
        out.append((kind, params, w * (1.0 + rng.normal(0.0, 5.0 * scale))))
    return out


def _try(trial, pairs, target, rng, kicks=2):
    if not trial:
        return None
    cand, resid = solve_lm(trial, pairs, target)
    if resid < 1e-13 and admissible(cand):
        return cand
    for _ in range(kicks):
        cand, resid = solve_lm(_kick(trial, rng, 0.01), pairs, target)
        if resid < 1e-13 and admissible(cand):
            return cand
    return None


def _conversions(orbits, i):
    """Cheaper replacements for orbit i (6->3 or 3->1 points)."""
    kind, params, w = orbits[i]
    rest = [o for j, o in enumerate(orbits) if j != i]
    if kind == "S111":
        a, b = params
        c = 1.0 - a - b
        for m in ((a + b) / 2, (a + c) / 2, (b + c) / 2):
            if 0.0 < m < 0.5:
                yield rest + [("S21", (m,), 2.0 * w)]
    elif kind == "S21":
        yield rest + [("S3", (), 3.0 * w)]


def eliminate(orbits, pairs, target, rng, verbose=True):
    improved = True
    while improved:
        improved = False
        order = sorted(range(len(orbits)), key=lambda i: orbits[i][2] * ORBIT_SIZE[orbits[i][0]])
        # try dropping the k weakest orbits at once, then fall back to singles
        for k in (6, 3, 1):
            if k > 1 and len(order) > k:
                drop = set(order[:k])
                trial = [o for j, o in enumerate(orbits) if j not in drop]
                cand = _try(trial, pairs, target, rng, kicks=0)
                if cand is not None:
                    orbits = cand
                    improved = True
                    break
            elif k == 1:
                for i in order:
                    trial = [o for j, o in enumerate(orbits) if j != i]
                    cand = _try(trial, pairs, target, rng)
                    if cand is not None:
                        orbits = cand
                        improved = True
                        break
        if not improved:
            # removal failed everywhere: try shrinking one orbit instead
            for i in order:
                for trial in _conversions(orbits, i):
                    cand = _try(trial, pairs, target, rng, kicks=1)
                    if cand is not None:
                        orbits = cand
                        improved = True
                        break
                if improved:
                    break
        if improved and verbose:
            print(f"    -> {npoints(orbits)} points "
                  f"({sum(1 for o in orbits if o[0] == 'S21')} S21, "
                  f"{sum(1 for o in orbits if o[0] == 'S111')} S111)",
                  flush=True)
    return orbits


def force_structure(orbits, n3, n21, n111, pairs, target, rng, tries=150):
    """Project onto a fixed (S3, S21, S111) orbit structure and re-solve."""
    s21 = sorted([o for o in orbits if o[0] == "S21"], key=lambda o: -o[2])
    s111 = sorted([o for o in orbits if o[0] == "S111"], key=lambda o: -o[2])
    for t in range(tries):
        base3 = [("S3", (), rng.uniform(0.01, 0.05))] if n3 else []
        base21 = list(s21[:n21])
        base111 = list(s111[:n111])
        while len(base21) < n21:
            base21.append(("S21", (rng.uniform(0.02, 0.48),), rng.uniform(0.005, 0.03)))
        while len(base111) < n111:
            a = rng.uniform(0.02, 0.9)
            base111.append(("S111", (a, rng.uniform(0.01, (1 - a) / 2)), rng.uniform(0.002, 0.02)))
        trial = base3 + base21 + base111
        if t > 0:
            trial = _kick(trial, rng, 0.004 * (1 + t % 5))
        cand, resid = solve_lm(trial, pairs, target)
        if resid < 1e-13 and admissible(cand):
            return cand
    return None


def build_rule(degree, rng, verbose=True, target_npts=None):
    pairs = dubiner_pairs(degree)
    target = reference_moments(pairs)
    if verbose:
        print(f"  degree {degree}: {len(pairs)} moment conditions")
    orbits, resid = nnls_seed(degree, pairs, target, rng)
    if verbose:
        print(f"    seed: {npoints(orbits)} points, resid {resid:.1e}")
    orbits = eliminate(orbits, pairs, target, rng, verbose)
    if target_npts is not None and npoints(orbits) > target_npts:
        # known-count structures with n3 + 3*n21 + 6*n111 = target
        for n111 in range((target_npts // 6), -1, -1):
            for n3 in (0, 1):
                rem = target_npts - n3 - 6 * n111
                if rem < 0 or rem % 3:
                    continue
                n21 = rem // 3
                if n3 + 2 * n21 + 3 * n111 < _invariant_count(degree):
                    continue
                if verbose:
                    print(f"    forcing structure ({n3} S3, {n21} S21, {n111} S111)")
                cand = force_structure(orbits, n3, n21, n111, pairs, target, rng)
                if cand is not None:
                    orbits = cand
                    break
            if npoints(orbits) == target_npts:
                break
    orbits, resid = gauss_newton_polish(orbits, pairs, target)
    assert resid < 5e-14, f"degree {degree}: polish residual {resid}"
    assert admissible(orbits, tol=1e-9)
    return orbits, resid


def _invariant_count(degree):
    return sum(1 for p in range(degree + 1) for q in range(degree + 1)
               if 2 * p + 3 * q <= degree)


def monomial_check(orbits, degree):
    """Max relative error over x^p y^q, p+q <= degree (exact: p!q!/(p+q+2)!)."""
    from math import factorial
    pts, ws = [], []
    for kind, params, w in orbits:
        for pt in orbit_points(kind, params):
            pts.append(pt)
            ws.append(w)
    pts, ws = np.array(pts), np.array(ws)
    worst = 0.0
    for p in range(degree + 1):
        for q in range(degree + 1 - p):
            exact = factorial(p) * factorial(q) / factorial(p + q + 2)
            got = np.sum(ws * pts[:, 0] ** p * pts[:, 1] ** q)
            worst = max(worst, abs(got - exact) / exact)
    return worst


def main():
    out = sys.argv[1] if len(sys.argv) > 1 else "rules_out.py"
    rng = np.random.default_rng(0)
    # (degree, required point count or None)
    targets = [(2, 3), (4, 6), (5, 7), (6, 12), (8, None), (10, None),
               (12, None), (14, None), (16, None), (18, None), (20, 78)]
    rules = {1: [("S3", (), 0.5)]}
    for d, want in targets:
        orbits, resid = build_rule(d, rng, target_npts=want)
        err = monomial_check(orbits, d)
        print(f"  degree {d}: {npoints(orbits)} points, moment resid {resid:.2e}, "
              f"monomial rel err {err:.2e}")
        assert err < 1e-13, f"degree {d} fails monomial check: {err}"
        if want is not None and npoints(orbits) != want:
            print(f"  WARNING: degree {d} has {npoints(orbits)} points, wanted {want}")
        rules[d] = orbits

    with open(out, "w") as f:
        f.write("# Symmetric positive-weight Gauss-type rules on the reference triangle,\n")
        f.write("# in orbit-compact form: (orbit kind, orbit parameters, weight per point).\n")
        f.write("# Expanded weights sum to 1; orbit kinds: S3 centroid (1 pt),\n")
        f.write("# S21 (3 pts), S111 (6 pts).  Key is the polynomial exactness degree.\n")
        f.write("RULES = {\n")
        for d in sorted(rules):
            f.write(f"    {d}: [\n")
            for kind, params, w in rules[d]:
                ps = ", ".join(repr(float(p)) for p in params)
                f.write(f'        ("{kind}", ({ps}{"," if len(params) == 1 else ""}), '
                        f"{float(2.0 * w)!r}),\n")
            f.write("    ],\n")
        f.write("}\n")
    print(f"wrote {out}")


if __name__ == "__main__":
    main()
