"""Assembly of the stiffness matrix and load vector on the enriched space,
Dirichlet elimination with nodal lifting, the Ritz loss, and its gradient
with respect to the enrichment parameters.

The parameter gradient never differentiates the linear solve: with c solving
the Galerkin system, dLoss/dc = 0, so the total derivative reduces to the
partial one, evaluated in quadrature-point form

    dLoss/dtheta = sum_q w_q [ a(x_q) grad u_h . d_theta grad u_h
                               - f(x_q) d_theta u_h ]

with the coefficients frozen.  The interpolation subtraction contributes
through the patch-vertex values of each network, so vertex evaluations
receive cotangents as well.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import _kernels
from .mesh import classify_interface_elements
from .network import MlpEnrichment
from .quadrature import cut_element_rule, map_rule, reference_rule


class AssemblyError(ValueError):
    pass


# ---------------------------------------------------------------------------
# precomputed per-run data
# ---------------------------------------------------------------------------

@dataclass
class ElementQuadrature:
    """All quadrature data of a (mesh, problem, rule) triple, in one CSR-style
    block over elements: physical points, weights, barycentric coordinates,
    side tags, coefficient/source values, and quasi-distance data."""

    elem_ptr: np.ndarray      # (E+1,)
    pts: np.ndarray           # (NQ, 2)
    w: np.ndarray             # (NQ,)
    lam: np.ndarray           # (NQ, 3)
    side: np.ndarray          # (NQ,) int8
    a: np.ndarray             # (NQ,)
    f: np.ndarray             # (NQ,)
    D: np.ndarray             # (NQ,) quasi-distance (zeros in spatial mode)
    Dg: np.ndarray            # (NQ, 2)
    dlam: np.ndarray          # (E, 3, 2) constant hat gradients
    verts_xy: np.ndarray      # (E, 3, 2)
    verts_D: np.ndarray       # (E, 3)
    cut_tags: np.ndarray = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def num_elements(self):
        return self.elem_ptr.shape[0] - 1


def _hat_gradients(coords):
    """Constant gradients of the three hat functions on each element."""
    e1 = coords[:, 1] - coords[:, 0]
    e2 = coords[:, 2] - coords[:, 0]
    det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    dlam = np.empty((coords.shape[0], 3, 2))
    dlam[:, 1, 0] = e2[:, 1] / det
    dlam[:, 1, 1] = -e2[:, 0] / det
    dlam[:, 2, 0] = -e1[:, 1] / det
    dlam[:, 2, 1] = e1[:, 0] / det
    dlam[:, 0] = -dlam[:, 1] - dlam[:, 2]
    return dlam


def build_element_quadrature(mesh, problem, degree=20):
    """Precompute quadrature and problem data for every element.  Cut
    elements (interface problems) get the interface-aligned composite rule;
    everything else the plain mapped rule."""
    rule = reference_rule(degree)
    E = mesh.num_elements
    coords = mesh.nodes[mesh.triangles]
    dlam = _hat_gradients(coords)

    geom = getattr(problem, "interface", None)
    diagnostics = {}
    cut_tags = None
    counts = np.full(E, rule.num_points, dtype=np.int64)
    cut_rules = {}
    if geom is not None:
        cut_tags, _, diag = classify_interface_elements(mesh, geom)
        diagnostics.update(diag)
        for e in np.nonzero(cut_tags == 2)[0]:
            cr = cut_element_rule(coords[e], geom, rule,
                                  diagnostics=diagnostics)
            cut_rules[int(e)] = cr
            counts[e] = cr.points.shape[0]

    elem_ptr = np.zeros(E + 1, dtype=np.int64)
    np.cumsum(counts, out=elem_ptr[1:])
    NQ = int(elem_ptr[-1])
    pts = np.empty((NQ, 2))
    w = np.empty(NQ)
    lam = np.empty((NQ, 3))
    side = np.zeros(NQ, dtype=np.int8)

    base_bary = rule.points
    for e in range(E):
        lo, hi = elem_ptr[e], elem_ptr[e + 1]
        if e in cut_rules:
            cr = cut_rules[e]
            pts[lo:hi] = cr.points
            w[lo:hi] = cr.weights
            side[lo:hi] = cr.sides
            # barycentric coordinates of the cut-rule points
            T = np.column_stack([coords[e, 1] - coords[e, 0],
                                 coords[e, 2] - coords[e, 0]])
            rhs = (cr.points - coords[e, 0]).T
            sol = np.linalg.solve(T, rhs)
            lam[lo:hi, 1] = sol[0]
            lam[lo:hi, 2] = sol[1]
            lam[lo:hi, 0] = 1.0 - sol[0] - sol[1]
        else:
            p, ww = map_rule(rule, coords[e])
            pts[lo:hi] = p
            w[lo:hi] = ww
            lam[lo:hi] = base_bary
            if geom is not None and cut_tags[e] == 1:
                side[lo:hi] = 1

    a = problem.coefficient(pts, side)
    f = problem.source(pts, side)
    if not (np.isfinite(a).all() and np.isfinite(f).all()):
        raise AssemblyError("non-finite coefficient or source values")
    if problem.distance_batch is not None:
        D, Dg = problem.distance_batch(pts)
        vD, _ = problem.distance_batch(coords.reshape(-1, 2))
        verts_D = vD.reshape(E, 3)
    else:
        D = np.zeros(NQ)
        Dg = np.zeros((NQ, 2))
        verts_D = np.zeros((E, 3))

    return ElementQuadrature(elem_ptr=elem_ptr, pts=pts, w=w, lam=lam,
                             side=side, a=a, f=f, D=D, Dg=Dg, dlam=dlam,
                             verts_xy=np.ascontiguousarray(coords),
                             verts_D=verts_D, cut_tags=cut_tags,
                             diagnostics=diagnostics)


@dataclass
class SpaceArrays:
    """Kernel-friendly view of an EnrichmentSpace."""

    enr_act: np.ndarray       # (E, 3) uint8
    elem_dofs: np.ndarray     # (E, 6) global dof per local slot, -1 padding
    patch_ptr: np.ndarray     # (M+1,)
    patch_elems: np.ndarray
    patch_slots: np.ndarray
    anchors: np.ndarray       # (M, 2)
    stacked: bool             # True when all enrichments share an MLP layout
    params: np.ndarray = None     # (M, NP) when stacked
    dims: tuple = None
    scales: tuple = None
    dist_mode: int = 0


def build_space_arrays(space):
    mesh = space.mesh
    E = mesh.num_elements
    M = space.num_enrichment_dofs
    enr_act = np.zeros((E, 3), dtype=np.uint8)
    elem_dofs = np.full((E, 6), -1, dtype=np.int64)
    elem_dofs[:, :3] = mesh.triangles
    patches = [[] for _ in range(M)]
    for e in range(E):
        for s, v in enumerate(mesh.triangles[e]):
            r = space.node_rank.get(int(v))
            if r is not None:
                enr_act[e, s] = 1
                elem_dofs[e, 3 + s] = space.num_p1_dofs + r
                patches[r].append((e, s))
    patch_ptr = np.zeros(M + 1, dtype=np.int64)
    patch_ptr[1:] = np.cumsum([len(p) for p in patches])
    patch_elems = np.array([e for p in patches for (e, _) in p], dtype=np.int64)
    patch_slots = np.array([s for p in patches for (_, s) in p], dtype=np.int64)
    anchors = mesh.nodes[space.enriched_nodes].astype(float) if M else \
        np.zeros((0, 2))

    nets = space.enrichments
    stacked = (M > 0 and all(isinstance(n, MlpEnrichment) for n in nets)
               and len({n.dims for n in nets}) == 1
               and len({n.scales for n in nets}) == 1)
    arrays = SpaceArrays(enr_act=enr_act, elem_dofs=elem_dofs,
                         patch_ptr=patch_ptr, patch_elems=patch_elems,
                         patch_slots=patch_slots, anchors=anchors,
                         stacked=stacked)
    if stacked:
        arrays.dims = nets[0].dims
        arrays.scales = nets[0].scales
        arrays.params = np.ascontiguousarray(np.vstack([n.params for n in nets]))
        arrays.dist_mode = 1 if nets[0].input_mode == "spatial+distance" else 0
    elif M:
        arrays.dist_mode = 1 if space.input_mode == "spatial+distance" else 0
    return arrays


# ---------------------------------------------------------------------------
# assembled system
# ---------------------------------------------------------------------------

@dataclass
class AssembledSystem:
    A: sp.csr_matrix
    F: np.ndarray
    num_p1_dofs: int
    constrained_dofs: np.ndarray = None
    constrained_values: np.ndarray = None
    free_dofs: np.ndarray = None
    A_red: sp.csr_matrix = None
    F_red: np.ndarray = None

    @property
    def num_dofs(self):
        return self.F.shape[0]

    def full_coefficients(self, c_free):
        u = np.zeros(self.num_dofs)
        u[self.free_dofs] = c_free
        u[self.constrained_dofs] = self.constrained_values
        return u


class Assembler:
    """Reusable assembly context: precomputed quadrature + space arrays plus
    scratch blocks sized once per run."""

    def __init__(self, space, problem, degree=20, equad=None):
        self.space = space
        self.problem = problem
        self.equad = equad or build_element_quadrature(space.mesh, problem,
                                                       degree)
        self.arrays = build_space_arrays(space)
        eq = self.equad
        E = eq.num_elements
        NQ = eq.pts.shape[0]
        self.enr_val = np.zeros((NQ, 3))
        self.enr_grad = np.zeros((NQ, 3, 2))
        self.vert_val = np.zeros((E, 3, 3))
        self.Aloc = np.zeros((E, 6, 6))
        self.Floc = np.zeros((E, 6))
        self.basis_val = np.zeros((NQ, 6))
        self.basis_grad = np.zeros((NQ, 6, 2))
        # COO scatter pattern (fixed per run)
        dofs = self.arrays.elem_dofs
        rows = np.repeat(dofs, 6, axis=1).reshape(E, 6, 6)
        cols = np.tile(dofs, (1, 6)).reshape(E, 6, 6)
        keep = (rows >= 0) & (cols >= 0)
        self._rows = rows[keep]
        self._cols = cols[keep]
        self._keep = keep
        fkeep = dofs >= 0
        self._frows = dofs[fkeep]
        self._fkeep = fkeep
        self._filled_version = None

    def _fill_enrichment(self):
        """Evaluate every enrichment at its patch quadrature points and patch
        vertices.  Uses the stacked kernel when possible, the generic object
        path otherwise (e.g. analytic stubs)."""
        arr = self.arrays
        eq = self.equad
        if arr.stacked:
            arr.params = np.ascontiguousarray(
                np.vstack([n.params for n in self.space.enrichments]))
            d, h1, h2, _ = arr.dims
            n1, n2 = arr.scales
            _kernels.fill_enrichment(
                arr.params, arr.anchors, d, h1, h2, float(n1), float(n2),
                arr.patch_ptr, arr.patch_elems, arr.patch_slots,
                eq.elem_ptr, eq.pts, arr.dist_mode, eq.D, eq.Dg,
                eq.verts_xy, eq.verts_D,
                self.enr_val, self.enr_grad, self.vert_val)
        else:
            for m in range(self.space.num_enrichment_dofs):
                enr = self.space.enrichments[m]
                for idx in range(arr.patch_ptr[m], arr.patch_ptr[m + 1]):
                    K = arr.patch_elems[idx]
                    s = arr.patch_slots[idx]
                    lo, hi = eq.elem_ptr[K], eq.elem_ptr[K + 1]
                    for q in range(lo, hi):
                        x = eq.pts[q]
                        dd = ((eq.D[q], eq.Dg[q]) if arr.dist_mode else None)
                        v, g = enr.eval_with_gradient(x, d=dd)
                        self.enr_val[q, s] = v
                        self.enr_grad[q, s] = g
                    for vtx in range(3):
                        x = eq.verts_xy[K, vtx]
                        dd = ((eq.verts_D[K, vtx], np.zeros(2))
                              if arr.dist_mode else None)
                        v, _ = enr.eval_with_gradient(x, d=dd)
                        self.vert_val[K, s, vtx] = v

    def assemble(self):
        """Stiffness matrix and load vector over all N+M DoFs."""
        eq = self.equad
        self._fill_enrichment()
        _kernels.local_system(eq.elem_ptr, eq.w, eq.a, eq.f, eq.lam, eq.dlam,
                              self.arrays.enr_act,
                              self.enr_val, self.enr_grad, self.vert_val,
                              self.Aloc, self.Floc,
                              self.basis_val, self.basis_grad)
        n = self.space.num_dofs
        A = sp.coo_matrix((self.Aloc[self._keep], (self._rows, self._cols)),
                          shape=(n, n)).tocsr()
        F = np.zeros(n)
        np.add.at(F, self._frows, self.Floc[self._fkeep])
        return AssembledSystem(A=A, F=F, num_p1_dofs=self.space.num_p1_dofs)

    # -- gradient -----------------------------------------------------------

    def loss_theta_gradient(self, system, c_free, rtol=1e-8):
        """Per-network gradient of the Ritz loss at the solved coefficients.

        Requires the residual of the reduced system to be within `rtol`;
        the envelope argument is invalid otherwise.
        """
        if system.A_red is None:
            raise AssemblyError("apply boundary conditions before the "
                                "parameter gradient")
        resid = system.A_red @ c_free - system.F_red
        scale = max(float(np.linalg.norm(system.F_red)), 1e-30)
        if np.linalg.norm(resid) > rtol * scale:
            raise AssemblyError(
                f"coefficients do not solve the reduced system "
                f"(relative residual {np.linalg.norm(resid) / scale:.2e}); "
                f"the gradient shortcut requires a converged solve")
        u_full = system.full_coefficients(c_free)
        eq = self.equad
        arr = self.arrays
        E = eq.num_elements
        coef_loc = np.where(arr.elem_dofs >= 0,
                            u_full[np.maximum(arr.elem_dofs, 0)], 0.0)
        enr_coef = coef_loc[:, 3:].copy()
        NQ = eq.pts.shape[0]
        qcot_v = np.zeros((NQ, 3))
        qcot_g = np.zeros((NQ, 3, 2))
        vcot = np.zeros((E, 3, 3))
        _kernels.cotangents(eq.elem_ptr, eq.w, eq.a, eq.f, eq.lam, eq.dlam,
                            arr.enr_act, self.basis_grad, coef_loc, enr_coef,
                            qcot_v, qcot_g, vcot)
        M = self.space.num_enrichment_dofs
        if arr.stacked:
            grads = np.zeros_like(arr.params)
            d, h1, h2, _ = arr.dims
            n1, n2 = arr.scales
            _kernels.backward_all(
                arr.params, arr.anchors, d, h1, h2, float(n1), float(n2),
                arr.patch_ptr, arr.patch_elems, arr.patch_slots,
                eq.elem_ptr, eq.pts, arr.dist_mode, eq.D, eq.Dg,
                eq.verts_xy, eq.verts_D, qcot_v, qcot_g, vcot, grads)
            return grads
        grads = [np.zeros(enr.num_params) if hasattr(enr, "num_params")
                 else None for enr in self.space.enrichments]
        for m in range(M):
            enr = self.space.enrichments[m]
            g = grads[m]
            for idx in range(arr.patch_ptr[m], arr.patch_ptr[m + 1]):
                K = arr.patch_elems[idx]
                s = arr.patch_slots[idx]
                lo, hi = eq.elem_ptr[K], eq.elem_ptr[K + 1]
                X = eq.pts[lo:hi] - arr.anchors[m]
                Xv = eq.verts_xy[K] - arr.anchors[m]
                wv = qcot_v[lo:hi, s]
                if arr.dist_mode:
                    X = np.column_stack([X, eq.D[lo:hi]])
                    Xv = np.column_stack([Xv, eq.verts_D[K]])
                    wg = np.column_stack(
                        [qcot_g[lo:hi, s, :],
                         np.einsum("qd,qd->q", qcot_g[lo:hi, s, :],
                                   eq.Dg[lo:hi])])
                    wgv = np.zeros((3, 3))
                else:
                    wg = qcot_g[lo:hi, s, :]
                    wgv = np.zeros((3, 2))
                g += enr.accumulate_param_gradient(X, wv, wg)
                g += enr.accumulate_param_gradient(Xv, vcot[K, s], wgv)
        return grads

    # -- evaluation helpers reused by error norms and history tracking -------

    def solution_at_quadrature(self, u_full):
        """(values, gradients) of the discrete solution at every quadrature
        point, from the basis blocks of the last assemble()."""
        arr = self.arrays
        eq = self.equad
        coef_loc = np.where(arr.elem_dofs >= 0,
                            u_full[np.maximum(arr.elem_dofs, 0)], 0.0)
        counts = np.diff(eq.elem_ptr)
        cpe = np.repeat(coef_loc, counts, axis=0)
        vals = np.einsum("qi,qi->q", cpe, self.basis_val)
        grads = np.einsum("qi,qid->qd", cpe, self.basis_grad)
        return vals, grads


def assemble(space, problem, degree=20):
    """One-shot assembly; returns (system, assembler)."""
    asm = Assembler(space, problem, degree=degree)
    return asm.assemble(), asm


def apply_dirichlet(system, g, mesh, dofs=None):
    """Eliminate boundary P1 DoFs with nodal values of g; enrichment DoFs are
    never constrained (their basis functions vanish on the boundary)."""
    if dofs is None:
        dofs = mesh.boundary_nodes
    dofs = np.asarray(dofs, dtype=np.int64)
    if (dofs >= system.num_p1_dofs).any():
        raise AssemblyError("cannot constrain an enrichment DoF")
    if callable(g):
        values = np.array([g(mesh.nodes[i]) for i in dofs], dtype=float)
    else:
        values = np.full(dofs.shape[0], float(g))
    free = np.setdiff1d(np.arange(system.num_dofs), dofs)
    A = system.A.tocsc()
    system.constrained_dofs = dofs
    system.constrained_values = values
    system.free_dofs = free
    system.A_red = A[:, free][free, :].tocsr()
    system.F_red = system.F[free] - A[:, dofs][free, :] @ values
    return system


def ritz_loss(system, c_free):
    """0.5 c^T A c - c^T F on the reduced system (lifting folded in)."""
    if system.A_red is None:
        raise AssemblyError("apply boundary conditions before the loss")
    return float(0.5 * c_free @ (system.A_red @ c_free)
                 - c_free @ system.F_red)
