"""Structured conforming triangulations of a rectangle.

Each grid cell is split along its lower-left to upper-right diagonal, giving
the classic "union jack"-free single-diagonal pattern.  Node numbering is
row-major (x fastest), element numbering cell-major with the lower triangle
first.  Meshes are immutable after construction.
"""

from dataclasses import dataclass, field

import numpy as np


class MeshError(ValueError):
    pass


@dataclass(frozen=True)
class InterfaceGeometry:
    """Circular interface: level set ||x - center|| - radius."""

    center: tuple
    radius: float

    def __post_init__(self):
        if self.radius <= 0.0:
            raise MeshError("interface radius must be positive")

    def level_set(self, x):
        x = np.asarray(x, dtype=float)
        d = x[..., 0] - self.center[0], x[..., 1] - self.center[1]
        return np.hypot(d[0], d[1]) - self.radius

    def side(self, x):
        """0 outside the circle, 1 inside."""
        return (self.level_set(x) < 0.0).astype(np.int8)


@dataclass(frozen=True)
class Mesh:
    nodes: np.ndarray          # (N, 2)
    triangles: np.ndarray      # (E, 3) CCW vertex indices
    edges: np.ndarray          # (nE, 2) sorted node pairs
    edge_elems: np.ndarray     # (nE, 2) adjacent element ids, -1 for boundary
    edge_boundary: np.ndarray  # (nE,) bool
    node_patches: list         # per-node tuple of incident element ids
    h: float                   # longest edge in the mesh
    bounds: tuple              # (x0, x1, y0, y1)
    nx: int
    ny: int
    boundary_nodes: np.ndarray = field(default=None)

    @property
    def num_nodes(self):
        return self.nodes.shape[0]

    @property
    def num_elements(self):
        return self.triangles.shape[0]

    def element_coords(self, e):
        return self.nodes[self.triangles[e]]

    def areas(self):
        p = self.nodes[self.triangles]
        return 0.5 * ((p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1])
                      - (p[:, 2, 0] - p[:, 0, 0]) * (p[:, 1, 1] - p[:, 0, 1]))

    def longest_edges(self):
        """Per-element longest edge length."""
        p = self.nodes[self.triangles]
        l0 = np.linalg.norm(p[:, 1] - p[:, 0], axis=1)
        l1 = np.linalg.norm(p[:, 2] - p[:, 1], axis=1)
        l2 = np.linalg.norm(p[:, 0] - p[:, 2], axis=1)
        return np.maximum(np.maximum(l0, l1), l2)

    def dump_text(self, stream):
        stream.write(f"# nodes {self.num_nodes}\n")
        for i, (x, y) in enumerate(self.nodes):
            stream.write(f"{i} {x!r} {y!r}\n")
        stream.write(f"# triangles {self.num_elements}\n")
        for e, (v0, v1, v2) in enumerate(self.triangles):
            stream.write(f"{e} {v0} {v1} {v2}\n")


def build_structured_mesh(nx, ny, bounds=(0.0, 1.0, 0.0, 1.0)):
    """Structured triangulation of [x0,x1] x [y0,y1] with nx*ny cells.

    Every cell is split along its (i,j) -> (i+1,j+1) diagonal; lower triangle
    (v00, v10, v11) comes before the upper (v00, v11, v01).
    """
    if nx < 1 or ny < 1:
        raise MeshError(f"cell counts must be >= 1, got {nx}x{ny}")
    x0, x1, y0, y1 = bounds
    if not (x1 > x0 and y1 > y0):
        raise MeshError(f"degenerate bounds {bounds}")

    xs = np.linspace(x0, x1, nx + 1)
    ys = np.linspace(y0, y1, ny + 1)
    X, Y = np.meshgrid(xs, ys)             # Y varies along rows
    nodes = np.column_stack([X.ravel(), Y.ravel()])

    def nid(i, j):
        return j * (nx + 1) + i

    tris = np.empty((2 * nx * ny, 3), dtype=np.int64)
    for j in range(ny):
        for i in range(nx):
            c = 2 * (j * nx + i)
            v00, v10 = nid(i, j), nid(i + 1, j)
            v01, v11 = nid(i, j + 1), nid(i + 1, j + 1)
            tris[c] = (v00, v10, v11)
            tris[c + 1] = (v00, v11, v01)

    edge_map = {}
    for e in range(tris.shape[0]):
        a, b, c = tris[e]
        for pair in ((a, b), (b, c), (a, c)):
            key = (min(pair), max(pair))
            edge_map.setdefault(key, []).append(e)

    edges = np.array(sorted(edge_map.keys()), dtype=np.int64)
    edge_elems = np.full((edges.shape[0], 2), -1, dtype=np.int64)
    for k, key in enumerate(map(tuple, edges)):
        elems = edge_map[key]
        edge_elems[k, :len(elems)] = sorted(elems)
    edge_boundary = edge_elems[:, 1] < 0

    patches = [[] for _ in range(nodes.shape[0])]
    for e in range(tris.shape[0]):
        for v in tris[e]:
            patches[v].append(e)
    patches = [tuple(p) for p in patches]

    lengths = np.linalg.norm(nodes[edges[:, 0]] - nodes[edges[:, 1]], axis=1)

    on_bnd = ((np.abs(nodes[:, 0] - x0) < 1e-14) | (np.abs(nodes[:, 0] - x1) < 1e-14)
              | (np.abs(nodes[:, 1] - y0) < 1e-14) | (np.abs(nodes[:, 1] - y1) < 1e-14))

    return Mesh(nodes=nodes, triangles=tris, edges=edges, edge_elems=edge_elems,
                edge_boundary=edge_boundary, node_patches=patches,
                h=float(lengths.max()), bounds=(x0, x1, y0, y1), nx=nx, ny=ny,
                boundary_nodes=np.nonzero(on_bnd)[0])


def barycentric(mesh, e, x):
    p = mesh.element_coords(e)
    T = np.array([[p[1, 0] - p[0, 0], p[2, 0] - p[0, 0]],
                  [p[1, 1] - p[0, 1], p[2, 1] - p[0, 1]]])
    r = np.linalg.solve(T, np.asarray(x, dtype=float) - p[0])
    return np.array([1.0 - r[0] - r[1], r[0], r[1]])


def locate_point(mesh, x, tol=1e-12):
    """Element containing x; ties at shared vertices/edges resolve to the
    lowest incident element id.  O(1) via the structured cell index."""
    x0, x1, y0, y1 = mesh.bounds
    pad = tol * mesh.h
    if not (x0 - pad <= x[0] <= x1 + pad and y0 - pad <= x[1] <= y1 + pad):
        raise MeshError(f"point {tuple(x)} outside mesh domain {mesh.bounds}")
    dx = (x1 - x0) / mesh.nx
    dy = (y1 - y0) / mesh.ny
    i = min(max(int((x[0] - x0) / dx), 0), mesh.nx - 1)
    j = min(max(int((x[1] - y0) / dy), 0), mesh.ny - 1)
    cand = []
    for jj in range(max(j - 1, 0), min(j + 2, mesh.ny)):
        for ii in range(max(i - 1, 0), min(i + 2, mesh.nx)):
            c = 2 * (jj * mesh.nx + ii)
            cand.extend((c, c + 1))
    for e in sorted(cand):
        if barycentric(mesh, e, x).min() >= -1e-12:
            return e
    raise MeshError(f"containment search failed for point {tuple(x)}")


def _edge_circle_crossings(p0, p1, geom, tol):
    """Transversal intersection parameters t in (0,1) of segment p0-p1 with
    the circle; tangential grazing (discriminant below tol) yields none."""
    d = p1 - p0
    f = p0 - np.asarray(geom.center, dtype=float)
    a = d @ d
    b = 2.0 * (f @ d)
    c = f @ f - geom.radius ** 2
    disc = b * b - 4.0 * a * c
    if disc <= tol * a * geom.radius ** 2:
        return []
    sq = np.sqrt(disc)
    q = -0.5 * (b + np.copysign(sq, b))
    roots = []
    for t in (q / a, c / q if q != 0.0 else np.inf):
        if 1e-12 < t < 1.0 - 1e-12:
            roots.append(t)
    return sorted(roots)


def classify_interface_elements(mesh, geom, snap_tol=1e-12):
    """Tag each element 0=outside, 1=inside, 2=cut; also return the set of
    cut-element vertices and a diagnostics dictionary.

    A vertex within snap_tol*h of the circle is snapped onto it and counted
    as a crossing.  An element is cut iff its vertex level-set signs differ
    or a (transversal) edge-circle crossing exists.
    """
    x0, x1, y0, y1 = mesh.bounds
    cx, cy = geom.center
    if not (x0 < cx - geom.radius and cx + geom.radius < x1
            and y0 < cy - geom.radius and cy + geom.radius < y1):
        raise MeshError("interface circle must lie strictly inside the domain")

    phi = geom.level_set(mesh.nodes)
    snapped = np.abs(phi) < snap_tol * mesh.h
    sign = np.where(phi < 0, -1, 1)
    sign[snapped] = 0

    tags = np.empty(mesh.num_elements, dtype=np.int8)
    cut_nodes = set()
    diagnostics = {"snapped_vertices": int(snapped.sum()), "grazing_elements": 0}
    tol = 4.0 * np.finfo(float).eps

    for e in range(mesh.num_elements):
        vs = mesh.triangles[e]
        s = sign[vs]
        cut = (s.min() < 0 < s.max()) or (s == 0).any()
        if not cut:
            # same-sign vertices: look for transversal crossings (bulge case)
            ncross = 0
            p = mesh.nodes[vs]
            for (ia, ib) in ((0, 1), (1, 2), (0, 2)):
                ncross += len(_edge_circle_crossings(p[ia], p[ib], geom, tol))
            if ncross >= 2:
                cut = True
            elif ncross == 1:
                diagnostics["grazing_elements"] += 1
        if cut:
            tags[e] = 2
            cut_nodes.update(int(v) for v in vs)
        else:
            # strictly one-sided: inside iff the centroid is inside
            centroid = mesh.nodes[vs].mean(axis=0)
            tags[e] = 1 if geom.level_set(centroid) < 0 else 0
    return tags, sorted(cut_nodes), diagnostics
