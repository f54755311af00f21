"""Conforming triangle meshes of the unit square and the unit disc.

Triangles are stored counter-clockwise.  Local edge ``i`` of a triangle is the
edge opposite its vertex ``i``, i.e. it runs from ``tri[(i+1)%3]`` to
``tri[(i+2)%3]``.  Global edges are stored low vertex index first; the sign in
``tri_edge_signs`` is +1 when the local traversal agrees with that global
orientation, which is also exactly when the triangle's outward normal agrees
with the global edge normal ``(t_y, -t_x)``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import sparse
from scipy.spatial import Delaunay, cKDTree

from . import _accel

DISC_TOL = 1e-12


class MeshError(ValueError):
    pass


@dataclass(frozen=True)
class RegionSpec:
    """Named membership predicate ``predicate(x, y) -> bool array``."""

    name: str
    predicate: Callable[[np.ndarray, np.ndarray], np.ndarray]
    description: str = ""

    def __call__(self, x, y):
        return np.asarray(self.predicate(np.asarray(x, float), np.asarray(y, float)), dtype=bool)


def _theta(x, y):
    return np.mod(np.arctan2(y, x), 2.0 * np.pi)


OMEGA = RegionSpec("omega", lambda x, y: (x**2 + y**2 > 0.75) & (x**2 + y**2 < 1.0) & (x < 0.5),
                   "0.75 < x^2 + y^2 < 1 and x < 0.5")
# polygonal boundary triangles have barycentres strictly inside the circle
OMEGA_MINUS = RegionSpec("omega_minus", lambda x, y: x <= 0.0, "x <= 0")
BALL = RegionSpec("B", lambda x, y: x**2 + y**2 < 0.25, "x^2 + y^2 < 0.25")
EVERYWHERE = RegionSpec("all", lambda x, y: np.ones(np.shape(x), dtype=bool), "true")
NOWHERE = RegionSpec("none", lambda x, y: np.zeros(np.shape(x), dtype=bool), "false")
NEUMANN_SECTOR = RegionSpec("neumann", lambda x, y: _theta(x, y) <= 1.5 * np.pi + 1e-12,
                            "0 <= theta <= 3 pi / 2")

REGIONS = {r.name: r for r in (OMEGA, OMEGA_MINUS, BALL, EVERYWHERE, NOWHERE, NEUMANN_SECTOR)}


@dataclass(frozen=True, eq=False)
class TriMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    edges: np.ndarray
    tri_edges: np.ndarray
    tri_edge_signs: np.ndarray
    edge_triangles: np.ndarray
    boundary_edges: np.ndarray
    on_disc: bool = False
    tri_region_tags: dict = field(default_factory=dict)
    edge_boundary_tags: dict = field(default_factory=dict)
    region_specs: dict = field(default_factory=dict)
    boundary_specs: dict = field(default_factory=dict)

    @classmethod
    def from_arrays(cls, vertices, triangles, on_disc=False):
        vertices = np.array(vertices, dtype=float).reshape(-1, 2)
        triangles = np.array(triangles, dtype=np.int64).reshape(-1, 3)
        topo = _build_topology(len(vertices), triangles)
        return cls(vertices, triangles, on_disc=on_disc, **topo)

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_triangles(self):
        return len(self.triangles)

    @property
    def n_edges(self):
        return len(self.edges)

    def corners(self):
        return self.vertices[self.triangles]

    def signed_areas(self):
        c = self.corners()
        e1 = c[:, 1] - c[:, 0]
        e2 = c[:, 2] - c[:, 0]
        return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])

    def areas(self):
        return np.abs(self.signed_areas())

    def barycenters(self):
        return self.corners().mean(axis=1)

    def edge_lengths(self):
        d = self.vertices[self.edges[:, 1]] - self.vertices[self.edges[:, 0]]
        return np.hypot(d[:, 0], d[:, 1])

    def edge_midpoints(self):
        return 0.5 * (self.vertices[self.edges[:, 0]] + self.vertices[self.edges[:, 1]])

    def edge_normals(self):
        """Unit normals of the global edge orientation (tangent rotated clockwise)."""
        d = self.vertices[self.edges[:, 1]] - self.vertices[self.edges[:, 0]]
        n = np.stack([d[:, 1], -d[:, 0]], axis=1)
        return n / np.hypot(n[:, 0], n[:, 1])[:, None]

    def boundary_outward_sign(self):
        """+1/-1 per boundary edge: outward normal = sign * edge_normals()."""
        t = self.edge_triangles[self.boundary_edges, 0]
        loc = np.argmax(self.tri_edges[t] == self.boundary_edges[:, None], axis=1)
        return self.tri_edge_signs[t, loc].astype(float)

    def diameters(self):
        c = self.corners()
        d = np.stack([c[:, 1] - c[:, 2], c[:, 2] - c[:, 0], c[:, 0] - c[:, 1]], axis=1)
        return np.hypot(d[..., 0], d[..., 1]).max(axis=1)

    def region(self, name):
        try:
            return self.tri_region_tags[name]
        except KeyError:
            raise KeyError(f"unknown region {name!r}; tagged: {sorted(self.tri_region_tags)}") from None

    def region_mask(self, name):
        m = np.zeros(self.n_triangles, dtype=bool)
        m[self.region(name)] = True
        return m

    def boundary_tag(self, name):
        try:
            return self.edge_boundary_tags[name]
        except KeyError:
            raise KeyError(f"unknown boundary tag {name!r}") from None

    def with_tags(self, regions=(), boundary=()):
        m = self
        for spec in regions:
            m = tag_triangles(m, spec)
        for spec in boundary:
            m = tag_boundary_edges(m, spec)
        return m

    def __repr__(self):
        kind = "disc" if self.on_disc else "planar"
        return f"TriMesh({kind}, {self.n_vertices} vertices, {self.n_triangles} triangles, h={mesh_size(self):.4g})"


def _build_topology(nv, triangles):
    nt = len(triangles)
    a = triangles[:, [1, 2, 0]]
    b = triangles[:, [2, 0, 1]]
    lo = np.minimum(a, b)
    hi = np.maximum(a, b)
    keys = (lo * nv + hi).ravel()
    ukeys, inv, counts = np.unique(keys, return_inverse=True, return_counts=True)
    edges = np.stack([ukeys // nv, ukeys % nv], axis=1).astype(np.int64)
    tri_edges = inv.reshape(nt, 3).astype(np.int64)
    signs = np.where(a < b, 1, -1).astype(np.int64)

    ne = len(edges)
    edge_triangles = -np.ones((ne, 2), dtype=np.int64)
    flat_t = np.repeat(np.arange(nt), 3)
    order = np.argsort(inv, kind="stable")
    first = np.ones(len(order), dtype=bool)
    sorted_e = inv[order]
    first[1:] = sorted_e[1:] != sorted_e[:-1]
    edge_triangles[sorted_e[first], 0] = flat_t[order[first]]
    rest = ~first
    # edges with >2 triangles keep only the second hit here; validate() reports them
    edge_triangles[sorted_e[rest], 1] = flat_t[order[rest]]
    boundary = np.flatnonzero(counts == 1).astype(np.int64)
    return dict(edges=edges, tri_edges=tri_edges, tri_edge_signs=signs,
                edge_triangles=edge_triangles, boundary_edges=boundary)


def _edge_counts(mesh):
    return np.bincount(mesh.tri_edges.ravel(), minlength=mesh.n_edges)


# ---------------------------------------------------------------------------
# generators


def rectangle_mesh(n, lower=(0.0, 0.0), upper=(1.0, 1.0)):
    if int(n) != n or n < 1:
        raise MeshError(f"subdivisions must be a positive integer, got {n!r}")
    n = int(n)
    xs = np.linspace(lower[0], upper[0], n + 1)
    ys = np.linspace(lower[1], upper[1], n + 1)
    X, Y = np.meshgrid(xs, ys)
    verts = np.stack([X.ravel(), Y.ravel()], axis=1)
    i, j = np.meshgrid(np.arange(n), np.arange(n))
    v00 = (j * (n + 1) + i).ravel()
    v10 = v00 + 1
    v01 = v00 + n + 1
    v11 = v01 + 1
    tris = np.empty((2 * n * n, 3), dtype=np.int64)
    tris[0::2] = np.stack([v00, v10, v11], axis=1)
    tris[1::2] = np.stack([v00, v11, v01], axis=1)
    return TriMesh.from_arrays(verts, tris)


def unit_square_mesh(n):
    """``2 n^2`` right triangles on [0, 1]^2."""
    return rectangle_mesh(n)


def ring_disc_mesh(n_rings, smoothing_sweeps=20):
    """Fan of concentric rings, triangulated and smoothed.

    Ring ``i`` carries ``6 i`` vertices at radius ``i / n_rings`` (``n_rings=1``
    is the six-triangle hexagon fan).  The point set is Delaunay-triangulated
    and interior vertices get ``smoothing_sweeps`` Laplacian sweeps, each
    followed by re-triangulation; boundary vertices stay on the unit circle.
    """
    if n_rings < 1:
        raise MeshError("need at least one ring")
    pts = [np.zeros((1, 2))]
    for i in range(1, n_rings + 1):
        th = 2.0 * np.pi * np.arange(6 * i) / (6 * i)
        r = i / n_rings
        pts.append(np.stack([r * np.cos(th), r * np.sin(th)], axis=1))
    verts = np.concatenate(pts)
    nv = len(verts)
    nb = 6 * n_rings
    verts[nv - nb:] /= np.hypot(verts[nv - nb:, 0], verts[nv - nb:, 1])[:, None]

    tris = Delaunay(verts).simplices
    for _ in range(smoothing_sweeps):
        e = _build_topology(nv, tris)["edges"]
        adj = sparse.coo_matrix((np.ones(2 * len(e)), (np.r_[e[:, 0], e[:, 1]], np.r_[e[:, 1], e[:, 0]])),
                                shape=(nv, nv)).tocsr()
        deg = np.asarray(adj.sum(axis=1)).ravel()
        verts[:nv - nb] = (adj @ verts)[:nv - nb] / deg[:nv - nb, None]
        tris = Delaunay(verts).simplices
    tris = np.array(tris, dtype=np.int64)
    c = verts[tris]
    area = (c[:, 1, 0] - c[:, 0, 0]) * (c[:, 2, 1] - c[:, 0, 1]) - (c[:, 2, 0] - c[:, 0, 0]) * (c[:, 1, 1] - c[:, 0, 1])
    flip = area < 0
    tris[flip] = tris[flip][:, [0, 2, 1]]
    return TriMesh.from_arrays(verts, tris, on_disc=True)


def unit_disc_mesh(h_target):
    """Polygonal disc mesh with ``mesh_size <= 1.2 * h_target``.

    Uses the coarsest ring mesh meeting the bound; finer study levels are
    obtained from it with :func:`refine_uniform`.
    """
    if not (0.0 < h_target < 2.0):
        raise MeshError(f"h_target must lie in (0, 2), got {h_target!r}")
    n = 1
    while True:
        m = ring_disc_mesh(n)
        if mesh_size(m) <= 1.2 * h_target:
            return m
        n += 1


# ---------------------------------------------------------------------------
# refinement and tagging


def refine_uniform(mesh):
    """Red refinement: every triangle split into four; disc boundary midpoints projected."""
    nv = mesh.n_vertices
    mids = mesh.edge_midpoints().copy()
    if mesh.on_disc:
        b = mesh.boundary_edges
        mids[b] /= np.hypot(mids[b, 0], mids[b, 1])[:, None]
    verts = np.concatenate([mesh.vertices, mids])
    t = mesh.triangles
    m = nv + mesh.tri_edges  # m[:, i] is the midpoint of the edge opposite vertex i
    tris = np.concatenate([
        np.stack([t[:, 0], m[:, 2], m[:, 1]], axis=1),
        np.stack([m[:, 2], t[:, 1], m[:, 0]], axis=1),
        np.stack([m[:, 1], m[:, 0], t[:, 2]], axis=1),
        np.stack([m[:, 0], m[:, 1], m[:, 2]], axis=1),
    ])
    # children of triangle k are k, nt + k, 2 nt + k, 3 nt + k
    fine = TriMesh.from_arrays(verts, tris, on_disc=mesh.on_disc)
    return fine.with_tags(mesh.region_specs.values(), mesh.boundary_specs.values())


def tag_triangles(mesh, spec: RegionSpec):
    """Tag triangles whose barycentre satisfies ``spec``; returns a new mesh."""
    bc = mesh.barycenters()
    idx = np.flatnonzero(spec(bc[:, 0], bc[:, 1])).astype(np.int64)
    tags = dict(mesh.tri_region_tags)
    tags[spec.name] = idx
    specs = dict(mesh.region_specs)
    specs[spec.name] = spec
    return dataclasses.replace(mesh, tri_region_tags=tags, region_specs=specs)


def tag_boundary_edges(mesh, spec: RegionSpec):
    """Tag boundary edges whose midpoint satisfies ``spec``; returns a new mesh."""
    mid = mesh.edge_midpoints()[mesh.boundary_edges]
    idx = mesh.boundary_edges[spec(mid[:, 0], mid[:, 1])]
    tags = dict(mesh.edge_boundary_tags)
    tags[spec.name] = idx
    specs = dict(mesh.boundary_specs)
    specs[spec.name] = spec
    return dataclasses.replace(mesh, edge_boundary_tags=tags, boundary_specs=specs)


def mesh_size(mesh):
    """h = max triangle diameter."""
    return float(mesh.diameters().max())


def region_area(mesh, name):
    return float(mesh.areas()[mesh.region(name)].sum())


def validate(mesh):
    """List of violated invariants; empty means the mesh is valid."""
    problems = []
    area = mesh.signed_areas()
    bad = np.flatnonzero(area <= 0.0)
    if len(bad):
        problems.append(f"non-positive signed area in {len(bad)} triangle(s), first {bad[0]}")
    srt = np.sort(mesh.triangles, axis=1)
    _, counts = np.unique(srt, axis=0, return_counts=True)
    if np.any(counts > 1):
        problems.append(f"non-conforming: {int(np.sum(counts > 1))} duplicated triangle(s)")
    ec = _edge_counts(mesh)
    if np.any(ec > 2):
        problems.append(f"non-conforming: {int(np.sum(ec > 2))} edge(s) shared by more than two triangles")
    # hanging vertices sit in the interior of a boundary-marked edge
    b = np.flatnonzero(ec == 1)
    if len(b):
        tree = cKDTree(mesh.vertices)
        mids = mesh.edge_midpoints()[b]
        lens = mesh.edge_lengths()[b]
        p0 = mesh.vertices[mesh.edges[b, 0]]
        p1 = mesh.vertices[mesh.edges[b, 1]]
        hanging = 0
        for k, cand in enumerate(tree.query_ball_point(mids, 0.5 * lens * (1 + 1e-9))):
            for v in cand:
                if v in mesh.edges[b[k]]:
                    continue
                d = p1[k] - p0[k]
                w = mesh.vertices[v] - p0[k]
                cross = d[0] * w[1] - d[1] * w[0]
                s = np.dot(w, d) / np.dot(d, d)
                if abs(cross) <= 1e-12 * lens[k] ** 2 and 0.0 < s < 1.0:
                    hanging += 1
        if hanging:
            problems.append(f"non-conforming: {hanging} hanging vertex/vertices")
    if mesh.on_disc:
        bv = np.unique(mesh.edges[mesh.boundary_edges])
        r2 = np.sum(mesh.vertices[bv] ** 2, axis=1)
        off = np.abs(r2 - 1.0) > DISC_TOL
        if np.any(off):
            problems.append(f"{int(off.sum())} boundary vertex/vertices off the unit circle")
    used = np.zeros(mesh.n_vertices, dtype=bool)
    used[mesh.triangles.ravel()] = True
    if not used.all():
        problems.append(f"{int((~used).sum())} unused vertex/vertices")
    return problems


def euler_characteristic(mesh):
    return mesh.n_vertices - mesh.n_edges + mesh.n_triangles


# ---------------------------------------------------------------------------
# point location


class PointLocator:
    """Nearest-barycentre candidate search followed by a barycentric test.

    Points outside the mesh (e.g. fine-mesh boundary vertices beyond a coarse
    polygonal boundary) are assigned to the best candidate with negative
    barycentric coordinates, which means polynomial extrapolation.
    """

    def __init__(self, mesh, n_candidates=12):
        self.mesh = mesh
        self.corners = mesh.corners()
        self.tree = cKDTree(mesh.barycenters())
        self.k = min(n_candidates, mesh.n_triangles)

    def locate(self, points):
        points = np.asarray(points, dtype=float).reshape(-1, 2)
        _, cand = self.tree.query(points, k=self.k)
        cand = np.asarray(cand, dtype=np.int64).reshape(len(points), -1)
        tri, bary, score = _accel.locate(points, cand, self.corners)
        missing = np.flatnonzero(score < -1e-10)
        if len(missing):
            # wider search for stragglers; rare on quasi-uniform meshes
            allc = np.broadcast_to(np.arange(self.mesh.n_triangles), (len(missing), self.mesh.n_triangles))
            t2, b2, s2 = _accel.locate(points[missing], allc, self.corners)
            better = s2 > score[missing]
            tri[missing[better]] = t2[better]
            bary[missing[better]] = b2[better]
            score[missing[better]] = s2[better]
        return tri, bary, score


# ---------------------------------------------------------------------------
# ASCII format


def write_mesh(mesh, path):
    lines = [f"trimesh {mesh.n_vertices} {mesh.n_triangles}"]
    lines += [f"{x!r} {y!r}" for x, y in mesh.vertices.tolist()]
    lines += [f"{a} {b} {c}" for a, b, c in mesh.triangles.tolist()]
    if mesh.on_disc:
        lines.append("disc")
    for name, idx in mesh.tri_region_tags.items():
        lines.append(f"region {name} {len(idx)}")
        lines += [str(i) for i in idx.tolist()]
    for name, idx in mesh.edge_boundary_tags.items():
        lines.append(f"boundary {name} {len(idx)}")
        lines += [str(i) for i in idx.tolist()]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_mesh(path):
    with open(path) as fh:
        tokens = [ln.split() for ln in fh if ln.strip()]
    head = tokens[0]
    if len(head) != 3 or head[0] != "trimesh":
        raise MeshError(f"{path}: expected 'trimesh <nv> <nt>' header")
    nv, nt = int(head[1]), int(head[2])
    verts = np.array([[float(a) for a in t] for t in tokens[1:1 + nv]])
    tris = np.array([[int(a) for a in t] for t in tokens[1 + nv:1 + nv + nt]], dtype=np.int64)
    mesh = TriMesh.from_arrays(verts, tris)
    pos = 1 + nv + nt
    regions, boundary, on_disc = {}, {}, False
    while pos < len(tokens):
        t = tokens[pos]
        if t[0] == "disc":
            on_disc = True
            pos += 1
            continue
        if t[0] not in ("region", "boundary") or len(t) != 3:
            raise MeshError(f"{path}: unexpected block {' '.join(t)!r}")
        count = int(t[2])
        idx = np.array([int(r[0]) for r in tokens[pos + 1:pos + 1 + count]], dtype=np.int64)
        (regions if t[0] == "region" else boundary)[t[1]] = idx
        pos += 1 + count
    specs = {n: REGIONS[n] for n in regions if n in REGIONS}
    bspecs = {n: REGIONS[n] for n in boundary if n in REGIONS}
    return dataclasses.replace(mesh, on_disc=on_disc, tri_region_tags=regions, edge_boundary_tags=boundary,
                               region_specs=specs, boundary_specs=bspecs)


def disc_study_mesh(h_target, levels=0):
    """Disc mesh tagged with the experiment regions, refined ``levels`` times."""
    m = unit_disc_mesh(h_target).with_tags([OMEGA, OMEGA_MINUS, BALL, EVERYWHERE], [NEUMANN_SECTOR])
    for _ in range(levels):
        m = refine_uniform(m)
    return m


__all__ = [
    "TriMesh", "RegionSpec", "MeshError", "OMEGA", "OMEGA_MINUS", "BALL", "EVERYWHERE", "NOWHERE",
    "NEUMANN_SECTOR", "REGIONS", "unit_square_mesh", "rectangle_mesh", "unit_disc_mesh", "ring_disc_mesh",
    "refine_uniform", "tag_triangles", "tag_boundary_edges", "mesh_size", "validate", "euler_characteristic",
    "PointLocator", "write_mesh", "read_mesh", "disc_study_mesh", "region_area",
]
