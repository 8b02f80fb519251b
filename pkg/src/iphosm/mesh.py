"""Triangular meshes, edge topology and non-overlapping subdomain partitions.

Subdomain ids are 0-based. An edge is stored with its vertex pair sorted
ascending; that order also fixes the orientation of trace unknowns, so two
subdomains sharing an edge always agree on its trace basis.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import ConvexHull
from scipy.spatial.distance import pdist

log = logging.getLogger(__name__)

BOUNDARY = -1


class MeshError(ValueError):
    """Invalid mesh data (parse failure, non-manifold edge, inverted triangle)."""


class PartitionError(ValueError):
    """A subdomain partition that violates the interface-alignment rules."""


@dataclass(frozen=True, eq=False)
class Mesh:
    """Conforming triangulation with its edge table.

    Attributes
    ----------
    vertices : (nv, 2) float array
    triangles : (nt, 3) int array, counterclockwise
    edges : (ne, 2) int array of sorted vertex pairs
    edge_elements : (ne, 2) int array, ``[left, right]``; ``right`` is
        ``BOUNDARY`` for edges on the domain boundary
    element_edges : (nt, 3) int array; local edge ``l`` joins vertices
        ``l`` and ``(l + 1) % 3`` of the triangle
    h_elements : (nt,) longest edge of each triangle
    """

    vertices: np.ndarray
    triangles: np.ndarray
    edges: np.ndarray
    edge_elements: np.ndarray
    element_edges: np.ndarray
    h_elements: np.ndarray

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_elements(self) -> int:
        return len(self.triangles)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @property
    def h(self) -> float:
        return float(self.h_elements.max())

    @property
    def boundary_edges(self) -> np.ndarray:
        return np.flatnonzero(self.edge_elements[:, 1] == BOUNDARY)

    @property
    def interior_edges(self) -> np.ndarray:
        return np.flatnonzero(self.edge_elements[:, 1] != BOUNDARY)

    def edge_lengths(self) -> np.ndarray:
        d = self.vertices[self.edges[:, 1]] - self.vertices[self.edges[:, 0]]
        return np.hypot(d[:, 0], d[:, 1])

    def areas(self) -> np.ndarray:
        return _signed_areas(self.vertices, self.triangles)

    def centroids(self) -> np.ndarray:
        return self.vertices[self.triangles].mean(axis=1)

    def quasiuniformity_ratio(self) -> float:
        return float(self.h_elements.max() / self.h_elements.min())

    @classmethod
    def from_triangles(cls, vertices, triangles) -> "Mesh":
        """Build a mesh and its topology from raw vertex and triangle arrays."""
        vertices = np.asarray(vertices, dtype=float).reshape(-1, 2)
        triangles = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
        if len(triangles) == 0:
            raise MeshError("mesh has no triangles")
        if triangles.min() < 0 or triangles.max() >= len(vertices):
            raise MeshError("triangle references a vertex index out of range")
        area = _signed_areas(vertices, triangles)
        bad = np.flatnonzero(area <= 0.0)
        if bad.size:
            raise MeshError(f"inverted or degenerate triangle {bad[0]} (signed area {area[bad[0]]:.3e})")
        edges, edge_elements, element_edges = _build_topology(triangles)
        local = vertices[np.roll(triangles, -1, axis=1)] - vertices[triangles]
        h_el = np.hypot(local[..., 0], local[..., 1]).max(axis=1)
        return cls(vertices, triangles, edges, edge_elements, element_edges, h_el)


def _signed_areas(vertices, triangles):
    p0, p1, p2 = (vertices[triangles[:, a]] for a in range(3))
    d1, d2 = p1 - p0, p2 - p0
    return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])


def _build_topology(triangles):
    nt = len(triangles)
    directed = np.stack([triangles, np.roll(triangles, -1, axis=1)], axis=2).reshape(-1, 2)
    keys = np.sort(directed, axis=1)
    edges, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.ravel()
    if counts.max() > 2:
        e = int(np.argmax(counts))
        raise MeshError(f"non-manifold edge {tuple(edges[e])} shared by {counts[e]} triangles")

    sorted_tris = np.sort(triangles, axis=1)
    _, tri_counts = np.unique(sorted_tris, axis=0, return_counts=True)
    if tri_counts.max() > 1:
        raise MeshError("non-manifold mesh: duplicate triangle")

    owner = np.repeat(np.arange(nt), 3)
    edge_elements = np.full((len(edges), 2), BOUNDARY, dtype=np.int64)
    order = np.argsort(inverse, kind="stable")
    first = np.ones(len(order), dtype=bool)
    first[1:] = inverse[order][1:] != inverse[order][:-1]
    edge_elements[inverse[order][first], 0] = owner[order][first]
    edge_elements[inverse[order][~first], 1] = owner[order][~first]

    # two triangles sharing an edge must traverse it in opposite directions
    forward = directed[:, 0] < directed[:, 1]
    fsum = np.bincount(inverse, weights=forward, minlength=len(edges))
    shared = counts == 2
    if np.any(fsum[shared] != 1):
        e = int(np.flatnonzero(shared & (fsum != 1))[0])
        raise MeshError(f"non-manifold edge {tuple(edges[e])}: adjacent triangles overlap")

    element_edges = inverse.reshape(nt, 3)
    return edges, edge_elements, element_edges


def generate_structured_mesh(nx: int, ny: int, domain=(0.0, 1.0, 0.0, 1.0)) -> Mesh:
    """Uniform ``nx`` x ``ny`` grid on ``(x0, x1, y0, y1)``, each cell cut
    along its lower-left to upper-right diagonal."""
    if nx < 1 or ny < 1:
        raise ValueError("nx and ny must be positive")
    x0, x1, y0, y1 = map(float, domain)
    if not (x1 > x0 and y1 > y0):
        raise ValueError(f"degenerate rectangle {domain}")
    xs = np.linspace(x0, x1, nx + 1)
    ys = np.linspace(y0, y1, ny + 1)
    X, Y = np.meshgrid(xs, ys)
    vertices = np.column_stack([X.ravel(), Y.ravel()])
    jj, ii = np.meshgrid(np.arange(ny), np.arange(nx), indexing="ij")
    v00 = (jj * (nx + 1) + ii).ravel()
    v10, v01 = v00 + 1, v00 + nx + 1
    v11 = v01 + 1
    lower = np.column_stack([v00, v10, v11])
    upper = np.column_stack([v00, v11, v01])
    triangles = np.stack([lower, upper], axis=1).reshape(-1, 3)
    return Mesh.from_triangles(vertices, triangles)


def load_mesh(path) -> tuple[Mesh, np.ndarray | None]:
    """Read the ASCII mesh format.

    Layout: ``nv nt``, then ``nv`` lines ``x y``, then ``nt`` lines
    ``v0 v1 v2 [tag]`` (0-based). ``#`` starts a comment. Returns the mesh
    and the tag array (``None`` when no triangle carries a tag).
    """
    lines = []
    for raw in Path(path).read_text().splitlines():
        s = raw.split("#", 1)[0].strip()
        if s:
            lines.append(s.split())
    try:
        nv, nt = int(lines[0][0]), int(lines[0][1])
        verts = np.array([[float(t[0]), float(t[1])] for t in lines[1:1 + nv]])
        rows = lines[1 + nv:1 + nv + nt]
        tris = np.array([[int(t[0]), int(t[1]), int(t[2])] for t in rows], dtype=np.int64)
        if len(verts) != nv or len(tris) != nt:
            raise MeshError(f"expected {nv} vertices and {nt} triangles")
        tagged = [len(t) > 3 for t in rows]
        if any(tagged) and not all(tagged):
            raise MeshError("tag column present on some triangles only")
        tags = np.array([int(t[3]) for t in rows]) if all(tagged) else None
    except (IndexError, ValueError) as exc:
        if isinstance(exc, MeshError):
            raise
        raise MeshError(f"cannot parse mesh file {path}: {exc}") from exc
    return Mesh.from_triangles(verts, tris), tags


def save_mesh(mesh: Mesh, path, tags=None) -> None:
    out = [f"{mesh.n_vertices} {mesh.n_elements}"]
    out += [f"{x:.17g} {y:.17g}" for x, y in mesh.vertices]
    for e, t in enumerate(mesh.triangles):
        row = f"{t[0]} {t[1]} {t[2]}"
        if tags is not None:
            row += f" {int(tags[e])}"
        out.append(row)
    Path(path).write_text("\n".join(out) + "\n")


@dataclass(frozen=True, eq=False)
class Partition:
    """Element-to-subdomain map with derived interface data.

    ``interfaces[(i, j)]`` (``i < j``) lists the edge ids of the shared
    interface, sorted. ``floating[i]`` is true when subdomain ``i`` owns no
    edge of the domain boundary.
    """

    subdomain_of: np.ndarray
    n_subdomains: int
    interfaces: dict
    neighbors: list
    floating: list
    H: float
    H_domain: float
    gamma_edges: list = field(repr=False)
    H_i: np.ndarray = field(default=None, repr=False)

    def elements_of(self, i: int) -> np.ndarray:
        return np.flatnonzero(self.subdomain_of == i)

    @property
    def interface_edges(self) -> np.ndarray:
        """All edges on the global interface, sorted."""
        if not self.interfaces:
            return np.zeros(0, dtype=np.int64)
        return np.unique(np.concatenate(list(self.interfaces.values())))

    def interface(self, i: int, j: int) -> np.ndarray:
        key = (min(i, j), max(i, j))
        return self.interfaces.get(key, np.zeros(0, dtype=np.int64))

    @property
    def any_floating(self) -> bool:
        return any(self.floating)


def _diameter(points: np.ndarray) -> float:
    if len(points) > 8:
        try:
            points = points[ConvexHull(points).vertices]
        except Exception:  # collinear or too few points
            pass
    return float(pdist(points).max()) if len(points) > 1 else 0.0


def _build_partition(mesh: Mesh, labels: np.ndarray) -> Partition:
    labels = np.asarray(labels, dtype=np.int64)
    ns = int(labels.max()) + 1
    counts = np.bincount(labels, minlength=ns)
    if np.any(counts == 0):
        raise PartitionError(f"empty subdomain id {int(np.flatnonzero(counts == 0)[0])}")

    left, right = mesh.edge_elements[:, 0], mesh.edge_elements[:, 1]
    interior = right != BOUNDARY
    sl = labels[left]
    sr = np.where(interior, labels[np.where(interior, right, 0)], -1)
    cut = interior & (sl != sr)
    interfaces = {}
    neighbors = [set() for _ in range(ns)]
    for e in np.flatnonzero(cut):
        i, j = sorted((int(sl[e]), int(sr[e])))
        interfaces.setdefault((i, j), []).append(int(e))
        neighbors[i].add(j)
        neighbors[j].add(i)
    interfaces = {key: np.array(sorted(v), dtype=np.int64) for key, v in sorted(interfaces.items())}
    gamma_edges = [
        np.unique(np.concatenate([interfaces[(min(i, j), max(i, j))] for j in neighbors[i]]))
        if neighbors[i] else np.zeros(0, dtype=np.int64)
        for i in range(ns)
    ]
    on_boundary = np.zeros(ns, dtype=bool)
    on_boundary[labels[left[~interior]]] = True
    floating = [not bool(b) for b in on_boundary]

    H_i = np.array([_diameter(mesh.vertices[np.unique(mesh.triangles[labels == i])]) for i in range(ns)])
    H_domain = _diameter(mesh.vertices)
    return Partition(labels, ns, interfaces, neighbors, floating, float(H_i.max()), H_domain,
                     gamma_edges, H_i)


def partition_from_tags(mesh: Mesh, tags) -> Partition:
    """Partition by an arbitrary integer tag per element.

    Distinct tags are mapped in increasing order to ids ``0..N_s-1``.
    """
    tags = np.asarray(tags)
    if tags.shape != (mesh.n_elements,):
        raise PartitionError(f"need one tag per element ({mesh.n_elements}), got shape {tags.shape}")
    _, labels = np.unique(tags, return_inverse=True)
    return _build_partition(mesh, labels.ravel())


def partition_boxes(mesh: Mesh, px: int, py: int, tol: float = 1e-12) -> Partition:
    """Assign elements to a ``px`` x ``py`` grid of boxes by centroid.

    Raises ``PartitionError`` when a box boundary cuts through an element.
    """
    if px < 1 or py < 1:
        raise ValueError("px and py must be positive")
    lo = mesh.vertices.min(axis=0)
    hi = mesh.vertices.max(axis=0)
    size = (hi - lo) / np.array([px, py])
    c = mesh.centroids()
    bx = np.clip(np.floor((c[:, 0] - lo[0]) / size[0]).astype(int), 0, px - 1)
    by = np.clip(np.floor((c[:, 1] - lo[1]) / size[1]).astype(int), 0, py - 1)

    scale = tol * max(hi - lo)
    tv = mesh.vertices[mesh.triangles]
    box_lo = lo + np.column_stack([bx, by]) * size
    box_hi = box_lo + size
    outside = np.any((tv < box_lo[:, None, :] - scale) | (tv > box_hi[:, None, :] + scale), axis=(1, 2))
    if np.any(outside):
        e = int(np.flatnonzero(outside)[0])
        raise PartitionError(f"box interface cuts through element {e} (vertices {mesh.triangles[e].tolist()})")

    _, labels = np.unique(by * px + bx, return_inverse=True)
    return _build_partition(mesh, labels.ravel())


@dataclass(frozen=True)
class MeshMetrics:
    h: float
    H: float
    H_domain: float
    quasiuniformity_ratio: float
    ordered: bool

    def as_dict(self) -> dict:
        return {
            "h": self.h,
            "H": self.H,
            "H_domain": self.H_domain,
            "quasiuniformity_ratio": self.quasiuniformity_ratio,
            "ordered": self.ordered,
        }


def mesh_metrics(mesh: Mesh, part: Partition) -> MeshMetrics:
    """Report ``h``, ``H``, ``H_domain``; ``ordered`` flags ``0 < h <= H < H_domain``."""
    ordered = 0.0 < mesh.h <= part.H * (1 + 1e-12) and part.H < part.H_domain * (1 - 1e-12)
    if not ordered:
        log.warning("mesh/partition sizes violate 0 < h <= H < H_domain: h=%g H=%g H_domain=%g",
                    mesh.h, part.H, part.H_domain)
    return MeshMetrics(mesh.h, part.H, part.H_domain, mesh.quasiuniformity_ratio(), ordered)
