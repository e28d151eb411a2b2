"""Conforming triangular meshes with newest-vertex bisection refinement.

A mesh stores its refinement ancestry: :func:`bisect` returns a new mesh
whose ``parent_cells`` array maps every cell to the cell it came from, so
piecewise-constant fields can be transported exactly through a hierarchy
of nested meshes.  The refinement edge of every cell is, by convention,
the edge between its first two vertices; on grid meshes this edge is the
hypotenuse of the quad-split triangles, which keeps newest-vertex
bisection inside a fixed set of similarity classes (the minimum angle
never degrades).
"""

import numpy as np

EDGE_INTERIOR = 0
EDGE_DIRICHLET = 1
EDGE_NEUMANN = 2

_TAG_NAMES = {"dirichlet": EDGE_DIRICHLET, "neumann": EDGE_NEUMANN}


class RefinementError(RuntimeError):
    """Raised when bisection closure fails to terminate."""


class Mesh:
    """Immutable conforming triangulation.

    Attributes:
        vertices: (nv, 2) float array of coordinates.
        cells: (nc, 3) int array; the refinement edge of cell c is
            (cells[c, 0], cells[c, 1]) and all cells are counterclockwise.
        generation: refinement level, 0 for a root mesh.
        parent: the previous mesh in the hierarchy, or None.
        parent_cells: (nc,) map into parent's cells, or None for a root.
        edges: (ne, 2) sorted vertex pairs.
        cell_edges: (nc, 3) edge ids at local positions (1,2), (2,0), (0,1).
        edge_cells: (ne, 2) adjacent cells, -1 for the missing side.
        edge_tags: (ne,) EDGE_INTERIOR / EDGE_DIRICHLET / EDGE_NEUMANN.
    """

    def __init__(self, vertices, cells, boundary_rule=None, generation=0,
                 parent=None, parent_cells=None, initial_area=None,
                 initial_min_angle=None):
        self.vertices = np.ascontiguousarray(vertices, dtype=float)
        self.cells = np.ascontiguousarray(cells, dtype=np.int64)
        if self.cells.ndim != 2 or self.cells.shape[1] != 3:
            raise ValueError("cells must be an (nc, 3) index array")
        self.boundary_rule = boundary_rule
        self.generation = generation
        self.parent = parent
        self.parent_cells = parent_cells
        self._build_geometry()
        self._build_edges()
        self.initial_area = self.total_area if initial_area is None else initial_area
        self.initial_min_angle = (self.min_angle if initial_min_angle is None
                                  else initial_min_angle)
        for arr in (self.vertices, self.cells, self.edges, self.cell_edges,
                    self.edge_cells, self.edge_tags, self.cell_areas):
            arr.setflags(write=False)

    # -- geometry -------------------------------------------------------

    def _build_geometry(self):
        p = self.vertices[self.cells]                       # (nc, 3, 2)
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        signed = 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])
        if np.any(signed <= 0.0):
            raise ValueError("all cells must have positive signed area")
        self.cell_areas = signed
        self.total_area = float(signed.sum())
        e = np.stack([p[:, 2] - p[:, 1], p[:, 0] - p[:, 2], p[:, 1] - p[:, 0]], axis=1)
        lengths = np.linalg.norm(e, axis=2)                 # (nc, 3) opposite-edge lengths
        self.cell_diams = lengths.max(axis=1)
        # interior angle at vertex i from the law of cosines
        a, b, c = lengths[:, 0], lengths[:, 1], lengths[:, 2]
        angles = np.stack([
            np.arccos(np.clip((b**2 + c**2 - a**2) / (2 * b * c), -1.0, 1.0)),
            np.arccos(np.clip((a**2 + c**2 - b**2) / (2 * a * c), -1.0, 1.0)),
            np.arccos(np.clip((a**2 + b**2 - c**2) / (2 * a * b), -1.0, 1.0)),
        ], axis=1)
        self.min_angle = float(angles.min())

    def _build_edges(self):
        # local edge k sits opposite local vertex k
        pairs = np.stack([self.cells[:, [1, 2]], self.cells[:, [2, 0]],
                          self.cells[:, [0, 1]]], axis=1).reshape(-1, 2)
        pairs_sorted = np.sort(pairs, axis=1)
        edges, inverse = np.unique(pairs_sorted, axis=0, return_inverse=True)
        nc = len(self.cells)
        self.edges = edges
        self.cell_edges = inverse.reshape(nc, 3)
        ne = len(edges)
        counts = np.bincount(inverse, minlength=ne)
        if counts.max() > 2:
            raise ValueError("non-manifold edge: more than two adjacent cells")
        edge_cells = np.full((ne, 2), -1, dtype=np.int64)
        order = np.argsort(inverse, kind="stable")
        owner = order // 3
        slot = np.zeros(ne, dtype=np.int64)
        for k, e in zip(owner, inverse[order]):
            edge_cells[e, slot[e]] = k
            slot[e] += 1
        self.edge_cells = edge_cells
        tags = np.full(ne, EDGE_INTERIOR, dtype=np.int64)
        boundary = counts == 1
        if boundary.any():
            mids = 0.5 * (self.vertices[edges[boundary, 0]]
                          + self.vertices[edges[boundary, 1]])
            if self.boundary_rule is None:
                tags[boundary] = EDGE_DIRICHLET
            else:
                ids = np.flatnonzero(boundary)
                for eid, (mx, my) in zip(ids, mids):
                    tag = self.boundary_rule(mx, my)
                    if tag not in _TAG_NAMES:
                        raise ValueError(f"unknown boundary tag {tag!r}")
                    tags[eid] = _TAG_NAMES[tag]
        self.edge_tags = tags

    # -- queries --------------------------------------------------------

    @property
    def num_cells(self):
        return len(self.cells)

    @property
    def num_vertices(self):
        return len(self.vertices)

    @property
    def num_edges(self):
        return len(self.edges)

    def boundary_edges(self, tag=None):
        if tag is None:
            return np.flatnonzero(self.edge_tags != EDGE_INTERIOR)
        return np.flatnonzero(self.edge_tags == tag)

    def edge_lengths(self):
        d = self.vertices[self.edges[:, 1]] - self.vertices[self.edges[:, 0]]
        return np.linalg.norm(d, axis=1)

    def centroids(self):
        return self.vertices[self.cells].mean(axis=1)


class CellField:
    """Piecewise-constant field: one value per cell, area-weighted geometry.

    All norms and inner products carry the cell areas so that refining the
    mesh (and prolonging the field) does not change the function the
    coefficients represent.
    """

    def __init__(self, mesh, values):
        values = np.asarray(values, dtype=float)
        if values.shape != (mesh.num_cells,):
            raise ValueError("values must hold one scalar per cell")
        self.mesh = mesh
        self.values = values

    @classmethod
    def constant(cls, mesh, value):
        return cls(mesh, np.full(mesh.num_cells, float(value)))

    @property
    def areas(self):
        return self.mesh.cell_areas

    def copy(self):
        return CellField(self.mesh, self.values.copy())

    def integral(self):
        return float(self.areas @ self.values)

    def inner(self, other):
        self._check(other)
        return float(self.areas @ (self.values * other.values))

    def norm(self):
        return float(np.sqrt(self.areas @ self.values**2))

    def _check(self, other):
        if other.mesh is not self.mesh:
            raise ValueError("CellFields live on different meshes")

    def __add__(self, other):
        self._check(other)
        return CellField(self.mesh, self.values + other.values)

    def __sub__(self, other):
        self._check(other)
        return CellField(self.mesh, self.values - other.values)

    def __mul__(self, scalar):
        return CellField(self.mesh, self.values * float(scalar))

    __rmul__ = __mul__


def create_rect_mesh(nx, ny, domain=(0.0, 1.0, 0.0, 1.0), mask=None,
                     boundary_rule=None):
    """Quad grid on an axis-aligned rectangle, each quad split in two.

    The split runs along the falling diagonal of each quad, and that
    diagonal is the refinement edge of both triangles.  ``mask(x, y)``
    receives cell centroids and returns True for cells to keep.
    """
    if nx < 1 or ny < 1:
        raise ValueError("nx and ny must be >= 1")
    x0, x1, y0, y1 = domain
    xs = np.linspace(x0, x1, nx + 1)
    ys = np.linspace(y0, y1, ny + 1)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    vertices = np.column_stack([X.ravel(), Y.ravel()])

    def vid(i, j):
        return i * (ny + 1) + j

    I, J = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
    I, J = I.ravel(), J.ravel()
    p00, p10 = vid(I, J), vid(I + 1, J)
    p01, p11 = vid(I, J + 1), vid(I + 1, J + 1)
    lower = np.column_stack([p10, p01, p00])
    upper = np.column_stack([p01, p10, p11])
    cells = np.empty((2 * len(I), 3), dtype=np.int64)
    cells[0::2] = lower
    cells[1::2] = upper

    if mask is not None:
        cen = vertices[cells].mean(axis=1)
        keep = np.asarray(mask(cen[:, 0], cen[:, 1]), dtype=bool)
        cells = cells[keep]
        if len(cells) == 0:
            raise ValueError("mask removed every cell")
        used = np.unique(cells)
        remap = np.full(len(vertices), -1, dtype=np.int64)
        remap[used] = np.arange(len(used))
        vertices = vertices[used]
        cells = remap[cells]

    return Mesh(vertices, cells, boundary_rule=boundary_rule)


def bisect(mesh, marked):
    """Bisect the marked cells at their refinement edges.

    Recursive closure bisections keep the result conforming; every new
    cell records its ancestor in ``parent_cells``.  An empty marking
    returns the input mesh unchanged.
    """
    marked = np.asarray(sorted(set(int(m) for m in np.asarray(marked, dtype=np.int64).ravel())),
                        dtype=np.int64)
    if marked.size == 0:
        return mesh
    if marked.min() < 0 or marked.max() >= mesh.num_cells:
        raise ValueError("marked set contains invalid cell ids")

    ref_edge = mesh.cell_edges[:, 2]
    edge_marked = np.zeros(mesh.num_edges, dtype=bool)
    edge_marked[ref_edge[marked]] = True
    for _ in range(100):
        need = edge_marked[mesh.cell_edges].any(axis=1) & ~edge_marked[ref_edge]
        if not need.any():
            break
        edge_marked[ref_edge[need]] = True
    else:
        raise RefinementError(
            "bisection closure did not terminate; refinement-edge "
            "assignment is inconsistent")

    new_vid = np.full(mesh.num_edges, -1, dtype=np.int64)
    split = np.flatnonzero(edge_marked)
    new_vid[split] = mesh.num_vertices + np.arange(len(split))
    midpoints = 0.5 * (mesh.vertices[mesh.edges[split, 0]]
                       + mesh.vertices[mesh.edges[split, 1]])
    vertices = np.vstack([mesh.vertices, midpoints])

    new_cells = []
    parent_cells = []

    def emit(tri, parent):
        new_cells.append(tri)
        parent_cells.append(parent)

    for c in range(mesh.num_cells):
        v0, v1, v2 = mesh.cells[c]
        e12, e20, e01 = mesh.cell_edges[c]
        if not edge_marked[e01]:
            emit((v0, v1, v2), c)
            continue
        m01 = new_vid[e01]
        # children (v2,v0,m01) and (v1,v2,m01) carry the old legs as
        # refinement edges, so leg marks resolve one level down
        if edge_marked[e20]:
            m20 = new_vid[e20]
            emit((m01, v2, m20), c)
            emit((v0, m01, m20), c)
        else:
            emit((v2, v0, m01), c)
        if edge_marked[e12]:
            m12 = new_vid[e12]
            emit((m01, v1, m12), c)
            emit((v2, m01, m12), c)
        else:
            emit((v1, v2, m01), c)

    return Mesh(vertices, np.asarray(new_cells, dtype=np.int64),
                boundary_rule=mesh.boundary_rule,
                generation=mesh.generation + 1,
                parent=mesh,
                parent_cells=np.asarray(parent_cells, dtype=np.int64),
                initial_area=mesh.initial_area,
                initial_min_angle=mesh.initial_min_angle)


def dorfler_mark(indicators, theta):
    """Minimal bulk-chasing selection.

    Returns the smallest set of cells (by descending indicator, ties by
    ascending id) whose squared indicators sum to at least ``theta``
    times the total.  All-zero indicators give an empty set.
    """
    indicators = np.asarray(indicators, dtype=float)
    if np.any(indicators < 0):
        raise ValueError("indicators must be nonnegative")
    if not 0.0 < theta < 1.0:
        raise ValueError("theta must lie in (0, 1)")
    total = indicators.sum()
    if total <= 0.0:
        return np.empty(0, dtype=np.int64)
    order = np.lexsort((np.arange(len(indicators)), -indicators))
    csum = np.cumsum(indicators[order])
    k = int(np.searchsorted(csum, theta * total - 1e-15 * total)) + 1
    return np.sort(order[:k])


def prolong_cellfield(field, target):
    """Transport a piecewise-constant field to a descendant mesh.

    Each target cell inherits its ancestor's value, so the represented
    function (and hence its integral) is unchanged.
    """
    chain = []
    m = target
    while m is not None and m is not field.mesh:
        chain.append(m)
        m = m.parent
    if m is None:
        raise ValueError("target mesh does not descend from the field's mesh")
    idx = np.arange(target.num_cells)
    for m in chain:
        idx = m.parent_cells[idx]
        # after this step idx points into m.parent's cells
    return CellField(target, field.values[idx])


def mesh_stats(mesh):
    """Summary record: h extremes, min angle, and entity counts."""
    return {
        "h_max": float(mesh.cell_diams.max()),
        "h_min": float(mesh.cell_diams.min()),
        "min_angle": mesh.min_angle,
        "cell_count": mesh.num_cells,
        "vertex_count": mesh.num_vertices,
    }


def check_mesh(mesh, rel_tol=1e-12):
    """Audit conformity, orientation, area conservation, and angles.

    Raises AssertionError on any violation; used by the mesh test suite
    after randomized refinement cycles.
    """
    counts = np.bincount(mesh.cell_edges.ravel(), minlength=mesh.num_edges)
    interior = mesh.edge_tags == EDGE_INTERIOR
    assert np.all(counts[interior] == 2), "hanging node: interior edge not shared by 2 cells"
    assert np.all(counts[~interior] == 1), "boundary edge shared by 2 cells"
    assert np.all(mesh.cell_areas > 0), "negative or zero cell area"
    assert abs(mesh.total_area - mesh.initial_area) <= rel_tol * mesh.initial_area, \
        "total area drifted from the initial mesh"
    assert mesh.min_angle >= mesh.initial_min_angle - 1e-9, "minimum angle degraded"
