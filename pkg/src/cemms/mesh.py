"""Structured coarse/fine quadrilateral grids on the unit square.

The coarse grid has ``n_coarse`` x ``n_coarse`` square elements of size
H = 1/n_coarse; each coarse element is refined into ``refine`` x ``refine``
fine cells of size h = H/refine.  Everything is indexed row-major with the
y index outermost, so assemblies are reproducible bit for bit.

Local node order inside a fine cell is (SW, SE, NW, NE).  Boundary sides are
numbered 0=bottom, 1=right, 2=top, 3=left; boundary fine edges are stored in
that side order, each side swept in increasing coordinate.
"""

from dataclasses import dataclass, field

import numpy as np

INTERIOR = 0
DIRICHLET = 1
NEUMANN = 2

_SIDE_NAMES = ("bottom", "right", "top", "left")


@dataclass(frozen=True, eq=False)
class GridGeometry:
    """Coarse mesh, fine mesh and boundary labeling, immutable after build."""

    n_coarse: int
    refine: int
    nodes: np.ndarray          # (n_nodes, 2) coordinates
    cells: np.ndarray          # (n_cells, 4) node ids, (SW, SE, NW, NE)
    cell_coarse: np.ndarray    # (n_cells,) owning coarse element id
    cells_of_coarse: np.ndarray  # (N, refine^2) fine cell ids per coarse element
    nodes_of_coarse: np.ndarray  # (N, (refine+1)^2) node ids, ascending
    edge_nodes: np.ndarray     # (n_bedges, 2) boundary edge endpoints
    edge_side: np.ndarray      # (n_bedges,) side id 0..3
    edge_mid: np.ndarray       # (n_bedges, 2) edge midpoints
    edge_cell: np.ndarray      # (n_bedges,) adjacent fine cell
    edge_label: np.ndarray     # (n_bedges,) DIRICHLET or NEUMANN
    node_class: np.ndarray     # (n_nodes,) INTERIOR / DIRICHLET / NEUMANN

    @property
    def n_elements(self):
        return self.n_coarse * self.n_coarse

    @property
    def n_fine(self):
        """Fine cells per axis."""
        return self.n_coarse * self.refine

    @property
    def n_nodes(self):
        return (self.n_fine + 1) ** 2

    @property
    def n_cells(self):
        return self.n_fine ** 2

    @property
    def H(self):
        return 1.0 / self.n_coarse

    @property
    def h(self):
        return 1.0 / self.n_fine

    @property
    def free_nodes(self):
        """Global free DOFs: every node not tagged Dirichlet."""
        return np.flatnonzero(self.node_class != DIRICHLET)

    def coarse_coords(self, i):
        """(ex, ey) grid coordinates of coarse element i."""
        return i % self.n_coarse, i // self.n_coarse

    def element_at(self, ex, ey):
        return ey * self.n_coarse + ex

    def cells_of_elements(self, element_set):
        """Fine cell ids covered by a set of coarse elements, ascending."""
        out = self.cells_of_coarse[np.asarray(element_set, dtype=np.int64)]
        return np.sort(out.ravel())


@dataclass(frozen=True, eq=False)
class OversampleRegion:
    """A coarse element enlarged by ``layers`` rings of neighbors.

    ``fine_dof_set`` holds the free fine nodes of the region: nodes on the
    part of the region boundary interior to the domain are constrained to
    zero, Dirichlet nodes are always constrained, nodes on a Neumann part of
    the domain boundary stay free.
    """

    center_element: int
    layers: int
    element_set: np.ndarray    # ascending coarse element ids
    fine_dof_set: np.ndarray   # ascending free fine node ids
    bounds: tuple = field(default=())  # (ex0, ex1, ey0, ey1) coarse block


def _label_edges(n_fine, edge_mid, edge_side, boundary_spec):
    """Resolve a boundary spec into per-edge DIRICHLET/NEUMANN labels.

    Accepted specs: 'dirichlet' / 'neumann' for the whole boundary, a dict
    mapping side names ('bottom', 'right', 'top', 'left') to 'D'/'N', or a
    callable (x, y, side) -> 'D'/'N' evaluated at edge midpoints.
    """
    n_edges = len(edge_side)
    labels = np.empty(n_edges, dtype=np.int8)
    if isinstance(boundary_spec, str):
        key = boundary_spec.lower()
        if key in ("dirichlet", "all-dirichlet", "d"):
            labels[:] = DIRICHLET
        elif key in ("neumann", "all-neumann", "n", "robin"):
            labels[:] = NEUMANN
        else:
            raise ValueError(f"unknown boundary spec {boundary_spec!r}")
        return labels
    if isinstance(boundary_spec, dict):
        missing = [s for s in _SIDE_NAMES if s not in boundary_spec]
        if missing:
            raise ValueError(f"boundary spec does not cover sides {missing}")
        for side, name in enumerate(_SIDE_NAMES):
            tag = str(boundary_spec[name]).upper()
            if tag not in ("D", "N"):
                raise ValueError(f"side {name!r}: label must be 'D' or 'N', got {tag!r}")
            labels[edge_side == side] = DIRICHLET if tag == "D" else NEUMANN
        return labels
    if callable(boundary_spec):
        for e in range(n_edges):
            tag = str(boundary_spec(edge_mid[e, 0], edge_mid[e, 1], int(edge_side[e]))).upper()
            if tag not in ("D", "N"):
                raise ValueError("boundary spec callable must return 'D' or 'N'")
            labels[e] = DIRICHLET if tag == "D" else NEUMANN
        return labels
    raise ValueError("boundary spec must be a string, dict or callable")


def build_grids(n_coarse, refine, boundary_spec="dirichlet"):
    """Build the coarse/fine grid pair with boundary classification.

    Parameters
    ----------
    n_coarse : coarse elements per axis (>= 2)
    refine : fine cells per coarse cell per axis (>= 2)
    boundary_spec : see `_label_edges`
    """
    if n_coarse < 2:
        raise ValueError(f"n_coarse must be >= 2, got {n_coarse}")
    if refine < 2:
        raise ValueError(f"refine must be >= 2, got {refine}")

    n = n_coarse * refine
    npa = n + 1

    xs = np.linspace(0.0, 1.0, npa)
    X, Y = np.meshgrid(xs, xs, indexing="xy")
    nodes = np.column_stack([X.ravel(), Y.ravel()])

    cx, cy = np.meshgrid(np.arange(n), np.arange(n), indexing="xy")
    cx = cx.ravel()
    cy = cy.ravel()
    sw = cy * npa + cx
    cells = np.column_stack([sw, sw + 1, sw + npa, sw + npa + 1]).astype(np.int64)

    cell_coarse = (cy // refine) * n_coarse + (cx // refine)

    # fine cells / nodes per coarse element
    N = n_coarse * n_coarse
    cells_of_coarse = np.empty((N, refine * refine), dtype=np.int64)
    nodes_of_coarse = np.empty((N, (refine + 1) ** 2), dtype=np.int64)
    for ey in range(n_coarse):
        for ex in range(n_coarse):
            i = ey * n_coarse + ex
            fy = np.arange(ey * refine, (ey + 1) * refine)
            fx = np.arange(ex * refine, (ex + 1) * refine)
            cells_of_coarse[i] = (fy[:, None] * n + fx[None, :]).ravel()
            ny_ = np.arange(ey * refine, (ey + 1) * refine + 1)
            nx_ = np.arange(ex * refine, (ex + 1) * refine + 1)
            nodes_of_coarse[i] = (ny_[:, None] * npa + nx_[None, :]).ravel()

    # boundary edges: bottom, right, top, left; each swept in increasing coord
    k = np.arange(n)
    h = 1.0 / n
    enodes, eside, ecell = [], [], []
    enodes.append(np.column_stack([k, k + 1]))                         # bottom
    ecell.append(k)
    enodes.append(np.column_stack([(k + 1) * npa - 1, (k + 2) * npa - 1]))  # right
    ecell.append(k * n + (n - 1))
    enodes.append(np.column_stack([n * npa + k, n * npa + k + 1]))     # top
    ecell.append((n - 1) * n + k)
    enodes.append(np.column_stack([k * npa, (k + 1) * npa]))           # left
    ecell.append(k * n)
    for side in range(4):
        eside.append(np.full(n, side, dtype=np.int8))
    edge_nodes = np.vstack(enodes).astype(np.int64)
    edge_side = np.concatenate(eside)
    edge_cell = np.concatenate(ecell).astype(np.int64)
    edge_mid = 0.5 * (nodes[edge_nodes[:, 0]] + nodes[edge_nodes[:, 1]])

    edge_label = _label_edges(n, edge_mid, edge_side, boundary_spec)

    node_class = np.full(npa * npa, INTERIOR, dtype=np.int8)
    neu = edge_nodes[edge_label == NEUMANN].ravel()
    node_class[neu] = NEUMANN
    # Dirichlet wins at junction nodes
    dir_ = edge_nodes[edge_label == DIRICHLET].ravel()
    node_class[dir_] = DIRICHLET

    return GridGeometry(
        n_coarse=n_coarse,
        refine=refine,
        nodes=nodes,
        cells=cells,
        cell_coarse=cell_coarse,
        cells_of_coarse=cells_of_coarse,
        nodes_of_coarse=nodes_of_coarse,
        edge_nodes=edge_nodes,
        edge_side=edge_side,
        edge_mid=edge_mid,
        edge_cell=edge_cell,
        edge_label=edge_label,
        node_class=node_class,
    )


def oversample_region(geom, i, m):
    """Oversampled region around coarse element i with m neighbor layers.

    On this structured grid the recursive closure-neighborhood definition
    collapses to the axis-aligned block of coarse elements within Chebyshev
    distance m, clipped to the domain (cross-checked by a property test
    against the literal recursion).
    """
    if not (0 <= i < geom.n_elements):
        raise IndexError(f"element index {i} out of range")
    if m < 1:
        raise ValueError(f"layers must be >= 1, got {m}")

    nc = geom.n_coarse
    ex, ey = geom.coarse_coords(i)
    x0, x1 = max(0, ex - m), min(nc - 1, ex + m)
    y0, y1 = max(0, ey - m), min(nc - 1, ey + m)
    eys, exs = np.meshgrid(np.arange(y0, y1 + 1), np.arange(x0, x1 + 1), indexing="ij")
    element_set = (eys * nc + exs).ravel()

    fine_dof_set = region_free_nodes(geom, x0, x1, y0, y1)
    return OversampleRegion(
        center_element=i,
        layers=m,
        element_set=element_set,
        fine_dof_set=fine_dof_set,
        bounds=(x0, x1, y0, y1),
    )


def region_free_nodes(geom, x0, x1, y0, y1):
    """Free fine nodes of the coarse block [x0..x1] x [y0..y1].

    A node is free when, per axis, it is strictly inside the block or the
    block edge it sits on coincides with the domain boundary; Dirichlet
    nodes are removed unconditionally.  Nodes on a Neumann stretch of the
    domain boundary therefore stay free, which is the natural reading of the
    local space when the region touches a flux boundary.
    """
    r = geom.refine
    n = geom.n_fine
    nx_lo, nx_hi = x0 * r, (x1 + 1) * r
    ny_lo, ny_hi = y0 * r, (y1 + 1) * r

    ix = np.arange(nx_lo, nx_hi + 1)
    iy = np.arange(ny_lo, ny_hi + 1)
    ok_x = (ix > nx_lo) & (ix < nx_hi)
    ok_x |= (ix == nx_lo) & (nx_lo == 0)
    ok_x |= (ix == nx_hi) & (nx_hi == n)
    ok_y = (iy > ny_lo) & (iy < ny_hi)
    ok_y |= (iy == ny_lo) & (ny_lo == 0)
    ok_y |= (iy == ny_hi) & (ny_hi == n)

    IY, IX = np.meshgrid(iy[ok_y], ix[ok_x], indexing="ij")
    ids = (IY * (n + 1) + IX).ravel()
    ids = ids[geom.node_class[ids] != DIRICHLET]
    return np.sort(ids)


def global_region(geom):
    """The whole domain as an OversampleRegion (layers = n_coarse - 1)."""
    nc = geom.n_coarse
    return OversampleRegion(
        center_element=-1,
        layers=nc - 1,
        element_set=np.arange(geom.n_elements, dtype=np.int64),
        fine_dof_set=geom.free_nodes,
        bounds=(0, nc - 1, 0, nc - 1),
    )
