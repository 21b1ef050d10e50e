"""Structured hexahedral grid and its element-to-DOF index maps.

Numbering conventions (all zero-based):

* node ``n(ix, iy, iz) = iz*(nelx+1)*(nely+1) + ix*(nely+1) + iy``
* DOFs of node ``n`` are ``(3n, 3n+1, 3n+2)`` for ``(ux, uy, uz)``
* element ``e(ex, ey, ez) = ez*nelx*nely + ex*nely + ey``
* local node order of an element: ``(ex,ey,ez), (ex+1,ey,ez), (ex+1,ey+1,ez),
  (ex,ey+1,ez)``, then the same four corners at ``ez+1``

Element matrices are flattened row-major into the triplet streams, so
``assembly_rows[576*e + 24*a + b] == edof_map[e, a]`` and
``assembly_cols[576*e + 24*a + b] == edof_map[e, b]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# (dx, dy, dz) offsets of the 8 local nodes
LOCAL_NODE_OFFSETS = np.array(
    [
        [0, 0, 0],
        [1, 0, 0],
        [1, 1, 0],
        [0, 1, 0],
        [0, 0, 1],
        [1, 0, 1],
        [1, 1, 1],
        [0, 1, 1],
    ],
    dtype=np.int64,
)


@dataclass(frozen=True, eq=False)
class GridMesh:
    nelx: int
    nely: int
    nelz: int
    edof_map: np.ndarray = field(repr=False)
    assembly_rows: np.ndarray = field(repr=False)
    assembly_cols: np.ndarray = field(repr=False)

    @property
    def dims(self) -> tuple[int, int, int]:
        return (self.nelx, self.nely, self.nelz)

    @property
    def n_elements(self) -> int:
        return self.nelx * self.nely * self.nelz

    @property
    def n_nodes(self) -> int:
        return (self.nelx + 1) * (self.nely + 1) * (self.nelz + 1)

    @property
    def n_dofs(self) -> int:
        return 3 * self.n_nodes

    def node_id(self, ix, iy, iz):
        """Global node id of lattice point ``(ix, iy, iz)``; works on arrays."""
        return iz * (self.nelx + 1) * (self.nely + 1) + ix * (self.nely + 1) + iy

    def element_id(self, ex, ey, ez):
        return ez * self.nelx * self.nely + ex * self.nely + ey

    def node_coordinates(self) -> np.ndarray:
        """(n_nodes, 3) lattice coordinates in element-length units, ordered by node id."""
        iz, ix, iy = np.meshgrid(
            np.arange(self.nelz + 1),
            np.arange(self.nelx + 1),
            np.arange(self.nely + 1),
            indexing="ij",
        )
        return np.column_stack([ix.ravel(), iy.ravel(), iz.ravel()]).astype(float)

    def element_indices(self) -> np.ndarray:
        """(n_elements, 3) integer ``(ex, ey, ez)`` per element id."""
        ez, ex, ey = np.meshgrid(
            np.arange(self.nelz), np.arange(self.nelx), np.arange(self.nely), indexing="ij"
        )
        return np.column_stack([ex.ravel(), ey.ravel(), ez.ravel()])

    def to_grid(self, values: np.ndarray) -> np.ndarray:
        """Reshape a per-element vector into an ``[ex, ey, ez]`` indexed array."""
        return np.asarray(values).reshape(self.nelz, self.nelx, self.nely).transpose(1, 2, 0)

    def from_grid(self, grid: np.ndarray) -> np.ndarray:
        """Inverse of :meth:`to_grid`."""
        return np.ascontiguousarray(np.asarray(grid).transpose(2, 0, 1)).ravel()


def build_mesh(nelx: int, nely: int, nelz: int) -> GridMesh:
    for name, n in (("nelx", nelx), ("nely", nely), ("nelz", nelz)):
        if int(n) != n or n < 1:
            raise ValueError(f"{name} must be a positive integer, got {n!r}")
    nelx, nely, nelz = int(nelx), int(nely), int(nelz)

    ez, ex, ey = np.meshgrid(
        np.arange(nelz), np.arange(nelx), np.arange(nely), indexing="ij"
    )
    ex, ey, ez = ex.ravel(), ey.ravel(), ez.ravel()
    corners = (
        (ez[:, None] + LOCAL_NODE_OFFSETS[:, 2]) * (nelx + 1) * (nely + 1)
        + (ex[:, None] + LOCAL_NODE_OFFSETS[:, 0]) * (nely + 1)
        + (ey[:, None] + LOCAL_NODE_OFFSETS[:, 1])
    )
    edof = (3 * corners[:, :, None] + np.arange(3)).reshape(-1, 24)

    rows = np.repeat(edof, 24, axis=1).ravel()
    cols = np.tile(edof, (1, 24)).ravel()
    for arr in (edof, rows, cols):
        arr.setflags(write=False)
    return GridMesh(nelx, nely, nelz, edof, rows, cols)


def element_centroids(mesh: GridMesh) -> np.ndarray:
    """Centroids ``(ex+0.5, ey+0.5, ez+0.5)`` of all elements, shape (n_elements, 3)."""
    return mesh.element_indices() + 0.5
