"""STL reading/writing, centroid voxelization, and obstacle masks.

Grids are addressed with the element numbering of :mod:`topo3d.mesh`;
occupancy vectors are per-element in element-id order.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .errors import AllPassive, DegenerateBounds, EmptyDesign, EmptyMesh, MalformedStl
from .mesh import build_mesh

STL_HEADER = f"topo3d {__version__}".encode().ljust(80, b" ")
_RECORD = np.dtype([("normal", "<f4", 3), ("v", "<f4", (3, 3)), ("attr", "<u2")])
# fraction of an element length by which rays are nudged off lattice alignments
RAY_OFFSET = (1e-7, 0.618e-7)


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    normals: np.ndarray  # (n, 3) float32
    vertices: np.ndarray  # (n, 3, 3) float32

    def __post_init__(self):
        if len(self.vertices) == 0:
            raise EmptyMesh("STL contains no triangles")
        if not np.all(np.isfinite(self.vertices)):
            raise MalformedStl("non-finite vertex coordinates")

    def __len__(self):
        return len(self.vertices)

    @property
    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        pts = self.vertices.reshape(-1, 3).astype(float)
        return pts.min(axis=0), pts.max(axis=0)


def _parse_ascii(data: bytes) -> TriangleMesh:
    tokens = data.split()
    if not tokens or tokens[0] != b"solid":
        raise MalformedStl("missing 'solid' keyword")
    normals, verts = [], []
    i = 1
    # skip the optional solid name
    while i < len(tokens) and tokens[i] not in (b"facet", b"endsolid"):
        i += 1
    try:
        while tokens[i] == b"facet":
            if tokens[i + 1] != b"normal":
                raise MalformedStl("expected 'normal'")
            normals.append([float(t) for t in tokens[i + 2 : i + 5]])
            if tokens[i + 5 : i + 7] != [b"outer", b"loop"]:
                raise MalformedStl("expected 'outer loop'")
            i += 7
            tri = []
            for _ in range(3):
                if tokens[i] != b"vertex":
                    raise MalformedStl("expected 'vertex'")
                tri.append([float(t) for t in tokens[i + 1 : i + 4]])
                i += 4
            verts.append(tri)
            if tokens[i : i + 2] != [b"endloop", b"endfacet"]:
                raise MalformedStl("expected 'endloop endfacet'")
            i += 2
        if tokens[i] != b"endsolid":
            raise MalformedStl(f"unexpected token {tokens[i]!r}")
    except (IndexError, ValueError) as exc:
        raise MalformedStl(f"truncated or invalid ASCII STL: {exc}") from exc
    if not verts:
        raise EmptyMesh("STL contains no triangles")
    return TriangleMesh(
        np.array(normals, dtype=np.float32).reshape(-1, 3),
        np.array(verts, dtype=np.float32).reshape(-1, 3, 3),
    )


def _parse_binary(data: bytes) -> TriangleMesh:
    if len(data) < 84:
        raise MalformedStl(f"binary STL needs at least 84 bytes, got {len(data)}")
    (count,) = struct.unpack_from("<I", data, 80)
    body = len(data) - 84
    if body != 50 * count:
        raise MalformedStl(
            f"header declares {count} triangles ({50 * count} bytes) but body has {body} bytes"
        )
    if count == 0:
        raise EmptyMesh("STL contains no triangles")
    rec = np.frombuffer(data, dtype=_RECORD, count=count, offset=84)
    return TriangleMesh(rec["normal"].copy(), rec["v"].copy())


def parse_stl(data: bytes) -> TriangleMesh:
    """Parse binary or ASCII STL bytes.

    Input starting with ``solid`` is tried as ASCII first; binary files whose
    header happens to begin with ``solid`` fall back to the binary reader.
    """
    if data[:5] == b"solid":
        try:
            return _parse_ascii(data)
        except MalformedStl as ascii_err:
            try:
                return _parse_binary(data)
            except MalformedStl:
                raise ascii_err from None
    return _parse_binary(data)


def read_stl(path) -> TriangleMesh:
    return parse_stl(Path(path).read_bytes())


def write_stl(normals: np.ndarray, vertices: np.ndarray) -> bytes:
    rec = np.zeros(len(vertices), dtype=_RECORD)
    rec["normal"] = normals
    rec["v"] = vertices
    return STL_HEADER + struct.pack("<I", len(rec)) + rec.tobytes()


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    dims: tuple[int, int, int]
    occupancy: np.ndarray = field(repr=False)  # bool, element-id order

    def count(self) -> int:
        return int(self.occupancy.sum())


def voxelize(mesh: TriangleMesh, dims: Sequence[int], bounds=None) -> VoxelGrid:
    """Mark elements whose centroid lies inside the closed surface.

    ``bounds`` (``(lo, hi)`` corners) defaults to the mesh bounding box and is
    mapped onto the grid.  Inside/outside is decided by parity of crossings of
    a +x ray from each centroid; rays are shifted by ``RAY_OFFSET`` element
    lengths in y and z so they never graze lattice-aligned edges or vertices.
    Non-watertight input gives best-effort results.
    """
    nelx, nely, nelz = (int(d) for d in dims)
    lo, hi = mesh.bounds if bounds is None else (np.asarray(b, dtype=float) for b in bounds)
    extent = hi - lo
    if np.any(extent <= 0):
        raise DegenerateBounds(f"bounding box has zero extent: lo={lo}, hi={hi}")
    h = extent / np.array([nelx, nely, nelz])

    # work in element-length units with the grid origin at 0
    v = (mesh.vertices.astype(float) - lo) / h
    vy, vz = v[:, :, 1], v[:, :, 2]
    ray_y0, ray_z0 = 0.5 + RAY_OFFSET[0], 0.5 + RAY_OFFSET[1]

    # candidate rays per triangle from its yz bounding box
    jy0 = np.clip(np.ceil(vy.min(axis=1) - ray_y0), 0, nely).astype(np.int64)
    jy1 = np.clip(np.floor(vy.max(axis=1) - ray_y0) + 1, 0, nely).astype(np.int64)
    jz0 = np.clip(np.ceil(vz.min(axis=1) - ray_z0), 0, nelz).astype(np.int64)
    jz1 = np.clip(np.floor(vz.max(axis=1) - ray_z0) + 1, 0, nelz).astype(np.int64)
    ny_c = np.maximum(jy1 - jy0, 0)
    nz_c = np.maximum(jz1 - jz0, 0)
    counts = ny_c * nz_c
    tri = np.repeat(np.arange(len(v)), counts)
    local = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
    ey = jy0[tri] + local % np.maximum(ny_c[tri], 1)
    ez = jz0[tri] + local // np.maximum(ny_c[tri], 1)
    py, pz = ey + ray_y0, ez + ray_z0

    a, b, c = v[tri, 0], v[tri, 1], v[tri, 2]

    def edge(p, q):
        return (q[:, 1] - p[:, 1]) * (pz - p[:, 2]) - (q[:, 2] - p[:, 2]) * (py - p[:, 1])

    w0, w1, w2 = edge(b, c), edge(c, a), edge(a, b)
    area = w0 + w1 + w2
    inside = ((w0 > 0) & (w1 > 0) & (w2 > 0)) | ((w0 < 0) & (w1 < 0) & (w2 < 0))
    inside &= area != 0
    xcross = (w0 * a[:, 0] + w1 * b[:, 0] + w2 * c[:, 0])[inside] / area[inside]
    ey, ez = ey[inside], ez[inside]

    # each crossing toggles every centroid on its ray that lies below it
    xc = np.arange(nelx) + 0.5
    k = np.searchsorted(xc, xcross, side="left")
    diff = np.zeros((nelz, nely, nelx + 1), dtype=np.int64)
    np.add.at(diff, (ez, ey, np.zeros_like(k)), 1)
    np.add.at(diff, (ez, ey, k), -1)
    crossings = np.cumsum(diff, axis=2)[:, :, :nelx]
    occ = (crossings % 2 == 1).transpose(0, 2, 1).ravel()  # -> [ez, ex, ey]
    return VoxelGrid((nelx, nely, nelz), occ)


# -- obstacles ---------------------------------------------------------------

_AXES = {"x": 0, "y": 1, "z": 2}


@dataclass(frozen=True)
class Box:
    min: tuple[float, float, float]
    max: tuple[float, float, float]

    def contains(self, p: np.ndarray) -> np.ndarray:
        return np.all((p >= np.asarray(self.min)) & (p <= np.asarray(self.max)), axis=1)


@dataclass(frozen=True)
class Sphere:
    center: tuple[float, float, float]
    radius: float

    def contains(self, p: np.ndarray) -> np.ndarray:
        return np.sum((p - np.asarray(self.center)) ** 2, axis=1) <= self.radius**2


@dataclass(frozen=True)
class Cylinder:
    axis: str
    center: tuple[float, float, float]
    radius: float
    height: float

    def contains(self, p: np.ndarray) -> np.ndarray:
        a = _AXES[self.axis]
        d = p - np.asarray(self.center)
        radial = np.delete(d, a, axis=1)
        return (np.sum(radial**2, axis=1) <= self.radius**2) & (np.abs(d[:, a]) <= self.height / 2)


def _unit_point(value, name) -> tuple[float, float, float]:
    pt = tuple(float(x) for x in value)
    if len(pt) != 3 or not all(0.0 <= x <= 1.0 for x in pt):
        raise ValueError(f"{name} must be three normalized coordinates in [0, 1], got {value!r}")
    return pt


def _positive_unit(value, name) -> float:
    x = float(value)
    if not 0.0 < x <= 1.0:
        raise ValueError(f"{name} must lie in (0, 1], got {value!r}")
    return x


@dataclass(frozen=True)
class ObstacleSpec:
    """Void regions in coordinates normalized to the unit cube over the domain.

    Shapes are closed sets; membership is tested per element centroid
    in normalized coordinates, so a cylinder of normalized radius r has an
    elliptical cross-section on a non-cubic grid.
    """

    shapes: tuple = ()

    @classmethod
    def from_dict(cls, data: dict) -> "ObstacleSpec":
        if not isinstance(data, dict) or not isinstance(data.get("shapes"), list):
            raise ValueError('obstacle config must be an object with a "shapes" list')
        shapes = []
        for i, s in enumerate(data["shapes"]):
            kind = s.get("type")
            where = f"shapes[{i}]"
            if kind == "box":
                lo = _unit_point(s["min"], f"{where}.min")
                hi = _unit_point(s["max"], f"{where}.max")
                if not all(a < b for a, b in zip(lo, hi)):
                    raise ValueError(f"{where}: box min must be < max componentwise")
                shapes.append(Box(lo, hi))
            elif kind == "sphere":
                shapes.append(
                    Sphere(_unit_point(s["center"], f"{where}.center"),
                           _positive_unit(s["radius"], f"{where}.radius"))
                )
            elif kind == "cylinder":
                axis = s.get("axis")
                if axis not in _AXES:
                    raise ValueError(f"{where}: axis must be one of x, y, z")
                shapes.append(
                    Cylinder(
                        axis,
                        _unit_point(s["center"], f"{where}.center"),
                        _positive_unit(s["radius"], f"{where}.radius"),
                        _positive_unit(s["height"], f"{where}.height"),
                    )
                )
            else:
                raise ValueError(f"{where}: unknown shape type {kind!r}")
        return cls(tuple(shapes))

    @classmethod
    def load(cls, path) -> "ObstacleSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def contains(self, points: np.ndarray) -> np.ndarray:
        hit = np.zeros(len(points), dtype=bool)
        for shape in self.shapes:
            hit |= shape.contains(points)
        return hit


def normalized_centroids(dims: Sequence[int]) -> np.ndarray:
    mesh = build_mesh(*dims)
    return (mesh.element_indices() + 0.5) / np.array(mesh.dims, dtype=float)


def build_masks(domain: VoxelGrid | None, obstacles: ObstacleSpec | None, dims):
    """Return ``(design_mask, passive_values)``; passive elements are void (0.0)."""
    dims = tuple(int(d) for d in dims)
    n = dims[0] * dims[1] * dims[2]
    design = np.ones(n, dtype=bool)
    if domain is not None:
        if tuple(domain.dims) != dims:
            raise ValueError(f"domain voxel grid {domain.dims} does not match dims {dims}")
        design &= domain.occupancy
    if obstacles is not None and obstacles.shapes:
        design &= ~obstacles.contains(normalized_centroids(dims))
    if not design.any():
        raise AllPassive("no designable elements remain after applying domain and obstacles")
    return design, np.zeros(n)


# -- export ------------------------------------------------------------------

# For each axis: the four corner offsets of the +axis face, counter-clockwise
# seen from outside.
_FACE_CORNERS = {
    0: np.array([[1, 0, 0], [1, 1, 0], [1, 1, 1], [1, 0, 1]]),
    1: np.array([[0, 1, 0], [0, 1, 1], [1, 1, 1], [1, 1, 0]]),
    2: np.array([[0, 0, 1], [1, 0, 1], [1, 1, 1], [0, 1, 1]]),
}


def voxel_surface(solid: np.ndarray):
    """Exposed faces of a boolean ``[ex, ey, ez]`` array as (normals, vertices)."""
    padded = np.pad(solid, 1)
    normals, tris = [], []
    for axis in range(3):
        for sign in (1, -1):
            neighbour = np.roll(padded, -sign, axis=axis)[1:-1, 1:-1, 1:-1]
            cells = np.argwhere(solid & ~neighbour)
            if not len(cells):
                continue
            quad = _FACE_CORNERS[axis]
            if sign < 0:
                quad = quad[::-1].copy()
                quad[:, axis] = 0
            corners = cells[:, None, :] + quad[None, :, :]
            tris.append(corners[:, [0, 1, 2], :])
            tris.append(corners[:, [0, 2, 3], :])
            nrm = np.zeros(3)
            nrm[axis] = sign
            normals.append(np.tile(nrm, (2 * len(cells), 1)))
    if not tris:
        return np.zeros((0, 3), np.float32), np.zeros((0, 3, 3), np.float32)
    verts = np.concatenate(tris).astype(np.float32)
    return np.concatenate(normals).astype(np.float32), verts


def export_stl(rho, dims, threshold: float = 0.5) -> bytes:
    """Binary STL of the voxel surface of ``{rho > threshold}`` in element units."""
    if not 0 < threshold < 1:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    mesh = build_mesh(*dims)
    solid = mesh.to_grid(np.asarray(rho) > threshold)
    if not solid.any():
        raise EmptyDesign(f"no element has density above {threshold}")
    normals, verts = voxel_surface(solid)
    return write_stl(normals, verts)
