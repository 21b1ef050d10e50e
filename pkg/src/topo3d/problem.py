"""Problem definitions: dimensions, parameters, supports/loads, and masks."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .fem import BoundarySetup, MaterialModel, SolverConfig, build_element_stiffness
from .filtering import FILTER_MODES
from .geometry import ObstacleSpec, build_masks, read_stl, voxelize
from .mesh import GridMesh, build_mesh
from .optimizer import OcParams

log = logging.getLogger(__name__)


def default_cantilever(dims) -> BoundarySetup:
    """Clamp the x=0 face; unit downward (-z) load at the middle of the free end's bottom edge."""
    mesh = build_mesh(*dims)
    nelx, nely, nelz = mesh.dims
    if nely % 2:
        log.info("odd nely=%d: load placed at iy=%d instead of the exact mid-edge", nely, nely // 2)
    iy, iz = np.meshgrid(np.arange(nely + 1), np.arange(nelz + 1), indexing="ij")
    nodes = mesh.node_id(0, iy.ravel(), iz.ravel())
    fixed = (3 * nodes[:, None] + np.arange(3)).ravel()
    load_node = int(mesh.node_id(nelx, nely // 2, 0))
    return BoundarySetup.create(mesh.n_dofs, fixed, {3 * load_node + 2: -1.0})


def _lattice_range(value, limit: int, name: str) -> np.ndarray:
    lo, hi = (value, value) if isinstance(value, int) else value
    if not 0 <= lo <= hi <= limit:
        raise ConfigError(f"{name} range {value!r} outside [0, {limit}]")
    return np.arange(lo, hi + 1)


def boundary_from_dict(data: dict, mesh: GridMesh) -> BoundarySetup:
    """Supports and point loads addressed by lattice node coordinates.

    Format::

        {"fixed": [{"x": [0, 0], "y": [0, 16], "z": [0, 16], "dofs": "xyz"}],
         "loads": [{"node": [32, 8, 0], "force": [0, 0, -1]}]}

    Ranges are inclusive; a single integer pins one lattice plane.
    """
    limits = dict(zip("xyz", mesh.dims))
    fixed = []
    for block in data.get("fixed", []):
        axes = [_lattice_range(block.get(a, [0, limits[a]]), limits[a], a) for a in "xyz"]
        ix, iy, iz = (g.ravel() for g in np.meshgrid(*axes, indexing="ij"))
        nodes = mesh.node_id(ix, iy, iz)
        comps = ["xyz".index(c) for c in block.get("dofs", "xyz")]
        fixed.append((3 * nodes[:, None] + np.array(comps)).ravel())
    loads: dict[int, float] = {}
    for item in data.get("loads", []):
        ix, iy, iz = (int(v) for v in item["node"])
        for a, v in zip("xyz", (ix, iy, iz)):
            if not 0 <= v <= limits[a]:
                raise ConfigError(f"load node coordinate {a}={v} outside [0, {limits[a]}]")
        node = int(mesh.node_id(ix, iy, iz))
        for k, fk in enumerate(item["force"]):
            if fk:
                loads[3 * node + k] = loads.get(3 * node + k, 0.0) + float(fk)
    if not fixed:
        raise ConfigError("boundary config defines no fixed DOFs")
    return BoundarySetup.create(mesh.n_dofs, np.concatenate(fixed), loads)


@dataclass
class Setup:
    mesh: GridMesh
    ke: np.ndarray
    bc: BoundarySetup
    design_mask: np.ndarray
    passive_values: np.ndarray


@dataclass
class ProblemDefinition:
    nelx: int = 32
    nely: int = 16
    nelz: int = 16
    material: MaterialModel = field(default_factory=MaterialModel)
    oc: OcParams = field(default_factory=lambda: OcParams(volfrac=0.2))
    rmin: float = 4.0
    filter_mode: str = "density_weighted"
    max_iter: int = 200
    change_tol: float = 0.01
    solver: SolverConfig = field(default_factory=SolverConfig)
    problem: str = "cantilever"
    bc_config: str | None = None
    obstacle_config: str | ObstacleSpec | None = None
    design_stl: str | None = None
    export_threshold: float = 0.5
    out_dir: str = "runs"
    deterministic: bool = False
    threads: int = 0

    def __post_init__(self):
        for name in ("nelx", "nely", "nelz"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")
        if self.filter_mode not in FILTER_MODES:
            raise ConfigError(f"filter mode must be one of {FILTER_MODES}")
        if self.max_iter < 1:
            raise ConfigError("max_iter must be at least 1")
        if not self.rmin > 0:
            raise ConfigError("rmin must be positive")
        if not 0 < self.export_threshold < 1:
            raise ConfigError("export threshold must lie in (0, 1)")
        for name in ("bc_config", "design_stl"):
            path = getattr(self, name)
            if path is not None and not Path(path).is_file():
                raise ConfigError(f"{name.replace('_', ' ')} file not found: {path}")
        if isinstance(self.obstacle_config, (str, Path)) and not Path(self.obstacle_config).is_file():
            raise ConfigError(f"obstacle config file not found: {self.obstacle_config}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return (self.nelx, self.nely, self.nelz)

    def obstacles(self) -> ObstacleSpec | None:
        if self.obstacle_config is None or isinstance(self.obstacle_config, ObstacleSpec):
            return self.obstacle_config
        try:
            return ObstacleSpec.load(self.obstacle_config)
        except (ValueError, KeyError, TypeError) as exc:
            raise ConfigError(f"invalid obstacle config {self.obstacle_config}: {exc}") from exc

    def boundary(self, mesh: GridMesh) -> BoundarySetup:
        if self.bc_config is not None:
            try:
                data = json.loads(Path(self.bc_config).read_text())
            except json.JSONDecodeError as exc:
                raise ConfigError(f"invalid boundary config {self.bc_config}: {exc}") from exc
            return boundary_from_dict(data, mesh)
        if self.problem == "cantilever":
            return default_cantilever(mesh.dims)
        raise ConfigError(f"unknown built-in problem {self.problem!r}")

    def prepare(self) -> Setup:
        mesh = build_mesh(*self.dims)
        domain = None
        if self.design_stl is not None:
            domain = voxelize(read_stl(self.design_stl), self.dims)
        design, passive = build_masks(domain, self.obstacles(), self.dims)
        return Setup(mesh, build_element_stiffness(self.material.nu), self.boundary(mesh), design, passive)
