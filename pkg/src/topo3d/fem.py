"""H8 element stiffness, sparse global assembly, and the K U = F solve.

Stiffness entries use the modified SIMP law
``E(rho) = emin + rho**penal * (e0 - emin)`` per element.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import InsufficientConstraints, SingularSystem
from .mesh import LOCAL_NODE_OFFSETS, GridMesh

log = logging.getLogger(__name__)

GAUSS_POINTS = np.array([-1.0, 1.0]) / np.sqrt(3.0)


@dataclass(frozen=True)
class MaterialModel:
    e0: float = 1.0
    emin: float = 1e-9
    nu: float = 0.3
    penal: float = 3.0

    def __post_init__(self):
        if not 0 < self.emin < self.e0:
            raise ValueError(f"need 0 < emin < e0, got emin={self.emin}, e0={self.e0}")
        if self.penal < 1:
            raise ValueError(f"penal must be >= 1, got {self.penal}")
        if not 0 <= self.nu < 0.5:
            raise ValueError(f"nu must lie in [0, 0.5), got {self.nu}")

    def youngs(self, rho: np.ndarray) -> np.ndarray:
        return self.emin + np.asarray(rho, dtype=float) ** self.penal * (self.e0 - self.emin)

    def youngs_derivative(self, rho: np.ndarray) -> np.ndarray:
        return self.penal * np.asarray(rho, dtype=float) ** (self.penal - 1) * (self.e0 - self.emin)


def elasticity_matrix(nu: float) -> np.ndarray:
    """6x6 isotropic constitutive matrix for unit modulus, Voigt order xx,yy,zz,yz,xz,xy."""
    c = 1.0 / ((1 + nu) * (1 - 2 * nu))
    d = np.zeros((6, 6))
    d[:3, :3] = nu
    np.fill_diagonal(d[:3, :3], 1 - nu)
    d[3:, 3:] = np.eye(3) * (1 - 2 * nu) / 2
    return c * d


def build_element_stiffness(nu: float = 0.3) -> np.ndarray:
    """24x24 stiffness of a unit-cube H8 element with unit Young's modulus.

    Integrated with 2x2x2 Gauss quadrature. DOF order follows the local node
    order of :mod:`topo3d.mesh`, three components per node.
    """
    if not 0 <= nu < 0.5:
        raise ValueError(f"nu must lie in [0, 0.5), got {nu}")
    signs = 2.0 * LOCAL_NODE_OFFSETS - 1.0  # natural coordinates of the corners
    d = elasticity_matrix(nu)
    ke = np.zeros((24, 24))
    for xi in GAUSS_POINTS:
        for eta in GAUSS_POINTS:
            for zeta in GAUSS_POINTS:
                pt = np.array([xi, eta, zeta])
                # dN/dxi_k = s_k/8 * prod_{m != k} (1 + s_m pt_m)
                fac = 1.0 + signs * pt
                dn = np.empty((8, 3))
                for k in range(3):
                    others = [m for m in range(3) if m != k]
                    dn[:, k] = signs[:, k] / 8.0 * fac[:, others[0]] * fac[:, others[1]]
                # unit cube: x = (xi + 1)/2, so J = I/2 and det J = 1/8
                dndx = 2.0 * dn
                b = np.zeros((6, 24))
                b[0, 0::3] = dndx[:, 0]
                b[1, 1::3] = dndx[:, 1]
                b[2, 2::3] = dndx[:, 2]
                b[3, 1::3] = dndx[:, 2]
                b[3, 2::3] = dndx[:, 1]
                b[4, 0::3] = dndx[:, 2]
                b[4, 2::3] = dndx[:, 0]
                b[5, 0::3] = dndx[:, 1]
                b[5, 1::3] = dndx[:, 0]
                ke += b.T @ d @ b / 8.0
    ke = 0.5 * (ke + ke.T)
    ke.setflags(write=False)
    return ke


@dataclass(frozen=True, eq=False)
class BoundarySetup:
    """Fixed DOFs and point loads. Build with :meth:`create`."""

    n_dofs: int
    fixed_dofs: np.ndarray = field(repr=False)
    loads: Mapping[int, float] = field(repr=False)

    @classmethod
    def create(cls, n_dofs: int, fixed_dofs, loads: Mapping[int, float]) -> "BoundarySetup":
        fixed = np.unique(np.asarray(list(fixed_dofs), dtype=np.int64))
        if fixed.size and (fixed[0] < 0 or fixed[-1] >= n_dofs):
            raise ValueError("fixed DOF index out of range")
        fixed_set = set(fixed.tolist())
        kept: dict[int, float] = {}
        for dof, value in loads.items():
            dof = int(dof)
            if not 0 <= dof < n_dofs:
                raise ValueError(f"load DOF {dof} out of range [0, {n_dofs})")
            if dof in fixed_set:
                log.warning("dropping load %g on fixed DOF %d", value, dof)
                continue
            kept[dof] = kept.get(dof, 0.0) + float(value)
        fixed.setflags(write=False)
        return cls(n_dofs, fixed, kept)

    @property
    def free_dofs(self) -> np.ndarray:
        mask = np.ones(self.n_dofs, dtype=bool)
        mask[self.fixed_dofs] = False
        return np.flatnonzero(mask)

    def load_vector(self) -> np.ndarray:
        f = np.zeros(self.n_dofs)
        for dof, value in self.loads.items():
            f[dof] += value
        return f


@dataclass(frozen=True)
class SolverConfig:
    backend: str = "cg"
    rtol: float = 1e-8
    max_iter: int | None = None  # None: 10 * number of unknowns

    def __post_init__(self):
        if self.backend not in ("cg", "direct"):
            raise ValueError(f"unknown solver backend {self.backend!r}")
        if not self.rtol > 0:
            raise ValueError("solver rtol must be positive")


def assemble_global(mesh: GridMesh, ke: np.ndarray, rho, mat: MaterialModel) -> sp.csr_matrix:
    """Full (pre-BC) global stiffness; duplicate triplets are summed."""
    rho = np.asarray(rho, dtype=float)
    if rho.shape != (mesh.n_elements,):
        raise ValueError(f"expected {mesh.n_elements} densities, got shape {rho.shape}")
    values = (mat.youngs(rho)[:, None] * np.asarray(ke).ravel()[None, :]).ravel()
    k = sp.coo_matrix(
        (values, (mesh.assembly_rows, mesh.assembly_cols)), shape=(mesh.n_dofs, mesh.n_dofs)
    ).tocsr()
    k.sum_duplicates()
    return k


class ReducedAssembler:
    """Assembles K restricted to the free DOFs directly into a fixed CSR pattern.

    The sparsity pattern and the triplet-to-slot map are computed once;
    each call only scatters the SIMP-scaled values with ``np.bincount``,
    which sums in a fixed order and is therefore bit-reproducible.
    """

    def __init__(self, mesh: GridMesh, ke: np.ndarray, bc: BoundarySetup):
        self.mesh = mesh
        self.ke_flat = np.asarray(ke).ravel()
        free = bc.free_dofs
        self.free_dofs = free
        self.fixed_dofs = bc.fixed_dofs
        remap = np.full(mesh.n_dofs, -1, dtype=np.int64)
        remap[free] = np.arange(free.size)
        r = remap[mesh.assembly_rows]
        c = remap[mesh.assembly_cols]
        keep = (r >= 0) & (c >= 0)
        self._keep = np.flatnonzero(keep)
        r, c = r[keep], c[keep]
        n = free.size
        key = r * n + c
        uniq, slot = np.unique(key, return_inverse=True)
        self._slot = slot.ravel()
        rows_u = uniq // n
        self.indices = (uniq % n).astype(np.int32)
        self.indptr = np.searchsorted(rows_u, np.arange(n + 1)).astype(np.int32)
        self.shape = (n, n)
        self.f_free = bc.load_vector()[free]

    def assemble(self, rho, mat: MaterialModel) -> sp.csr_matrix:
        values = (mat.youngs(rho)[:, None] * self.ke_flat[None, :]).ravel()[self._keep]
        data = np.bincount(self._slot, weights=values, minlength=self.indices.size)
        return sp.csr_matrix((data, self.indices, self.indptr), shape=self.shape)

    def expand(self, u_free: np.ndarray) -> np.ndarray:
        u = np.zeros(self.mesh.n_dofs)
        u[self.free_dofs] = u_free
        return u


def _solve_free(k_ff: sp.csr_matrix, f_f: np.ndarray, cfg: SolverConfig, x0=None) -> np.ndarray:
    n = f_f.size
    if n == 0 or not np.any(f_f):
        return np.zeros(n)
    diag = k_ff.diagonal()
    if np.any(diag <= 0):
        raise SingularSystem("stiffness matrix has non-positive diagonal entries")
    if cfg.backend == "direct":
        try:
            lu = spla.splu(k_ff.tocsc(), permc_spec="MMD_AT_PLUS_A")
        except RuntimeError as exc:
            raise SingularSystem(f"sparse factorization failed: {exc}") from exc
        u = lu.solve(f_f)
        if not np.all(np.isfinite(u)):
            raise SingularSystem("sparse factorization produced non-finite displacements")
        return u
    maxiter = cfg.max_iter if cfg.max_iter is not None else 10 * n
    precond = sp.diags(1.0 / diag)
    u, info = spla.cg(k_ff, f_f, x0=x0, rtol=cfg.rtol, atol=0.0, maxiter=maxiter, M=precond)
    if info != 0:
        res = np.linalg.norm(f_f - k_ff @ u) / np.linalg.norm(f_f)
        raise SingularSystem(
            f"conjugate gradient did not converge in {maxiter} iterations "
            f"(relative residual {res:.3e}, target {cfg.rtol:.1e})"
        )
    return u


def rigid_body_modes(mesh: GridMesh) -> np.ndarray:
    """(n_dofs, 6) basis of rigid translations and infinitesimal rotations."""
    xyz = mesh.node_coordinates()
    xyz = xyz - xyz.mean(axis=0)
    modes = np.zeros((mesh.n_dofs, 6))
    for k in range(3):
        modes[k::3, k] = 1.0
    x, y, z = xyz.T
    modes[0::3, 3], modes[1::3, 3] = -y, x
    modes[1::3, 4], modes[2::3, 4] = -z, y
    modes[0::3, 5], modes[2::3, 5] = z, -x
    return modes


def check_constraints(mesh: GridMesh, bc: BoundarySetup) -> None:
    """Raise InsufficientConstraints if the fixed DOFs allow a rigid-body motion."""
    modes = rigid_body_modes(mesh)[bc.fixed_dofs]
    rank = np.linalg.matrix_rank(modes) if modes.size else 0
    if rank < 6:
        raise InsufficientConstraints(
            f"fixed DOFs suppress only {rank} of 6 rigid-body modes; "
            "fix more DOFs (e.g. all three components on a face)"
        )


def solve_displacements(
    k_full: sp.spmatrix,
    bc: BoundarySetup,
    solver_cfg: SolverConfig | None = None,
    mesh: GridMesh | None = None,
) -> np.ndarray:
    """Solve K U = F with fixed DOFs eliminated; returns the full-length U.

    When ``mesh`` is given, a solver failure is diagnosed as
    :class:`InsufficientConstraints` if the supports leave a rigid-body mode.
    """
    cfg = solver_cfg or SolverConfig()
    if k_full.shape != (bc.n_dofs, bc.n_dofs):
        raise ValueError("stiffness matrix and boundary setup disagree on n_dofs")
    free = bc.free_dofs
    k_csr = sp.csr_matrix(k_full)
    k_ff = k_csr[free][:, free]
    try:
        u_f = _solve_free(k_ff, bc.load_vector()[free], cfg)
    except SingularSystem:
        if mesh is not None:
            check_constraints(mesh, bc)
        elif bc.fixed_dofs.size == 0:
            raise InsufficientConstraints("no fixed DOFs: add supports to remove rigid-body modes")
        raise
    u = np.zeros(bc.n_dofs)
    u[free] = u_f
    return u


def compliance(u: np.ndarray, f) -> float:
    """``F^T U``; ``f`` may be a dense vector or a DOF -> value mapping."""
    if isinstance(f, Mapping):
        return float(sum(v * u[d] for d, v in f.items()))
    return float(np.dot(f, u))


def element_energies(u: np.ndarray, mesh: GridMesh, ke: np.ndarray) -> np.ndarray:
    """Unit-modulus strain energy ``u_e^T ke u_e`` for every element."""
    ue = u[mesh.edof_map]
    return np.einsum("ij,jk,ik->i", ue, ke, ue)
