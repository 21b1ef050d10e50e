"""Sensitivity filter built from centroid distances with a KD-tree."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

from .mesh import GridMesh

FILTER_MODES = ("plain", "density_weighted")
DENSITY_FLOOR = 1e-3


@dataclass(frozen=True, eq=False)
class FilterOperator:
    h: sp.csr_matrix = field(repr=False)
    hs: np.ndarray = field(repr=False)
    rmin: float
    entry_rows: np.ndarray = field(repr=False)  # row index of every stored entry of h


def build_filter(mesh: GridMesh, rmin: float) -> FilterOperator:
    """Weights ``max(0, rmin - dist)`` for centroid pairs strictly closer than ``rmin``.

    Distances are evaluated from integer element offsets so the weights are
    reproducible bit for bit regardless of how the neighbours were found.
    """
    if not rmin > 0:
        raise ValueError(f"rmin must be positive, got {rmin}")
    idx = mesh.element_indices()
    tree = cKDTree(idx + 0.5)
    pairs = tree.query_pairs(r=rmin * (1 + 1e-9), output_type="ndarray")
    i = np.concatenate([pairs[:, 0], pairs[:, 1], np.arange(mesh.n_elements)])
    j = np.concatenate([pairs[:, 1], pairs[:, 0], np.arange(mesh.n_elements)])
    dist = np.sqrt(np.sum((idx[i] - idx[j]) ** 2, axis=1).astype(float))
    w = rmin - dist
    keep = w > 0
    n = mesh.n_elements
    h = sp.csr_matrix((w[keep], (i[keep], j[keep])), shape=(n, n))
    h.sort_indices()
    hs = np.asarray(h.sum(axis=1)).ravel()
    entry_rows = np.repeat(np.arange(n), np.diff(h.indptr))
    return FilterOperator(h, hs, float(rmin), entry_rows)


def apply_sensitivity_filter(op: FilterOperator, rho, dc, mode: str = "density_weighted") -> np.ndarray:
    dc = np.asarray(dc, dtype=float)
    n = op.hs.size
    if dc.shape != (n,):
        raise ValueError(f"expected {n} sensitivities, got shape {dc.shape}")
    if mode == "plain":
        # centred form of (H dc) / hs: constants pass through bit for bit
        diff = op.h.data * (dc[op.h.indices] - dc[op.entry_rows])
        return dc + np.bincount(op.entry_rows, weights=diff, minlength=n) / op.hs
    if mode == "density_weighted":
        rho = np.asarray(rho, dtype=float)
        if rho.shape != (n,):
            raise ValueError(f"expected {n} densities, got shape {rho.shape}")
        return (op.h @ (rho * dc)) / (op.hs * np.maximum(rho, DENSITY_FLOOR))
    raise ValueError(f"unknown filter mode {mode!r}; expected one of {FILTER_MODES}")
