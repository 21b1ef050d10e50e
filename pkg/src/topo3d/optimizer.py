"""SIMP compliance minimisation with the optimality-criteria update."""

from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import BisectionFailure, Topo3dError
from .fem import GridMesh, MaterialModel, ReducedAssembler, _solve_free, check_constraints
from .fem import compliance as fe_compliance
from .fem import element_energies
from .filtering import apply_sensitivity_filter, build_filter

log = logging.getLogger(__name__)

PHASES = ("assembly", "solve", "filter", "update")
# bisection volume checks are asserted on designs up to this many designable elements
MONOTONE_CHECK_LIMIT = 512


@dataclass
class DensityField:
    rho: np.ndarray
    design_mask: np.ndarray
    passive_values: np.ndarray

    @classmethod
    def initial(cls, design_mask, passive_values, volfrac: float) -> "DensityField":
        design_mask = np.asarray(design_mask, dtype=bool)
        passive_values = np.asarray(passive_values, dtype=float)
        rho = np.where(design_mask, volfrac, passive_values)
        return cls(rho, design_mask, passive_values)

    @classmethod
    def uniform(cls, n: int, value: float) -> "DensityField":
        return cls(np.full(n, float(value)), np.ones(n, dtype=bool), np.zeros(n))

    def designable_volume(self) -> float:
        return float(self.rho[self.design_mask].mean())

    def copy(self) -> "DensityField":
        return DensityField(self.rho.copy(), self.design_mask, self.passive_values)


@dataclass(frozen=True)
class OcParams:
    volfrac: float
    move: float = 0.2
    bisect_tol: float = 1e-6
    bisect_hi: float = 1e9

    def __post_init__(self):
        if not 0 < self.volfrac < 1:
            raise ValueError(f"volfrac must lie in (0, 1), got {self.volfrac}")
        if not 0 < self.move <= 1:
            raise ValueError(f"move must lie in (0, 1], got {self.move}")


@dataclass
class IterationRecord:
    iteration: int
    compliance: float
    volume: float
    change: float
    timings: dict[str, float]


@dataclass
class OptimizationTrace:
    records: list[IterationRecord] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    @property
    def compliances(self) -> np.ndarray:
        return np.array([r.compliance for r in self.records])

    @property
    def volumes(self) -> np.ndarray:
        return np.array([r.volume for r in self.records])

    def phase_totals(self) -> dict[str, float]:
        return {p: float(sum(r.timings[p] for r in self.records)) for p in PHASES}

    def loop_time(self) -> float:
        return float(sum(r.timings.get("total", 0.0) for r in self.records))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iter", "compliance", "volume", "change"] + [f"t_{p}" for p in PHASES])
        for r in self.records:
            w.writerow(
                [r.iteration, repr(r.compliance), repr(r.volume), repr(r.change)]
                + [f"{r.timings[p]:.6f}" for p in PHASES]
            )
        return buf.getvalue()

    def summary(self) -> dict:
        totals = self.phase_totals()
        return {
            "iterations": len(self.records),
            "final_compliance": self.records[-1].compliance if self.records else None,
            "final_volume": self.records[-1].volume if self.records else None,
            "final_change": self.records[-1].change if self.records else None,
            "phase_seconds": totals,
            "loop_seconds": self.loop_time(),
        }


def compute_sensitivities(u, mesh: GridMesh, ke, rho: DensityField, mat: MaterialModel):
    """Compliance, its density gradient, and the volume gradient.

    Returns ``(c, dc, dv)`` where ``dc_e = -dE/drho_e * u_e^T ke u_e`` and
    ``dv`` is 1 on designable elements and 0 on passive ones.
    """
    energies = element_energies(u, mesh, ke)
    c = float(np.sum(mat.youngs(rho.rho) * energies))
    dc = -mat.youngs_derivative(rho.rho) * energies
    dv = rho.design_mask.astype(float)
    return c, dc, dv


def _volume_at(lam, rho, dc, dv, lo, hi):
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.sqrt(np.maximum(-dc, 0.0) / (lam * dv))
    return np.clip(rho * scale, lo, hi)


def oc_update(rho: DensityField, dc, dv, params: OcParams) -> DensityField:
    """Move-limited OC step; the multiplier is found by bisection on the designable mean."""
    design = rho.design_mask
    x = rho.rho[design]
    dcd = np.asarray(dc, dtype=float)[design]
    dvd = np.asarray(dv, dtype=float)[design]
    lo = np.maximum(0.0, x - params.move)
    hi = np.minimum(1.0, x + params.move)
    vmin, vmax = lo.mean(), hi.mean()
    if not vmin - 1e-12 <= params.volfrac <= vmax + 1e-12:
        raise BisectionFailure(
            f"target volume {params.volfrac:g} outside the range [{vmin:.6g}, {vmax:.6g}] "
            "reachable within the move limit"
        )

    check = x.size <= MONOTONE_CHECK_LIMIT
    seen: list[tuple[float, float]] = []
    l1, l2 = 0.0, params.bisect_hi
    xnew = x
    while (l2 - l1) / (l1 + l2) > params.bisect_tol:
        lmid = 0.5 * (l1 + l2)
        xnew = _volume_at(lmid, x, dcd, dvd, lo, hi)
        vol = xnew.mean()
        if check:
            seen.append((lmid, vol))
        if vol > params.volfrac:
            l1 = lmid
        else:
            l2 = lmid
    if check and seen:
        seen.sort()
        vols = np.array([v for _, v in seen])
        assert np.all(np.diff(vols) <= 1e-12), "volume is not monotone in the multiplier"

    out = rho.rho.copy()
    out[design] = xnew
    out[~design] = rho.passive_values[~design]
    return DensityField(out, rho.design_mask, rho.passive_values)


class OptimizationFailed(Topo3dError):
    """Wraps an error raised mid-run; ``trace`` and ``density`` hold the partial state."""

    def __init__(self, cause: Exception, trace: OptimizationTrace, density: DensityField):
        super().__init__(f"optimization failed after {len(trace)} iterations: {cause}")
        self.cause = cause
        self.trace = trace
        self.density = density


def run_optimization(problem, callback: Callable[[int, DensityField], None] | None = None):
    """Run the assemble/solve/sensitivity/filter/update loop for ``problem``.

    ``problem`` is a :class:`topo3d.problem.ProblemDefinition`.  Returns
    ``(density, trace)``.  ``callback(iteration, density)`` is invoked after
    every OC update.
    """
    setup = problem.prepare()
    mesh, ke, bc, mat = setup.mesh, setup.ke, setup.bc, problem.material
    check_constraints(mesh, bc)

    assembler = ReducedAssembler(mesh, ke, bc)
    filt = build_filter(mesh, problem.rmin)
    density = DensityField.initial(setup.design_mask, setup.passive_values, problem.oc.volfrac)
    trace = OptimizationTrace()
    u_free = None
    f = bc.load_vector()

    for it in range(1, problem.max_iter + 1):
        try:
            t0 = time.perf_counter()
            k_ff = assembler.assemble(density.rho, mat)
            t1 = time.perf_counter()
            u_free = _solve_free(k_ff, assembler.f_free, problem.solver, x0=u_free)
            u = assembler.expand(u_free)
            t2 = time.perf_counter()
            c, dc, dv = compute_sensitivities(u, mesh, ke, density, mat)
            t3 = time.perf_counter()
            dc = apply_sensitivity_filter(filt, density.rho, dc, problem.filter_mode)
            t4 = time.perf_counter()
            dc = np.minimum(dc, 0.0)
            new = oc_update(density, dc, dv, problem.oc)
            change = float(np.max(np.abs(new.rho - density.rho)))
            t5 = time.perf_counter()
        except Exception as exc:
            raise OptimizationFailed(exc, trace, density) from exc

        density = new
        timings = {
            "assembly": t1 - t0,
            "solve": t2 - t1,
            "filter": t4 - t3,
            "update": (t3 - t2) + (t5 - t4),
            "total": t5 - t0,
        }
        rec = IterationRecord(it, c, density.designable_volume(), change, timings)
        trace.records.append(rec)
        log.info(
            "it %4d  c %.6e  vol %.4f  change %.4f  (%.2fs)",
            it, c, rec.volume, change, timings["total"],
        )
        if callback is not None:
            callback(it, density)
        if change < problem.change_tol:
            break
    # energy check on the last solve
    cf = fe_compliance(u, f)
    if cf > 0 and abs(cf - trace.records[-1].compliance) > 1e-6 * cf:
        log.warning("energy identity mismatch: F.U=%g, sum of element energies=%g", cf, c)
    return density, trace
