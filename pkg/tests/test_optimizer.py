import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import cantilever
from topo3d.errors import BisectionFailure
from topo3d.fem import MaterialModel, SolverConfig, assemble_global, compliance, solve_displacements
from topo3d.geometry import ObstacleSpec
from topo3d.optimizer import (
    DensityField,
    OcParams,
    OptimizationFailed,
    compute_sensitivities,
    oc_update,
    run_optimization,
)
from topo3d.problem import ProblemDefinition

DIRECT = SolverConfig("direct")


def solve_compliance(mesh, bc, ke, rho, mat):
    u = solve_displacements(assemble_global(mesh, ke, rho, mat), bc, DIRECT)
    return compliance(u, bc.load_vector()), u


def test_void_element_has_zero_sensitivity(ke, mat):
    mesh, bc = cantilever((2, 2, 2))
    rho = np.full(8, 0.5)
    rho[3] = 0.0
    _, u = solve_compliance(mesh, bc, ke, rho, mat)
    _, dc, dv = compute_sensitivities(u, mesh, ke, DensityField(rho, np.ones(8, bool), np.zeros(8)), mat)
    assert dc[3] == 0.0
    assert np.all(dc <= 0)
    np.testing.assert_array_equal(dv, 1.0)


def test_passive_elements_get_zero_volume_gradient(ke, mat):
    mesh, bc = cantilever((2, 2, 2))
    mask = np.ones(8, bool)
    mask[[1, 6]] = False
    field = DensityField.initial(mask, np.zeros(8), 0.3)
    _, u = solve_compliance(mesh, bc, ke, field.rho, mat)
    c, _, dv = compute_sensitivities(u, mesh, ke, field, mat)
    np.testing.assert_array_equal(dv, mask.astype(float))
    assert c == pytest.approx(compliance(u, bc.load_vector()), rel=1e-8)


def test_sensitivities_match_central_differences(ke, mat):
    mesh, bc = cantilever((4, 2, 2))
    rho = np.full(mesh.n_elements, 0.5)
    _, u = solve_compliance(mesh, bc, ke, rho, mat)
    _, dc, _ = compute_sensitivities(u, mesh, ke, DensityField.uniform(mesh.n_elements, 0.5), mat)
    h = 1e-6
    fd = np.empty(mesh.n_elements)
    for e in range(mesh.n_elements):
        up, dn = rho.copy(), rho.copy()
        up[e] += h
        dn[e] -= h
        fd[e] = (solve_compliance(mesh, bc, ke, up, mat)[0] - solve_compliance(mesh, bc, ke, dn, mat)[0]) / (2 * h)
    rel = np.abs(dc - fd) / np.abs(fd)
    assert rel.max() < 1e-4


class TestOcUpdate:
    def test_uniform_state_is_a_fixed_point(self):
        field = DensityField.uniform(27, 0.3)
        new = oc_update(field, np.full(27, -1.7), np.ones(27), OcParams(0.3))
        np.testing.assert_allclose(new.rho, 0.3, rtol=1e-5)

    def test_move_limit_clamps(self):
        field = DensityField.uniform(10, 0.4)
        dc = np.full(10, -1.0)
        dc[0] = -1e12
        new = oc_update(field, dc, np.ones(10), OcParams(0.4, move=0.2))
        assert new.rho[0] == pytest.approx(0.6)
        assert np.all(np.abs(new.rho - 0.4) <= 0.2 + 1e-15)

    def test_passive_element_stays_void(self):
        mask = np.ones(27, bool)
        mask[13] = False
        field = DensityField.initial(mask, np.zeros(27), 0.3)
        dc = -np.random.default_rng(2).random(27)
        new = oc_update(field, dc, mask.astype(float), OcParams(0.3))
        assert new.rho[13] == 0.0
        assert abs(new.rho[mask].mean() - 0.3) <= 1e-4

    def test_passive_solid_value_is_preserved(self):
        mask = np.array([True, True, False, True])
        field = DensityField.initial(mask, np.array([0, 0, 1.0, 0]), 0.5)
        new = oc_update(field, -np.array([1.0, 2.0, 3.0, 4.0]), mask.astype(float), OcParams(0.5))
        assert new.rho[2] == 1.0

    def test_unreachable_target(self):
        field = DensityField.uniform(8, 0.1)
        with pytest.raises(BisectionFailure, match="range"):
            oc_update(field, -np.ones(8), np.ones(8), OcParams(0.9, move=0.2))

    @settings(max_examples=40, deadline=None)
    @given(
        st.integers(0, 2**20),
        st.floats(0.05, 0.95),
        st.floats(0.05, 1.0),
    )
    def test_volume_and_bounds(self, seed, volfrac, move):
        rng = np.random.default_rng(seed)
        n = 64
        mask = rng.random(n) > 0.2
        mask[0] = True
        passive = np.where(rng.random(n) > 0.5, 1.0, 0.0)
        rho = np.where(mask, np.clip(volfrac + rng.uniform(-move, move, n) * 0.5, 0, 1), passive)
        # shift the designable mean onto the target so the move limit can reach it
        rho[mask] = np.clip(rho[mask] - rho[mask].mean() + volfrac, 0, 1)
        field = DensityField(rho, mask, passive)
        dc = -rng.random(n) * 10 ** rng.uniform(-3, 3)
        try:
            new = oc_update(field, dc, mask.astype(float), OcParams(volfrac, move=move))
        except BisectionFailure:
            return
        assert np.all((new.rho >= 0) & (new.rho <= 1))
        np.testing.assert_array_equal(new.rho[~mask], passive[~mask])
        assert abs(new.rho[mask].mean() - volfrac) <= 1e-4
        assert np.all(np.abs(new.rho - rho) <= move + 1e-12)


def test_params_validation():
    with pytest.raises(ValueError):
        OcParams(1.0)
    with pytest.raises(ValueError):
        OcParams(0.3, move=0.0)


def small_problem(**kw):
    base = dict(nelx=8, nely=4, nelz=4, rmin=1.5, max_iter=30)
    base.update(kw)
    return ProblemDefinition(**base)


def test_small_run_reduces_compliance_and_keeps_volume():
    seen = []
    density, trace = run_optimization(small_problem(oc=OcParams(0.3)), callback=lambda i, d: seen.append(d.rho.copy()))
    assert len(trace) == len(seen) >= 2
    assert trace.compliances[-1] < trace.compliances[0]
    assert np.all(np.abs(trace.volumes - 0.3) <= 1e-4)
    assert all(r.timings[p] >= 0 for r in trace.records for p in ("assembly", "solve", "filter", "update"))
    assert trace.records[-1].change < 0.01 or len(trace) == 30


def test_near_solid_volume_fraction(ke):
    problem = ProblemDefinition(nelx=2, nely=2, nelz=2, rmin=1.5, max_iter=60, oc=OcParams(0.999))
    density, trace = run_optimization(problem)
    assert np.all(density.rho > 0.99)
    mesh, bc = cantilever((2, 2, 2))
    solid_c = solve_compliance(mesh, bc, ke, np.ones(8), MaterialModel())[0]
    assert trace.compliances[-1] == pytest.approx(solid_c, rel=0.02)


def test_obstacle_elements_never_gain_material():
    obstacles = ObstacleSpec.from_dict(
        {"shapes": [{"type": "cylinder", "axis": "y", "center": [0.5, 0.5, 0.5], "radius": 0.25, "height": 1.0}]}
    )
    passive_ok = []

    def check(_, d):
        passive_ok.append(np.all(d.rho[~d.design_mask] == 0.0))

    density, trace = run_optimization(small_problem(obstacle_config=obstacles, oc=OcParams(0.25)), check)
    assert (~density.design_mask).sum() > 0
    assert all(passive_ok)
    assert np.all(np.abs(trace.volumes - 0.25) <= 1e-4)


def test_failure_carries_partial_trace():
    bad = small_problem(max_iter=5, solver=SolverConfig("cg", max_iter=2))
    with pytest.raises(OptimizationFailed) as info:
        run_optimization(bad)
    assert len(info.value.trace) == 0
    assert "conjugate gradient" in str(info.value)


def test_trace_csv_header():
    _, trace = run_optimization(small_problem(max_iter=2))
    lines = trace.to_csv().splitlines()
    assert lines[0] == "iter,compliance,volume,change,t_assembly,t_solve,t_filter,t_update"
    assert len(lines) == 3
    s = trace.summary()
    assert s["iterations"] == 2 and set(s["phase_seconds"]) == {"assembly", "solve", "filter", "update"}
