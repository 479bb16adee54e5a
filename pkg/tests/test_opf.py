import numpy as np
import pytest

from ddopf.behavior import DataDrivenLineModel, cos_indices, sin_indices
from ddopf.errors import DimensionMismatch, ModelNotPE, ProjectionInfeasible
from ddopf.excitation import generate_excitation
from ddopf.grid import Grid, LineParams
from ddopf.opf import (
    AppConstraints,
    LinearObjective,
    build_dd_opf,
    build_generalized_dd_opf,
    build_reference_opf,
    demand_instance,
    restore_tightness,
    solve_opf,
    tightness_report,
)
from ddopf.physics import solve_radial_pf


def five_bus():
    edges = [(1, 2), (2, 4), (2, 5), (3, 5)]
    return Grid([1, 2, 3, 4, 5], edges, {e: LineParams(g=2.0, b=-20.0) for e in edges})


GRID = five_bus()
EDGE_MODEL = DataDrivenLineModel.from_trajectory(generate_excitation(GRID, 9, seed=101))
PAIR_MODEL = DataDrivenLineModel.from_trajectory(
    generate_excitation(GRID, 21, seed=102, mode="all-pairs"), include_injections=True
)


def model_for(variant):
    if variant == "reference":
        return None
    return PAIR_MODEL if variant == "dd-generalized" else EDGE_MODEL


ALL_VARIANTS = ("reference", "dd", "dd-convex", "dd-generalized")


class TestBuilders:
    def test_alpha_dimension_per_edge(self):
        prog, layout = build_dd_opf(GRID, EDGE_MODEL)
        assert layout.alpha.stop - layout.alpha.start == 9
        assert layout.phi.stop - layout.phi.start == 9
        assert prog.base.balls == layout.ball_pairs()
        assert len(layout.ball_pairs()) == 4

    def test_alpha_dimension_all_pairs(self):
        _, layout = build_generalized_dd_opf(GRID, PAIR_MODEL)
        assert layout.alpha.stop - layout.alpha.start == 21
        assert layout.phi.stop - layout.phi.start == 21
        assert len(layout.ball_pairs()) == 10

    def test_generalized_rejects_per_edge_model(self):
        with pytest.raises(DimensionMismatch):
            build_generalized_dd_opf(GRID, EDGE_MODEL)

    def test_dd_rejects_missing_model(self):
        with pytest.raises(ModelNotPE):
            build_dd_opf(GRID, None)

    def test_generalized_needs_injection_block(self):
        no_pg = DataDrivenLineModel(
            H_phi=PAIR_MODEL.H_phi, H_pe=PAIR_MODEL.H_pe, pe_report=PAIR_MODEL.pe_report
        )
        with pytest.raises(DimensionMismatch):
            build_generalized_dd_opf(GRID, no_pg)

    def test_generalized_map_ignores_phantom_pairs(self):
        # flows honestly depend only on actual edges: recovered linear map has
        # (numerically) zero gain from the six non-edge pair columns
        gain = PAIR_MODEL.H_pe @ PAIR_MODEL.phi_pinv()
        pair_cols = {p: k for k, p in enumerate(PAIR_MODEL_PAIRS)}
        phantom = [k for p, k in pair_cols.items() if p not in GRID.edges]
        for k in phantom:
            np.testing.assert_allclose(gain[:, 1 + 2 * k], 0.0, atol=1e-7)
            np.testing.assert_allclose(gain[:, 2 + 2 * k], 0.0, atol=1e-7)


PAIR_MODEL_PAIRS = tuple(
    (i, j) for a, i in enumerate(GRID.nodes) for j in GRID.nodes[a + 1 :]
)


class TestZeroDemand:
    @pytest.mark.parametrize("variant", ALL_VARIANTS)
    def test_everything_zero(self, variant):
        app = AppConstraints()
        for node in GRID.nodes:
            app.fix_injection(GRID, node, 0.0)
        sol = solve_opf(GRID, variant, model_for(variant), app)
        assert sol.status == "optimal"
        np.testing.assert_allclose(sol.p_e, 0.0, atol=1e-6)
        np.testing.assert_allclose(sol.p_g, 0.0, atol=1e-6)
        assert sol.objective == pytest.approx(0.0, abs=1e-6)
        assert sol.tightness.passed


class TestDemandInstances:
    @pytest.mark.parametrize("variant", ALL_VARIANTS)
    def test_tight_and_physical(self, variant):
        app, obj = demand_instance(GRID, {5: 0.4})
        sol = solve_opf(GRID, variant, model_for(variant), app, obj)
        assert sol.status == "optimal"
        assert sol.tightness.max_residual <= 1e-6
        # served demand shows up as negative injection
        assert sol.p_g[4] == pytest.approx(-0.4, abs=1e-6)

    def test_cross_variant_agreement(self):
        # distinct supply costs keep the optimizer unique across variants
        app, obj = demand_instance(GRID, {5: 0.5}, source_costs={1: 0.2, 2: 0.35, 3: 0.1, 4: 0.5})
        sols = {v: solve_opf(GRID, v, model_for(v), app, obj) for v in ALL_VARIANTS}
        ref = sols["reference"]
        for v in ("dd", "dd-convex", "dd-generalized"):
            np.testing.assert_allclose(sols[v].p_e, ref.p_e, atol=1e-4)
            np.testing.assert_allclose(sols[v].p_g, ref.p_g, atol=1e-4)

    def test_theta_round_trip_against_radial_pf(self):
        app, obj = demand_instance(GRID, {5: 0.45})
        sol = solve_opf(GRID, "dd-convex", EDGE_MODEL, app, obj)
        inj = {n: sol.p_g[GRID.node_index(n)] for n in (1, 2, 3, 4)}
        res = solve_radial_pf(GRID, inj, slack=5)
        np.testing.assert_allclose(sol.theta, res.theta, atol=1e-6)

    def test_infeasible_demand_detected(self):
        # demand beyond what capped sources can supply
        app, obj = demand_instance(GRID, {5: 10.0}, source_cap=1.0)
        sol = solve_opf(GRID, "reference", None, app, obj)
        assert sol.status == "infeasible"

    def test_training_column_pinned(self):
        app = AppConstraints().fix_phi(EDGE_MODEL.H_phi[:, 0])
        sol = solve_opf(GRID, "dd-convex", EDGE_MODEL, app)
        np.testing.assert_allclose(sol.p_e, EDGE_MODEL.H_pe[:, 0], atol=1e-8)

    def test_training_column_pinned_generalized(self):
        app = AppConstraints().fix_phi(PAIR_MODEL.H_phi[:, 0])
        sol = solve_opf(GRID, "dd-generalized", PAIR_MODEL, app)
        np.testing.assert_allclose(sol.p_g, PAIR_MODEL.H_pg[:, 0], atol=1e-8)


class TestTightnessAndRestoration:
    def test_report_on_circle(self):
        phi = np.array([1.0, 1.0, 0.0, 0.6, 0.8])
        rep = tightness_report(phi, 2)
        assert rep.passed and rep.max_residual == pytest.approx(0.0, abs=1e-15)

    def test_report_inside_disk(self):
        phi = np.array([1.0, 0.5, 0.5])
        rep = tightness_report(phi, 1)
        assert not rep.passed
        assert rep.residuals[0] == pytest.approx(0.5, abs=1e-15)

    def test_restore_identity_when_tight(self):
        app, obj = demand_instance(GRID, {5: 0.4})
        sol = solve_opf(GRID, "dd-convex", EDGE_MODEL, app, obj)
        restored = restore_tightness(sol)
        np.testing.assert_allclose(restored.p_e, sol.p_e, atol=1e-7)
        assert abs(restored.objective - sol.objective) <= 1e-6
        assert restored.tightness.max_residual <= 1e-12
        # projection is the identity on points already on the circles
        again = restore_tightness(restored)
        np.testing.assert_allclose(again.phi, restored.phi, atol=1e-10)
        np.testing.assert_allclose(again.p_e, restored.p_e, atol=1e-10)

    def test_relaxation_lower_bounds_circle_equality_optimum(self):
        # ball relaxation without the cosine bonus bounds the equality-
        # constrained optimum from below (its feasible set is a superset)
        app, obj = demand_instance(GRID, {5: 0.45}, source_costs={1: 0.3, 2: 0.1, 3: 0.2})
        relaxed = solve_opf(GRID, "dd-convex", EDGE_MODEL, app, obj, beta=0.0)
        projected = solve_opf(GRID, "dd", EDGE_MODEL, app, obj, beta=1.0)
        assert relaxed.objective <= projected.objective + 1e-7

    def test_solution_replays_feasibly(self):
        app, obj = demand_instance(GRID, {5: 0.4})
        for variant, model in (("dd-convex", EDGE_MODEL), ("dd-generalized", PAIR_MODEL)):
            sol = solve_opf(GRID, variant, model, app, obj)
            alpha = sol.alpha
            assert np.max(np.abs(model.H_phi @ alpha - sol.phi)) <= 1e-7
            assert np.max(np.abs(model.H_pe @ alpha - sol.p_e)) <= 1e-7
            n_pairs = len(sol.layout.pairs)
            c, s = sol.phi[cos_indices(n_pairs)], sol.phi[sin_indices(n_pairs)]
            assert np.max(c * c + s * s - 1.0) <= 1e-7
            # re-lifting the recovered angles reproduces phi when tight
            np.testing.assert_allclose(np.cos(sol.theta), c, atol=1e-9)
            np.testing.assert_allclose(np.sin(sol.theta), s, atol=1e-9)

    def test_restore_scales_pairs_radially(self):
        app, obj = demand_instance(GRID, {5: 0.4})
        sol = solve_opf(GRID, "dd-convex", EDGE_MODEL, app, obj)
        loose = sol
        loose.phi = sol.phi.copy()
        ci, si = cos_indices(4), sin_indices(4)
        loose.phi[ci[0]], loose.phi[si[0]] = 0.6, 0.0
        loose.app = None  # projected point no longer meets the fixed demand
        restored = restore_tightness(loose)
        assert restored.phi[ci[0]] == pytest.approx(1.0, abs=1e-12)
        assert restored.phi[si[0]] == pytest.approx(0.0, abs=1e-12)

    def test_restore_detects_app_violation(self):
        app, obj = demand_instance(GRID, {5: 0.4})
        sol = solve_opf(GRID, "dd-convex", EDGE_MODEL, app, obj)
        sol.phi = sol.phi.copy()
        sol.phi[cos_indices(4)[2]] = 0.7  # break the pair feeding the load
        sol.phi[sin_indices(4)[2]] = 0.0
        with pytest.raises(ProjectionInfeasible):
            restore_tightness(sol)

    def test_dd_variant_comes_back_restored(self):
        app, obj = demand_instance(GRID, {5: 0.4})
        sol = solve_opf(GRID, "dd", EDGE_MODEL, app, obj)
        assert sol.restored
        assert sol.tightness.max_residual <= 1e-12


class TestObjectiveVector:
    def test_beta_lands_on_cosines(self):
        prog, layout = build_reference_opf(GRID, beta=2.5)
        c = prog.base.c
        np.testing.assert_allclose(c[layout.cos_cols()], -2.5)
        np.testing.assert_allclose(c[layout.sin_cols()], 0.0)

    def test_losses_objective_counts_injections(self):
        obj = LinearObjective(c_pg=np.ones(5))
        assert obj.value(np.zeros(8), np.array([0.1, 0.2, 0.0, 0.0, -0.25])) == pytest.approx(0.05)
