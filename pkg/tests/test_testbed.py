import numpy as np
import pytest

from magpod import pod
from magpod.exceptions import DegenerateElementError
from magpod.testbed import (
    DEFAULT_BOUNDS,
    ParamPoint,
    TestbedConfig,
    assemble,
    build_mesh,
    compute_kpi,
    is_feasible,
    solve,
    solve_sensitivities,
)

CFG = TestbedConfig(resolution=12)
CFG_BRAUER = TestbedConfig(resolution=12, material="brauer")
MIDPOINT = ParamPoint.midpoint()
OFF_CENTER = ParamPoint((5.0, 18.0, 12.0, 21.0))


@pytest.fixture(scope="module")
def weight():
    return pod.build_weight(MIDPOINT, CFG)


@pytest.fixture(scope="module")
def solution_off_center():
    return solve(OFF_CENTER, CFG)


def _fd_state_derivative(p, cfg, i, rel_step=1e-6):
    delta = rel_step * p.ranges[i]
    up = solve(p.shifted(i, delta), cfg).u
    dn = solve(p.shifted(i, -delta), cfg).u
    return (up - dn) / (2.0 * delta)


class TestAssemble:
    def test_zero_excitation_gives_zero_load(self):
        cfg = TestbedConfig(resolution=12, remanence=0.0, source_current_density=0.0)
        _, b = assemble(OFF_CENTER, None, cfg)
        assert np.array_equal(b, np.zeros_like(b))

    def test_linear_stiffness_independent_of_state(self):
        mesh = build_mesh(CFG)
        rng = np.random.default_rng(0)
        u1 = rng.normal(size=mesh.n_free)
        u2 = rng.normal(size=mesh.n_free)
        K1, _ = assemble(OFF_CENTER, u1, CFG)
        K2, _ = assemble(OFF_CENTER, u2, CFG)
        assert np.array_equal(K1, K2)

    def test_symmetric_and_spd(self):
        from magpod.linalg import spd_factorize

        K, _ = assemble(OFF_CENTER, None, CFG)
        assert np.abs(K - K.T).max() <= 1e-12 * np.abs(K).max()
        spd_factorize(K)  # raises if not SPD

    def test_interior_row_sums_vanish(self):
        # Constant fields lie in the stiffness kernel, so rows of nodes whose
        # entire stencil is free must sum to zero.
        mesh = build_mesh(CFG)
        K, _ = assemble(MIDPOINT, None, CFG)
        coords = mesh.nodes_mm[mesh.free]
        h = mesh.element_size_mm
        L = mesh.half_width_mm
        interior = np.flatnonzero(np.all(np.abs(coords) < L - 1.5 * h, axis=1))
        row_sums = K[interior].sum(axis=1)
        assert np.abs(row_sums).max() <= 1e-9 * np.abs(K).max()

    def test_source_current_contributes(self):
        cfg = TestbedConfig(resolution=12, remanence=0.0, source_current_density=2.0)
        _, b = assemble(MIDPOINT, None, cfg)
        assert np.abs(b).max() > 0.0

    def test_degenerate_geometry_raises(self):
        bounds = ((2.0, 12.0), (8.0, 320.0), (5.0, 15.0), (15.0, 23.0))
        monster = ParamPoint((7.0, 300.0, 10.0, 19.0), bounds)
        with pytest.raises(DegenerateElementError):
            assemble(monster, None, CFG)


class TestSolve:
    def test_zero_excitation(self):
        cfg = TestbedConfig(resolution=12, remanence=0.0)
        sol = solve(MIDPOINT, cfg)
        assert np.array_equal(sol.u, np.zeros_like(sol.u))
        assert np.array_equal(sol.sensitivities, np.zeros_like(sol.sensitivities))

    def test_linear_scaling_in_remanence(self):
        base = solve(OFF_CENTER, CFG)
        scaled = solve(OFF_CENTER, TestbedConfig(resolution=12, remanence=2.5))
        assert np.abs(scaled.u - 2.5 * base.u).max() <= 1e-12 * np.abs(base.u).max()

    def test_converged_residual(self, solution_off_center):
        assert solution_off_center.residual_norm <= CFG.newton_tol

    @pytest.mark.parametrize("i", range(4))
    def test_sensitivities_match_finite_differences(
        self, i, weight, solution_off_center
    ):
        fd = _fd_state_derivative(OFF_CENTER, CFG, i)
        an = solution_off_center.sensitivities[:, i]
        diff = an - fd
        err = np.sqrt(diff @ weight @ diff) / np.sqrt(fd @ weight @ fd)
        assert err <= 1e-4

    def test_sensitivities_match_fd_brauer(self, weight):
        sol = solve(OFF_CENTER, CFG_BRAUER)
        for i in range(4):
            fd = _fd_state_derivative(OFF_CENTER, CFG_BRAUER, i)
            diff = sol.sensitivities[:, i] - fd
            err = np.sqrt(diff @ weight @ diff) / np.sqrt(fd @ weight @ fd)
            assert err <= 1e-4

    def test_frozen_parameter_has_zero_column(self):
        bounds = ((5.0, 5.0), (8.0, 22.0), (5.0, 15.0), (15.0, 23.0))
        p = ParamPoint((5.0, 18.0, 12.0, 21.0), bounds)
        sol = solve(p, CFG)
        assert np.array_equal(sol.sensitivities[:, 0], np.zeros(sol.u.shape[0]))
        assert np.abs(sol.sensitivities[:, 1]).max() > 0.0

    def test_fd_fallback_matches_analytic(self, solution_off_center):
        cfg_fd = TestbedConfig(resolution=12, use_fd_parametric=True)
        sol_fd = solve(OFF_CENTER, cfg_fd)
        scale = np.abs(solution_off_center.sensitivities).max()
        assert (
            np.abs(sol_fd.sensitivities - solution_off_center.sensitivities).max()
            <= 1e-6 * scale
        )

    def test_mirror_symmetry(self):
        mesh = build_mesh(CFG)
        ua = solve(ParamPoint((9.0, 18.0, 12.0, 19.0)), CFG).u
        ub = solve(ParamPoint((9.0, 18.0, 8.0, 19.0)), CFG).u
        coords = mesh.nodes_mm[mesh.free]
        lookup = {
            (round(x, 9), round(y, 9)): k for k, (x, y) in enumerate(coords)
        }
        perm = np.array(
            [lookup[(round(-x, 9), round(y, 9))] for x, y in coords]
        )
        assert np.abs(ua - ub[perm]).max() <= 1e-8 * np.abs(ua).max()

    def test_fixed_topology_across_parameters(self):
        n = solve(MIDPOINT, CFG).u.shape[0]
        for vals in [(2.0, 8.0, 5.0, 15.0), (11.0, 21.0, 14.0, 22.0)]:
            assert solve(ParamPoint(vals), CFG).u.shape[0] == n

    def test_newton_quadratic_convergence(self):
        # Drive the iron collar towards saturation so Newton takes a few
        # genuinely nonlinear steps.
        cfg = TestbedConfig(resolution=12, material="brauer", remanence=1.6)
        sol = solve(OFF_CENTER, cfg)
        hist = sol.residual_history
        assert sol.newton_iterations >= 2
        ratios = [
            hist[k + 1] / hist[k] ** 2
            for k in range(1, len(hist) - 1)
            if hist[k] > 1e-12
        ]
        assert ratios, "no usable quadratic-regime pairs recorded"
        assert max(ratios) <= 1e3


class TestSolveSensitivities:
    def test_requires_converged_state(self):
        mesh = build_mesh(CFG)
        with pytest.raises(ValueError):
            solve_sensitivities(OFF_CENTER, np.ones(mesh.n_free), CFG)

    def test_matches_solve_output(self, solution_off_center):
        sens = solve_sensitivities(OFF_CENTER, solution_off_center.u, CFG)
        assert np.abs(sens - solution_off_center.sensitivities).max() <= 1e-12


class TestComputeKpi:
    def test_zero_excitation(self):
        cfg = TestbedConfig(resolution=12, remanence=0.0)
        sol = solve(MIDPOINT, cfg)
        kpi = compute_kpi(MIDPOINT, sol, cfg)
        assert kpi.value == 0.0
        assert np.array_equal(kpi.gradient, np.zeros(4))

    def test_energy_quadratic_in_remanence(self):
        w1 = compute_kpi(OFF_CENTER, solve(OFF_CENTER, CFG), CFG).value
        cfg2 = TestbedConfig(resolution=12, remanence=3.0)
        w2 = compute_kpi(OFF_CENTER, solve(OFF_CENTER, cfg2), cfg2).value
        assert w2 == pytest.approx(9.0 * w1, rel=1e-12)

    def test_energy_positive_over_box(self):
        for vals in [(2.0, 8.0, 5.0, 15.0), (11.9, 21.9, 10.0, 19.0)]:
            p = ParamPoint(vals)
            assert compute_kpi(p, solve(p, CFG), CFG).value > 0.0

    def test_energy_equals_quadratic_form(self, solution_off_center):
        K, _ = assemble(OFF_CENTER, solution_off_center.u, CFG)
        w = 0.5 * solution_off_center.u @ K @ solution_off_center.u
        kpi = compute_kpi(OFF_CENTER, solution_off_center, CFG)
        assert kpi.value == pytest.approx(w, rel=1e-12)

    @pytest.mark.parametrize("cfg", [CFG, CFG_BRAUER], ids=["linear", "brauer"])
    def test_gradient_matches_finite_differences(self, cfg):
        sol = solve(OFF_CENTER, cfg)
        kpi = compute_kpi(OFF_CENTER, sol, cfg)
        for i in range(4):
            delta = 1e-6 * OFF_CENTER.ranges[i]
            pu, pd = OFF_CENTER.shifted(i, delta), OFF_CENTER.shifted(i, -delta)
            wu = compute_kpi(pu, solve(pu, cfg), cfg).value
            wd = compute_kpi(pd, solve(pd, cfg), cfg).value
            fd = (wu - wd) / (2.0 * delta)
            assert abs(kpi.gradient[i] - fd) <= 1e-5 * abs(fd)

    def test_adjoint_consistent_with_chained_sensitivities(self, solution_off_center):
        # dW/dp = dW/dp|_u + (dW/du) du/dp with dW/du = K u at convergence.
        kpi = compute_kpi(OFF_CENTER, solution_off_center, CFG)
        K, b = assemble(OFF_CENTER, solution_off_center.u, CFG)
        dW_du = K @ solution_off_center.u
        cfg_fd = TestbedConfig(resolution=12, use_fd_parametric=True)
        kpi_fd = compute_kpi(OFF_CENTER, solution_off_center, cfg_fd)
        chained = dW_du @ solution_off_center.sensitivities
        # compare the state-dependent parts of both routes
        partial_adj = kpi.gradient - chained
        partial_fd = kpi_fd.gradient - chained
        assert np.abs(kpi.gradient - kpi_fd.gradient).max() <= 1e-6 * np.abs(
            kpi.gradient
        ).max()
        assert np.abs(partial_adj - partial_fd).max() <= 1e-6 * max(
            np.abs(partial_adj).max(), 1.0
        )


class TestIsFeasible:
    def test_midpoint_feasible(self):
        assert is_feasible(MIDPOINT, TestbedConfig())

    def test_lower_bounds_feasible(self):
        p = ParamPoint(tuple(b[0] for b in DEFAULT_BOUNDS))
        assert is_feasible(p, TestbedConfig())

    def test_magnet_leaving_domain_is_infeasible(self):
        bounds = ((2.0, 12.0), (8.0, 220.0), (5.0, 15.0), (15.0, 23.0))
        wide = ParamPoint((7.0, 150.0, 10.0, 19.0), bounds)
        assert not is_feasible(wide, TestbedConfig())

    def test_skewed_map_is_infeasible(self):
        # Largest magnet at full offset and tilt: the rectangle stays well
        # inside the domain but the blend map gets too compressed.
        from magpod.geometry import magnet_corners

        p = ParamPoint((12.0, 22.0, 15.0, 23.0))
        cfg = TestbedConfig()
        corners = np.abs(magnet_corners(p))
        assert corners.max() < cfg.half_width_mm - 2 * cfg.half_width_mm / cfg.resolution
        assert not is_feasible(p, cfg)


class TestConfigValidation:
    def test_rejects_odd_resolution(self):
        with pytest.raises(ValueError):
            TestbedConfig(resolution=9)

    def test_rejects_small_domain(self):
        with pytest.raises(ValueError):
            TestbedConfig(half_width_mm=30.0)

    def test_rejects_unknown_material(self):
        with pytest.raises(ValueError):
            TestbedConfig(material="steel")

    def test_roundtrip_dict(self):
        cfg = TestbedConfig(resolution=16, material="brauer")
        assert TestbedConfig.from_dict(cfg.to_dict()) == cfg
