import numpy as np
import pytest
from scipy.stats import qmc

from magpod.exceptions import SequenceExhaustedError, UnsupportedDimensionError
from magpod.sampling import MAX_POINTS, plan_dataset, scale_to_bounds, sobol_unit
from magpod.testbed import DEFAULT_BOUNDS, ParamPoint, TestbedConfig


class TestSobolUnit:
    def test_first_point_is_cube_midpoint(self):
        assert np.array_equal(sobol_unit(1, 4), np.full((1, 4), 0.5))

    def test_golden_prefix_1d(self):
        # Pinned fixture for the embedded direction numbers (Gray-code order).
        pts = sobol_unit(4, 1).ravel()
        assert np.array_equal(pts, [0.5, 0.75, 0.25, 0.375])

    def test_strictly_inside_unit_cube(self):
        pts = sobol_unit(200, 6)
        assert np.all(pts > 0.0) and np.all(pts < 1.0)

    @pytest.mark.parametrize("d", [1, 2, 4, 8])
    def test_matches_scipy_reference(self, d):
        # Independent oracle: scipy's Sobol uses the same direction-number set.
        mine = sobol_unit(255, d)
        ref = qmc.Sobol(d=d, scramble=False).random(256)[1:]
        assert np.array_equal(mine, ref)

    def test_dimension_guard(self):
        with pytest.raises(UnsupportedDimensionError):
            sobol_unit(1, 9)

    def test_count_guard(self):
        with pytest.raises(ValueError):
            sobol_unit(MAX_POINTS, 2)

    def test_skip_consistency(self):
        whole = sobol_unit(10, 3)
        tail = sobol_unit(6, 3, skip=5)
        assert np.array_equal(whole[4:], tail)


class TestScaleToBounds:
    def test_midpoint(self):
        (p,) = scale_to_bounds(np.full((1, 4), 0.5), DEFAULT_BOUNDS)
        assert p.values == (7.0, 15.0, 10.0, 19.0)

    def test_extremes_exact(self):
        lo = scale_to_bounds(np.zeros((1, 4)), DEFAULT_BOUNDS)[0]
        hi = scale_to_bounds(np.ones((1, 4)), DEFAULT_BOUNDS)[0]
        assert lo.values == tuple(b[0] for b in DEFAULT_BOUNDS)
        assert hi.values == tuple(b[1] for b in DEFAULT_BOUNDS)

    def test_rejects_bad_bounds(self):
        with pytest.raises(ValueError):
            scale_to_bounds(np.zeros((1, 1)), ((2.0, 2.0),))


@pytest.fixture(scope="module")
def cfg():
    return TestbedConfig(resolution=8)


class TestPlanDataset:
    def test_prefix_nesting(self, cfg):
        small = plan_dataset(15, cfg)
        big = plan_dataset(31, cfg)
        assert big.accepted[:15] == small.accepted
        assert small.requested == 15 and len(small.accepted) == 15

    def test_determinism(self, cfg):
        a = plan_dataset(10, cfg)
        b = plan_dataset(10, cfg)
        assert a == b

    def test_accepted_distinct_and_feasible(self, cfg):
        plan = plan_dataset(20, cfg)
        values = {p.values for p in plan.accepted}
        assert len(values) == 20
        assert plan.consumed == len(plan.accepted) + plan.rejected_count

    def test_coverage(self, cfg):
        plan = plan_dataset(31, cfg)
        arr = np.array([p.values for p in plan.accepted])
        for j, (lo, hi) in enumerate(DEFAULT_BOUNDS):
            span = arr[:, j].max() - arr[:, j].min()
            assert span >= 0.8 * (hi - lo)

    def test_exhaustion_when_nothing_feasible(self, cfg):
        # A magnet wider than the domain is rejected by the rectangle check
        # for every sample.
        bounds = ((2.0, 12.0), (150.0, 200.0), (5.0, 15.0), (15.0, 23.0))
        with pytest.raises(SequenceExhaustedError):
            plan_dataset(1, cfg, bounds=bounds)

    def test_bad_target(self, cfg):
        with pytest.raises(ValueError):
            plan_dataset(0, cfg)


class TestParamPoint:
    def test_bounds_enforced(self):
        with pytest.raises(ValueError):
            ParamPoint((1.0,), ((2.0, 12.0),))

    def test_default_bounds(self):
        p = ParamPoint((7.0, 15.0, 10.0, 19.0))
        assert p.bounds == DEFAULT_BOUNDS

    def test_frozen_component(self):
        p = ParamPoint((7.0, 15.0), ((7.0, 7.0), (8.0, 22.0)))
        assert p.frozen_mask().tolist() == [True, False]

    def test_dimension_limits(self):
        with pytest.raises(ValueError):
            ParamPoint(tuple(range(1, 10)), tuple((0.0, 10.0) for _ in range(9)))
