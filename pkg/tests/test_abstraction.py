import joblib
import numpy as np
import pytest

from abstraction import (BimodalAbstraction, GridParams, Quantizer, apply_obstacle_sinks, check_frr_sample,
                         find_abstraction, find_risk_aware_abstraction, lift_colors, load_abstraction,
                         save_abstraction)
from errors import ColorStraddleError, UnknownReferenceError
from system import Box, ColorMap, SampledSystem, linear_system


def shifted_line(w_high=1.1):
    return linear_system([[0.0]], [[1.0]], Box([-0.1], [0.1]), Box([-w_high], [w_high]), tau=1.0)


@pytest.fixture
def line_grid():
    return GridParams([0.0], [4.0], [1.0], inputs=[[1.0]])


class TestGridParams:
    def test_width_must_be_multiple_of_eta(self):
        with pytest.raises(ValueError):
            GridParams([0.0], [1.0], [0.3], inputs=[[0.0]])

    def test_inputs_required(self):
        with pytest.raises(ValueError):
            GridParams([0.0], [1.0], [0.5])

    def test_dict_roundtrip(self):
        grid = GridParams([0.0, -1.0], [2.0, 1.0], [0.5, 0.5], periodic=[False, True], inputs=[[1.0], [-1.0]])
        again = GridParams.from_dict(grid.to_dict())
        assert again.to_dict() == grid.to_dict()


class TestQuantizer:
    def test_c_order_and_out_of_domain(self):
        q = Quantizer(GridParams([0.0, 0.0], [3.0, 2.0], [1.0, 1.0], inputs=[[0.0]]))
        assert q.num_cells == 6
        assert q.quantize([0.5, 0.5]) == 0
        assert q.quantize([0.5, 1.5]) == 1
        assert q.quantize([2.5, 1.5]) == 5
        assert q.quantize([3.5, 0.5]) == q.out_of_domain == 6
        assert q.quantize(np.array([[1.5, 0.5], [-0.1, 0.5]])).tolist() == [2, 6]

    def test_periodic_wrap(self):
        q = Quantizer(GridParams([0.0], [4.0], [1.0], periodic=[True], inputs=[[0.0]]))
        assert q.quantize([4.5]) == 0
        assert q.quantize([-0.5]) == 3

    def test_cells_are_half_open(self):
        q = Quantizer(GridParams([0.0], [4.0], [1.0], inputs=[[0.0]]))
        assert q.quantize([1.0]) == 1
        assert q.quantize([4.0]) == q.out_of_domain

    def test_center_and_bounds(self):
        q = Quantizer(GridParams([0.0, 0.0], [3.0, 2.0], [1.0, 0.5], inputs=[[0.0]]))
        cell = q.quantize([2.2, 0.7])
        np.testing.assert_allclose(q.cell_center(cell), [2.5, 0.75])
        lower, upper = q.cell_bounds(cell)
        np.testing.assert_allclose(lower, [2.0, 0.5])
        np.testing.assert_allclose(upper, [3.0, 1.0])


class TestFindAbstraction:
    def test_normal_successors_of_shifted_cell(self, line_grid):
        tm = find_abstraction(shifted_line(), line_grid, Box([-0.1], [0.1]))
        assert tm.successors_of(0).tolist() == [0, 1, 2]

    def test_exit_adds_sink(self, line_grid):
        tm = find_abstraction(shifted_line(), line_grid, Box([-0.1], [0.1]))
        assert tm.successors_of(3).tolist() == [3, 4]

    def test_parallel_jobs_agree(self, line_grid):
        sys = shifted_line()
        one = find_abstraction(sys, line_grid, sys.w_high, jobs=1, chunk_size=2)
        two = find_abstraction(sys, line_grid, sys.w_high, jobs=2, chunk_size=2)
        assert (one.successors != two.successors).nnz == 0


class TestRiskAwareAbstraction:
    def test_disturbance_successors(self, line_grid):
        gamma = find_risk_aware_abstraction(shifted_line(), line_grid, ColorMap(default_color=0))
        assert gamma.successors(0, 0, "nor").tolist() == [0, 1, 2]
        assert gamma.successors(0, 0, "dist").tolist() == [3, 4]

    def test_sink_is_absorbing(self, line_grid):
        gamma = find_risk_aware_abstraction(shifted_line(), line_grid, ColorMap(default_color=0))
        sink = gamma.out_of_domain
        assert sink == 4
        assert gamma.successors(sink, 0, "nor").tolist() == [sink]
        assert gamma.successors(sink, 0, "dist").size == 0

    def test_equal_disturbance_boxes_have_no_dist_edges(self, line_grid):
        gamma = find_risk_aware_abstraction(shifted_line(w_high=0.1), line_grid, ColorMap())
        assert gamma.edge_counts()["dist"] == 0

    def test_normal_and_dist_are_disjoint(self, line_problem):
        gamma = line_problem[3]
        assert gamma.delta_nor.multiply(gamma.delta_dist).nnz == 0

    def test_sink_gets_worst_odd_color(self, line_grid):
        cmap = ColorMap(regions=[([Box([2.0], [4.0])], 2)], default_color=0)
        gamma = find_risk_aware_abstraction(shifted_line(), line_grid, cmap)
        assert gamma.colors.tolist() == [0, 0, 2, 2, 3]

    def test_obstacles_become_sinks(self, line_grid):
        cmap = ColorMap(default_color=2, obstacle_boxes=[Box([2.0], [3.0])])
        gamma = find_risk_aware_abstraction(shifted_line(), line_grid, cmap, obstacle_color=3)
        assert gamma.obstacle.tolist() == [False, False, True, False, False]
        assert gamma.successors(2, 0, "nor").tolist() == [2]
        assert gamma.successors(2, 0, "dist").size == 0
        assert gamma.colors[2] == 3


class TestLiftColors:
    def test_straddling_region_is_rejected(self):
        q = Quantizer(GridParams([0.0], [4.0], [1.0], inputs=[[0.0]]))
        cmap = ColorMap(regions=[([Box([0.0], [1.5])], 2)], default_color=1)
        with pytest.raises(ColorStraddleError) as info:
            lift_colors(q, cmap)
        assert info.value.cell == 1

    def test_aligned_region(self):
        q = Quantizer(GridParams([0.0, 0.0], [1.0, 1.0], [0.2, 0.2], inputs=[[0.0]]))
        cmap = ColorMap(regions=[([Box([0.4, 0.0], [0.8, 0.6])], 2)], default_color=1)
        colors = lift_colors(q, cmap)
        assert colors[q.quantize([0.5, 0.1])] == 2
        assert colors[q.quantize([0.9, 0.1])] == 1


class TestApplyObstacleSinks:
    def test_accepts_ids_and_masks(self, g1):
        by_id = apply_obstacle_sinks(g1, [0])
        by_mask = apply_obstacle_sinks(g1, np.array([True, False, False]))
        for gamma in (by_id, by_mask):
            assert gamma.successors(0, 0, "nor").tolist() == [0]
            assert gamma.obstacle.tolist() == [True, False, False]

    def test_no_obstacles_is_identity(self, g1):
        assert apply_obstacle_sinks(g1, []) is g1


class TestFromTransitions:
    def test_overlapping_sets_are_rejected(self):
        with pytest.raises(ValueError):
            BimodalAbstraction.from_transitions(2, [0, 0], nor={(0, 0): [1]}, dist={(0, 0): [1]})

    def test_disabled_pairs(self):
        gamma = BimodalAbstraction.from_transitions(2, [0, 0], nor={(0, 0): [1], (0, 1): [], (1, 1): [1]},
                                                    num_actions=2)
        assert gamma.enabled_actions(0).tolist() == [0]
        assert gamma.pair_index(0, 1) == -1
        assert gamma.successors(1, 1).tolist() == [1]

    def test_pair_lookup_follows_replaced_transitions(self, g1):
        assert [g1.pair_index(q, 0) for q in range(3)] == [0, 1, 2]
        nor = g1.delta_nor.tolil()
        nor[0, :] = 0
        stripped = g1.with_transitions(nor.tocsr(), g1.delta_dist)
        assert stripped.pair_index(0, 0) == -1
        assert stripped.enabled.tolist() == [False, True, True]
        assert g1.pair_index(0, 0) == 0


class TestFrrCheck:
    def test_sound_abstraction_has_no_violations(self, line_problem):
        sys, grid, _, gamma = line_problem
        report = check_frr_sample(sys, gamma, Quantizer(grid), samples=10_000, seed=0)
        assert report.samples == 10_000
        assert report.violations == 0

    def test_underestimated_growth_bound_is_caught(self):
        sys = SampledSystem(1, 1, lambda x, u, w: u + w, Box([-2.0], [2.0]), Box([-3.0], [3.0]), 1.0,
                            lambda r, u, wr: 0.1 * wr + 0.0 * r)
        grid = GridParams([0.0], [10.0], [1.0], periodic=[True], inputs=[[0.0]])
        gamma = find_risk_aware_abstraction(sys, grid, ColorMap(default_color=2))
        report = check_frr_sample(sys, gamma, Quantizer(grid), samples=2_000, seed=1)
        assert report.violations > 0


class TestDump:
    def test_roundtrip(self, tmp_path, line_problem):
        gamma = line_problem[3]
        path = tmp_path / "abstraction.joblib"
        save_abstraction(gamma, str(path))
        again = load_abstraction(str(path))
        assert again.num_states == gamma.num_states
        assert (again.delta_nor != gamma.delta_nor).nnz == 0
        assert (again.delta_dist != gamma.delta_dist).nnz == 0
        assert again.colors.tolist() == gamma.colors.tolist()
        assert again.grid.to_dict() == gamma.grid.to_dict()

    def test_missing_file(self, tmp_path):
        with pytest.raises(UnknownReferenceError):
            load_abstraction(str(tmp_path / "nope.joblib"))

    def test_version_mismatch(self, tmp_path):
        path = tmp_path / "old.joblib"
        joblib.dump({"format": "rescot-abstraction", "version": 99}, str(path))
        with pytest.raises(UnknownReferenceError, match="version"):
            load_abstraction(str(path))
