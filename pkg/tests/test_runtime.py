import numpy as np
import pytest

from abstraction import GridParams, Quantizer, find_risk_aware_abstraction
from errors import DomainError
from resilience import OMEGA, OMEGA_PLUS_ONE, classify, random_bimodal
from runtime import (AbstractTrace, SpikeSchedule, analyze_trace, num_spikes, refine, simulate_abstract,
                     simulate_closed_loop, verify_k_resilient)
from system import Box, ColorMap, linear_system


def refined(problem):
    _, grid, _, gamma = problem
    _, controller = classify(gamma)
    return refine(Quantizer(grid), controller, gamma)


class TestRefinedController:
    def test_cell_center_gives_abstract_action(self, line_problem):
        controller = refined(line_problem)
        rc, quantizer = controller.controller, controller.quantizer
        q = quantizer.quantize([2.5])
        decision = controller.act(quantizer.cell_center(q))
        assert decision.action == rc.action(rc.select(q), q)
        assert decision.cell == q

    def test_points_in_one_cell_share_the_action(self, line_problem):
        controller = refined(line_problem)
        a = controller.clone().act([2.05]).action
        b = controller.clone().act([2.95]).action
        assert a == b

    def test_switches_sub_controller_after_a_spike(self, chain, chain_quantizer):
        _, rc = classify(chain)
        controller = refine(chain_quantizer, rc, chain)
        first = controller.act([0.5])
        assert first.sub_controller == rc.select(0)
        assert not first.spike
        second = controller.act([1.5])
        assert second.spike
        assert second.sub_controller == rc.select(1)
        assert rc.labels[second.sub_controller] == "level-1"

    def test_spike_into_zero_resilience_raises(self, chain, chain_quantizer):
        _, rc = classify(chain)
        controller = refine(chain_quantizer, rc, chain)
        controller.act([1.5])
        with pytest.raises(DomainError):
            controller.act([2.5])

    def test_out_of_domain(self, line_problem):
        controller = refined(line_problem)
        with pytest.raises(DomainError):
            controller.act([7.0])
        assert not controller.in_domain([0.5])
        assert controller.in_domain([2.5])

    def test_clone_has_fresh_state(self, chain, chain_quantizer):
        _, rc = classify(chain)
        controller = refine(chain_quantizer, rc, chain)
        controller.act([0.5])
        copy = controller.clone()
        assert copy.last is None
        assert controller.last == (0, 0)


class TestSpikeSchedule:
    def test_steps_must_increase(self):
        with pytest.raises(ValueError):
            SpikeSchedule(spikes=((3, [1.0]), (3, [1.0])))

    def test_spike_inside_normal_box_is_rejected(self, line_problem):
        with pytest.raises(ValueError):
            SpikeSchedule(spikes=((1, [0.05]),)).validate(line_problem[0])

    def test_spike_outside_high_box_is_rejected(self, line_problem):
        with pytest.raises(ValueError):
            SpikeSchedule(spikes=((1, [2.0]),)).validate(line_problem[0])

    def test_parse_spike(self):
        step, w = SpikeSchedule.parse_spike("4:0.5,-0.5,0")
        assert step == 4
        assert w.tolist() == [0.5, -0.5, 0.0]
        with pytest.raises(ValueError):
            SpikeSchedule.parse_spike("four")

    def test_random_nominal_stays_in_normal_box(self, line_problem, rng):
        sys = line_problem[0]
        schedule = SpikeSchedule(nominal="random")
        samples = np.array([schedule.disturbance(i, sys, rng) for i in range(100)])
        assert np.all(sys.w_normal.contains(samples))


class TestSimulateClosedLoop:
    def test_zero_dynamics_give_a_constant_trace(self, ring_problem):
        sys = ring_problem[0]
        trace = simulate_closed_loop(sys, refined(ring_problem), [2.5], SpikeSchedule(), 10)
        assert len(trace) == 10
        assert np.all(trace.states == 2.5)
        assert trace.verdict == "satisfied"

    def test_spike_flag_marks_the_scheduled_step(self, line_problem):
        sys = line_problem[0]
        trace = simulate_closed_loop(sys, refined(line_problem), [2.5], SpikeSchedule(((3, [1.0]),)), 10)
        assert len(trace) >= 4
        assert np.flatnonzero(trace.spikes).tolist() == [3]

    def test_counts_executed_spikes(self, ring_problem):
        sys = ring_problem[0]
        schedule = SpikeSchedule(((1, [1.0]), (3, [-1.0]), (5, [1.0]), (40, [1.0])))
        trace = simulate_closed_loop(sys, refined(ring_problem), [2.5], schedule, 10)
        assert num_spikes(trace) == 3
        assert trace.verdict == "satisfied"

    def test_spike_free_run_follows_normal_edges(self, line_problem):
        sys, _, _, gamma = line_problem
        trace = simulate_closed_loop(sys, refined(line_problem), [2.5], SpikeSchedule(), 20)
        assert trace.verdict == "satisfied"
        assert num_spikes(trace) == 0
        assert set(trace.cells.tolist()) <= {1, 2, 3, 4}
        for q, u, q_next in zip(trace.cells, trace.actions, trace.cells[1:]):
            assert q_next in gamma.successors(q, u, "nor")

    def test_deterministic_given_seed(self, line_problem):
        sys = line_problem[0]
        schedule = SpikeSchedule(nominal="random", seed=3)
        a = simulate_closed_loop(sys, refined(line_problem), [2.5], schedule, 15)
        b = simulate_closed_loop(sys, refined(line_problem), [2.5], schedule, 15)
        assert a.to_frame().equals(b.to_frame())

    def test_start_outside_domain(self, line_problem):
        with pytest.raises(DomainError):
            simulate_closed_loop(line_problem[0], refined(line_problem), [0.5], SpikeSchedule(), 5)

    def test_zero_horizon(self, line_problem):
        trace = simulate_closed_loop(line_problem[0], refined(line_problem), [2.5], SpikeSchedule(), 0)
        assert len(trace) == 0
        assert trace.verdict == "empty"
        assert list(trace.to_frame().columns) == ["step", "x0", "u0", "w0", "cell_id", "spike", "verdict"]

    def test_spikes_beyond_the_budget_end_in_a_violation(self):
        # no control authority: every cell of [1, 5) has resilience 1
        sys = linear_system([[0.0]], [[1.0]], Box([0.0], [0.0]), Box([-1.1], [1.1]), tau=1.0)
        grid = GridParams([0.0], [6.0], [1.0], inputs=[[0.0]])
        gamma = find_risk_aware_abstraction(sys, grid, ColorMap(regions=[([Box([1.0], [5.0])], 2)], default_color=1))
        rmap, rc = classify(gamma)
        assert rmap.labels()[1:5] == ["1"] * 4
        controller = refine(Quantizer(grid), rc, gamma)

        one = simulate_closed_loop(sys, controller, [3.5], SpikeSchedule(((0, [1.1]),)), 5)
        assert one.verdict == "satisfied"
        assert one.detected.tolist() == [False, True, False, False, False]

        two = simulate_closed_loop(sys, controller, [3.5], SpikeSchedule(((0, [1.1]), (1, [1.1]))), 5)
        assert two.verdict == "violation"
        assert two.violation_step == 2
        assert len(two) == 2


class TestAnalyzeTrace:
    def test_tail_decides(self, line_problem):
        sys, _, _, gamma = line_problem
        trace = simulate_closed_loop(sys, refined(line_problem), [2.5], SpikeSchedule(), 6)
        assert analyze_trace(trace, gamma) == "satisfied"
        trace.cells[:] = 0
        assert analyze_trace(trace, gamma) == "unsatisfied"


class TestAbstractRuns:
    def test_spike_uses_a_disturbance_edge(self, chain):
        _, rc = classify(chain)
        trace = simulate_abstract(chain, rc, 0, 5, spike_steps={1})
        assert trace.cells == [0, 0, 1, 1, 1, 1]
        assert num_spikes(trace, chain) == 1

    def test_counting_needs_the_abstraction(self):
        with pytest.raises(ValueError):
            num_spikes(AbstractTrace([0, 1], [0]))


class TestVerifyKResilient:
    def test_g1(self, g1):
        _, rc = classify(g1)
        assert verify_k_resilient(g1, rc, 0, 1)
        assert not verify_k_resilient(g1, rc, 0, 2)

    def test_zero_budget_is_vacuous(self, g1):
        _, rc = classify(g1)
        assert verify_k_resilient(g1, rc, 2, 0)
        assert not verify_k_resilient(g1, rc, 2, 1)

    def test_chain_levels(self, chain):
        _, rc = classify(chain)
        assert verify_k_resilient(chain, rc, 0, 2)
        assert not verify_k_resilient(chain, rc, 0, 3)

    def test_omega_states(self, g2):
        rmap, rc = classify(g2)
        for q in range(2):
            assert verify_k_resilient(g2, rc, q, rmap[q])
            assert verify_k_resilient(g2, rc, q, 5)
            assert not verify_k_resilient(g2, rc, q, "omega+1")

    def test_omega_plus_one_passes_every_budget(self, ring_problem):
        gamma = ring_problem[3]
        rmap, rc = classify(gamma)
        assert rmap[2].code == OMEGA_PLUS_ONE
        for k in (1, 3, 10, "omega", "omega+1"):
            assert verify_k_resilient(gamma, rc, 2, k)

    @pytest.mark.parametrize("seed", range(50))
    def test_controller_is_optimally_resilient(self, seed):
        gamma = random_bimodal(seed)
        rmap, rc = classify(gamma)
        for q in range(gamma.num_states):
            value = rmap[q]
            assert verify_k_resilient(gamma, rc, q, value)
            if value.is_finite:
                assert not verify_k_resilient(gamma, rc, q, value.code + 1)
            elif value.code == OMEGA:
                assert not verify_k_resilient(gamma, rc, q, "omega+1")
