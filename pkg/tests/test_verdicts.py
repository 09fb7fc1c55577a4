import math

import numpy as np
import pytest

from lab.harness.config_manager import validate_config
from lab.verdicts import VERDICTS, evaluate_verdicts

TARGET = {"family": "bump_mixture", "components": [{"center": [0.5], "width": 0.25}]}


def _cfg(experiment, **extra):
    return validate_config(dict({"experiment": experiment, "target": TARGET}, **extra))


def _by_name(verdicts):
    return {v.name: v for v in verdicts}


def test_every_experiment_has_verdicts():
    assert set(VERDICTS) == {"SCORE-SWEEP", "T-DECAY", "MOSER-EXACT", "OSC-CONVERGE", "ODE-VS-SDE", "NEURAL-TRANSFER"}


def test_empty_rows_are_rejected():
    with pytest.raises(ValueError):
        evaluate_verdicts(_cfg("T-DECAY"), [])


class TestScoreSweep:
    round_trip = {"reference_defect": 0.03, "round_trip_budget": 0.06,
                  "truncation_error": 0.1, "truncation_budget": 0.2}
    rows = [
        dict({"amplitude": 0.4, "loss": 0.16, "sup_t_l2_error": 0.08, "error_sq": 0.0064, "bound_rhs": 10.0},
             **round_trip),
        dict({"amplitude": 0.2, "loss": 0.04, "sup_t_l2_error": 0.04, "error_sq": 0.0016, "bound_rhs": 2.5},
             **round_trip),
        dict({"amplitude": 0.1, "loss": 0.01, "sup_t_l2_error": 0.02, "error_sq": 0.0004, "bound_rhs": math.inf},
             **round_trip),
    ]

    def test_passing_sweep(self):
        verdicts = _by_name(evaluate_verdicts(_cfg("SCORE-SWEEP"), self.rows))
        assert all(v.passed for v in verdicts.values())
        assert verdicts["loss_strictly_decreasing"].measured["min_consecutive_ratio"] == pytest.approx(4.0)
        assert verdicts["loss_controls_error"].measured["max_error_sq_over_bound"] == pytest.approx(0.00064)

    def test_flat_error_fails(self):
        rows = [dict(row) for row in self.rows]
        rows[2]["sup_t_l2_error"] = 0.04
        verdicts = _by_name(evaluate_verdicts(_cfg("SCORE-SWEEP"), rows))
        assert not verdicts["reverse_error_strictly_decreasing"].passed
        assert verdicts["loss_strictly_decreasing"].passed

    def test_violated_bound_fails(self):
        rows = [dict(row) for row in self.rows]
        rows[0]["bound_rhs"] = 0.001
        assert not _by_name(evaluate_verdicts(_cfg("SCORE-SWEEP"), rows))["loss_controls_error"].passed

    def test_round_trip_and_truncation_budgets(self):
        rows = [dict(row, reference_defect=0.07) for row in self.rows]
        verdicts = _by_name(evaluate_verdicts(_cfg("SCORE-SWEEP"), rows))
        assert not verdicts["exact_score_round_trip"].passed
        assert verdicts["truncation_within_budget"].passed
        rows = [dict(row, truncation_error=0.25) for row in self.rows]
        verdicts = _by_name(evaluate_verdicts(_cfg("SCORE-SWEEP"), rows))
        assert verdicts["exact_score_round_trip"].passed
        assert not verdicts["truncation_within_budget"].passed


class TestTDecay:
    gap = 9.8676

    def _rows(self, rate, terminal=(0.3, 0.25, 0.22, 0.21), floor=0.2):
        horizons = [0.5, 1.0, 1.5, 2.0]
        return [
            {"T": T, "terminal_error": e, "init_error": float(np.exp(-rate * T)), "exact_start_error": floor,
             "truncation_error": 0.19, "truncation_budget": 0.25, "spectral_gap": self.gap}
            for T, e in zip(horizons, terminal)
        ]

    def test_rate_at_twice_gap_passes(self):
        verdicts = _by_name(evaluate_verdicts(_cfg("T-DECAY"), self._rows(2.0 * self.gap)))
        assert verdicts["initialization_error_decay_rate"].passed
        assert verdicts["initialization_error_decay_rate"].measured["rate_over_gap"] == pytest.approx(2.0)
        assert verdicts["terminal_error_eventually_decreasing"].passed
        assert verdicts["truncation_within_budget"].passed

    @pytest.mark.parametrize("factor", [0.5, 1.0, 2.7])
    def test_rate_off_the_expected_value_fails(self, factor):
        verdicts = _by_name(evaluate_verdicts(_cfg("T-DECAY"), self._rows(factor * self.gap)))
        assert not verdicts["initialization_error_decay_rate"].passed

    def test_rounding_floor_points_are_ignored(self):
        rows = self._rows(40.0)
        verdict = _by_name(evaluate_verdicts(_cfg("T-DECAY"), rows))["initialization_error_decay_rate"]
        # e^{-40·T} 在 T ≥ 1 时低于 1e-12
        assert verdict.passed
        assert "fitted_rate" not in verdict.measured

    def test_growing_tail_fails(self):
        rows = self._rows(2.0 * self.gap, terminal=(0.3, 0.25, 0.21, 0.25))
        assert not _by_name(evaluate_verdicts(_cfg("T-DECAY"), rows))["terminal_error_eventually_decreasing"].passed

    def test_flat_terminal_error_is_measured_above_the_floor(self):
        # 终态误差恒等于精确起点误差时，超出部分恒为零，判定基于超出部分而非平台值
        rows = self._rows(2.0 * self.gap, terminal=(0.2, 0.2, 0.2, 0.2))
        verdict = _by_name(evaluate_verdicts(_cfg("T-DECAY"), rows))["terminal_error_eventually_decreasing"]
        assert verdict.passed
        assert verdict.measured["peak_excess"] == 0.0
        rows = self._rows(2.0 * self.gap, terminal=(0.2, 0.2, 0.2, 0.2), floor=0.1)
        verdict = _by_name(evaluate_verdicts(_cfg("T-DECAY"), rows))["terminal_error_eventually_decreasing"]
        assert verdict.passed
        assert verdict.measured["last_excess"] == pytest.approx(0.1)

    def test_truncation_over_budget_fails(self):
        rows = [dict(row, truncation_error=0.3) for row in self._rows(2.0 * self.gap)]
        assert not _by_name(evaluate_verdicts(_cfg("T-DECAY"), rows))["truncation_within_budget"].passed


def _moser_rows(constants):
    return [
        {"pair": float(k), "transfer_defect": 1e-3, "max_path_defect": 2e-3, "reverse_transfer_defect": 1e-3,
         "max_identity_defect": 1e-9, "sup_norm": 1.0, "lower_bound": 0.1, "empirical_2c": c, "budget": 0.02}
        for k, c in enumerate(constants)
    ]


def test_moser_verdicts_pass_and_ignore_flat_pairs():
    verdicts = _by_name(evaluate_verdicts(_cfg("MOSER-EXACT"), _moser_rows([math.nan, 1.0, 1.2])))
    assert all(v.passed for v in verdicts.values())
    assert verdicts["empirical_constant_stable"].measured["relative_spread"] == pytest.approx(0.2 / 1.2)


def test_moser_budget_violation():
    rows = _moser_rows([1.0, 1.1])
    rows[1]["max_path_defect"] = 0.05
    verdicts = _by_name(evaluate_verdicts(_cfg("MOSER-EXACT"), rows))
    assert not verdicts["interpolation_is_solution"].passed
    assert verdicts["unit_time_transfer"].passed


def _osc_rows(errors, lipschitz=(3.0, 3.0, 3.0, 3.0)):
    return [
        {"N": float(N), "traj_error": e, "weak_defect_1": 0.1 / N, "weak_defect_2": 0.05 / N,
         "weak_defect_3": 0.0 if N > 4 else 0.02 / N, "lipschitz": L}
        for N, e, L in zip((1, 2, 4, 8), errors, lipschitz)
    ]


def test_osc_converge_verdicts():
    verdicts = _by_name(evaluate_verdicts(_cfg("OSC-CONVERGE"), _osc_rows([0.4, 0.2, 0.1, 0.05])))
    assert all(v.passed for v in verdicts.values())
    assert verdicts["weak_pairing_order"].measured["order_1"] == pytest.approx(1.0)
    assert verdicts["trajectory_error_reduction"].measured["reduction"] == pytest.approx(8.0)


def test_osc_converge_failures():
    verdicts = _by_name(evaluate_verdicts(_cfg("OSC-CONVERGE"), _osc_rows([0.4, 0.3, 0.35, 0.2], (3.0, 3.0, 3.5, 3.0))))
    assert not verdicts["trajectory_error_monotone"].passed
    assert not verdicts["trajectory_error_reduction"].passed
    assert not verdicts["uniform_lipschitz"].passed


def test_ode_vs_sde_verdicts():
    rows = [
        {"case": 0.0, "continuity_deviation": 0.3, "fp_deviation": 0.1, "deviation_ratio": 3.0,
         "w1_sde": 0.01, "w1_ode": 0.02, "w1_budget": 0.05, "n_particles": 1e5},
        {"case": 1.0, "continuity_deviation": 0.2, "fp_deviation": 0.05, "deviation_ratio": 4.0,
         "w1_sde": 0.01, "w1_ode": 0.06, "w1_budget": 0.05, "n_particles": 1e5},
    ]
    verdicts = _by_name(evaluate_verdicts(_cfg("ODE-VS-SDE"), rows))
    assert verdicts["sde_particles_match_pde"].passed
    assert not verdicts["ode_particles_match_pde"].passed
    assert verdicts["noise_regularizes"].passed
    assert verdicts["noise_regularizes"].measured["min_ratio"] == pytest.approx(3.0)


def _neural_rows(gaps, reference_error=0.01, initial_distance=0.14, budget=0.025):
    return [
        {"N": float(N), "terminal_error": reference_error + g, "reference_error": reference_error,
         "oscillation_gap": g, "initial_distance": initial_distance, "budget": budget, "lipschitz": 2.0}
        for N, g in zip((1, 2, 4, 8), gaps)
    ]


def test_neural_transfer_verdicts():
    verdicts = _by_name(evaluate_verdicts(_cfg("NEURAL-TRANSFER"), _neural_rows([0.08, 0.04, 0.02, 0.01])))
    assert all(v.passed for v in verdicts.values())
    assert verdicts["oscillation_gap_reduction"].measured["reduction"] == pytest.approx(8.0)


def test_neural_transfer_without_transfer_fails():
    # 间隙不变且终态离目标很远：单调性成立但其余判定都不通过
    rows = _neural_rows([0.5, 0.5, 0.5, 0.5], reference_error=0.12)
    verdicts = _by_name(evaluate_verdicts(_cfg("NEURAL-TRANSFER"), rows))
    assert verdicts["oscillation_gap_monotone"].passed
    assert not verdicts["oscillation_gap_reduction"].passed
    assert not verdicts["terminal_error_near_reference"].passed
    assert not verdicts["reference_transfers"].passed


def test_neural_transfer_growing_gap_fails():
    verdicts = _by_name(evaluate_verdicts(_cfg("NEURAL-TRANSFER"), _neural_rows([0.2, 0.1, 0.3, 0.01])))
    assert not verdicts["oscillation_gap_monotone"].passed
