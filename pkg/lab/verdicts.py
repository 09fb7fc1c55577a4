"""
实验判定
每个判定都是 (配置, 指标行) 的纯函数，lab check 可以从存储的CSV重新计算
"""

import math
from typing import Callable, Dict, List, Sequence

import numpy as np

from .harness.data_models import ExperimentConfig, Verdict

Rows = Sequence[Dict[str, float]]

# 比较时允许的绝对舍入误差
ABSOLUTE_TOLERANCE = 1e-14
# 噪声初始化误差的期望衰减率是谱隙的倍数
INIT_ERROR_CONTRACTIONS = 2.0


def _column(rows: Rows, name: str) -> np.ndarray:
    return np.array([float(row[name]) for row in rows])


def _nonincreasing(values: np.ndarray, slack: float) -> bool:
    return bool(np.all(values[1:] <= values[:-1] * (1.0 + slack) + ABSOLUTE_TOLERANCE))


def _strictly_decreasing(values: np.ndarray) -> bool:
    return bool(np.all(values[1:] < values[:-1]))


def _log_slope(x: np.ndarray, y: np.ndarray) -> float:
    return float(np.polyfit(x, np.log(y), 1)[0])


def _all_within(rows: Rows, value: str, budget: str, name: str) -> Verdict:
    values, budgets = _column(rows, value), _column(rows, budget)
    return Verdict(
        name=name,
        passed=bool(np.all(values <= budgets)),
        metrics=[value, budget],
        measured={f"max_{value}": float(values.max()), f"min_{budget}": float(budgets.min())},
    )


def score_sweep_verdicts(cfg: ExperimentConfig, rows: Rows) -> List[Verdict]:
    errors = _column(rows, "sup_t_l2_error")
    losses = _column(rows, "loss")
    error_sq, bound = _column(rows, "error_sq"), _column(rows, "bound_rhs")
    with np.errstate(divide="ignore", invalid="ignore"):
        worst = float(np.nanmax(np.where(np.isinf(bound), 0.0, error_sq / bound))) if len(rows) else 0.0
    loss_ratios = losses[:-1] / losses[1:] if len(losses) > 1 else np.array([])
    return [
        Verdict(
            name="reverse_error_strictly_decreasing",
            passed=_strictly_decreasing(errors),
            metrics=["sup_t_l2_error"],
            measured={"first": float(errors[0]), "last": float(errors[-1])},
        ),
        Verdict(
            name="loss_strictly_decreasing",
            passed=_strictly_decreasing(losses),
            metrics=["loss"],
            measured={"min_consecutive_ratio": float(loss_ratios.min()) if loss_ratios.size else math.nan},
        ),
        Verdict(
            name="loss_controls_error",
            passed=bool(np.all(error_sq <= bound)),
            metrics=["error_sq", "bound_rhs"],
            measured={"max_error_sq_over_bound": worst},
            detail="E² ≤ (4/l)·L·e^{4·‖s‖∞·T}·max‖ρ‖∞，‖s‖∞ 为候选分数的上确界",
        ),
        _all_within(rows, "reference_defect", "round_trip_budget", "exact_score_round_trip"),
        _all_within(rows, "truncation_error", "truncation_budget", "truncation_within_budget"),
    ]


def t_decay_verdicts(cfg: ExperimentConfig, rows: Rows) -> List[Verdict]:
    slacks = cfg.slacks
    # 噪声起点相对精确起点的超出部分，精确起点本身的误差（截断与离散）不随 T 衰减
    excess = np.maximum(_column(rows, "terminal_error") - _column(rows, "exact_start_error"), 0.0)
    tail = excess[int(np.argmax(excess)):]
    horizons = _column(rows, "T")
    init = _column(rows, "init_error")
    gap = float(_column(rows, "spectral_gap")[0])
    expected = INIT_ERROR_CONTRACTIONS * gap
    usable = init > slacks.decay_floor
    measured = {"spectral_gap": gap, "expected_rate": expected}
    if usable.sum() < 2:
        passed, detail = True, f"高于舍入下限 {slacks.decay_floor:g} 的点少于2个，衰减率无需拟合"
    else:
        rate = -_log_slope(horizons[usable], init[usable])
        measured.update({"fitted_rate": rate, "rate_over_gap": rate / gap, "rate_over_expected": rate / expected})
        passed = abs(rate / expected - 1.0) <= slacks.rate_tolerance
        detail = "init_error ∝ e^{-rate·T}，要求 |rate/(2λ) − 1| ≤ tol：前向热流与反向扩散各收缩一次 e^{-λT}"
    return [
        Verdict(
            name="terminal_error_eventually_decreasing",
            passed=_nonincreasing(tail, slacks.monotone_slack),
            metrics=["terminal_error", "exact_start_error"],
            measured={"peak_excess": float(excess.max()), "last_excess": float(excess[-1])},
            detail="terminal_error − exact_start_error 自峰值起不增",
        ),
        Verdict(
            name="initialization_error_decay_rate",
            passed=bool(passed),
            metrics=["T", "init_error", "spectral_gap"],
            measured=measured,
            detail=detail,
        ),
        _all_within(rows, "truncation_error", "truncation_budget", "truncation_within_budget"),
    ]


def moser_exact_verdicts(cfg: ExperimentConfig, rows: Rows) -> List[Verdict]:
    constants = _column(rows, "empirical_2c")
    finite = constants[np.isfinite(constants)]
    if finite.size < 2:
        spread = 0.0
    else:
        spread = float((finite.max() - finite.min()) / finite.max())
    identity = _column(rows, "max_identity_defect")
    return [
        _all_within(rows, "transfer_defect", "budget", "unit_time_transfer"),
        _all_within(rows, "max_path_defect", "budget", "interpolation_is_solution"),
        _all_within(rows, "reverse_transfer_defect", "budget", "time_symmetric_transfer"),
        Verdict(
            name="poisson_defect_identity",
            passed=bool(np.all(identity <= 1e-6)),
            metrics=["max_identity_defect"],
            measured={"max_identity_defect": float(identity.max())},
        ),
        Verdict(
            name="empirical_constant_stable",
            passed=spread <= cfg.slacks.constant_spread,
            metrics=["empirical_2c"],
            measured={"relative_spread": spread},
        ),
    ]


def osc_converge_verdicts(cfg: ExperimentConfig, rows: Rows) -> List[Verdict]:
    slacks = cfg.slacks
    errors = _column(rows, "traj_error")
    n_values = _column(rows, "N")
    lipschitz = _column(rows, "lipschitz")
    reduction = float(errors[0] / errors[-1]) if errors[-1] > 0 else math.inf
    orders = {}
    for j in (1, 2, 3):
        defects = _column(rows, f"weak_defect_{j}")
        positive = defects > 0
        if positive.sum() >= 2:
            orders[f"order_{j}"] = -_log_slope(np.log(n_values[positive]), defects[positive])
    return [
        Verdict(
            name="trajectory_error_monotone",
            passed=_nonincreasing(errors, slacks.monotone_slack),
            metrics=["traj_error"],
            measured={"first": float(errors[0]), "last": float(errors[-1])},
        ),
        Verdict(
            name="trajectory_error_reduction",
            passed=reduction >= slacks.min_reduction,
            metrics=["traj_error"],
            measured={"reduction": reduction},
        ),
        Verdict(
            name="weak_pairing_order",
            passed=all(order >= slacks.weak_order for order in orders.values()),
            metrics=["N", "weak_defect_1", "weak_defect_2", "weak_defect_3"],
            measured=orders,
        ),
        Verdict(
            name="uniform_lipschitz",
            passed=bool(np.allclose(lipschitz, lipschitz[0], rtol=1e-12, atol=0.0)),
            metrics=["lipschitz"],
            measured={"lipschitz": float(lipschitz[0])},
        ),
    ]


def ode_vs_sde_verdicts(cfg: ExperimentConfig, rows: Rows) -> List[Verdict]:
    continuity, fokker_planck = _column(rows, "continuity_deviation"), _column(rows, "fp_deviation")
    return [
        _all_within(rows, "w1_sde", "w1_budget", "sde_particles_match_pde"),
        _all_within(rows, "w1_ode", "w1_budget", "ode_particles_match_pde"),
        Verdict(
            name="noise_regularizes",
            passed=bool(np.all(continuity > fokker_planck)),
            metrics=["continuity_deviation", "fp_deviation"],
            measured={"min_ratio": float(np.min(continuity / np.maximum(fokker_planck, 1e-300)))},
            detail="演示性检查",
        ),
    ]


def neural_transfer_verdicts(cfg: ExperimentConfig, rows: Rows) -> List[Verdict]:
    slacks = cfg.slacks
    gaps = _column(rows, "oscillation_gap")
    errors = _column(rows, "terminal_error")
    reference_error = float(_column(rows, "reference_error")[0])
    initial_distance = float(_column(rows, "initial_distance")[0])
    budget = float(_column(rows, "budget")[0])
    reduction = float(gaps[0] / gaps[-1]) if gaps[-1] > 0 else math.inf
    return [
        Verdict(
            name="oscillation_gap_monotone",
            passed=_nonincreasing(gaps, slacks.monotone_slack),
            metrics=["oscillation_gap"],
            measured={"first_gap": float(gaps[0]), "last_gap": float(gaps[-1])},
            detail="‖ρ^N_1 − ρ^wide_1‖₂ 随 N 不增",
        ),
        Verdict(
            name="oscillation_gap_reduction",
            passed=reduction >= slacks.min_reduction,
            metrics=["oscillation_gap"],
            measured={"reduction": reduction},
        ),
        Verdict(
            name="terminal_error_near_reference",
            passed=bool(errors[-1] <= reference_error + budget),
            metrics=["terminal_error", "reference_error", "budget"],
            measured={"last_terminal_error": float(errors[-1]), "reference_error": reference_error, "budget": budget},
            detail="最大 N 下的终态误差不超过分片宽网络误差加 5·(dx²+dt)·scale",
        ),
        Verdict(
            name="reference_transfers",
            passed=reference_error <= slacks.transfer_fraction * initial_distance,
            metrics=["reference_error", "initial_distance"],
            measured={"relative_error": reference_error / initial_distance if initial_distance > 0 else 0.0},
            detail="分片宽网络把 ρ_0 送到 ρ_d 附近：终态误差不超过初始距离的给定比例",
        ),
    ]


VERDICTS: Dict[str, Callable[[ExperimentConfig, Rows], List[Verdict]]] = {
    "SCORE-SWEEP": score_sweep_verdicts,
    "T-DECAY": t_decay_verdicts,
    "MOSER-EXACT": moser_exact_verdicts,
    "OSC-CONVERGE": osc_converge_verdicts,
    "ODE-VS-SDE": ode_vs_sde_verdicts,
    "NEURAL-TRANSFER": neural_transfer_verdicts,
}


def evaluate_verdicts(cfg: ExperimentConfig, rows: Rows) -> List[Verdict]:
    """按实验名分派判定函数"""
    if not rows:
        raise ValueError(f"{cfg.experiment} 没有任何指标行，无法判定")
    return VERDICTS[cfg.experiment](cfg, rows)
