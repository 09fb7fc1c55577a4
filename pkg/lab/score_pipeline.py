"""
分数生成模型的桌面级流程
前向热方程 → 精确分数 → 加权分数匹配损失 → 扰动分数阶梯 → 反向密度演化
"""

import math
from dataclasses import dataclass
from functools import cached_property
from typing import Dict, List, Optional, Sequence

import numpy as np
from loguru import logger
from scipy.integrate import trapezoid

from .density import DensityField, grad_sup_norm, uniform_density
from .fpe_solver import SolverConfig, TimeField, Trajectory, detailed_balance_drift, solve, solve_heat
from .grid import FaceField, laplacian
from .metrics import l2_distance, l2_norm, weighted_l2_sq

# 反向密度演化里扩散项与分数漂移的系数：2倍分数在有扩散时给出精确的时间反演
REVERSE_DRIFT_FACTOR = 2.0
# 概率流ODE（无扩散）使用的分数系数
FLOW_DRIFT_FACTOR = 1.0


@dataclass(frozen=True, eq=False)
class ForwardRecord:
    """前向热方程轨迹及反向积分截断 ε"""

    trajectory: Trajectory
    T: float
    score_floor_epsilon: float

    @property
    def rho_d(self) -> DensityField:
        return self.trajectory.initial

    @property
    def terminal(self) -> DensityField:
        return self.trajectory.terminal

    @property
    def reverse_horizon(self) -> float:
        """反向积分在 T − ε 处停止"""
        return self.T - self.score_floor_epsilon

    def forward_density(self, s: float) -> DensityField:
        """前向时刻 s 的密度（最近的存储快照）"""
        return self.trajectory.nearest(s)

    @property
    def truncation_error(self) -> float:
        """‖ρ^f_ε − ρ_d‖₂，反向在 T − ε 处停止留下的缺口"""
        return l2_distance(self.forward_density(self.score_floor_epsilon), self.rho_d)

    @property
    def truncation_budget(self) -> float:
        """ε·‖Δρ_d‖₂：隐式 Euler 热流每一步都不增大 ‖Δρ‖₂，故缺口不超过此值"""
        return self.score_floor_epsilon * l2_norm(laplacian(self.rho_d))


def run_forward(rho_d: DensityField, T: float, cfg: SolverConfig,
                epsilon: Optional[float] = None) -> ForwardRecord:
    """运行前向热过程

    Args:
        rho_d: 数据分布
        T: 前向时长
        cfg: 求解器配置（每步都存储）
        epsilon: 反向截断，默认 2·dt

    Returns:
        ForwardRecord
    """
    epsilon = 2.0 * cfg.dt if epsilon is None else float(epsilon)
    if not 0.0 < epsilon < T:
        raise ValueError(f"反向截断 ε={epsilon} 必须位于 (0, T={T}) 内")
    trajectory = solve_heat(rho_d, T, cfg)
    logger.debug(f"前向热过程完成: T={T}, 终态floor={trajectory.terminal.floor:.6f}, ε={epsilon}")
    return ForwardRecord(trajectory=trajectory, T=float(T), score_floor_epsilon=epsilon)


def score_of_density(rho: DensityField) -> FaceField:
    """面上的离散对数梯度，等于 gradient(ρ) 除以 ρ 的对数平均插值"""
    return detailed_balance_drift(rho)


def exact_score(record: ForwardRecord, t: float) -> FaceField:
    """反向时刻 t 的精确分数 ∇log ρ^f_{T−t}

    Raises:
        ValueError: t 超出 [0, T−ε]
    """
    tolerance = 1e-9 * record.T
    if t < -tolerance or t > record.reverse_horizon + tolerance:
        raise ValueError(f"反向时刻 t={t} 超出 [0, T−ε={record.reverse_horizon}]，分数在此处会爆炸")
    return score_of_density(record.forward_density(record.T - t))


@dataclass(frozen=True, eq=False)
class ScoreField:
    """精确分数作为反向时钟下的分段常值漂移"""

    base: ForwardRecord

    @cached_property
    def as_timefield(self) -> TimeField:
        """反向断点 t_k = T − s_{N−k}，区间 k 使用 ρ^f 在 s_{N−k} 的分数，截断到 T−ε"""
        forward_times = np.asarray(self.base.trajectory.times)
        densities = self.base.trajectory.densities
        reverse_breakpoints = self.base.T - forward_times[::-1]
        reverse_breakpoints[0] = 0.0
        fields = tuple(score_of_density(rho) for rho in densities[:0:-1])
        full = TimeField(reverse_breakpoints, fields)
        return full.restricted(self.base.reverse_horizon)

    @property
    def sup_norm(self) -> float:
        return self.as_timefield.sup_norm

    def gradient_floor_bound(self) -> float:
        """‖∇ρ_d‖∞ / l，floor 为零时为无穷"""
        floor = self.base.rho_d.floor
        return grad_sup_norm(self.base.rho_d) / floor if floor > 0 else math.inf


def score_field(record: ForwardRecord) -> ScoreField:
    return ScoreField(base=record)


def reverse_drift(record: ForwardRecord, factor: float = REVERSE_DRIFT_FACTOR) -> TimeField:
    """factor × 精确分数，定义在 [0, T−ε] 上"""
    return score_field(record).as_timefield.scaled(factor)


def score_matching_loss(candidate: TimeField, record: ForwardRecord, kind: str = "arithmetic") -> float:
    """∫₀^{T−ε} ‖candidate_t − ∇log ρ^f_{T−t}‖²_{2,ρ^f_{T−t}} dt，梯形公式作用于存储时刻

    Args:
        candidate: 候选分数（反向时钟，时长 T−ε）
        record: 前向记录
        kind: 权重插值到面的方式

    Returns:
        损失值
    """
    exact = score_field(record).as_timefield
    if abs(candidate.horizon - exact.horizon) > 1e-9 * record.T:
        raise ValueError(f"候选分数时长 {candidate.horizon} 与反向时长 {exact.horizon} 不一致")
    if candidate.grid != exact.grid:
        raise ValueError("候选分数与前向记录不在同一网格上")
    instants = np.asarray(exact.breakpoints)
    values = [
        weighted_l2_sq(candidate.at(t) - exact.at(t), record.forward_density(record.T - t), kind)
        for t in instants
    ]
    return float(trapezoid(values, x=instants))


def perturbed_score_ladder(record: ForwardRecord, amplitudes: Sequence[float], shape: FaceField) -> List[TimeField]:
    """第 n 级为 精确分数 + amplitudes[n]·shape

    Args:
        record: 前向记录
        amplitudes: 非负且严格递减的幅度
        shape: 有界扰动形状

    Returns:
        TimeField 列表
    """
    amplitudes = [float(a) for a in amplitudes]
    if not amplitudes:
        raise ValueError("扰动幅度列表不能为空")
    if any(a < 0 for a in amplitudes) or any(b >= a for a, b in zip(amplitudes, amplitudes[1:])):
        raise ValueError(f"扰动幅度必须非负且严格递减: {amplitudes}")
    if not np.isfinite(shape.sup_norm):
        raise ValueError("扰动形状必须有界")
    exact = score_field(record).as_timefield
    bound = ladder_sup_norm_bound(record, amplitudes, shape)
    logger.info(f"扰动分数阶梯: {len(amplitudes)} 级，一致上确界 ≤ {bound:.4f}")
    return [exact.shifted(shape, a) for a in amplitudes]


def ladder_sup_norm_bound(record: ForwardRecord, amplitudes: Sequence[float], shape: FaceField) -> float:
    return score_field(record).sup_norm + max(abs(a) for a in amplitudes) * shape.sup_norm


def reverse_solve(drift: TimeField, rho_start: DensityField, T: float, cfg: SolverConfig,
                  epsilon: Optional[float] = None) -> Trajectory:
    """在求解器时钟下正向积分反向密度演化，时长 T − ε

    Args:
        drift: 反向漂移（通常为 reverse_drift 的结果或其扰动）
        rho_start: 初始密度（ρ^f_T 或均匀噪声）
        T: 前向时长
        cfg: 求解器配置
        epsilon: 截断，默认 2·dt

    Returns:
        Trajectory
    """
    epsilon = 2.0 * cfg.dt if epsilon is None else float(epsilon)
    horizon = T - epsilon
    if horizon <= 0:
        raise ValueError(f"反向时长 T−ε = {horizon} 必须为正")
    return solve(rho_start, drift, min(horizon, drift.horizon), cfg)


def reverse_defect(record: ForwardRecord, trajectory: Trajectory) -> float:
    """sup_t ‖ρ^r_t − ρ^f_{T−t}‖₂"""
    return float(max(
        l2_distance(rho, record.forward_density(record.T - t))
        for t, rho in zip(trajectory.times, trajectory.densities)
    ))


def loss_error_bound(loss: float, floor: float, sup_norm: float, T: float, rho_max: float) -> float:
    """(4/l)·L·e^{4·supnorm·T}·max‖ρ‖∞，溢出时为无穷"""
    if floor <= 0:
        return math.inf
    with np.errstate(over="ignore"):
        growth = float(np.exp(4.0 * sup_norm * T))
    return 4.0 / floor * loss * growth * rho_max


def t_decay_entry(rho_d: DensityField, T: float, cfg: SolverConfig) -> Dict[str, float]:
    """单个时长 T 的噪声初始化实验

    Returns:
        {"T", "terminal_error", "init_error", "exact_start_error", "truncation_error",
        "truncation_budget", "score_sup"}：
        terminal_error 为噪声起点终态与 ρ_d 的距离（含截断与离散误差），
        init_error 为噪声起点与精确起点 ρ^f_T 在同一格式下的终态差，
        exact_start_error 为精确起点终态与 ρ_d 的距离，即 terminal_error 不随 T 衰减的下限
    """
    record = run_forward(rho_d, T, cfg)
    drift = reverse_drift(record)
    from_noise = reverse_solve(drift, uniform_density(rho_d.grid), T, cfg)
    from_exact = reverse_solve(drift, record.terminal, T, cfg)
    return {
        "T": float(T),
        "terminal_error": l2_distance(from_noise.terminal, rho_d),
        "init_error": l2_distance(from_noise.terminal, from_exact.terminal),
        "exact_start_error": l2_distance(from_exact.terminal, rho_d),
        "truncation_error": record.truncation_error,
        "truncation_budget": record.truncation_budget,
        "score_sup": drift.sup_norm / REVERSE_DRIFT_FACTOR,
    }


def t_decay_profile(rho_d: DensityField, horizons: Sequence[float], cfg: SolverConfig) -> List[Dict[str, float]]:
    return [t_decay_entry(rho_d, T, cfg) for T in horizons]
