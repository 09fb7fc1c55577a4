"""
Pydantic数据模型定义
实验配置、判定结果与实验报告
"""

import time
from typing import Any, Dict, List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from ..density import DensitySpec
from ..fpe_solver import SolverConfig

ExperimentName = Literal["SCORE-SWEEP", "T-DECAY", "MOSER-EXACT", "OSC-CONVERGE", "ODE-VS-SDE", "NEURAL-TRANSFER"]

EXPERIMENTS: List[str] = ["SCORE-SWEEP", "T-DECAY", "MOSER-EXACT", "OSC-CONVERGE", "ODE-VS-SDE", "NEURAL-TRANSFER"]

DEFAULT_CELLS = 128


class StrictModel(BaseModel):
    """拒绝未知字段的基类"""
    model_config = ConfigDict(extra="forbid")


class GridConfig(StrictModel):
    """网格配置"""
    dim: Literal[1, 2] = Field(default=1, description="空间维数")
    cells: Optional[List[int]] = Field(default=None, description="每个坐标轴的格子数，默认每轴128")

    @model_validator(mode="after")
    def _fill_cells(self) -> "GridConfig":
        if self.cells is None:
            self.cells = [DEFAULT_CELLS] * self.dim
        if len(self.cells) != self.dim:
            raise ValueError(f"cells 长度 {len(self.cells)} 与 dim={self.dim} 不一致")
        if any(n < 4 for n in self.cells):
            raise ValueError(f"每个坐标轴至少4个格子，收到 {self.cells}")
        return self


class DensityPair(StrictModel):
    """一对 (ρ_0, ρ_d)；source 缺省为均匀分布"""
    source: Optional[DensitySpec] = Field(default=None, description="初始密度")
    target: DensitySpec = Field(..., description="目标密度")


class PerturbationConfig(StrictModel):
    """扰动形状 δ·sin(2πk·x₁)"""
    amplitude: float = Field(default=0.5, ge=0, description="扰动幅度 δ")
    frequency: int = Field(default=1, ge=1, description="扰动频率 k")


class VerdictSlacks(StrictModel):
    """判定松弛参数"""
    monotone_slack: float = Field(default=0.05, ge=0, description="单调性检查的相对松弛")
    rate_tolerance: float = Field(default=0.25, ge=0, lt=1, description="衰减率相对谱隙的容差")
    decay_floor: float = Field(default=1e-12, gt=0, description="拟合衰减率时忽略低于该值的点（舍入噪声）")
    min_reduction: float = Field(default=4.0, ge=1, description="OSC-CONVERGE 首末误差的最小缩减倍数")
    weak_order: float = Field(default=0.8, ge=0, description="弱*配对差的最小拟合阶")
    budget_scale: float = Field(default=4.0, gt=0, description="5·(dx²+dt)·scale 误差预算中的 scale")
    round_trip_scale: float = Field(default=12.0, gt=0, description="精确分数反向往返预算 5·(dx²+dt)·scale 中的 scale")
    transfer_fraction: float = Field(default=0.5, gt=0, le=1, description="分片宽网络终态误差相对初始距离的上限")
    constant_spread: float = Field(default=0.5, ge=0, description="经验常数 2C 的最大相对离散度")
    particle_sigma: float = Field(default=3.0, gt=0, description="粒子W1预算 σ/√n + 2h 中的 σ")


class ExperimentConfig(StrictModel):
    """实验配置"""
    experiment: ExperimentName = Field(..., description="实验名称")
    target: DensitySpec = Field(..., description="目标密度 ρ_d")
    source: Optional[DensitySpec] = Field(default=None, description="初始密度 ρ_0，缺省为均匀分布")
    pairs: List[DensityPair] = Field(default_factory=list, description="MOSER-EXACT 的密度对 / ODE-VS-SDE 的漂移用例")
    grid: GridConfig = Field(default_factory=GridConfig, description="网格")
    solver: SolverConfig = Field(default_factory=SolverConfig, description="求解器")
    T: float = Field(default=0.5, gt=0, description="时长")
    amplitudes: List[float] = Field(default_factory=lambda: [0.4, 0.2, 0.1, 0.05], description="SCORE-SWEEP 扰动幅度（严格递减）")
    horizons: List[float] = Field(default_factory=lambda: [0.5, 1.0, 2.0, 4.0], description="T-DECAY 时长列表（严格递增）")
    N_list: List[int] = Field(default_factory=lambda: [1, 2, 4, 8, 16], description="振荡周期数列表（严格递增）")
    m: int = Field(default=16, ge=1, description="宽网络项数")
    activation: Literal["relu", "logistic", "tanh"] = Field(default="logistic", description="激活函数")
    slabs: int = Field(default=4, ge=1, description="NEURAL-TRANSFER 的时间片数")
    n_particles: int = Field(default=100000, ge=1, description="粒子数")
    perturbation: PerturbationConfig = Field(default_factory=PerturbationConfig, description="扰动形状")
    seed: int = Field(default=0, ge=0, description="随机种子")
    output_dir: Optional[str] = Field(default=None, description="输出目录")
    slacks: VerdictSlacks = Field(default_factory=VerdictSlacks, description="判定松弛参数")

    @field_validator("amplitudes")
    @classmethod
    def _amplitudes_sorted(cls, value: List[float]) -> List[float]:
        if not value:
            raise ValueError("amplitudes 不能为空")
        if any(a <= 0 for a in value) or any(b >= a for a, b in zip(value, value[1:])):
            raise ValueError(f"amplitudes 必须为正且严格递减: {value}")
        return value

    @field_validator("horizons")
    @classmethod
    def _horizons_sorted(cls, value: List[float]) -> List[float]:
        if not value:
            raise ValueError("horizons 不能为空")
        if any(t <= 0 for t in value) or any(b <= a for a, b in zip(value, value[1:])):
            raise ValueError(f"horizons 必须为正且严格递增: {value}")
        return value

    @field_validator("N_list")
    @classmethod
    def _n_sorted(cls, value: List[int]) -> List[int]:
        if not value:
            raise ValueError("N_list 不能为空")
        if any(n < 1 for n in value) or any(b <= a for a, b in zip(value, value[1:])):
            raise ValueError(f"N_list 必须为正且严格递增: {value}")
        return value

    def density_pairs(self) -> List[DensityPair]:
        """显式给出的 pairs，否则由 source/target 组成单个密度对"""
        return self.pairs or [DensityPair(source=self.source, target=self.target)]


class Verdict(BaseModel):
    """一项判定：名称、是否通过、实测值"""
    model_config = ConfigDict(ser_json_inf_nan="constants")

    name: str = Field(..., description="判定名称")
    passed: bool = Field(..., description="是否通过")
    metrics: List[str] = Field(default_factory=list, description="判定引用的结果列")
    measured: Dict[str, float] = Field(default_factory=dict, description="实测常数")
    detail: str = Field(default="", description="说明")


class ExperimentReport(BaseModel):
    """实验报告"""
    model_config = ConfigDict(ser_json_inf_nan="constants")

    experiment: ExperimentName = Field(..., description="实验名称")
    claim: str = Field(..., description="被检验的结论")
    config: Dict[str, Any] = Field(..., description="生效配置回显")
    rows: List[Dict[str, float]] = Field(default_factory=list, description="逐次运行的指标行")
    verdicts: List[Verdict] = Field(default_factory=list, description="判定列表")
    wall_time: float = Field(default=0.0, description="耗时（秒）")
    created_at: float = Field(default_factory=time.time, description="创建时间戳")

    @model_validator(mode="after")
    def _verdicts_reference_rows(self) -> "ExperimentReport":
        columns = set().union(*(row.keys() for row in self.rows)) if self.rows else set()
        for verdict in self.verdicts:
            missing = [m for m in verdict.metrics if m not in columns]
            if missing:
                raise ValueError(f"判定 {verdict.name} 引用了结果中不存在的列: {missing}")
        return self

    @property
    def success(self) -> bool:
        return all(v.passed for v in self.verdicts)
