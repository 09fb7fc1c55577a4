"""
Fokker-Planck 有限体积求解器
∂ρ/∂t = Δρ − ∇·(V_t ρ)，无通量边界；指数拟合（Chang-Cooper）或迎风通量，隐式Euler时间推进
同时提供无扩散的连续性方程求解
"""

import csv
import json
import math
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Callable, Dict, List, Literal, Optional, Tuple, Union

import numpy as np
import scipy.sparse as sparse
import scipy.sparse.linalg as spla
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field
from scipy.integrate import trapezoid
from scipy.special import exprel

from .density import DensityField
from .grid import CellField, FaceField, Grid, SolverError, read_cell_csv
from .metrics import h1_norm, l2_distance, l2_norm

__all__ = [
    "SolverConfig",
    "SolverError",
    "TimeField",
    "Trajectory",
    "detailed_balance_drift",
    "drift_diffusion_matrix",
    "gronwall_rate",
    "h1_profile",
    "l2_deviation",
    "read_trajectory",
    "solve",
    "solve_continuity",
    "solve_heat",
    "step",
]

# 时间断点比较容差（相对于时间跨度）
TIME_TOLERANCE = 1e-9


class SolverConfig(BaseModel):
    """求解器配置"""

    model_config = ConfigDict(extra="forbid", frozen=True)

    dt: float = Field(default=1e-3, gt=0, description="时间步长")
    scheme: Literal["chang_cooper", "upwind"] = Field(default="chang_cooper", description="通量格式")
    diffusion: bool = Field(default=True, description="是否包含扩散项")
    linear_solver: Literal["direct", "iterative"] = Field(default="direct", description="线性求解方式")
    linear_solver_tol: float = Field(default=1e-10, gt=0, description="迭代求解相对残差容差")
    max_linear_iters: int = Field(default=1000, gt=0, description="迭代求解最大迭代次数")
    snapshot_stride: int = Field(default=1, ge=1, description="轨迹写盘时的快照间隔")


@dataclass(frozen=True, eq=False)
class TimeField:
    """时间分段常值的面心漂移场

    breakpoints 为 0 = t_0 < ... < t_k = 横跨时长，fields[i] 作用于 [t_i, t_{i+1})。
    """

    breakpoints: np.ndarray
    fields: Tuple[FaceField, ...]
    lipschitz: Optional[float] = None

    def __post_init__(self):
        breakpoints = np.array(self.breakpoints, dtype=float, copy=True)
        breakpoints.setflags(write=False)
        fields = tuple(self.fields)
        if breakpoints.ndim != 1 or breakpoints.size < 2:
            raise ValueError("TimeField 至少需要两个时间断点")
        if breakpoints[0] != 0.0:
            raise ValueError(f"TimeField 断点必须从0开始，收到 {breakpoints[0]}")
        if np.any(np.diff(breakpoints) <= 0):
            raise ValueError("TimeField 断点必须严格递增")
        if len(fields) != breakpoints.size - 1:
            raise ValueError(f"区间数 {breakpoints.size - 1} 与漂移场数 {len(fields)} 不符")
        grids = {f.grid for f in fields}
        if len(grids) != 1:
            raise ValueError("TimeField 的所有漂移场必须在同一网格上")
        object.__setattr__(self, "breakpoints", breakpoints)
        object.__setattr__(self, "fields", fields)
        if not np.isfinite(self.sup_norm):
            raise ValueError("TimeField 的上确界范数必须有限")

    @property
    def grid(self) -> Grid:
        return self.fields[0].grid

    @property
    def horizon(self) -> float:
        return float(self.breakpoints[-1])

    @property
    def n_intervals(self) -> int:
        return len(self.fields)

    @cached_property
    def sup_norm(self) -> float:
        return max(f.sup_norm for f in self.fields)

    def interval_index(self, t: float) -> int:
        """t 所在区间（左端点规则），超出范围时截到首末区间"""
        index = int(np.searchsorted(self.breakpoints, t, side="right")) - 1
        return min(max(index, 0), self.n_intervals - 1)

    def at(self, t: float) -> FaceField:
        return self.fields[self.interval_index(t)]

    def restricted(self, horizon: float) -> "TimeField":
        """截断到 [0, horizon]"""
        if horizon <= 0 or horizon > self.horizon * (1 + TIME_TOLERANCE):
            raise ValueError(f"截断时长 {horizon} 不在 (0, {self.horizon}] 内")
        keep = int(np.searchsorted(self.breakpoints, horizon * (1 - TIME_TOLERANCE), side="left"))
        keep = max(keep, 1)
        breakpoints = np.append(self.breakpoints[:keep], horizon)
        return TimeField(breakpoints, self.fields[:keep], self.lipschitz)

    def scaled(self, factor: float) -> "TimeField":
        lipschitz = None if self.lipschitz is None else abs(factor) * self.lipschitz
        return TimeField(self.breakpoints, tuple(f * factor for f in self.fields), lipschitz)

    def shifted(self, shape: FaceField, amplitude: float) -> "TimeField":
        """每个区间加上 amplitude·shape"""
        if amplitude == 0.0:
            return self
        offset = shape * amplitude
        return TimeField(self.breakpoints, tuple(f + offset for f in self.fields))

    @classmethod
    def constant(cls, drift: FaceField, horizon: float, lipschitz: Optional[float] = None) -> "TimeField":
        return cls(np.array([0.0, horizon]), (drift,), lipschitz)

    @classmethod
    def zeros(cls, grid: Grid, horizon: float) -> "TimeField":
        return cls.constant(FaceField.zeros(grid), horizon, lipschitz=0.0)

    @classmethod
    def from_function(cls, grid: Grid, fn: Callable[[float, np.ndarray], np.ndarray],
                      horizon: float, dt: float) -> "TimeField":
        """按左端点在每个 dt 区间采样时变向量场 fn(t, points) -> (n, dim)"""
        n_intervals = max(1, math.ceil(horizon / dt - TIME_TOLERANCE))
        breakpoints = np.linspace(0.0, horizon, n_intervals + 1)
        fields = tuple(FaceField.from_function(grid, lambda p, t=t: fn(t, p)) for t in breakpoints[:-1])
        return cls(breakpoints, fields)


@dataclass(frozen=True, eq=False)
class Trajectory:
    """按时间采样的密度序列"""

    times: np.ndarray
    densities: List[DensityField]
    config: SolverConfig

    def __post_init__(self):
        if len(self.times) != len(self.densities):
            raise ValueError(f"时间点数 {len(self.times)} 与密度数 {len(self.densities)} 不符")

    @property
    def grid(self) -> Grid:
        return self.densities[0].grid

    @property
    def initial(self) -> DensityField:
        return self.densities[0]

    @property
    def terminal(self) -> DensityField:
        return self.densities[-1]

    @property
    def horizon(self) -> float:
        return float(self.times[-1])

    def nearest_index(self, t: float) -> int:
        return int(np.argmin(np.abs(np.asarray(self.times) - t)))

    def nearest(self, t: float) -> DensityField:
        """最接近 t 的存储快照"""
        return self.densities[self.nearest_index(t)]

    def masses(self) -> np.ndarray:
        return np.array([rho.mass for rho in self.densities])

    def floors(self) -> np.ndarray:
        return np.array([rho.floor for rho in self.densities])

    def l2_norms(self) -> np.ndarray:
        return np.array([l2_norm(rho) for rho in self.densities])

    def distances_to(self, reference: CellField) -> np.ndarray:
        return np.array([l2_distance(rho, reference) for rho in self.densities])

    def to_dir(self, directory: Union[str, Path], stride: Optional[int] = None) -> Path:
        """写出 meta.csv（全部时刻）与按 stride 抽样的快照CSV"""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        stride = stride or self.config.snapshot_stride
        with open(directory / "meta.csv", "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["time", "mass", "floor", "l2_norm", "snapshot"])
            for k, (t, rho) in enumerate(zip(self.times, self.densities)):
                snapshot = f"snapshot_{k:05d}.csv" if k % stride == 0 or k == len(self.times) - 1 else ""
                writer.writerow([repr(float(t)), repr(rho.mass), repr(rho.floor), repr(l2_norm(rho)), snapshot])
                if snapshot:
                    rho.to_csv(directory / snapshot)
        (directory / "solver_config.json").write_text(self.config.model_dump_json(indent=2), encoding="utf-8")
        logger.debug(f"轨迹已写入 {directory}")
        return directory


def read_trajectory(directory: Union[str, Path], grid: Grid) -> Trajectory:
    """读回 Trajectory.to_dir 写出的快照（只包含有快照的时刻）"""
    directory = Path(directory)
    config = SolverConfig(**json.loads((directory / "solver_config.json").read_text(encoding="utf-8")))
    times, densities = [], []
    with open(directory / "meta.csv", "r", encoding="utf-8") as f:
        for row in csv.DictReader(f):
            if row["snapshot"]:
                times.append(float(row["time"]))
                densities.append(DensityField(grid, read_cell_csv(directory / row["snapshot"], grid).values))
    return Trajectory(np.asarray(times), densities, config)


def _bernoulli(z: np.ndarray) -> np.ndarray:
    """B(z) = z/(e^z − 1)"""
    return 1.0 / exprel(z)


def _face_coefficients(v: np.ndarray, h: float, scheme: str, diffusion: bool) -> Tuple[np.ndarray, np.ndarray]:
    """面通量 F = c_R·ρ_R − c_L·ρ_L 的系数"""
    if not diffusion:
        return np.maximum(-v, 0.0), np.maximum(v, 0.0)
    if scheme == "chang_cooper":
        z = v * h
        return _bernoulli(z) / h, _bernoulli(-z) / h
    return 1.0 / h + np.maximum(-v, 0.0), 1.0 / h + np.maximum(v, 0.0)


def drift_diffusion_matrix(drift: FaceField, scheme: str = "chang_cooper", diffusion: bool = True) -> sparse.csr_matrix:
    """组装 dρ/dt = Aρ 的稀疏矩阵；列和为零（质量守恒），非对角元非负（保正）"""
    grid = drift.grid
    index = np.arange(grid.n_cells).reshape(grid.shape)
    rows, cols, vals = [], [], []
    for axis, comp in enumerate(drift.components):
        n = grid.cells[axis]
        h = grid.widths[axis]
        left = np.take(index, np.arange(n - 1), axis=axis).ravel()
        right = np.take(index, np.arange(1, n), axis=axis).ravel()
        c_right, c_left = _face_coefficients(comp.ravel(), h, scheme, diffusion)
        rows += [left, left, right, right]
        cols += [right, left, right, left]
        vals += [c_right / h, -c_left / h, -c_right / h, c_left / h]
    matrix = sparse.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(grid.n_cells, grid.n_cells),
    )
    return matrix.tocsr()


class _ImplicitStepper:
    """隐式Euler推进器：同一冻结漂移与步长只分解一次"""

    def __init__(self, cfg: SolverConfig, scheme: str, diffusion: bool):
        self.cfg = cfg
        self.scheme = scheme
        self.diffusion = diffusion
        self._cache: Dict[Tuple[int, float], Callable[[np.ndarray], np.ndarray]] = {}

    def _system(self, drift: FaceField, dt: float) -> Callable[[np.ndarray], np.ndarray]:
        key = (id(drift), dt)
        solver = self._cache.get(key)
        if solver is not None:
            return solver
        grid = drift.grid
        system = (sparse.identity(grid.n_cells, format="csr")
                  - dt * drift_diffusion_matrix(drift, self.scheme, self.diffusion)).tocsc()
        if self.cfg.linear_solver == "direct":
            solver = spla.splu(system).solve
        else:
            solver = self._iterative(system, symmetric=drift.sup_norm == 0.0)
        # 只保留当前漂移的分解
        self._cache = {key: solver}
        return solver

    def _iterative(self, system: sparse.csc_matrix, symmetric: bool) -> Callable[[np.ndarray], np.ndarray]:
        diagonal = system.diagonal()
        preconditioner = spla.LinearOperator(system.shape, matvec=lambda x: x / diagonal)
        method = spla.cg if symmetric else spla.bicgstab
        tol = self.cfg.linear_solver_tol
        max_iters = self.cfg.max_linear_iters

        def solve_system(rhs: np.ndarray) -> np.ndarray:
            solution, info = method(system, rhs, x0=rhs, rtol=tol, atol=0.0, maxiter=max_iters, M=preconditioner)
            if info != 0:
                residual = float(np.linalg.norm(system @ solution - rhs) / max(np.linalg.norm(rhs), 1e-300))
                raise SolverError(f"{method.__name__} 未收敛 (info={info})，相对残差 {residual:.3e}，最大迭代 {max_iters}")
            return solution

        return solve_system

    def advance(self, rho: np.ndarray, drift: FaceField, dt: float, step_index: int) -> np.ndarray:
        solution = self._system(drift, dt)(rho.ravel())
        if not np.all(np.isfinite(solution)):
            raise SolverError(f"第{step_index}步出现NaN/Inf (dt={dt}, ‖V‖∞={drift.sup_norm:.3e})")
        return solution.reshape(rho.shape)


def _effective_scheme(cfg: SolverConfig) -> str:
    return cfg.scheme if cfg.diffusion else "upwind"


def step(rho: DensityField, drift: FaceField, cfg: SolverConfig) -> DensityField:
    """一步隐式Euler

    Args:
        rho: 当前密度
        drift: 本步冻结的面心漂移
        cfg: 求解器配置

    Returns:
        下一时刻密度
    """
    if drift.grid != rho.grid:
        raise ValueError(f"漂移网格 {drift.grid.cells} 与密度网格 {rho.grid.cells} 不符")
    stepper = _ImplicitStepper(cfg, _effective_scheme(cfg), cfg.diffusion)
    return DensityField(rho.grid, stepper.advance(rho.values, drift, cfg.dt, 0))


def solve(rho0: DensityField, drift: TimeField, T: float, cfg: SolverConfig) -> Trajectory:
    """在 [0,T] 上求解 Fokker-Planck 方程

    每个漂移区间内按 ⌈长度/dt⌉ 均匀子步，漂移断点总是步边界；每一步都记录。

    Args:
        rho0: 初始密度
        drift: 分段常值漂移，时长需覆盖 T
        T: 终止时间
        cfg: 求解器配置

    Returns:
        Trajectory
    """
    if T <= 0:
        raise ValueError(f"终止时间必须为正，收到 {T}")
    if T > drift.horizon * (1 + TIME_TOLERANCE):
        raise ValueError(f"漂移场时长 {drift.horizon} 不足以覆盖 T={T}")
    if drift.grid != rho0.grid:
        raise ValueError(f"漂移网格 {drift.grid.cells} 与密度网格 {rho0.grid.cells} 不符")

    stepper = _ImplicitStepper(cfg, _effective_scheme(cfg), cfg.diffusion)
    times = [0.0]
    densities = [rho0]
    values = rho0.values
    step_index = 0
    for k, field_k in enumerate(drift.fields):
        start = float(drift.breakpoints[k])
        if start >= T * (1 - TIME_TOLERANCE):
            break
        end = min(float(drift.breakpoints[k + 1]), T)
        n_sub = max(1, math.ceil((end - start) / cfg.dt - TIME_TOLERANCE))
        dt_k = (end - start) / n_sub
        for j in range(n_sub):
            step_index += 1
            values = stepper.advance(values, field_k, dt_k, step_index)
            times.append(end if j == n_sub - 1 else start + (j + 1) * dt_k)
            densities.append(DensityField(rho0.grid, values))
    logger.debug(f"求解完成: {step_index} 步, T={T}, 终态质量={densities[-1].mass:.12f}")
    return Trajectory(np.asarray(times), densities, cfg)


def solve_heat(rho0: DensityField, T: float, cfg: SolverConfig) -> Trajectory:
    """热方程（零漂移）"""
    return solve(rho0, TimeField.zeros(rho0.grid, T), T, cfg)


def solve_continuity(rho0: DensityField, drift: TimeField, T: float, cfg: SolverConfig) -> Trajectory:
    """无扩散连续性方程 ∂ρ/∂t = −∇·(Vρ)，强制迎风格式并检查CFL条件

    Raises:
        ValueError: dt·‖V‖∞ 超过最小格宽
    """
    cfl = cfg.dt * drift.sup_norm
    if cfl > rho0.grid.min_width * (1 + TIME_TOLERANCE):
        raise ValueError(f"违反CFL条件: dt·‖V‖∞ = {cfl:.4e} > 格宽 {rho0.grid.min_width:.4e}")
    continuity_cfg = cfg.model_copy(update={"scheme": "upwind", "diffusion": False})
    return solve(rho0, drift, T, continuity_cfg)


def detailed_balance_drift(f: CellField) -> FaceField:
    """离散的 ∇f/f：面上取 (log f_R − log f_L)/h，使 ρ ∝ f 在指数拟合格式下严格稳态"""
    if float(f.values.min()) <= 0:
        raise ValueError(f"detailed_balance_drift 要求 f 严格为正，min={float(f.values.min()):.3e}")
    log_f = np.log(f.values)
    grid = f.grid
    return FaceField(grid, tuple(np.diff(log_f, axis=a) / grid.widths[a] for a in range(grid.dim)))


def gronwall_rate(traj_a: Trajectory, traj_b: Trajectory) -> float:
    """拟合最小的 c 使 ‖ρ₁,ₜ − ρ₂,ₜ‖₂ ≤ e^{c·t}·‖ρ₁,₀ − ρ₂,₀‖₂ 对所有存储时刻成立"""
    if len(traj_a.times) != len(traj_b.times):
        raise ValueError("两条轨迹的采样时刻不一致")
    initial = l2_distance(traj_a.initial, traj_b.initial)
    if initial == 0.0:
        return 0.0
    rates = [
        math.log(max(l2_distance(a, b), 1e-300) / initial) / t
        for t, a, b in zip(traj_a.times[1:], traj_a.densities[1:], traj_b.densities[1:])
    ]
    return float(max(rates)) if rates else 0.0


def h1_profile(trajectory: Trajectory) -> Tuple[float, float]:
    """(sup_t ‖ρ_t‖_{H¹}, ∫‖ρ_t‖²_{H¹}dt)"""
    norms = np.array([h1_norm(rho) for rho in trajectory.densities])
    return float(norms.max()), float(trapezoid(norms**2, x=trajectory.times))


def l2_deviation(traj_a: Trajectory, traj_b: Trajectory) -> float:
    """两条同步轨迹的 sup_t L² 距离"""
    if len(traj_a.times) != len(traj_b.times):
        raise ValueError("两条轨迹的采样时刻不一致")
    return float(max(l2_distance(a, b) for a, b in zip(traj_a.densities, traj_b.densities)))
