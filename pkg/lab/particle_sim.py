"""
粒子层面的实现
反射 Euler-Maruyama（反向SDE）与反射显式Euler（概率流ODE），以及直方图密度估计
"""

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Union

import numpy as np
from loguru import logger

from .density import DensityField
from .fpe_solver import TimeField
from .grid import FaceField, Grid, interpolate_faces

# 高斯增量按粒子分块生成，块内计数器独立，任意按块切分都得到同一增量
NOISE_BLOCK = 4096

Drift = Union[FaceField, Callable[[np.ndarray], np.ndarray]]


@dataclass(frozen=True, eq=False)
class ParticleEnsemble:
    """粒子集合：位置始终位于闭单位盒内"""

    positions: np.ndarray
    rng_seed: int
    t: float = 0.0
    step_index: int = 0

    def __post_init__(self):
        positions = np.asarray(self.positions, dtype=float)
        if positions.ndim != 2:
            raise ValueError(f"粒子位置必须是二维数组 (n, d)，收到形状 {positions.shape}")
        if positions.size and (positions.min() < 0.0 or positions.max() > 1.0):
            raise ValueError("粒子位置超出单位盒")
        object.__setattr__(self, "positions", positions)

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    @property
    def dim(self) -> int:
        return self.positions.shape[1]

    def to_csv(self, path: Union[str, Path]) -> None:
        header = ["particle_id"] + ["x", "y"][: self.dim]
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(header)
            for k, row in enumerate(self.positions):
                writer.writerow([k] + [repr(float(v)) for v in row])


def sample_from_density(rho: DensityField, n: int, seed: int) -> ParticleEnsemble:
    """按格子质量做分类抽样，再在格内均匀取点（一维即分段常数密度的逆CDF抽样）

    Args:
        rho: 密度
        n: 粒子数
        seed: 随机种子

    Returns:
        ParticleEnsemble
    """
    grid = rho.grid
    if n < 0:
        raise ValueError(f"粒子数不能为负，收到 {n}")
    if n == 0:
        return ParticleEnsemble(np.zeros((0, grid.dim)), rng_seed=seed)
    rng = np.random.default_rng(seed)
    cumulative = np.cumsum(np.clip(rho.values.ravel(), 0.0, None))
    cells = np.searchsorted(cumulative, rng.random(n) * cumulative[-1], side="right")
    cells = np.minimum(cells, grid.n_cells - 1)
    index = np.stack(np.unravel_index(cells, grid.shape), axis=-1)
    offsets = rng.random((n, grid.dim))
    positions = (index + offsets) * np.asarray(grid.widths)
    return ParticleEnsemble(np.clip(positions, 0.0, 1.0), rng_seed=seed)


def reflect(x: np.ndarray) -> np.ndarray:
    """逐坐标折叠回 [0,1]，可多次反射"""
    folded = np.mod(x, 2.0)
    return np.where(folded > 1.0, 2.0 - folded, folded)


def gaussian_increments(seed: int, step_index: int, n: int, dim: int) -> np.ndarray:
    """第 step_index 步的标准正态增量，按 NOISE_BLOCK 分块，每块一个 Philox 计数器"""
    blocks = []
    for block, start in enumerate(range(0, n, NOISE_BLOCK)):
        size = min(NOISE_BLOCK, n - start)
        bit_generator = np.random.Philox(key=seed, counter=[0, 0, block, step_index])
        blocks.append(np.random.Generator(bit_generator).standard_normal((size, dim)))
    return np.concatenate(blocks) if blocks else np.zeros((0, dim))


def _drift_values(drift: Drift, positions: np.ndarray) -> np.ndarray:
    if isinstance(drift, FaceField):
        return interpolate_faces(drift, positions)
    return np.asarray(drift(positions), dtype=float).reshape(positions.shape)


def step_sde(ensemble: ParticleEnsemble, drift: Drift, dt: float, diffusion_scale: float = 1.0) -> ParticleEnsemble:
    """x ← x + V(x)·dt + √(2dt)·scale·ξ，然后折叠反射

    Args:
        ensemble: 当前粒子
        drift: 面场（交错网格线性插值）或向量函数
        dt: 步长
        diffusion_scale: 噪声强度，0 即为 ODE 步

    Returns:
        新的粒子集合
    """
    if dt <= 0:
        raise ValueError(f"步长必须为正，收到 {dt}")
    if ensemble.n == 0:
        return replace(ensemble, t=ensemble.t + dt, step_index=ensemble.step_index + 1)
    positions = ensemble.positions + _drift_values(drift, ensemble.positions) * dt
    if diffusion_scale != 0.0:
        noise = gaussian_increments(ensemble.rng_seed, ensemble.step_index, ensemble.n, ensemble.dim)
        positions = positions + math.sqrt(2.0 * dt) * diffusion_scale * noise
    return ParticleEnsemble(reflect(positions), ensemble.rng_seed, ensemble.t + dt, ensemble.step_index + 1)


def step_ode(ensemble: ParticleEnsemble, drift: Drift, dt: float) -> ParticleEnsemble:
    """概率流ODE的一步（无噪声，保留反射）"""
    return step_sde(ensemble, drift, dt, diffusion_scale=0.0)


def run_particles(ensemble: ParticleEnsemble, drift: TimeField, horizon: float, dt: float,
                  diffusion_scale: float = 1.0, reverse_drift_factor: float = 1.0) -> ParticleEnsemble:
    """按左端点冻结漂移，循环 step_sde / step_ode

    Args:
        ensemble: 初始粒子
        drift: 漂移（求解器时钟）
        horizon: 积分时长
        dt: 名义步长（实际步长把 horizon 均分）
        diffusion_scale: 噪声强度
        reverse_drift_factor: 漂移系数；概率流ODE取1，反向SDE取2

    Returns:
        终态粒子
    """
    if horizon > drift.horizon * (1 + 1e-9):
        raise ValueError(f"漂移时长 {drift.horizon} 不足以覆盖 {horizon}")
    n_steps = max(1, math.ceil(horizon / dt - 1e-9))
    dt_eff = horizon / n_steps
    scaled = {}
    for k in range(n_steps):
        index = drift.interval_index(k * dt_eff)
        field = scaled.get(index)
        if field is None:
            field = drift.fields[index] * reverse_drift_factor
            scaled = {index: field}
        ensemble = step_sde(ensemble, field, dt_eff, diffusion_scale)
    logger.debug(f"粒子积分完成: n={ensemble.n}, 步数={n_steps}, 漂移系数={reverse_drift_factor}, 噪声={diffusion_scale}")
    return ensemble


def histogram_density(ensemble: ParticleEnsemble, grid: Grid) -> DensityField:
    """格子计数 / (n·体积)，质量为1"""
    if ensemble.n == 0:
        raise ValueError("空粒子集合无法估计密度")
    if ensemble.dim != grid.dim:
        raise ValueError(f"粒子维数 {ensemble.dim} 与网格维数 {grid.dim} 不符")
    counts, _ = np.histogramdd(ensemble.positions, bins=grid.cells, range=[(0.0, 1.0)] * grid.dim)
    return DensityField(grid, counts / (ensemble.n * grid.cell_volume))
