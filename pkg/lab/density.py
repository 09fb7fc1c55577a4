"""
概率密度场与构造性密度族
均匀噪声分布、余弦凸包混合、指数倾斜族，均与均匀背景混合以保证下界
"""

from functools import cached_property
from typing import Callable, List, Literal, Optional

import numpy as np
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field, field_validator

from .grid import CellField, Grid, gradient

NEGATIVE_TOLERANCE = 1e-12
# 质量偏差小于该值时不再做除法，保证 normalize 按位幂等
NORMALIZE_SKIP = 1e-13


class DensityField(CellField):
    """单位质量的非负格心场"""

    def __post_init__(self):
        super().__post_init__()
        if not np.all(np.isfinite(self.values)):
            raise ValueError("密度场包含非有限值")
        low = float(self.values.min())
        if low < -NEGATIVE_TOLERANCE:
            index = np.unravel_index(int(np.argmin(self.values)), self.grid.shape)
            raise ValueError(f"密度场在格子 {tuple(int(i) for i in index)} 处为负值 {low:.3e}")

    @cached_property
    def mass(self) -> float:
        return self.total()

    @cached_property
    def floor(self) -> float:
        return float(self.values.min())

    @property
    def peak(self) -> float:
        return float(self.values.max())


class BumpComponent(BaseModel):
    """一个升余弦凸包：中心、半径、权重"""

    model_config = ConfigDict(extra="forbid")

    center: List[float] = Field(..., description="凸包中心坐标，长度等于空间维数")
    width: float = Field(..., gt=0, description="凸包支撑半径")
    weight: float = Field(default=1.0, gt=0, description="混合权重")


class DensitySpec(BaseModel):
    """密度族的声明式描述"""

    model_config = ConfigDict(extra="forbid")

    family: Literal["uniform", "bump_mixture", "tilted"] = Field(default="bump_mixture", description="密度族")
    components: List[BumpComponent] = Field(default_factory=list, description="凸包列表（bump_mixture）")
    tilt: Optional[List[float]] = Field(default=None, description="倾斜向量（tilted），密度正比于 exp(tilt·x)")
    floor_fraction: float = Field(default=0.1, ge=0.0, le=1.0, description="均匀背景所占质量比例，保证密度下界")

    @field_validator("components")
    @classmethod
    def _same_dimension(cls, components: List[BumpComponent]) -> List[BumpComponent]:
        dims = {len(c.center) for c in components}
        if len(dims) > 1:
            raise ValueError(f"凸包中心维数不一致: {sorted(dims)}")
        return components


def normalize(values, grid: Optional[Grid] = None) -> DensityField:
    """归一化为单位质量

    Args:
        values: CellField 或数组
        grid: values 为数组时必须提供

    Returns:
        DensityField；质量已在 1±1e-13 内时原样返回数值
    """
    if isinstance(values, CellField):
        grid = values.grid
        values = values.values
    if grid is None:
        raise ValueError("归一化数组时必须提供网格")
    values = np.asarray(values, dtype=float)
    mass = float(values.sum() * grid.cell_volume)
    if not mass > 0:
        raise ValueError(f"无法归一化质量为 {mass} 的场")
    if abs(mass - 1.0) > NORMALIZE_SKIP:
        values = values / mass
    return DensityField(grid, values)


def uniform_density(grid: Grid) -> DensityField:
    """均匀噪声分布（单位盒上恒为1）"""
    return DensityField(grid, np.ones(grid.shape))


def _bump(points: np.ndarray, component: BumpComponent) -> np.ndarray:
    r = np.linalg.norm(points - np.asarray(component.center, dtype=float), axis=-1) / component.width
    return np.where(r < 1.0, 0.5 * (1.0 + np.cos(np.pi * np.minimum(r, 1.0))), 0.0)


def realize_density(spec: DensitySpec, grid: Grid) -> DensityField:
    """把密度描述实现为网格上的密度场

    凸包混合先按自身质量归一，再以 floor_fraction 的比例与均匀分布混合，
    因此最小值不低于 floor_fraction。

    Args:
        spec: 密度描述
        grid: 网格

    Returns:
        单位质量的 DensityField
    """
    floor_fraction = spec.floor_fraction
    if floor_fraction == 0.0 and spec.family != "uniform":
        logger.warning("floor_fraction=0：密度可能在部分区域为零，分数场将无界")

    if spec.family == "uniform" or (spec.family == "bump_mixture" and not spec.components):
        return uniform_density(grid)

    points = grid.cell_centers
    if spec.family == "bump_mixture":
        shape = np.zeros(grid.n_cells)
        for k, component in enumerate(spec.components):
            if len(component.center) != grid.dim:
                raise ValueError(f"第{k}个凸包中心维数 {len(component.center)} 与网格维数 {grid.dim} 不符")
            bump = _bump(points, component)
            if not bump.any():
                raise ValueError(f"第{k}个凸包（中心 {component.center}，半径 {component.width}）未覆盖任何格心，请增大半径或加密网格")
            shape += component.weight * bump
    else:
        if spec.tilt is None or len(spec.tilt) != grid.dim:
            raise ValueError(f"tilted 族需要长度为 {grid.dim} 的 tilt 向量")
        exponent = points @ np.asarray(spec.tilt, dtype=float)
        shape = np.exp(exponent - exponent.max())

    shape_mass = float(shape.sum() * grid.cell_volume)
    if not np.isfinite(shape_mass) or shape_mass <= 0:
        raise ValueError(f"密度形状质量异常: {shape_mass}")
    values = floor_fraction + (1.0 - floor_fraction) * shape / shape_mass
    density = normalize(values.reshape(grid.shape), grid)
    logger.debug(f"密度实现完成: family={spec.family}, floor={density.floor:.4f}, peak={density.peak:.4f}")
    return density


def density_from_function(grid: Grid, fn: Callable[[np.ndarray], np.ndarray]) -> DensityField:
    """在格心采样正函数并归一化"""
    return normalize(CellField.from_function(grid, fn))


def cosine_mode_density(grid: Grid, amplitude: float, frequency: int = 1) -> DensityField:
    """1 + a·cos(kπx)，沿第一个坐标轴变化；|a| < 1"""
    if abs(amplitude) >= 1.0:
        raise ValueError(f"余弦模态振幅必须小于1，收到 {amplitude}")
    return density_from_function(grid, lambda p: 1.0 + amplitude * np.cos(frequency * np.pi * p[:, 0]))


def grad_sup_norm(rho: CellField) -> float:
    """离散梯度的最大模（各轴内部面取最大）"""
    return gradient(rho).sup_norm
