"""
精确可控性构造
解 Neumann 泊松方程 Δφ = ρ_d − ρ_0，沿线性插值 ρ_t = (1−t)ρ_0 + tρ_d 构造 V_t = (∇ρ_t − ∇φ)/ρ_t
"""

import math
from dataclasses import dataclass
from functools import cached_property
from typing import Optional

import numpy as np
import scipy.sparse.linalg as spla
from loguru import logger

from .density import DensityField, grad_sup_norm
from .fpe_solver import TimeField
from .grid import CellField, FaceField, SolverError, divergence, face_interpolate, gradient, laplacian_matrix

POISSON_TOLERANCE = 1e-10
# 计算上确界范数时的时间采样点数
SUP_NORM_SAMPLES = 101


def solve_neumann_poisson(rhs: CellField, tol: float = POISSON_TOLERANCE, max_iters: Optional[int] = None) -> CellField:
    """共轭梯度求解 Neumann 泊松方程，返回零均值解

    右端先投影到零均值（Neumann 相容条件），被减去的均值写入日志。

    Args:
        rhs: 右端项
        tol: CG 相对残差容差
        max_iters: 最大迭代次数，默认 10·格子数

    Returns:
        零均值的 φ，laplacian(φ) = rhs − mean(rhs)
    """
    grid = rhs.grid
    mean = float(rhs.values.mean())
    if abs(mean) > 1e-12:
        logger.warning(f"泊松右端均值为 {mean:.3e}，已投影到零均值")
    else:
        logger.debug(f"泊松右端相容性投影: 减去均值 {mean:.3e}")
    b = (rhs.values - mean).ravel()
    if not np.any(b):
        return CellField(grid, np.zeros(grid.shape))
    max_iters = max_iters or 10 * grid.n_cells
    neg_laplacian = -laplacian_matrix(grid)
    solution, info = spla.cg(neg_laplacian, -b, rtol=tol, atol=0.0, maxiter=max_iters)
    if info != 0:
        residual = float(np.linalg.norm(neg_laplacian @ solution + b) / np.linalg.norm(b))
        raise SolverError(f"泊松方程CG在 {max_iters} 次迭代内未收敛 (info={info})，相对残差 {residual:.3e}")
    solution -= solution.mean()
    return CellField(grid, solution.reshape(grid.shape))


@dataclass(frozen=True, eq=False)
class MoserField:
    """把 ρ_0 在单位时间内精确送到 ρ_d 的漂移"""

    rho0: DensityField
    rhod: DensityField
    phi: CellField

    @property
    def grid(self):
        return self.rho0.grid

    def interpolant(self, t: float) -> CellField:
        return CellField(self.grid, (1.0 - t) * self.rho0.values + t * self.rhod.values)

    @cached_property
    def _phi_gradient(self) -> FaceField:
        return gradient(self.phi)

    def velocity(self, t: float) -> FaceField:
        """V_t = (∇ρ_t − ∇φ) / 对数平均插值的 ρ_t"""
        rho_t = self.interpolant(t)
        flux = gradient(rho_t) - self._phi_gradient
        denominator = face_interpolate(rho_t, "logarithmic")
        return FaceField(self.grid, tuple(f / d for f, d in zip(flux.components, denominator.components)))

    @cached_property
    def sup_norm(self) -> float:
        """在 [0,1] 的均匀时间采样上取最大"""
        return max(self.velocity(t).sup_norm for t in np.linspace(0.0, 1.0, SUP_NORM_SAMPLES))

    @property
    def lower_bound(self) -> float:
        return min(self.rho0.floor, self.rhod.floor)

    @cached_property
    def empirical_constant(self) -> float:
        """sup_norm·l / max(‖∇ρ_0‖∞, ‖∇ρ_d‖∞)，即界中的 2C；两端都平坦时为 NaN"""
        gradient_scale = max(grad_sup_norm(self.rho0), grad_sup_norm(self.rhod))
        if gradient_scale == 0.0:
            return math.nan
        return self.sup_norm * self.lower_bound / gradient_scale

    def defect_identity(self, t: float) -> CellField:
        """Δρ_t − ∇·(V_t ρ̂_t) − (ρ_d − ρ_0)，等于泊松残差，应逐格接近零"""
        rho_t = self.interpolant(t)
        velocity = self.velocity(t)
        carried = face_interpolate(rho_t, "logarithmic")
        advective = FaceField(self.grid, tuple(v * c for v, c in zip(velocity.components, carried.components)))
        return divergence(gradient(rho_t) - advective) - (self.rhod - self.rho0)

    def as_timefield(self, dt: float) -> TimeField:
        """在 [0,1] 上按左端点采样的分段常值漂移"""
        n_intervals = max(1, math.ceil(1.0 / dt - 1e-9))
        breakpoints = np.linspace(0.0, 1.0, n_intervals + 1)
        return TimeField(breakpoints, tuple(self.velocity(t) for t in breakpoints[:-1]))


def build_moser_field(rho0: DensityField, rhod: DensityField) -> MoserField:
    """构造 Moser 漂移

    Args:
        rho0: 初始密度（下界为正）
        rhod: 目标密度（下界为正）

    Returns:
        MoserField
    """
    if rho0.grid != rhod.grid:
        raise ValueError(f"网格不一致: {rho0.grid.cells} vs {rhod.grid.cells}")
    if rho0.floor <= 0 or rhod.floor <= 0:
        raise ValueError(f"Moser构造要求两端密度下界为正: floor(ρ0)={rho0.floor:.3e}, floor(ρd)={rhod.floor:.3e}")
    phi = solve_neumann_poisson(rhod - rho0)
    field = MoserField(rho0=rho0, rhod=rhod, phi=phi)
    logger.info(f"Moser场构造完成: ‖V‖∞={field.sup_norm:.4f}, l={field.lower_bound:.4f}, 2C≈{field.empirical_constant:.4f}")
    return field
