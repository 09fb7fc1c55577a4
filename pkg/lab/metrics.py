"""
距离与范数
L²、加权L²、离散H¹、Wasserstein-1、KL散度，以及三者之间的不等式链报告
"""

from functools import lru_cache
from typing import Dict, Sequence

import numpy as np
from loguru import logger
from pydantic import BaseModel, Field
from scipy.special import rel_entr
from scipy.stats import wasserstein_distance

from .density import DensityField, normalize
from .grid import CellField, FaceField, face_interpolate, gradient

MASS_TOLERANCE = 1e-8
SLICED_DIRECTIONS = 16
SLICED_SEED = 0


def _check_grid(p: CellField, q: CellField) -> None:
    if p.grid != q.grid:
        raise ValueError(f"网格不一致: {p.grid.cells} vs {q.grid.cells}")


def l2_norm(p: CellField) -> float:
    return float(np.sqrt(np.sum(p.values**2) * p.grid.cell_volume))


def l2_distance(p: CellField, q: CellField) -> float:
    """体积加权的欧氏距离"""
    _check_grid(p, q)
    return float(np.sqrt(np.sum((p.values - q.values) ** 2) * p.grid.cell_volume))


def weighted_l2_sq(F: FaceField, g: CellField, kind: str = "arithmetic") -> float:
    """面场在权重 g 下的平方范数 Σ|F|²·g_face·体积

    Args:
        F: 面场
        g: 非负权重（通常为密度）
        kind: g 插值到面的方式

    Returns:
        加权平方范数
    """
    if F.grid != g.grid:
        raise ValueError(f"网格不一致: {F.grid.cells} vs {g.grid.cells}")
    if float(g.values.min()) < -1e-12:
        raise ValueError(f"权重存在负值: min={float(g.values.min()):.3e}")
    weights = face_interpolate(g, kind)
    total = sum(float(np.sum(c**2 * w)) for c, w in zip(F.components, weights.components))
    return total * F.grid.cell_volume


def h1_seminorm(p: CellField) -> float:
    """梯度的面L²范数"""
    grad = gradient(p)
    return float(np.sqrt(sum(float(np.sum(c**2)) for c in grad.components) * p.grid.cell_volume))


def h1_norm(p: CellField) -> float:
    return float(np.hypot(l2_norm(p), h1_seminorm(p)))


def _check_mass(p: DensityField, q: DensityField) -> None:
    _check_grid(p, q)
    gap = abs(p.total() - q.total())
    if gap > MASS_TOLERANCE:
        raise ValueError(f"两个密度质量相差 {gap:.3e}，超过 {MASS_TOLERANCE}")


def _cdf_gap_integral(p: np.ndarray, q: np.ndarray, h: float) -> float:
    """分段线性CDF之差的绝对值积分，逐格精确（含变号情形）"""
    gap = np.concatenate([[0.0], np.cumsum((p - q) * h)])
    a, b = gap[:-1], gap[1:]
    abs_a, abs_b = np.abs(a), np.abs(b)
    same_sign = a * b >= 0
    with np.errstate(divide="ignore", invalid="ignore"):
        crossing = np.where(abs_a + abs_b > 0, (a**2 + b**2) / (2.0 * (abs_a + abs_b)), 0.0)
    per_cell = np.where(same_sign, 0.5 * (abs_a + abs_b), crossing)
    return float(np.sum(per_cell) * h)


@lru_cache(maxsize=8)
def _sliced_directions(n_directions: int, seed: int) -> np.ndarray:
    angles = np.random.default_rng(seed).uniform(0.0, np.pi, size=n_directions)
    logger.warning(f"二维W1采用 {n_directions} 个固定方向的切片近似 (seed={seed})")
    return np.stack([np.cos(angles), np.sin(angles)], axis=-1)


def w1_is_approximate(p: CellField) -> bool:
    return p.grid.dim == 2


def w1_distance(p: DensityField, q: DensityField,
                n_directions: int = SLICED_DIRECTIONS, seed: int = SLICED_SEED) -> float:
    """Wasserstein-1 距离

    一维为分段线性CDF之差的精确积分；二维为固定方向集合上的切片平均（近似值）。

    Args:
        p, q: 同一网格上的单位质量密度
        n_directions: 二维切片方向数
        seed: 二维切片方向的随机种子

    Returns:
        W1 距离
    """
    _check_mass(p, q)
    if p.grid.dim == 1:
        return _cdf_gap_integral(p.values, q.values, p.grid.widths[0])
    centers = p.grid.cell_centers
    p_weights = np.clip(p.values.ravel(), 0.0, None)
    q_weights = np.clip(q.values.ravel(), 0.0, None)
    distances = []
    for direction in _sliced_directions(n_directions, seed):
        projected = centers @ direction
        distances.append(wasserstein_distance(projected, projected, u_weights=p_weights, v_weights=q_weights))
    return float(np.mean(distances))


def kl_divergence(p: DensityField, q: DensityField) -> float:
    """KL(p‖q) = Σ p·log(p/q)·体积，0·log0 = 0

    Raises:
        ValueError: p>0 而 q<=0 的格子（支撑不包含）
    """
    _check_grid(p, q)
    p_values = np.clip(p.values, 0.0, None)
    violation = (p_values > 0) & (q.values <= 0)
    if violation.any():
        cell = tuple(int(i) for i in np.argwhere(violation)[0])
        raise ValueError(f"KL散度支撑不匹配: 格子 {cell} 上 p={float(p.values[cell]):.3e} 而 q={float(q.values[cell]):.3e}")
    return float(np.sum(rel_entr(p_values, q.values)) * p.grid.cell_volume)


class ChainReport(BaseModel):
    """W1 ≤ C'·KL ≤ C·‖·‖² 不等式链的一行报告"""

    w1: float = Field(..., description="Wasserstein-1 距离")
    kl: float = Field(..., description="KL散度")
    l2_sq: float = Field(..., description="L²距离平方")
    ratio_w1_kl: float = Field(..., description="w1/kl，分母为零时为NaN")
    ratio_kl_l2sq: float = Field(..., description="kl/l2_sq，分母为零时为NaN")
    w1_approximate: bool = Field(default=False, description="W1是否为二维切片近似")

    def as_row(self) -> Dict[str, float]:
        return {
            "w1": self.w1,
            "kl": self.kl,
            "l2_sq": self.l2_sq,
            "ratio_w1_kl": self.ratio_w1_kl,
            "ratio_kl_l2sq": self.ratio_kl_l2sq,
        }


def _ratio(numerator: float, denominator: float) -> float:
    return numerator / denominator if denominator > 0 else float("nan")


def inequality_chain_report(p: DensityField, q: DensityField) -> ChainReport:
    """计算链上三个量及相邻比值；比值只报告，不与未知常数比较"""
    w1 = w1_distance(p, q)
    kl = kl_divergence(p, q)
    l2_sq = l2_distance(p, q) ** 2
    return ChainReport(
        w1=w1,
        kl=kl,
        l2_sq=l2_sq,
        ratio_w1_kl=_ratio(w1, kl),
        ratio_kl_l2sq=_ratio(kl, l2_sq),
        w1_approximate=w1_is_approximate(p),
    )


def perturbation_orders(base: DensityField, shape: CellField, eps_list: Sequence[float]) -> Dict[str, float]:
    """沿扰动阶梯 base + ε·shape 拟合 w1 / kl / l2_sq 的对数斜率

    Args:
        base: 基准密度
        shape: 零均值扰动形状
        eps_list: 扰动幅度（正数）

    Returns:
        {"w1": 斜率, "kl": 斜率, "l2_sq": 斜率}
    """
    eps = np.asarray(eps_list, dtype=float)
    if eps.size < 2 or np.any(eps <= 0):
        raise ValueError("扰动阶梯至少需要两个正幅度")
    rows = []
    for e in eps:
        perturbed = normalize(base.values + e * shape.values, base.grid)
        rows.append(inequality_chain_report(perturbed, base))
    log_eps = np.log(eps)
    orders = {}
    for key in ("w1", "kl", "l2_sq"):
        values = np.array([getattr(r, key) for r in rows])
        orders[key] = float(np.polyfit(log_eps, np.log(values), 1)[0])
    logger.debug(f"扰动阶梯拟合阶数: {orders}")
    return orders
