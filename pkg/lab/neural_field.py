"""
有限宽度神经向量场
宽网络 Σᵢ A_i Σ(W_i x + B_i) 的随机特征拟合，以及把宽网络变成宽度为 d 的
T/N 周期振荡权重调度
"""

import csv
import io
import math
import warnings
from dataclasses import dataclass, replace
from functools import cached_property
from pathlib import Path
from typing import Callable, Dict, List, Literal, Sequence, Tuple, Union

import numpy as np
from loguru import logger
from scipy.linalg import LinAlgWarning
from scipy.special import expit
from sklearn.linear_model import Ridge

from .fpe_solver import TimeField
from .grid import FaceField, Grid

ActivationKind = Literal["relu", "logistic", "tanh"]

_ACTIVATIONS: Dict[str, Tuple[Callable[[np.ndarray], np.ndarray], float]] = {
    "relu": (lambda z: np.maximum(z, 0.0), 1.0),
    "logistic": (expit, 0.25),
    "tanh": (np.tanh, 1.0),
}

DEFAULT_RIDGE_ALPHA = 1e-6
DEFAULT_FEATURE_SCALE = 2.0
RIDGE_RETRIES = 4


@dataclass(frozen=True)
class Activation:
    """逐分量作用的全局 Lipschitz 激活函数"""

    kind: ActivationKind = "logistic"

    def __post_init__(self):
        if self.kind not in _ACTIVATIONS:
            raise ValueError(f"未知的激活函数: {self.kind}")

    @property
    def lipschitz_constant(self) -> float:
        return _ACTIVATIONS[self.kind][1]

    def __call__(self, z: np.ndarray) -> np.ndarray:
        return _ACTIVATIONS[self.kind][0](z)

    def verify_lipschitz(self, n_samples: int = 10000, seed: int = 0) -> bool:
        """随机点对上检验 |σ(x) − σ(y)| ≤ K|x − y|"""
        rng = np.random.default_rng(seed)
        x = rng.uniform(-20.0, 20.0, n_samples)
        y = x + rng.normal(0.0, 1.0, n_samples)
        return bool(np.all(np.abs(self(x) - self(y)) <= self.lipschitz_constant * np.abs(x - y) + 1e-12))


def _operator_norms(matrices: np.ndarray) -> np.ndarray:
    return np.linalg.norm(matrices, ord=2, axis=(1, 2))


def _evaluate_terms(A: np.ndarray, W: np.ndarray, B: np.ndarray, activation: Activation, x: np.ndarray) -> np.ndarray:
    """Σᵢ A_i Σ(W_i x + B_i)，A/W 形状 (m,d,d)，B 形状 (m,d)，x 形状 (n,d)"""
    hidden = activation(np.einsum("mij,nj->nmi", W, x) + B[None, :, :])
    return np.einsum("mij,nmj->ni", A, hidden)


@dataclass(frozen=True, eq=False)
class WideNet:
    """m 项宽网络"""

    A: np.ndarray
    W: np.ndarray
    B: np.ndarray
    activation: Activation
    fit_residual: float = math.nan

    def __post_init__(self):
        A = np.asarray(self.A, dtype=float)
        W = np.asarray(self.W, dtype=float)
        B = np.asarray(self.B, dtype=float)
        if A.ndim != 3 or A.shape != W.shape or A.shape[1] != A.shape[2] or B.shape != A.shape[:2]:
            raise ValueError(f"宽网络权重形状不一致: A{A.shape}, W{W.shape}, B{B.shape}")
        if A.shape[0] == 0:
            raise ValueError("宽网络至少需要一项")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "B", B)

    @property
    def m(self) -> int:
        return self.A.shape[0]

    @property
    def dim(self) -> int:
        return self.A.shape[1]

    @cached_property
    def term_lipschitz(self) -> np.ndarray:
        """每一项的 ‖A_i‖·K·‖W_i‖"""
        return _operator_norms(self.A) * self.activation.lipschitz_constant * _operator_norms(self.W)

    @property
    def lipschitz(self) -> float:
        return float(self.term_lipschitz.sum())

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float)).reshape(-1, self.dim)
        return _evaluate_terms(self.A, self.W, self.B, self.activation, x)


def evaluate_wide(net: WideNet, x: np.ndarray) -> np.ndarray:
    """宽网络在坐标 x 处的取值，x 形状 (n,d) 或 (d,)"""
    return net.evaluate(x)


def _random_features(m: int, dim: int, seed: int, scale: float) -> Tuple[np.ndarray, np.ndarray]:
    """第0项为常数特征 (W=0, B=1)，其余每行是穿过盒内一点 c 的平滑台阶

    斜率取 scale/Δ，Δ = (m−1)^(−1/d) 为台阶中心的平均间距。一维时台阶方向全部为正、
    中心在 m−1 个等宽小区间内分层抽取；二维时方向角与中心均匀抽取。
    """
    W = np.zeros((m, dim, dim))
    B = np.ones((m, dim))
    steps = m - 1
    if steps == 0:
        return W, B
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    spacing = steps ** (-1.0 / dim)
    slope = scale / spacing
    if dim == 1:
        centers = ((np.arange(steps) + rng.uniform(0.3, 0.7, steps)) / steps).reshape(steps, 1, 1)
        directions = np.ones((steps, 1, 1))
    else:
        angles = rng.uniform(0.0, 2.0 * np.pi, size=(steps, dim))
        directions = np.stack([np.cos(angles), np.sin(angles)], axis=-1)
        centers = rng.uniform(0.0, 1.0, size=(steps, dim, dim))
    W[1:] = slope * directions
    B[1:] = -np.einsum("pij,pij->pi", W[1:], centers)
    return W, B


def _ridge_fit(features: np.ndarray, targets: np.ndarray, alpha: float) -> np.ndarray:
    for attempt in range(RIDGE_RETRIES + 1):
        with warnings.catch_warnings():
            warnings.simplefilter("error", LinAlgWarning)
            try:
                model = Ridge(alpha=alpha, fit_intercept=False).fit(features, targets)
                return np.ravel(model.coef_)
            except LinAlgWarning:
                if attempt == RIDGE_RETRIES:
                    raise
                logger.warning(f"岭回归法方程病态 (alpha={alpha:.1e})，改用 alpha={alpha * 100:.1e} 重试")
                alpha *= 100.0
    raise AssertionError("unreachable")


def _hidden(W: np.ndarray, B: np.ndarray, activation: Activation, points: np.ndarray) -> np.ndarray:
    """特征矩阵 (n, m·d)：第 i 项第 j 行"""
    m, dim = B.shape
    return activation(np.einsum("mij,nj->nmi", W, points) + B[None, :, :]).reshape(len(points), m * dim)


def fit_wide(target: Union[FaceField, Callable[[np.ndarray], np.ndarray]], m: int,
             activation: Union[Activation, str] = "logistic", seed: int = 0, grid: Grid = None,
             ridge_alpha: float = DEFAULT_RIDGE_ALPHA, feature_scale: float = DEFAULT_FEATURE_SCALE) -> WideNet:
    """随机特征 + 岭回归拟合宽网络

    第 a 个输出分量只在 a 轴内部面上拟合，与求解器使用该分量的位置一致。

    Args:
        target: 面场，或向量函数 points -> (n,d)（先在面中点上采样）
        m: 项数
        activation: 激活函数
        seed: 随机特征种子
        grid: target 为函数时的采样网格
        ridge_alpha: 每个样本的岭参数，实际参数按样本数放大
        feature_scale: 台阶斜率与中心间距之积

    Returns:
        WideNet，fit_residual 为面上的一致范数残差
    """
    if m < 1:
        raise ValueError(f"项数 m 必须为正，收到 {m}")
    if isinstance(activation, str):
        activation = Activation(activation)
    if not isinstance(target, FaceField):
        if grid is None:
            raise ValueError("target 为函数时必须提供采样网格")
        target = FaceField.from_function(grid, target)
    grid = target.grid
    dim = grid.dim

    W, B = _random_features(m, dim, seed, feature_scale)
    A = np.zeros((m, dim, dim))
    for axis in range(dim):
        points = grid.face_coords(axis)
        if len(points) == 0:
            continue
        coef = _ridge_fit(_hidden(W, B, activation, points), target.components[axis].ravel(),
                          ridge_alpha * len(points))
        A[:, axis, :] = coef.reshape(m, dim)
    net = WideNet(A=A, W=W, B=B, activation=activation)
    residual = (FaceField.from_function(grid, net.evaluate) - target).sup_norm
    logger.debug(f"宽网络拟合: m={m}, activation={activation.kind}, 一致残差={residual:.3e}, "
                 f"max|A|={np.abs(A).max():.3e}")
    return replace(net, fit_residual=residual)


@dataclass(frozen=True, eq=False)
class WeightSchedule:
    """分段常值的宽度 d 权重路径 (A(t), W(t), B(t))"""

    breakpoints: np.ndarray
    A: np.ndarray
    W: np.ndarray
    B: np.ndarray
    activation: Activation
    lipschitz: float

    def __post_init__(self):
        breakpoints = np.asarray(self.breakpoints, dtype=float)
        if breakpoints.ndim != 1 or breakpoints.size < 2 or np.any(np.diff(breakpoints) <= 0):
            raise ValueError("权重调度断点必须严格递增且至少两个")
        if not (len(self.A) == len(self.W) == len(self.B) == breakpoints.size - 1):
            raise ValueError("权重调度的区间数与权重数不一致")
        object.__setattr__(self, "breakpoints", breakpoints)

    @property
    def n_intervals(self) -> int:
        return len(self.A)

    @property
    def horizon(self) -> float:
        return float(self.breakpoints[-1])

    @property
    def dim(self) -> int:
        return self.A.shape[1]

    def interval_index(self, t: float) -> int:
        index = int(np.searchsorted(self.breakpoints, t, side="right")) - 1
        return min(max(index, 0), self.n_intervals - 1)

    def evaluate_interval(self, k: int, x: np.ndarray) -> np.ndarray:
        """区间 k 上的单层场 A_k Σ(W_k x + B_k)"""
        x = np.atleast_2d(np.asarray(x, dtype=float)).reshape(-1, self.dim)
        return _evaluate_terms(self.A[k:k + 1], self.W[k:k + 1], self.B[k:k + 1], self.activation, x)

    def evaluate(self, t: float, x: np.ndarray) -> np.ndarray:
        return self.evaluate_interval(self.interval_index(t), x)

    def to_csv_text(self) -> str:
        """每个区间一行：t_start,t_end,A_flat,W_flat,B（按行展开，分量以空格分隔）"""
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(["t_start", "t_end", "A_flat", "W_flat", "B"])
        for k in range(self.n_intervals):
            writer.writerow([
                repr(float(self.breakpoints[k])),
                repr(float(self.breakpoints[k + 1])),
                " ".join(repr(float(v)) for v in self.A[k].ravel()),
                " ".join(repr(float(v)) for v in self.W[k].ravel()),
                " ".join(repr(float(v)) for v in self.B[k].ravel()),
            ])
        return buffer.getvalue()

    def to_csv(self, path: Union[str, Path]) -> None:
        Path(path).write_text(self.to_csv_text(), encoding="utf-8")


def read_schedule_csv(path: Union[str, Path], activation: Union[Activation, str] = "logistic") -> WeightSchedule:
    """读回 WeightSchedule.to_csv 写出的文件；Lipschitz 常数按区间重新计算"""
    if isinstance(activation, str):
        activation = Activation(activation)
    starts, ends, A, W, B = [], [], [], [], []
    with open(path, "r", encoding="utf-8") as f:
        for row in csv.DictReader(f):
            starts.append(float(row["t_start"]))
            ends.append(float(row["t_end"]))
            bias = np.array([float(v) for v in row["B"].split()])
            dim = bias.size
            A.append(np.array([float(v) for v in row["A_flat"].split()]).reshape(dim, dim))
            W.append(np.array([float(v) for v in row["W_flat"].split()]).reshape(dim, dim))
            B.append(bias)
    if not starts:
        raise ValueError(f"权重调度文件为空: {path}")
    A, W, B = np.array(A), np.array(W), np.array(B)
    lipschitz = float((_operator_norms(A) * activation.lipschitz_constant * _operator_norms(W)).max())
    return WeightSchedule(np.array(starts + [ends[-1]]), A, W, B, activation, lipschitz)


def oscillation_schedule(net: WideNet, N: int, T: float) -> WeightSchedule:
    """T/N 周期振荡调度：每个周期分为 m 段，第 i 段携带 (m·A_i, W_i, B_i)

    Args:
        net: 宽网络
        N: 周期数
        T: 时长

    Returns:
        m·N 个区间的 WeightSchedule；Lipschitz 常数为 m·max_i ‖A_i‖K‖W_i‖，与 N 无关
    """
    if N < 1:
        raise ValueError(f"周期数 N 必须为正，收到 {N}")
    if T <= 0:
        raise ValueError(f"时长 T 必须为正，收到 {T}")
    m = net.m
    breakpoints = np.arange(m * N + 1) * (T / (m * N))
    breakpoints[-1] = T
    terms = np.tile(np.arange(m), N)
    lipschitz = float(m * net.term_lipschitz.max())
    return WeightSchedule(
        breakpoints=breakpoints,
        A=m * net.A[terms],
        W=net.W[terms],
        B=net.B[terms],
        activation=net.activation,
        lipschitz=lipschitz,
    )


def concatenate_schedules(schedules: Sequence[WeightSchedule]) -> WeightSchedule:
    """首尾相接拼接若干调度，后一段的时间整体平移到前一段末尾"""
    if not schedules:
        raise ValueError("没有可拼接的调度")
    kinds = {s.activation.kind for s in schedules}
    if len(kinds) != 1:
        raise ValueError(f"拼接的调度激活函数不一致: {sorted(kinds)}")
    offset = 0.0
    breakpoints = [np.zeros(1)]
    for schedule in schedules:
        breakpoints.append(schedule.breakpoints[1:] + offset)
        offset += schedule.horizon
    return WeightSchedule(
        breakpoints=np.concatenate(breakpoints),
        A=np.concatenate([s.A for s in schedules]),
        W=np.concatenate([s.W for s in schedules]),
        B=np.concatenate([s.B for s in schedules]),
        activation=schedules[0].activation,
        lipschitz=max(s.lipschitz for s in schedules),
    )


def piecewise_oscillation_schedule(nets: Sequence[WideNet], slab_breakpoints: Sequence[float], N: int) -> WeightSchedule:
    """时变目标：每个时间片一个宽网络，在片内做 N 周期振荡"""
    slab_breakpoints = np.asarray(slab_breakpoints, dtype=float)
    if len(nets) != slab_breakpoints.size - 1 or slab_breakpoints[0] != 0.0:
        raise ValueError("时间片断点须从0开始，且个数比网络数多一")
    lengths = np.diff(slab_breakpoints)
    return concatenate_schedules([oscillation_schedule(net, N, float(L)) for net, L in zip(nets, lengths)])


def _interval_key(schedule: WeightSchedule, k: int) -> bytes:
    return schedule.A[k].tobytes() + schedule.W[k].tobytes() + schedule.B[k].tobytes()


def schedule_as_timefield(schedule: WeightSchedule, grid: Grid) -> TimeField:
    """面中点采样的分段常值漂移；相同权重的区间共用同一个面场"""
    sampled: Dict[bytes, FaceField] = {}
    fields = []
    for k in range(schedule.n_intervals):
        key = _interval_key(schedule, k)
        if key not in sampled:
            sampled[key] = FaceField.from_function(grid, lambda p, k=k: schedule.evaluate_interval(k, p))
        fields.append(sampled[key])
    return TimeField(schedule.breakpoints, tuple(fields), lipschitz=schedule.lipschitz)


def wide_timefield(net: WideNet, grid: Grid, T: float) -> TimeField:
    """宽网络作为时间常值漂移"""
    return TimeField.constant(FaceField.from_function(grid, net.evaluate), T, lipschitz=net.lipschitz)


def piecewise_wide_timefield(nets: Sequence[WideNet], slab_breakpoints: Sequence[float], grid: Grid) -> TimeField:
    """每个时间片取对应宽网络的时间常值漂移"""
    fields = tuple(FaceField.from_function(grid, net.evaluate) for net in nets)
    return TimeField(np.asarray(slab_breakpoints, dtype=float), fields, lipschitz=max(n.lipschitz for n in nets))


def weak_pairing_defect(schedule: WeightSchedule, net: Union[WideNet, List[WideNet]],
                        test_fn: Callable[[float, np.ndarray], np.ndarray], grid: Grid,
                        n_gauss: int = 4, slab_breakpoints: Sequence[float] = None) -> float:
    """|∫∫ Q^N·φ − ∫∫ wide·φ|，时间上逐区间 Gauss-Legendre，空间上格心求积

    Args:
        schedule: 振荡调度
        net: 宽网络，或与 slab_breakpoints 对应的宽网络列表
        test_fn: 试验函数 φ(t, points) -> (n,d)
        grid: 空间求积网格
        n_gauss: 每个区间的高斯点数
        slab_breakpoints: net 为列表时的时间片断点

    Returns:
        配对差的绝对值
    """
    nets = [net] if isinstance(net, WideNet) else list(net)
    if slab_breakpoints is None:
        slab_breakpoints = [0.0, schedule.horizon]
    slab_breakpoints = np.asarray(slab_breakpoints, dtype=float)
    points = grid.cell_centers
    wide_values = [n.evaluate(points) for n in nets]
    nodes, weights = np.polynomial.legendre.leggauss(n_gauss)
    total = 0.0
    for k in range(schedule.n_intervals):
        a, b = schedule.breakpoints[k], schedule.breakpoints[k + 1]
        slab = min(int(np.searchsorted(slab_breakpoints, 0.5 * (a + b), side="right")) - 1, len(nets) - 1)
        difference = schedule.evaluate_interval(k, points) - wide_values[slab]
        for node, weight in zip(nodes, weights):
            t = 0.5 * (a + b) + 0.5 * (b - a) * node
            phi = np.asarray(test_fn(t, points), dtype=float).reshape(difference.shape)
            total += 0.5 * (b - a) * weight * float(np.sum(difference * phi))
    return abs(total * grid.cell_volume)
