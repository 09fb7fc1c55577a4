"""
单位盒网格与离散微积分算子
格心存储标量，面心存储通量，边界面恒为零（无通量边界）
"""

import csv
from dataclasses import dataclass
from functools import cached_property, lru_cache
from pathlib import Path
from typing import Callable, Sequence, Tuple, Union

import numpy as np
import scipy.linalg
import scipy.sparse as sparse
import scipy.sparse.linalg as spla
from loguru import logger
from scipy.interpolate import RegularGridInterpolator

MIN_CELLS_PER_AXIS = 4
# 稠密特征分解的规模上限，超过后改用 shift-invert 迭代
DENSE_EIGEN_LIMIT = 4096


class SolverError(RuntimeError):
    """数值求解失败（线性求解不收敛、特征求解不收敛、出现NaN）"""


@dataclass(frozen=True)
class Grid:
    """[0,1]^dim 上的均匀格心网格"""

    dim: int
    cells: Tuple[int, ...]

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.cells

    @property
    def n_cells(self) -> int:
        return int(np.prod(self.cells))

    @cached_property
    def widths(self) -> Tuple[float, ...]:
        return tuple(1.0 / n for n in self.cells)

    @cached_property
    def cell_volume(self) -> float:
        return float(np.prod(self.widths))

    @property
    def min_width(self) -> float:
        return min(self.widths)

    def centers(self, axis: int) -> np.ndarray:
        """某一坐标轴上的格心坐标 (i+1/2)·h"""
        n = self.cells[axis]
        return (np.arange(n) + 0.5) / n

    @cached_property
    def cell_centers(self) -> np.ndarray:
        """全部格心坐标，形状 (n_cells, dim)，按格子下标字典序排列"""
        axes = [self.centers(a) for a in range(self.dim)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def face_shape(self, axis: int) -> Tuple[int, ...]:
        shape = list(self.cells)
        shape[axis] -= 1
        return tuple(shape)

    def face_coords(self, axis: int) -> np.ndarray:
        """axis 方向内部面的中点坐标，形状 (n_faces, dim)，顺序与面分量数组一致"""
        axes = []
        for a in range(self.dim):
            if a == axis:
                n = self.cells[a]
                axes.append(np.arange(1, n) / n)
            else:
                axes.append(self.centers(a))
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)


def build_grid(dim: int, cells_per_axis: Sequence[int]) -> Grid:
    """构建单位盒网格

    Args:
        dim: 空间维数，仅支持1或2
        cells_per_axis: 每个坐标轴上的格子数，均需不少于4

    Returns:
        Grid实例
    """
    if dim not in (1, 2):
        raise ValueError(f"dim 必须为1或2，收到 {dim}")
    cells = tuple(int(n) for n in cells_per_axis)
    if len(cells) != dim:
        raise ValueError(f"cells_per_axis 长度 {len(cells)} 与 dim={dim} 不一致")
    if any(n < MIN_CELLS_PER_AXIS for n in cells):
        raise ValueError(f"每个坐标轴至少需要 {MIN_CELLS_PER_AXIS} 个格子，收到 {list(cells)}")
    return Grid(dim=dim, cells=cells)


def _frozen(array: np.ndarray) -> np.ndarray:
    out = np.array(array, dtype=float, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class CellField:
    """格心标量场，每个格子一个值"""

    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        values = _frozen(self.values)
        if values.shape != self.grid.shape:
            raise ValueError(f"格心场形状 {values.shape} 与网格 {self.grid.shape} 不符")
        object.__setattr__(self, "values", values)

    @classmethod
    def from_function(cls, grid: Grid, fn: Callable[[np.ndarray], np.ndarray]) -> "CellField":
        """在格心上采样标量函数 fn(points) -> (n,)"""
        sampled = np.asarray(fn(grid.cell_centers), dtype=float)
        return cls(grid, sampled.reshape(grid.shape))

    def total(self) -> float:
        """体积加权求和（离散积分）"""
        return float(self.values.sum() * self.grid.cell_volume)

    def __add__(self, other: "CellField") -> "CellField":
        return CellField(self.grid, self.values + _cell_values(other))

    def __sub__(self, other: "CellField") -> "CellField":
        return CellField(self.grid, self.values - _cell_values(other))

    def __mul__(self, scalar: float) -> "CellField":
        return CellField(self.grid, self.values * float(scalar))

    __rmul__ = __mul__

    def to_csv(self, path: Union[str, Path]) -> None:
        """写出CSV：表头 x[,y],value，按格子下标字典序逐行"""
        header = ["x", "y"][: self.grid.dim] + ["value"]
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(header)
            for coords, value in zip(self.grid.cell_centers, self.values.ravel()):
                writer.writerow([repr(float(c)) for c in coords] + [repr(float(value))])


def _cell_values(other) -> np.ndarray:
    return other.values if isinstance(other, CellField) else np.asarray(other, dtype=float)


def read_cell_csv(path: Union[str, Path], grid: Grid) -> CellField:
    """读取 CellField.to_csv 写出的文件"""
    with open(path, "r", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        values = [float(row["value"]) for row in reader]
    if len(values) != grid.n_cells:
        raise ValueError(f"CSV行数 {len(values)} 与网格格子数 {grid.n_cells} 不符")
    return CellField(grid, np.asarray(values).reshape(grid.shape))


@dataclass(frozen=True, eq=False)
class FaceField:
    """面心向量场：每个坐标轴一份内部面数组，边界面结构上不存在（恒为零）"""

    grid: Grid
    components: Tuple[np.ndarray, ...]

    def __post_init__(self):
        if len(self.components) != self.grid.dim:
            raise ValueError(f"面场分量数 {len(self.components)} 与维数 {self.grid.dim} 不符")
        comps = []
        for axis, comp in enumerate(self.components):
            comp = _frozen(comp)
            if comp.shape != self.grid.face_shape(axis):
                raise ValueError(f"第{axis}轴面场形状 {comp.shape} 应为 {self.grid.face_shape(axis)}")
            comps.append(comp)
        object.__setattr__(self, "components", tuple(comps))

    @classmethod
    def zeros(cls, grid: Grid) -> "FaceField":
        return cls(grid, tuple(np.zeros(grid.face_shape(a)) for a in range(grid.dim)))

    @classmethod
    def constant(cls, grid: Grid, vector: Sequence[float]) -> "FaceField":
        vector = np.broadcast_to(np.asarray(vector, dtype=float), (grid.dim,))
        return cls(grid, tuple(np.full(grid.face_shape(a), vector[a]) for a in range(grid.dim)))

    @classmethod
    def from_function(cls, grid: Grid, fn: Callable[[np.ndarray], np.ndarray]) -> "FaceField":
        """在面中点上采样向量函数 fn(points) -> (n, dim)，第a分量取自a轴面"""
        comps = []
        for axis in range(grid.dim):
            values = np.asarray(fn(grid.face_coords(axis)), dtype=float).reshape(-1, grid.dim)
            comps.append(values[:, axis].reshape(grid.face_shape(axis)))
        return cls(grid, tuple(comps))

    @cached_property
    def sup_norm(self) -> float:
        peaks = [float(np.abs(c).max()) for c in self.components if c.size]
        return max(peaks) if peaks else 0.0

    def __add__(self, other: "FaceField") -> "FaceField":
        return FaceField(self.grid, tuple(a + b for a, b in zip(self.components, other.components)))

    def __sub__(self, other: "FaceField") -> "FaceField":
        return FaceField(self.grid, tuple(a - b for a, b in zip(self.components, other.components)))

    def __mul__(self, scalar: float) -> "FaceField":
        return FaceField(self.grid, tuple(c * float(scalar) for c in self.components))

    __rmul__ = __mul__

    def __neg__(self) -> "FaceField":
        return self * -1.0


def gradient(f: CellField) -> FaceField:
    """离散梯度：内部面取 (f_right - f_left)/h，边界面为零"""
    grid = f.grid
    return FaceField(grid, tuple(np.diff(f.values, axis=a) / grid.widths[a] for a in range(grid.dim)))


def divergence(F: FaceField) -> CellField:
    """离散散度：各轴 (F_right - F_left)/h 之和，边界面通量按零补齐"""
    grid = F.grid
    out = np.zeros(grid.shape)
    for axis, comp in enumerate(F.components):
        pad = [(0, 0)] * grid.dim
        pad[axis] = (1, 1)
        out += np.diff(np.pad(comp, pad), axis=axis) / grid.widths[axis]
    return CellField(grid, out)


def laplacian(f: CellField) -> CellField:
    """Neumann 三点/五点格式拉普拉斯，等于 divergence(gradient(f))"""
    return divergence(gradient(f))


def cell_inner(f: CellField, g: CellField) -> float:
    return float(np.sum(f.values * g.values) * f.grid.cell_volume)


def face_inner(F: FaceField, G: FaceField) -> float:
    total = sum(float(np.sum(a * b)) for a, b in zip(F.components, G.components))
    return total * F.grid.cell_volume


def _axis_laplacian(n: int, h: float) -> sparse.spmatrix:
    main = np.full(n, -2.0)
    main[0] = main[-1] = -1.0
    off = np.ones(n - 1)
    return sparse.diags([off, main, off], [-1, 0, 1]) / h**2


@lru_cache(maxsize=32)
def laplacian_matrix(grid: Grid) -> sparse.csr_matrix:
    """Neumann 拉普拉斯的稀疏矩阵（按格子下标字典序编号）"""
    if grid.dim == 1:
        return _axis_laplacian(grid.cells[0], grid.widths[0]).tocsr()
    nx, ny = grid.cells
    lx = _axis_laplacian(nx, grid.widths[0])
    ly = _axis_laplacian(ny, grid.widths[1])
    return (sparse.kron(lx, sparse.identity(ny)) + sparse.kron(sparse.identity(nx), ly)).tocsr()


def neumann_spectral_gap(grid: Grid, max_iters: int = 5000) -> float:
    """离散 Neumann 拉普拉斯的最小非零特征值（谱隙）

    小规模网格直接稠密分解；大规模网格用 shift-invert 的 eigsh。

    Args:
        grid: 网格
        max_iters: eigsh 最大迭代次数

    Returns:
        正的谱隙 λ
    """
    neg_lap = -laplacian_matrix(grid)
    if grid.n_cells <= DENSE_EIGEN_LIMIT:
        eigenvalues = scipy.linalg.eigh(neg_lap.toarray(), eigvals_only=True)
    else:
        try:
            eigenvalues = spla.eigsh(neg_lap.tocsc(), k=2, sigma=-1.0, which="LM",
                                     maxiter=max_iters, return_eigenvectors=False)
        except spla.ArpackNoConvergence as exc:
            raise SolverError(f"谱隙特征求解在 {max_iters} 次迭代内未收敛: {exc}") from exc
    eigenvalues = np.sort(np.asarray(eigenvalues))
    gap = float(eigenvalues[1])
    logger.debug(f"网格 {grid.cells} 的Neumann谱隙: {gap:.6f}")
    return gap


def _log_mean(left: np.ndarray, right: np.ndarray) -> np.ndarray:
    """对数平均 (b-a)/(log b - log a)，a=b 时取 a"""
    left = np.asarray(left, dtype=float)
    right = np.asarray(right, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        x = right / left - 1.0
        ratio = np.where(np.abs(x) < 1e-12, 1.0 + 0.5 * x, x / np.log1p(x))
    out = left * ratio
    return np.where((left <= 0) | (right <= 0), 0.0, out)


def face_interpolate(f: CellField, kind: str = "arithmetic") -> FaceField:
    """把格心值插值到内部面

    Args:
        f: 格心场
        kind: arithmetic / harmonic / logarithmic；logarithmic 与指数拟合通量格式一致

    Returns:
        面心场
    """
    grid = f.grid
    comps = []
    for axis in range(grid.dim):
        n = grid.cells[axis]
        left = np.take(f.values, np.arange(n - 1), axis=axis)
        right = np.take(f.values, np.arange(1, n), axis=axis)
        if kind == "arithmetic":
            comps.append(0.5 * (left + right))
        elif kind == "harmonic":
            with np.errstate(divide="ignore", invalid="ignore"):
                harm = np.where(left + right > 0, 2.0 * left * right / (left + right), 0.0)
            comps.append(harm)
        elif kind == "logarithmic":
            comps.append(_log_mean(left, right))
        else:
            raise ValueError(f"未知的面插值方式: {kind}")
    return FaceField(grid, tuple(comps))


def face_to_cell(F: FaceField) -> np.ndarray:
    """面场平均到格心，返回 (n_cells, dim) 的向量数组（边界面按零计）"""
    grid = F.grid
    out = []
    for axis, comp in enumerate(F.components):
        pad = [(0, 0)] * grid.dim
        pad[axis] = (1, 1)
        padded = np.pad(comp, pad)
        n = grid.cells[axis]
        avg = 0.5 * (np.take(padded, np.arange(n), axis=axis) + np.take(padded, np.arange(1, n + 1), axis=axis))
        out.append(avg.ravel())
    return np.stack(out, axis=-1)


def interpolate_faces(F: FaceField, points: np.ndarray) -> np.ndarray:
    """在任意点上插值面场：每个分量在交错网格上做(双)线性插值

    Args:
        F: 面场
        points: (n, dim) 坐标，位于闭单位盒内

    Returns:
        (n, dim) 向量
    """
    grid = F.grid
    points = np.atleast_2d(np.asarray(points, dtype=float)).reshape(-1, grid.dim)
    out = np.empty_like(points)
    for axis, comp in enumerate(F.components):
        coords = []
        query = points.copy()
        for a in range(grid.dim):
            if a == axis:
                coords.append(np.linspace(0.0, 1.0, grid.cells[a] + 1))
            else:
                centers = grid.centers(a)
                coords.append(centers)
                # 其余轴在首末格心之外取常值
                query[:, a] = np.clip(query[:, a], centers[0], centers[-1])
        pad = [(0, 0)] * grid.dim
        pad[axis] = (1, 1)
        interp = RegularGridInterpolator(tuple(coords), np.pad(comp, pad), method="linear",
                                         bounds_error=False, fill_value=None)
        out[:, axis] = interp(query)
    return out
