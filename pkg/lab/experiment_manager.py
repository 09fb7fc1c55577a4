"""
实验管理器
把配置展开为若干子运行，在线程池上并发执行，汇总指标行并写出报告
"""

import asyncio
import math
import time
from concurrent.futures import ThreadPoolExecutor
from functools import partial
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from loguru import logger

from .density import DensityField, DensitySpec, realize_density, uniform_density
from .fpe_solver import SolverConfig, TimeField, l2_deviation, solve, solve_continuity
from .grid import FaceField, Grid, build_grid, neumann_spectral_gap
from .harness.config_manager import ConfigManager
from .harness.data_models import ExperimentConfig, ExperimentReport, PerturbationConfig
from .harness.report_store import ReportStore
from .metrics import l2_distance, w1_distance
from .moser_control import build_moser_field
from .neural_field import (
    fit_wide,
    oscillation_schedule,
    piecewise_oscillation_schedule,
    piecewise_wide_timefield,
    schedule_as_timefield,
    weak_pairing_defect,
)
from .particle_sim import histogram_density, run_particles, sample_from_density
from .report_templates import ReportTemplates
from .score_pipeline import (
    FLOW_DRIFT_FACTOR,
    REVERSE_DRIFT_FACTOR,
    ladder_sup_norm_bound,
    loss_error_bound,
    perturbed_score_ladder,
    reverse_defect,
    reverse_solve,
    run_forward,
    score_field,
    score_matching_loss,
    t_decay_entry,
)
from .verdicts import evaluate_verdicts

Rows = List[Dict[str, float]]
Extras = List[Tuple[str, Rows]]

# 连续性方程CFL步长的安全系数
CFL_SAFETY = 0.9
# Poisson 恒等式残差的时间采样点数
IDENTITY_SAMPLES = 11


class ExperimentError(RuntimeError):
    """子运行失败，携带失败子运行的标识"""

    def __init__(self, run_id: str, message: str):
        self.run_id = run_id
        super().__init__(f"子运行 {run_id} 失败: {message}")


def _density(spec: Optional[DensitySpec], grid: Grid) -> DensityField:
    return uniform_density(grid) if spec is None else realize_density(spec, grid)


def perturbation_shape(grid: Grid, perturbation: PerturbationConfig) -> FaceField:
    """sin(2πk·x₁) 沿第一个坐标轴，其余分量为零；幅度单独给出"""
    def fn(points: np.ndarray) -> np.ndarray:
        values = np.zeros_like(points)
        values[:, 0] = np.sin(2.0 * np.pi * perturbation.frequency * points[:, 0])
        return values
    return FaceField.from_function(grid, fn)


def _weak_test_functions(T: float) -> List[Callable[[float, np.ndarray], np.ndarray]]:
    """三个随时间变化且不以 T/N 为周期的试验函数；周期试验函数在整周期上的配对差恒为零"""
    def broadcast(values: np.ndarray, points: np.ndarray) -> np.ndarray:
        return np.repeat(values[:, None], points.shape[1], axis=1)

    return [
        lambda t, p: broadcast(np.full(len(p), t / T), p),
        lambda t, p: broadcast(np.cos(np.pi * t / T) * np.cos(np.pi * p[:, 0]), p),
        lambda t, p: broadcast(np.exp(-t / T) * p[:, 0] ** 2, p),
    ]


def _budget(grid: Grid, solver: SolverConfig, scale: float) -> float:
    """5·(dx² + dt)·scale"""
    return 5.0 * (grid.min_width ** 2 + solver.dt) * scale


class ExperimentManager:
    """实验管理器：子运行调度与各实验流程"""

    def __init__(self, workers: int = 1):
        """初始化实验管理器

        Args:
            workers: 并发子运行的线程数
        """
        if workers < 1:
            raise ValueError(f"workers 必须为正整数，收到 {workers}")
        self.workers = workers
        self._executor: Optional[ThreadPoolExecutor] = None
        logger.info(f"ExperimentManager初始化完成, 工作线程数: {workers}")

    async def _run_sub(self, run_id: str, fn: Callable[..., Any], *args) -> Dict[str, Any]:
        """在线程池中执行一个子运行

        Returns:
            结果字典，格式: {"success": bool, "data": 子运行返回值, "error": 错误信息, "run_id": 标识}
        """
        loop = asyncio.get_running_loop()
        start = time.perf_counter()
        try:
            data = await loop.run_in_executor(self._executor, partial(fn, *args))
            logger.debug(f"子运行 {run_id} 完成，用时 {time.perf_counter() - start:.2f}s")
            return {"success": True, "data": data, "error": "", "run_id": run_id}
        except Exception as e:
            logger.error(f"子运行 {run_id} 失败: {type(e).__name__}: {e}")
            return {"success": False, "data": None, "error": f"{type(e).__name__}: {e}", "run_id": run_id}

    async def _gather(self, jobs: Sequence[Tuple[str, Callable[..., Any], tuple]]) -> List[Any]:
        """并发执行全部子运行，按提交顺序返回；全部结束后若有失败则抛出第一个失败"""
        results = await asyncio.gather(*(self._run_sub(run_id, fn, *args) for run_id, fn, args in jobs))
        failures = [r for r in results if not r["success"]]
        if failures:
            first = failures[0]
            if len(failures) > 1:
                logger.error(f"共 {len(failures)} 个子运行失败: {[r['run_id'] for r in failures]}")
            raise ExperimentError(first["run_id"], first["error"])
        return [r["data"] for r in results]

    # ------------------------------------------------------------------
    # SCORE-SWEEP
    # ------------------------------------------------------------------

    async def _score_sweep(self, cfg: ExperimentConfig, grid: Grid) -> Tuple[Rows, Extras]:
        rho_d = _density(cfg.target, grid)
        solver = cfg.solver
        record = run_forward(rho_d, cfg.T, solver)
        exact = score_field(record).as_timefield
        shape = perturbation_shape(grid, cfg.perturbation)
        reference = reverse_solve(exact.scaled(REVERSE_DRIFT_FACTOR), record.terminal, cfg.T, solver)
        rho_max = float(max(rho.peak for rho in reference.densities))
        round_trip = {
            "reference_defect": reverse_defect(record, reference),
            "round_trip_budget": _budget(grid, solver, cfg.slacks.round_trip_scale),
            "truncation_error": record.truncation_error,
            "truncation_budget": record.truncation_budget,
        }
        logger.info(f"精确分数往返误差 {round_trip['reference_defect']:.4e}，"
                    f"截断缺口 ‖ρ^f_ε − ρ_d‖ = {round_trip['truncation_error']:.4e}")

        ladder = perturbed_score_ladder(record, cfg.amplitudes, shape)
        supnorm_bound = REVERSE_DRIFT_FACTOR * ladder_sup_norm_bound(record, cfg.amplitudes, shape)

        def rung(amplitude: float, candidate: TimeField) -> Dict[str, float]:
            loss = score_matching_loss(candidate, record)
            drift = candidate.scaled(REVERSE_DRIFT_FACTOR)
            trajectory = reverse_solve(drift, record.terminal, cfg.T, solver)
            error = l2_deviation(trajectory, reference)
            # 反向漂移是分数的2倍，漂移差的加权平方为 4L；指数中用候选分数本身的上确界
            bound = loss_error_bound(REVERSE_DRIFT_FACTOR**2 * loss, rho_d.floor, candidate.sup_norm, cfg.T, rho_max)
            return {
                "amplitude": float(amplitude),
                "loss": loss,
                "sup_t_l2_error": error,
                "supnorm_bound": supnorm_bound,
                "supnorm": drift.sup_norm,
                "error_sq": error**2,
                "bound_rhs": bound,
                "error_over_bound": error**2 / bound if bound > 0 else (0.0 if error == 0 else math.inf),
                **round_trip,
            }

        rows = await self._gather([
            (f"score-sweep/a={a:g}", rung, (a, candidate)) for a, candidate in zip(cfg.amplitudes, ladder)
        ])
        path = [
            {"t": float(t), "l2_to_forward": l2_distance(rho, record.forward_density(cfg.T - t))}
            for t, rho in zip(reference.times, reference.densities)
        ]
        return rows, [("reference_defect.csv", path)]

    # ------------------------------------------------------------------
    # T-DECAY
    # ------------------------------------------------------------------

    async def _t_decay(self, cfg: ExperimentConfig, grid: Grid) -> Tuple[Rows, Extras]:
        rho_d = _density(cfg.target, grid)
        gap = neumann_spectral_gap(grid)
        logger.info(f"离散 Neumann 谱隙 λ = {gap:.6f}")
        entries = await self._gather([
            (f"t-decay/T={T:g}", t_decay_entry, (rho_d, T, cfg.solver)) for T in cfg.horizons
        ])
        rows = [dict(entry, spectral_gap=gap) for entry in entries]
        return rows, []

    # ------------------------------------------------------------------
    # MOSER-EXACT
    # ------------------------------------------------------------------

    @staticmethod
    def _moser_pair(rho0: DensityField, rhod: DensityField, solver: SolverConfig,
                    budget: float) -> Tuple[Dict[str, float], Rows]:
        field = build_moser_field(rho0, rhod)
        trajectory = solve(rho0, field.as_timefield(solver.dt), 1.0, solver)
        path = [
            {
                "t": float(t),
                "interp_l2_defect": l2_distance(rho, field.interpolant(t)),
                "mass": rho.mass,
                "floor": rho.floor,
            }
            for t, rho in zip(trajectory.times, trajectory.densities)
        ]
        backward = build_moser_field(rhod, rho0)
        back_trajectory = solve(rhod, backward.as_timefield(solver.dt), 1.0, solver)
        identity = max(
            float(np.abs(field.defect_identity(t).values).max())
            for t in np.linspace(0.0, 1.0, IDENTITY_SAMPLES)
        )
        row = {
            "transfer_defect": l2_distance(trajectory.terminal, rhod),
            "max_path_defect": max(p["interp_l2_defect"] for p in path),
            "reverse_transfer_defect": l2_distance(back_trajectory.terminal, rho0),
            "max_identity_defect": identity,
            "sup_norm": field.sup_norm,
            "lower_bound": field.lower_bound,
            "empirical_2c": field.empirical_constant,
            "budget": budget,
        }
        return row, path

    async def _moser_exact(self, cfg: ExperimentConfig, grid: Grid) -> Tuple[Rows, Extras]:
        budget = _budget(grid, cfg.solver, cfg.slacks.budget_scale)
        jobs = []
        for k, pair in enumerate(cfg.density_pairs()):
            rho0, rhod = _density(pair.source, grid), _density(pair.target, grid)
            jobs.append((f"moser-exact/pair={k}", self._moser_pair, (rho0, rhod, cfg.solver, budget)))
        results = await self._gather(jobs)
        rows = [dict(pair=float(k), **row) for k, (row, _) in enumerate(results)]
        extras = [(f"moser_path_{k}.csv", path) for k, (_, path) in enumerate(results)]
        return rows, extras

    # ------------------------------------------------------------------
    # OSC-CONVERGE
    # ------------------------------------------------------------------

    async def _osc_converge(self, cfg: ExperimentConfig, grid: Grid) -> Tuple[Rows, Extras]:
        rho0, rhod = _density(cfg.source, grid), _density(cfg.target, grid)
        field = build_moser_field(rho0, rhod)
        net = fit_wide(field.velocity(0.5), cfg.m, cfg.activation, seed=cfg.seed)
        logger.info(f"宽网络拟合残差 {net.fit_residual:.3e}，Lipschitz 常数 {net.lipschitz:.4f}")
        wide_face = FaceField.from_function(grid, net.evaluate)
        tests = _weak_test_functions(cfg.T)

        def run(N: int) -> Dict[str, float]:
            schedule = oscillation_schedule(net, N, cfg.T)
            oscillating = solve(rho0, schedule_as_timefield(schedule, grid), cfg.T, cfg.solver)
            # 参考解在同一组断点上使用宽网络，保证两条轨迹的采样时刻一致
            wide = TimeField(schedule.breakpoints, (wide_face,) * schedule.n_intervals, lipschitz=net.lipschitz)
            reference = solve(rho0, wide, cfg.T, cfg.solver)
            row = {"N": float(N), "traj_error": l2_deviation(oscillating, reference)}
            for j, test in enumerate(tests, start=1):
                row[f"weak_defect_{j}"] = weak_pairing_defect(schedule, net, test, grid)
            row["lipschitz"] = schedule.lipschitz
            return row

        rows = await self._gather([(f"osc-converge/N={N}", run, (N,)) for N in cfg.N_list])
        return rows, [("schedule.csv", oscillation_schedule(net, cfg.N_list[-1], cfg.T))]

    # ------------------------------------------------------------------
    # ODE-VS-SDE
    # ------------------------------------------------------------------

    @staticmethod
    def _ode_vs_sde_case(rho_d: DensityField, cfg: ExperimentConfig, shape: FaceField,
                         seed: int) -> Tuple[Dict[str, float], Rows]:
        solver = cfg.solver
        grid = rho_d.grid
        record = run_forward(rho_d, cfg.T, solver)
        horizon = record.reverse_horizon
        exact = score_field(record).as_timefield
        delta = cfg.perturbation.amplitude
        perturbed = exact.shifted(shape, delta)

        fp_reference = reverse_solve(exact.scaled(REVERSE_DRIFT_FACTOR), record.terminal, cfg.T, solver)
        fp_perturbed = reverse_solve(perturbed.scaled(REVERSE_DRIFT_FACTOR), record.terminal, cfg.T, solver)

        flow = exact.scaled(FLOW_DRIFT_FACTOR)
        flow_perturbed = perturbed.scaled(FLOW_DRIFT_FACTOR)
        sup = max(flow.sup_norm, flow_perturbed.sup_norm)
        continuity_dt = min(solver.dt, CFL_SAFETY * grid.min_width / sup) if sup > 0 else solver.dt
        continuity_cfg = solver.model_copy(update={"dt": continuity_dt})
        continuity_reference = solve_continuity(record.terminal, flow, horizon, continuity_cfg)
        continuity_perturbed = solve_continuity(record.terminal, flow_perturbed, horizon, continuity_cfg)

        continuity_deviation = l2_deviation(continuity_perturbed, continuity_reference)
        fp_deviation = l2_deviation(fp_perturbed, fp_reference)

        ensemble = sample_from_density(record.terminal, cfg.n_particles, seed)
        sde = run_particles(ensemble, exact, horizon, solver.dt,
                            diffusion_scale=1.0, reverse_drift_factor=REVERSE_DRIFT_FACTOR)
        ode = run_particles(ensemble, exact, horizon, continuity_dt,
                            diffusion_scale=0.0, reverse_drift_factor=FLOW_DRIFT_FACTOR)
        sde_density = histogram_density(sde, grid)
        ode_density = histogram_density(ode, grid)
        w1_budget = cfg.slacks.particle_sigma / math.sqrt(cfg.n_particles) + 2.0 * grid.min_width

        row = {
            "continuity_deviation": continuity_deviation,
            "fp_deviation": fp_deviation,
            "deviation_ratio": continuity_deviation / fp_deviation if fp_deviation > 0 else math.inf,
            "w1_sde": w1_distance(sde_density, fp_reference.terminal),
            "w1_ode": w1_distance(ode_density, continuity_reference.terminal),
            "w1_budget": w1_budget,
            "n_particles": float(cfg.n_particles),
        }
        densities = []
        for k, center in enumerate(grid.cell_centers):
            cell = {"cell": float(k), "x": float(center[0])}
            if grid.dim == 2:
                cell["y"] = float(center[1])
            cell.update({
                "sde": float(sde_density.values.flat[k]),
                "ode": float(ode_density.values.flat[k]),
                "pde_fp": float(fp_reference.terminal.values.flat[k]),
                "pde_flow": float(continuity_reference.terminal.values.flat[k]),
            })
            densities.append(cell)
        return row, densities

    async def _ode_vs_sde(self, cfg: ExperimentConfig, grid: Grid) -> Tuple[Rows, Extras]:
        shape = perturbation_shape(grid, cfg.perturbation)
        jobs = []
        for k, pair in enumerate(cfg.density_pairs()):
            rho_d = _density(pair.target, grid)
            jobs.append((f"ode-vs-sde/case={k}", self._ode_vs_sde_case, (rho_d, cfg, shape, cfg.seed + k)))
        results = await self._gather(jobs)
        rows = [dict(case=float(k), **row) for k, (row, _) in enumerate(results)]
        extras = [(f"particle_density_{k}.csv", densities) for k, (_, densities) in enumerate(results)]
        return rows, extras

    # ------------------------------------------------------------------
    # NEURAL-TRANSFER
    # ------------------------------------------------------------------

    async def _neural_transfer(self, cfg: ExperimentConfig, grid: Grid) -> Tuple[Rows, Extras]:
        rho0, rhod = _density(cfg.source, grid), _density(cfg.target, grid)
        field = build_moser_field(rho0, rhod)
        slab_breakpoints = np.linspace(0.0, 1.0, cfg.slabs + 1)
        midpoints = 0.5 * (slab_breakpoints[:-1] + slab_breakpoints[1:])
        nets = await self._gather([
            (f"neural-transfer/fit={j}", fit_wide, (field.velocity(float(t)), cfg.m, cfg.activation, cfg.seed + j))
            for j, t in enumerate(midpoints)
        ])
        reference = solve(rho0, piecewise_wide_timefield(nets, slab_breakpoints, grid), 1.0, cfg.solver)
        reference_error = l2_distance(reference.terminal, rhod)
        initial_distance = l2_distance(rho0, rhod)
        budget = _budget(grid, cfg.solver, cfg.slacks.budget_scale)
        logger.info(f"分片宽网络终态误差 {reference_error:.4e}，初始距离 {initial_distance:.4e}")

        def run(N: int) -> Dict[str, float]:
            schedule = piecewise_oscillation_schedule(nets, slab_breakpoints, N)
            trajectory = solve(rho0, schedule_as_timefield(schedule, grid), 1.0, cfg.solver)
            return {
                "N": float(N),
                "terminal_error": l2_distance(trajectory.terminal, rhod),
                "reference_error": reference_error,
                "oscillation_gap": l2_distance(trajectory.terminal, reference.terminal),
                "initial_distance": initial_distance,
                "budget": budget,
                "lipschitz": schedule.lipschitz,
            }

        rows = await self._gather([(f"neural-transfer/N={N}", run, (N,)) for N in cfg.N_list])
        return rows, []

    # ------------------------------------------------------------------

    PIPELINES = {
        "SCORE-SWEEP": "_score_sweep",
        "T-DECAY": "_t_decay",
        "MOSER-EXACT": "_moser_exact",
        "OSC-CONVERGE": "_osc_converge",
        "ODE-VS-SDE": "_ode_vs_sde",
        "NEURAL-TRANSFER": "_neural_transfer",
    }

    async def run(self, cfg: ExperimentConfig, language: str = "zh") -> Tuple[ExperimentReport, List[Tuple[str, Any]]]:
        """执行实验并组装报告（不写文件）

        Args:
            cfg: 实验配置
            language: 报告中结论描述的语言

        Returns:
            (报告, 附加输出列表)
        """
        grid = build_grid(cfg.grid.dim, cfg.grid.cells)
        logger.info(f"开始实验 {cfg.experiment}: 网格 {grid.cells}, dt={cfg.solver.dt}, seed={cfg.seed}")
        start = time.perf_counter()
        pipeline = getattr(self, self.PIPELINES[cfg.experiment])
        with ThreadPoolExecutor(max_workers=self.workers, thread_name_prefix="lab") as executor:
            self._executor = executor
            try:
                rows, extras = await pipeline(cfg, grid)
            except ExperimentError:
                raise
            except Exception as e:
                # 密度构造、Moser 场等在子运行之外的步骤
                run_id = f"{cfg.experiment.lower()}/setup"
                logger.error(f"实验 {cfg.experiment} 准备阶段失败: {type(e).__name__}: {e}")
                raise ExperimentError(run_id, f"{type(e).__name__}: {e}") from e
            finally:
                self._executor = None
        verdicts = evaluate_verdicts(cfg, rows)
        report = ExperimentReport(
            experiment=cfg.experiment,
            claim=ReportTemplates.claim(cfg.experiment, language),
            config=cfg.model_dump(mode="json"),
            rows=rows,
            verdicts=verdicts,
            wall_time=time.perf_counter() - start,
        )
        passed = sum(v.passed for v in verdicts)
        logger.info(f"实验 {cfg.experiment} 完成: {passed}/{len(verdicts)} 项判定通过，用时 {report.wall_time:.1f}s")
        return report, extras


def run_experiment(cfg: ExperimentConfig, workers: int = 1, output_dir: Optional[Union[str, Path]] = None,
                   language: str = "zh") -> ExperimentReport:
    """运行实验并写出全部输出文件

    Args:
        cfg: 实验配置
        workers: 并发线程数
        output_dir: 输出目录；为 None 时只返回报告
        language: report.md 的语言

    Returns:
        ExperimentReport

    Raises:
        ExperimentError: 某个子运行失败
    """
    manager = ExperimentManager(workers=workers)
    report, extras = asyncio.run(manager.run(cfg, language=language))
    if output_dir is None:
        return report

    store = ReportStore(output_dir)
    store.write_extras(extras)
    ConfigManager.write_effective_config(cfg, output_dir)
    store.write_report(report, ReportTemplates.build_markdown(report, language))
    return report
