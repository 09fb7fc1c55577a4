"""
桌面级分数生成模型数值实验室
命令行入口：lab run / lab list-experiments / lab check
"""

import argparse
import os
import sys
from pathlib import Path
from typing import List, Optional

from loguru import logger

from .commands_handler import CommandsHandler
from .experiment_manager import ExperimentError, run_experiment
from .grid import SolverError
from .harness.config_manager import ConfigError, ConfigManager, validate_config
from .harness.report_store import ReportStore
from .verdicts import evaluate_verdicts

# 退出码
EXIT_OK = 0
EXIT_VERDICT_FAILED = 1
EXIT_CONFIG_ERROR = 2
EXIT_RUNTIME_ERROR = 3


def _resolve_data_dir() -> Path:
    """实验室数据目录：环境变量 LAB_DATA_DIR，否则为当前目录下的 .lab"""
    env_dir = os.environ.get("LAB_DATA_DIR")
    return Path(env_dir) if env_dir else Path.cwd() / ".lab"


def configure_logging(level: str) -> None:
    logger.remove()
    logger.add(
        sys.stderr,
        level=level.upper(),
        format="<green>{time:HH:mm:ss}</green> | <level>{level: <8}</level> | {name}:{line} - {message}",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lab", description="分数生成模型与密度可控性的数值实验室")
    parser.add_argument("--log-level", default=None, help="日志级别（默认取设置文件中的 log_level）")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="运行一个实验配置")
    run.add_argument("config", help="实验配置JSON路径")
    run.add_argument("--out", default=None, help="输出目录")
    run.add_argument("--workers", type=int, default=None, help="并发子运行数（默认 LAB_WORKERS 或设置文件）")
    run.add_argument("--seed", type=int, default=None, help="覆盖配置中的随机种子")

    sub.add_parser("list-experiments", help="列出全部实验")

    check = sub.add_parser("check", help="从已存CSV重新判定")
    check.add_argument("report", help="report.json 路径或其所在目录")
    return parser


def _cmd_run(args: argparse.Namespace, config_manager: ConfigManager) -> int:
    cfg = config_manager.load_experiment_config(args.config)
    if args.seed is not None:
        cfg = validate_config(dict(cfg.model_dump(mode="json"), seed=args.seed))
    workers = config_manager.resolve_workers(args.workers)
    out_dir = config_manager.output_dir_for(cfg, args.out)
    report = run_experiment(cfg, workers=workers, output_dir=out_dir,
                            language=config_manager.get("report_language", "zh"))
    print(CommandsHandler.generate_run_summary(report, out_dir))
    return EXIT_OK if report.success else EXIT_VERDICT_FAILED


def _cmd_check(args: argparse.Namespace) -> int:
    try:
        report, rows = ReportStore.load(args.report)
    except ValueError as e:
        raise ConfigError([f"报告文件无法解析: {e}"]) from e
    cfg = validate_config(report.config)
    recomputed = evaluate_verdicts(cfg, rows)
    print(CommandsHandler.generate_check_result(report, recomputed))
    return EXIT_OK if all(v.passed for v in recomputed) else EXIT_VERDICT_FAILED


def main(argv: Optional[List[str]] = None) -> int:
    """命令行主函数，返回退出码"""
    parser = build_parser()
    args = parser.parse_args(argv)
    config_manager = ConfigManager(_resolve_data_dir())
    configure_logging(args.log_level or config_manager.get("log_level", "INFO"))

    try:
        if args.command == "list-experiments":
            print(CommandsHandler.generate_experiment_list(config_manager.get("report_language", "zh")))
            return EXIT_OK
        if args.command == "check":
            return _cmd_check(args)
        return _cmd_run(args, config_manager)
    except ConfigError as e:
        logger.error(str(e))
        return EXIT_CONFIG_ERROR
    except FileNotFoundError as e:
        logger.error(str(e))
        return EXIT_CONFIG_ERROR
    except (ExperimentError, SolverError) as e:
        logger.error(str(e))
        return EXIT_RUNTIME_ERROR


if __name__ == "__main__":
    sys.exit(main())
