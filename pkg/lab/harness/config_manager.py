"""
配置持久化管理模块
实验配置的读取与校验、生效配置回显、实验室默认设置文件
"""

import json
import os
import shutil
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, Optional, Union

from loguru import logger
from pydantic import ValidationError

from .data_models import ExperimentConfig

SCHEMA_FILE = Path(__file__).resolve().parent.parent / "_conf_schema.json"


class ConfigError(ValueError):
    """配置校验失败，消息中逐条列出所有违规字段"""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("配置校验失败:\n" + "\n".join(f"  - {p}" for p in self.problems))


def _format_errors(error: ValidationError):
    for item in error.errors():
        location = ".".join(str(part) for part in item["loc"]) or "<root>"
        yield f"{location}: {item['msg']}"


def validate_config(raw: Union[str, bytes, Dict[str, Any]]) -> ExperimentConfig:
    """解析并校验实验配置

    Args:
        raw: JSON文本或已解析的字典；空文本按空对象处理

    Returns:
        填充默认值后的 ExperimentConfig

    Raises:
        ConfigError: JSON格式错误或字段校验失败
    """
    if isinstance(raw, (str, bytes)):
        text = raw.decode("utf-8") if isinstance(raw, bytes) else raw
        try:
            raw = json.loads(text) if text.strip() else {}
        except json.JSONDecodeError as e:
            raise ConfigError([f"JSON格式错误 (第{e.lineno}行第{e.colno}列): {e.msg}"]) from e
    if not isinstance(raw, dict):
        raise ConfigError([f"<root>: 配置必须是JSON对象，收到 {type(raw).__name__}"])
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as e:
        raise ConfigError(list(_format_errors(e))) from e


def atomic_write_text(path: Union[str, Path], text: str) -> Path:
    """先写临时文件再改名，输出文件只会出现完整内容"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp")
    with open(tmp, "w", encoding="utf-8", newline="") as f:
        f.write(text)
    os.replace(tmp, path)
    return path


def schema_defaults() -> Dict[str, Any]:
    """从 _conf_schema.json 取出每个键的默认值"""
    with open(SCHEMA_FILE, "r", encoding="utf-8") as f:
        schema = json.load(f)
    return {key: item.get("default") for key, item in schema.items()}


class ConfigManager:
    """配置管理器"""

    def __init__(self, data_dir: Union[str, Path]):
        """
        初始化ConfigManager

        Args:
            data_dir: 实验室数据目录，存放 lab_settings.json 与 backups/
        """
        self.data_dir = Path(data_dir)
        self.settings_file = self.data_dir / "lab_settings.json"
        self.backup_dir = self.data_dir / "backups"
        self.settings = self._load_settings()

    def _load_settings(self) -> Dict[str, Any]:
        """加载默认设置；文件不存在时按 schema 生成，损坏时备份后重建"""
        defaults = schema_defaults()
        if not self.settings_file.exists():
            return defaults

        try:
            with open(self.settings_file, "r", encoding="utf-8") as f:
                settings = json.load(f)
            if not isinstance(settings, dict):
                raise ValueError("设置文件顶层不是对象")
            unknown = sorted(set(settings) - set(defaults))
            if unknown:
                logger.warning(f"忽略未知的设置项: {unknown}")
            return {key: settings.get(key, value) for key, value in defaults.items()}
        except (json.JSONDecodeError, ValueError, OSError) as e:
            self.backup_dir.mkdir(parents=True, exist_ok=True)
            backup_file = self.backup_dir / f"settings_corrupted_{datetime.now().strftime('%Y%m%d_%H%M%S')}.json"
            shutil.copy2(self.settings_file, backup_file)
            logger.error(f"设置文件损坏，已备份到 {backup_file} 并恢复默认值: {e}")
            self.save_settings(defaults)
            return defaults

    def save_settings(self, settings: Dict[str, Any]) -> None:
        """保存默认设置（覆盖前先备份旧文件）"""
        if self.settings_file.exists():
            self.backup_dir.mkdir(parents=True, exist_ok=True)
            backup_file = self.backup_dir / f"settings_backup_{datetime.now().strftime('%Y%m%d_%H%M%S')}.json"
            shutil.copy2(self.settings_file, backup_file)
        atomic_write_text(self.settings_file, json.dumps(settings, ensure_ascii=False, indent=2))
        self.settings = dict(settings)

    def get(self, key: str, default: Any = None) -> Any:
        return self.settings.get(key, default)

    def resolve_workers(self, cli_workers: Optional[int] = None) -> int:
        """工作线程数：命令行 > 环境变量 LAB_WORKERS > 设置文件"""
        if cli_workers is not None:
            workers = cli_workers
        elif os.environ.get("LAB_WORKERS"):
            try:
                workers = int(os.environ["LAB_WORKERS"])
            except ValueError:
                logger.warning(f"LAB_WORKERS={os.environ['LAB_WORKERS']!r} 不是整数，改用设置文件中的值")
                workers = int(self.get("workers", 1))
        else:
            workers = int(self.get("workers", 1))
        if workers < 1:
            raise ConfigError([f"workers: 必须为正整数，收到 {workers}"])
        return workers

    def load_experiment_config(self, path: Union[str, Path]) -> ExperimentConfig:
        """读取并校验实验配置文件"""
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigError([f"无法读取配置文件 {path}: {e}"]) from e
        config = validate_config(text)
        logger.info(f"已加载实验配置: {path} ({config.experiment})")
        return config

    def output_dir_for(self, config: ExperimentConfig, override: Optional[Union[str, Path]] = None) -> Path:
        """输出目录：命令行 > 配置中的 output_dir > output_root/<实验名>-seed<种子>"""
        if override is not None:
            return Path(override)
        if config.output_dir:
            return Path(config.output_dir)
        root = Path(self.get("output_root", "runs"))
        return root / f"{config.experiment.lower()}-seed{config.seed}"

    @staticmethod
    def write_effective_config(config: ExperimentConfig, out_dir: Union[str, Path]) -> Path:
        """把填充默认值后的配置回显到 effective_config.json"""
        text = json.dumps(config.model_dump(mode="json"), ensure_ascii=False, indent=2, sort_keys=True)
        return atomic_write_text(Path(out_dir) / "effective_config.json", text + "\n")
