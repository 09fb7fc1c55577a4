"""
实验输出读写模块
results.csv / 附加CSV / report.json / report.md 的写入，以及已存报告的读取
"""

import csv
import io
import json
from pathlib import Path
from typing import Any, Dict, Iterable, List, Sequence, Tuple, Union

from loguru import logger

from .config_manager import atomic_write_text
from .data_models import ExperimentReport

RESULTS_FILE = "results.csv"
REPORT_FILE = "report.json"
MARKDOWN_FILE = "report.md"


def _format_value(value) -> str:
    if isinstance(value, bool):
        return str(int(value))
    if isinstance(value, (int,)):
        return str(value)
    return repr(float(value))


def rows_to_csv(rows: Sequence[Dict[str, float]], columns: Sequence[str] = None) -> str:
    """按列顺序写成CSV文本；浮点数使用 repr 精度"""
    if not rows:
        return ""
    columns = list(columns or rows[0].keys())
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_format_value(row[c]) for c in columns])
    return buffer.getvalue()


def read_rows_csv(path: Union[str, Path]) -> List[Dict[str, float]]:
    """读取数值CSV，所有列转为浮点数"""
    with open(path, "r", encoding="utf-8") as f:
        return [{key: float(value) for key, value in row.items()} for row in csv.DictReader(f)]


class ReportStore:
    """一次实验运行的输出目录"""

    def __init__(self, out_dir: Union[str, Path]):
        """
        初始化ReportStore

        Args:
            out_dir: 输出目录
        """
        self.out_dir = Path(out_dir)

    def write_rows(self, name: str, rows: Sequence[Dict[str, float]]) -> Path:
        path = atomic_write_text(self.out_dir / name, rows_to_csv(rows))
        logger.debug(f"已写入 {path} ({len(rows)} 行)")
        return path

    def write_text(self, name: str, text: str) -> Path:
        path = atomic_write_text(self.out_dir / name, text)
        logger.debug(f"已写入 {path}")
        return path

    def write_extras(self, extras: Iterable[Tuple[str, Any]]) -> List[Path]:
        """附加输出：行列表写成数值CSV，带 to_csv_text 的对象（如权重调度）按其自身格式写出"""
        paths = []
        for name, payload in extras:
            if hasattr(payload, "to_csv_text"):
                paths.append(self.write_text(name, payload.to_csv_text()))
            else:
                paths.append(self.write_rows(name, payload))
        return paths

    def write_report(self, report: ExperimentReport, markdown: str) -> Dict[str, Path]:
        """写出 results.csv、report.json、report.md"""
        paths = {
            "results": self.write_rows(RESULTS_FILE, report.rows),
            "report": atomic_write_text(self.out_dir / REPORT_FILE, report.model_dump_json(indent=2)),
            "markdown": atomic_write_text(self.out_dir / MARKDOWN_FILE, markdown),
        }
        logger.info(f"实验报告已写入 {self.out_dir}")
        return paths

    @staticmethod
    def resolve(path: Union[str, Path]) -> Path:
        """接受 report.json 路径或其所在目录"""
        path = Path(path)
        return path / REPORT_FILE if path.is_dir() else path

    @classmethod
    def load(cls, path: Union[str, Path]) -> Tuple[ExperimentReport, List[Dict[str, float]]]:
        """读取已存报告及同目录的 results.csv

        Returns:
            (报告, 从CSV重新读出的指标行)
        """
        report_path = cls.resolve(path)
        if not report_path.exists():
            raise FileNotFoundError(f"找不到报告文件: {report_path}")
        report = ExperimentReport.model_validate(json.loads(report_path.read_text(encoding="utf-8")))
        results_path = report_path.parent / RESULTS_FILE
        rows = read_rows_csv(results_path) if results_path.exists() else []
        if not rows:
            logger.warning(f"{results_path} 不存在或为空，使用报告中内嵌的指标行")
            rows = report.rows
        return report, rows
