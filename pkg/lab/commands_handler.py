from datetime import datetime, timezone
from pathlib import Path
from typing import List, Optional

from .harness.data_models import EXPERIMENTS, ExperimentReport, Verdict
from .report_templates import ReportTemplates


def format_timestamp(ts) -> str:
    """时间戳转为 UTC 字符串"""
    if isinstance(ts, (int, float)):
        return datetime.fromtimestamp(ts, tz=timezone.utc).strftime("%Y-%m-%d %H:%M:%S UTC")
    return str(ts)


def compare_verdicts(stored: List[Verdict], recomputed: List[Verdict]) -> List[str]:
    """列出存储的判定与重新计算结果不一致之处"""
    problems = []
    stored_by_name = {v.name: v for v in stored}
    for verdict in recomputed:
        previous = stored_by_name.pop(verdict.name, None)
        if previous is None:
            problems.append(f"{verdict.name}: 存储的报告中没有这项判定")
        elif previous.passed != verdict.passed:
            problems.append(f"{verdict.name}: 存储结果 {previous.passed}，重新计算为 {verdict.passed}")
    problems.extend(f"{name}: 重新计算时不再产生这项判定" for name in stored_by_name)
    return problems


class CommandsHandler:

    @classmethod
    def generate_experiment_list(cls, language: str = "zh") -> str:
        """列出全部实验及其检验的结论"""
        lines = ["### 🧪 可用实验" if language != "en" else "### 🧪 Available experiments", ""]
        for name in EXPERIMENTS:
            lines.append(f"- **{name}**：{ReportTemplates.claim(name, language)}")
        return "\n".join(lines)

    @classmethod
    def generate_run_summary(cls, report: ExperimentReport, output_dir: Optional[Path] = None) -> str:
        """生成运行结束后的终端摘要"""
        passed = sum(v.passed for v in report.verdicts)
        status = "✅ 全部判定通过" if report.success else "❌ 存在未通过的判定"
        lines = [
            f"{status}：{report.experiment} {passed}/{len(report.verdicts)}，用时 {report.wall_time:.1f}s",
        ]
        for verdict in report.verdicts:
            mark = "✅" if verdict.passed else "❌"
            measured = ", ".join(f"{k}={v:.4g}" for k, v in verdict.measured.items())
            lines.append(f"  {mark} {verdict.name}" + (f" ({measured})" if measured else ""))
        if output_dir is not None:
            lines.append(f"📁 输出目录：{output_dir}")
        return "\n".join(lines)

    @classmethod
    def generate_check_result(cls, report: ExperimentReport, recomputed: List[Verdict]) -> str:
        """生成 check 命令的结果报告"""
        passed = sum(v.passed for v in recomputed)
        lines = [
            f"### 🔁 重新判定：{report.experiment}（生成于 {format_timestamp(report.created_at)}）",
            "",
            f"> {passed}/{len(recomputed)} 项判定通过",
        ]
        problems = compare_verdicts(report.verdicts, recomputed)
        if problems:
            lines.append("")
            lines.append("⚠️ 与存储的判定不一致：")
            lines.extend(f"- {p}" for p in problems)
        return "\n".join(lines)
