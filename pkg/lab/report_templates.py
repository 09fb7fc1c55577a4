"""
报告模板
每个实验检验的结论描述，以及 report.md 的生成逻辑
"""

import math
from typing import Dict, List

from .harness.data_models import ExperimentReport


class ReportTemplates:
    """实验报告模板类"""

    # 中文结论描述
    CLAIMS_ZH: Dict[str, str] = {
        "SCORE-SWEEP": (
            "分数逼近：候选分数的加权匹配损失趋于零时，反向密度轨迹在 sup_t L² 意义下收敛到精确反向轨迹，"
            "且每一级满足 E² ≤ (4/l)·L·e^{4·‖V‖∞·T}·max‖ρ‖∞。"
        ),
        "T-DECAY": (
            "可采样类：从均匀噪声出发、以精确分数反向演化，终态误差随 T 最终下降；"
            "噪声初始化误差至少按 e^{−λT} 衰减，λ 为 Neumann 拉普拉斯的谱隙（前向与反向各收缩一次，实测约为 e^{−2λT}）；"
            "反向截断 ε 留下的缺口 ‖ρ^f_ε − ρ_d‖₂ 单独报告。"
        ),
        "MOSER-EXACT": (
            "精确可控性：Moser 漂移在单位时间内把 ρ_0 精确送到 ρ_d，轨迹与线性插值一致，"
            "且漂移的一致范数受 2C·max‖∇ρ‖∞ / l 控制。"
        ),
        "OSC-CONVERGE": (
            "轨迹逼近：宽度为 d 的振荡权重调度在 T/N 周期下弱*逼近宽网络，"
            "对应的密度轨迹误差随 N 单调下降。"
        ),
        "ODE-VS-SDE": (
            "演示：同一分数扰动下，无扩散的概率流连续性方程比带扩散的反向 Fokker-Planck 方程偏离更大；"
            "粒子层面的反向SDE与概率流ODE与各自的PDE终态一致。"
        ),
        "NEURAL-TRANSFER": (
            "近似可控性：每个时间片一个宽网络并在片内振荡的有限宽度神经SDE，"
            "其终态随 N 趋于分片宽网络的终态，从而逼近 ρ_d。"
        ),
    }

    # English claims
    CLAIMS_EN: Dict[str, str] = {
        "SCORE-SWEEP": (
            "Score approximation: as the weighted score-matching loss of a candidate score goes to zero, "
            "the reverse density trajectory converges in sup_t L² to the exact reverse trajectory, and each rung "
            "satisfies E² ≤ (4/l)·L·e^{4·‖V‖∞·T}·max‖ρ‖∞."
        ),
        "T-DECAY": (
            "Samplable class: starting from uniform noise with the exact score, the terminal error is eventually "
            "decreasing in T and the noise-initialization error decays at least like e^{−λT}, λ the Neumann spectral gap "
            "(forward and reverse runs each contract it once, so about e^{−2λT} is observed); the gap ‖ρ^f_ε − ρ_d‖₂ "
            "left by the reverse cut-off is reported separately."
        ),
        "MOSER-EXACT": (
            "Exact controllability: the Moser drift transfers ρ_0 to ρ_d in unit time along the linear "
            "interpolation, with sup-norm controlled by 2C·max‖∇ρ‖∞ / l."
        ),
        "OSC-CONVERGE": (
            "Trajectory approximation: width-d oscillating weight schedules with period T/N approximate a wide "
            "network weakly-*, and the density trajectory error decreases monotonically in N."
        ),
        "ODE-VS-SDE": (
            "Demonstration: under the same score perturbation the diffusion-free probability-flow continuity "
            "equation deviates more than the reverse Fokker-Planck equation; particle-level reverse SDE and "
            "flow ODE match their PDE terminals."
        ),
        "NEURAL-TRANSFER": (
            "Approximate controllability: a limited-width neural SDE built from one wide net per time slab, "
            "oscillated inside each slab, approaches the piecewise wide-net terminal and hence ρ_d as N grows."
        ),
    }

    HEADINGS = {
        "zh": {
            "title": "实验报告",
            "claim": "检验结论",
            "verdicts": "判定",
            "rows": "指标",
            "summary": "共 {passed}/{total} 项判定通过，用时 {wall_time:.1f} 秒",
            "pass": "✅ 通过",
            "fail": "❌ 未通过",
        },
        "en": {
            "title": "Experiment report",
            "claim": "Claim under test",
            "verdicts": "Verdicts",
            "rows": "Metrics",
            "summary": "{passed}/{total} verdicts passed in {wall_time:.1f} s",
            "pass": "✅ pass",
            "fail": "❌ fail",
        },
    }

    @classmethod
    def claim(cls, experiment: str, language: str = "zh") -> str:
        claims = cls.CLAIMS_EN if language == "en" else cls.CLAIMS_ZH
        return claims[experiment]

    @staticmethod
    def _format_number(value: float) -> str:
        if isinstance(value, float) and (math.isnan(value) or math.isinf(value)):
            return str(value)
        if value == int(value) and abs(value) < 1e6:
            return str(int(value))
        return f"{value:.6g}"

    @classmethod
    def build_markdown(cls, report: ExperimentReport, language: str = "zh") -> str:
        """生成 report.md

        Args:
            report: 实验报告
            language: "zh" 或 "en"

        Returns:
            Markdown 文本
        """
        text = cls.HEADINGS["en" if language == "en" else "zh"]
        passed = sum(v.passed for v in report.verdicts)
        lines: List[str] = [
            f"### 🧪 {text['title']}: {report.experiment}",
            "",
            f"> {text['summary'].format(passed=passed, total=len(report.verdicts), wall_time=report.wall_time)}",
            "",
            f"#### 📌 {text['claim']}",
            report.claim,
            "",
            f"#### ⚖️ {text['verdicts']}",
        ]
        for verdict in report.verdicts:
            status = text["pass"] if verdict.passed else text["fail"]
            lines.append(f"- **{verdict.name}**：{status}")
            if verdict.measured:
                measured = "｜".join(f"`{k}={cls._format_number(v)}`" for k, v in verdict.measured.items())
                lines.append(f"  - {measured}")
            if verdict.detail:
                lines.append(f"  - {verdict.detail}")
        lines.append("")

        if report.rows:
            columns = list(report.rows[0].keys())
            lines.append(f"#### 📊 {text['rows']}")
            lines.append("| " + " | ".join(columns) + " |")
            lines.append("|" + "---|" * len(columns))
            for row in report.rows:
                lines.append("| " + " | ".join(cls._format_number(row[c]) for c in columns) + " |")
            lines.append("")
        return "\n".join(lines)
