"""Presenter Agent - Generates training charts, ablation charts and metric reports."""
from pathlib import Path
from typing import Optional, Sequence, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402

from pbeunet.console import echo  # noqa: E402
from pbeunet.models import AggregateReport, HistoryRecord, MetricReport  # noqa: E402

STYLE = """
body { font-family: Helvetica, sans-serif; max-width: 960px; margin: 24px auto; color: #222; }
.header { border-left: 6px solid #8e44ad; padding: 4px 16px; }
.header h1 { font-size: 22px; margin: 0; }
.section { margin-top: 24px; }
h2 { font-size: 16px; text-transform: uppercase; letter-spacing: 1px; color: #555; }
table { border-collapse: collapse; font-variant-numeric: tabular-nums; }
th, td { padding: 4px 12px; text-align: right; border-bottom: 1px solid #e0e0e0; }
th { font-weight: 600; }
td:first-child, th:first-child { text-align: left; }
.undefined { color: #c0392b; font-style: italic; }
.chart img { max-width: 100%; }
"""


def _fmt_hd(value: Optional[float]) -> str:
    return '<span class="undefined">undefined</span>' if value is None else f"{value:.2f}"


class PresenterAgent:
    """Agent responsible for generating charts and reports."""

    def __init__(self, output_dir: Union[str, Path] = "output", verbose: bool = True):
        self.output_dir = Path(output_dir)
        self.output_dir.mkdir(parents=True, exist_ok=True)
        self.verbose = verbose

    def _say(self, message: str) -> None:
        if self.verbose:
            echo(message)

    def generate_training_curve(
        self,
        history: Union[Sequence[HistoryRecord], pd.DataFrame],
        filename: str = "training_curve.png",
    ) -> str:
        """Loss and learning rate against iteration.

        Accepts the records of a run or the frame read back from history.csv.
        """
        self._say("📈 Presenter Agent: Generating training curve...")
        frame = history if isinstance(history, pd.DataFrame) else pd.DataFrame([r.model_dump() for r in history])

        fig, ax = plt.subplots(figsize=(12, 7))
        ax.plot(frame["iter"], frame["loss"], "b-", linewidth=1.5, label="Total loss")
        ax.set_xlabel("Iteration", fontsize=12)
        ax.set_ylabel("Loss", fontsize=12)
        ax.grid(True, alpha=0.3)

        lr_ax = ax.twinx()
        lr_ax.plot(frame["iter"], frame["lr"], color="orange", linestyle="--", linewidth=1.5, label="Learning rate")
        lr_ax.set_ylabel("Learning rate", fontsize=12)

        lines = ax.get_lines() + lr_ax.get_lines()
        ax.legend(lines, [line.get_label() for line in lines], loc="best", fontsize=10)
        ax.set_title("Training - loss and poly learning rate", fontsize=14, fontweight="bold")

        output_path = self.output_dir / filename
        plt.tight_layout()
        plt.savefig(output_path, dpi=150, bbox_inches="tight")
        plt.close(fig)
        return str(output_path)

    def generate_ablation_chart(self, summary: pd.DataFrame, filename: str = "ablation.png") -> str:
        """Mean validation Dice per variant with the spread over seeds."""
        self._say("📈 Presenter Agent: Generating ablation chart...")
        fig, ax = plt.subplots(figsize=(12, 7))
        errors = summary["dice_std"].fillna(0.0) if "dice_std" in summary else None
        ax.bar(summary["variant"], summary["dice"], yerr=errors, color="#3498db", capsize=4)
        ax.set_ylabel("Validation Dice", fontsize=12)
        ax.set_ylim(0.0, 1.0)
        ax.set_title("Ablation - mean validation Dice", fontsize=14, fontweight="bold")
        ax.grid(True, axis="y", alpha=0.3)
        plt.setp(ax.get_xticklabels(), rotation=30, ha="right")

        output_path = self.output_dir / filename
        plt.tight_layout()
        plt.savefig(output_path, dpi=150, bbox_inches="tight")
        plt.close(fig)
        return str(output_path)

    def generate_metrics_report(
        self,
        reports: Sequence[MetricReport],
        summary: AggregateReport,
        title: str = "Segmentation metrics",
        filename: str = "metrics_report.html",
    ) -> str:
        self._say("📊 Presenter Agent: Generating metrics report...")
        rows = "".join(
            f"""
            <tr>
                <td>{r.sample_id or ''}</td>
                <td>{r.dice:.4f}</td>
                <td>{r.iou:.4f}</td>
                <td>{_fmt_hd(r.hd95 if r.hd95_defined else None)}</td>
                <td>{r.recall:.4f}</td>
                <td>{r.accuracy:.4f}</td>
            </tr>"""
            for r in reports
        )
        warning = ""
        if summary.hd95_undefined:
            warning = f'<p class="undefined">⚠️ HD95 undefined for {summary.hd95_undefined} sample(s)</p>'
        chart = ""
        if (self.output_dir / "training_curve.png").exists():
            chart = """
    <div class="section">
        <h2>Training Curve</h2>
        <div class="chart"><img src="training_curve.png" alt="Training curve"></div>
    </div>"""
        html = f"""<!DOCTYPE html>
<html>
<head>
    <meta charset="UTF-8">
    <title>PBE-UNet {title}</title>
    <style>{STYLE}</style>
</head>
<body>
    <div class="header">
        <h1>🩺 PBE-UNet {title}</h1>
        <p>{summary.count} samples, per-image means</p>
    </div>

    <div class="section">
        <h2>Aggregate</h2>
        <table>
            <tr><th>Dice</th><th>IoU</th><th>HD95 (px)</th><th>Recall</th><th>Accuracy</th></tr>
            <tr>
                <td>{summary.dice:.4f}</td>
                <td>{summary.iou:.4f}</td>
                <td>{_fmt_hd(summary.hd95)}</td>
                <td>{summary.recall:.4f}</td>
                <td>{summary.accuracy:.4f}</td>
            </tr>
        </table>
        {warning}
    </div>

    <div class="section">
        <h2>Per-sample</h2>
        <table>
            <tr><th>Sample</th><th>Dice</th><th>IoU</th><th>HD95 (px)</th><th>Recall</th><th>Accuracy</th></tr>
            {rows}
        </table>
    </div>
{chart}
</body>
</html>
"""
        output_path = self.output_dir / filename
        output_path.write_text(html, encoding="utf-8")
        return str(output_path)
