import html

import numpy as np
import plotly.graph_objects as go

from logging_config import setup_logger
from src.data_transformation.dataset import CLASS_LABELS

LOGGER = setup_logger()


class ReportFigures:
    """
    Plotly figures of an evaluation report, written as one static HTML page.

    Attributes:
        report (dict): The report.json payload.
        true_totals (dict): label -> ground-truth count over the evaluated recordings.
        predicted_totals (dict): source -> (label -> predicted count).
    """

    def __init__(self, report: dict, true_totals: dict, predicted_totals: dict):
        self.report = report
        self.true_totals = true_totals
        self.predicted_totals = predicted_totals
        self.confusion_fig = self.create_confusion_figure()
        self.counts_fig = self.create_counts_figure()

    def create_confusion_figure(self):
        rows = self.report["model"]["confusion_matrix"]["rows"]
        z = np.full((len(CLASS_LABELS), len(CLASS_LABELS)), np.nan)
        for i, label in enumerate(CLASS_LABELS):
            if rows[label] is not None:
                z[i] = [rows[label]["predicted"][c] for c in CLASS_LABELS]
        fig = go.Figure(
            data=[
                go.Heatmap(
                    z=z,
                    x=list(CLASS_LABELS),
                    y=list(CLASS_LABELS),
                    zmin=0.0,
                    zmax=1.0,
                    colorscale="Blues",
                    text=np.where(np.isnan(z), "", np.round(z, 2).astype(str)),
                    texttemplate="%{text}",
                    hovertemplate="true %{y}<br>predicted %{x}<br>%{z:.3f}<extra></extra>",
                )
            ]
        )
        fig.update_layout(
            title="Confusion matrix (normalized to ground-truth count)",
            xaxis_title="predicted",
            yaxis_title="ground truth",
            yaxis_autorange="reversed",
        )
        return fig

    def create_counts_figure(self):
        labels = list(CLASS_LABELS)
        bars = [go.Bar(name="true", x=labels, y=[self.true_totals[c] for c in labels])]
        for source, totals in self.predicted_totals.items():
            bars.append(go.Bar(name=source, x=labels, y=[totals[c] for c in labels]))
        fig = go.Figure(data=bars)
        fig.update_layout(
            title="Primitive counts, true vs predicted", barmode="group", yaxis_title="count"
        )
        return fig

    def summary_html(self) -> str:
        items = []
        for source in ("model", "baseline"):
            section = self.report.get(source)
            if section is None:
                continue
            pooled = section["window"]["pooled"]
            values = ", ".join(
                f"{name} {pooled[name]:.3f}" if pooled[name] is not None else f"{name} n/a"
                for name in ("sensitivity", "fdr", "f1", "aer")
            )
            items.append(f"<li><b>{html.escape(source)}</b>: {values}</li>")
        return "<ul>" + "".join(items) + "</ul>"

    def write_html(self, file_path: str) -> None:
        body = [
            "<html><head><meta charset='utf-8'><title>Primitive counting report</title></head><body>",
            "<h2>Primitive counting report</h2>",
            f"<p>config hash {html.escape(self.report['config_hash'])}</p>",
            self.summary_html(),
            self.confusion_fig.to_html(full_html=False, include_plotlyjs="cdn"),
            self.counts_fig.to_html(full_html=False, include_plotlyjs=False),
            "</body></html>",
        ]
        with open(file_path, "w", encoding="utf-8") as f:
            f.write("\n".join(body))
        LOGGER.info(f"Saved HTML report to '{file_path}'")
