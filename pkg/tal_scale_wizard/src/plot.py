from typing import List, Optional
import numpy as np
import pandas as pd
import plotly.graph_objects as go
import torch
from tal_scale_wizard.src.localizer import Proposal
from tal_scale_wizard.src.snippet_data import VideoRecord
from tal_scale_wizard.src.wtal_model import WtalModel, forward


class VideoPlot:
    """
    Attention, per-class CAS and ground-truth spans of one video under one checkpoint.

    Example:
        html = VideoPlot(video, model).handle()
    """

    def __init__(self, video: VideoRecord, model: WtalModel, proposals: Optional[List[Proposal]] = None) -> None:
        self.video = video
        self.model = model
        self.proposals = proposals or []

    def _scores(self) -> pd.DataFrame:
        with torch.no_grad():
            attention, cas = forward(self.model, self.video.features, dropout_on=False).numpy()
        stride = self.video.features.snippet_stride
        df = pd.DataFrame(cas, columns=[f"cas_{c}" for c in range(cas.shape[1] - 1)] + ["cas_bg"])
        df.insert(0, "attention", attention)
        df.insert(0, "time", np.arange(len(attention)) * stride + stride / 2)
        return df

    def figure(self) -> go.Figure:
        df = self._scores()
        fig = go.Figure()

        # Ground truth as shaded spans
        for inst in self.video.instances:
            fig.add_vrect(
                x0=inst.start,
                x1=inst.end,
                fillcolor="green",
                opacity=0.15,
                line_width=0,
                annotation_text=f"gt {inst.class_id}",
                annotation_position="top left",
            )
        for p in self.proposals:
            fig.add_shape(
                type="line",
                x0=p.start,
                x1=p.end,
                y0=-0.05,
                y1=-0.05,
                line=dict(color="red", width=3),
            )

        fig.add_trace(
            go.Scatter(x=df["time"], y=df["attention"], mode="lines", name="attention", line=dict(color="black"))
        )
        present = sorted({inst.class_id for inst in self.video.instances})
        for column in df.columns[2:]:
            fig.add_trace(
                go.Scatter(
                    x=df["time"],
                    y=df[column],
                    mode="lines",
                    name=column,
                    # only the annotated classes are shown by default
                    visible=True if column in [f"cas_{c}" for c in present] else "legendonly",
                )
            )

        fig.update_layout(
            title=f"{self.video.id} - attention / CAS",
            xaxis=dict(title="time (s)", range=[0, self.video.duration]),
            yaxis=dict(title="score", range=[-0.1, 1.05]),
        )
        return fig

    def handle(self) -> str:
        return self.figure().to_html(full_html=False, include_plotlyjs="cdn")
