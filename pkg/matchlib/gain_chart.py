import json
from typing import Dict, Union

import altair as alt
import pandas as pd

from .errors import DataError
from .evaluation import ExperimentReport
from .run_config import DotDict
from .utils import ensure_parent, read_json


class GainChart(object):
    """
    Box plot of the per-fold relative gain of one ranking policy over a baseline, one box
    per gender. Setters return self so they chain; compile() is where altair gets called.
    """
    DEFAULT_HEIGHT = 300
    DEFAULT_WIDTH = 360
    DEFAULT_FONT = 'Khula'
    DEFAULT_COLORMAP = {'F': '#e15759', 'M': '#4e79a7'}

    def __init__(
            self,
            report: Union[str, ExperimentReport],
            policy: str = 'two_sided',
            baseline: str = 'suitor',
    ):
        if isinstance(report, str):
            report = ExperimentReport.from_dict(read_json(report))
        self.policy = policy
        self.baseline = baseline
        self.df = report.gains(policy, baseline)
        self._validate_df(self.df)
        self.spec = DotDict()
        self.set_defaults()

    def _validate_df(self, df: pd.DataFrame):
        for col in ('fold', 'gender', 'relative_gain'):
            if col not in df.columns:
                raise DataError(f'gain table should have a {col} column')
        if df.empty:
            raise DataError(f'no fold has success rates for both {self.policy} and {self.baseline}')

    def set_width(self, width: int):
        self.spec.width = width
        return self

    def set_height(self, height: int):
        self.spec.height = height
        return self

    def set_title(self, title: str):
        self.spec.title = title
        return self

    def set_font(self, font: str):
        self.spec.font = font
        return self

    def set_colormap(self, colormap: Dict[str, str] = None, **kwargs):
        colormap = dict(colormap or self.DEFAULT_COLORMAP)
        colormap.update(kwargs)
        self.spec.colormap = colormap
        return self

    def show_points(self, show: bool = True):
        self.spec.points = show
        return self

    def set_defaults(self):
        return self.set_width(
            self.DEFAULT_WIDTH
        ).set_height(
            self.DEFAULT_HEIGHT
        ).set_font(
            self.DEFAULT_FONT
        ).set_title(
            f'Relative gain in success rate, {self.policy} over {self.baseline}'
        ).set_colormap().show_points()

    def compile(self) -> alt.LayerChart:
        genders = sorted(self.df['gender'].unique())
        color = alt.Color(
            'gender:N',
            scale=alt.Scale(domain=genders, range=[self.spec.colormap.get(g, 'gray') for g in genders]),
            legend=None,
        )
        base = alt.Chart(self.df)
        layers = [
            base.mark_boxplot(extent='min-max').encode(
                x=alt.X('gender:N', title='gender of suitor'),
                y=alt.Y('relative_gain:Q', title='relative gain (%)'),
                color=color,
            ),
            alt.Chart(pd.DataFrame({'zero': [0.0]})).mark_rule(strokeDash=[4, 4], color='gray').encode(y='zero:Q'),
        ]
        if self.spec.points:
            layers.append(base.mark_point(filled=True, size=40, opacity=0.7).encode(
                x='gender:N',
                y='relative_gain:Q',
                color=color,
                tooltip=['fold:O', 'gender:N', alt.Tooltip('relative_gain:Q', format='.1f')],
            ))
        font = self.spec.font
        return alt.layer(*layers).properties(
            width=self.spec.width,
            height=self.spec.height,
            title=self.spec.title,
        ).configure_axis(
            labelFont=font,
            titleFont=font,
        ).configure_title(
            font=font,
        )

    def export(self, fname: str = 'gain_chart.vl.json'):
        ensure_parent(fname)
        with open(fname, 'w') as f:
            f.write(json.dumps(self.compile().to_dict(), sort_keys=True, indent=1))
            f.write('\n')
