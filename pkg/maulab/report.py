"""Static SVG plots: attention/error heatmap and training curves."""

from typing import Dict, List, Optional, Sequence, Text

import jinja2
import numpy as np

from maulab import exceptions

CELL = 18
MARGIN = 60
PANEL_WIDTH = 520
PANEL_HEIGHT = 140

__HEATMAP_TEMPLATE__ = jinja2.Template(
    """<svg xmlns="http://www.w3.org/2000/svg" width="{{ width }}" height="{{ height }}" font-family="monospace" font-size="10">
<title>{{ title }}</title>
{% if digest %}<desc>config_digest={{ digest }}</desc>
{% endif %}<rect x="0" y="0" width="{{ width }}" height="{{ height }}" fill="#ffffff"/>
<text x="{{ margin }}" y="16" font-size="12">{{ title }}</text>
<text x="{{ margin }}" y="30">H = {{ threshold }}, columns: phonemes, rows: unit positions</text>
{% for cell in cells %}<rect x="{{ cell.x }}" y="{{ cell.y }}" width="{{ size }}" height="{{ size }}" fill="{{ cell.fill }}"/>
{% endfor %}{% for row in mask_strip %}<rect x="{{ row.x }}" y="{{ row.y }}" width="{{ size }}" height="{{ size }}" fill="{{ row.fill }}"/>
<text x="{{ row.label_x }}" y="{{ row.label_y }}" text-anchor="end">{{ row.text }}</text>
{% endfor %}<text x="{{ strip_x }}" y="{{ top - 4 }}" text-anchor="middle">M</text>
{% for col in columns %}<text x="{{ col.x }}" y="{{ top - 4 }}" text-anchor="middle">{{ col.phoneme }}</text>
<rect x="{{ col.bar_x }}" y="{{ col.bar_y }}" width="{{ bar_width }}" height="{{ col.bar_height }}" fill="{{ col.bar_fill }}"/>
<text x="{{ col.x }}" y="{{ col.score_y }}" text-anchor="middle">{{ col.score }}</text>
{% if col.label is not none %}<text x="{{ col.x }}" y="{{ col.label_y }}" text-anchor="middle">{{ col.label }}</text>
{% endif %}{% endfor %}<path d="M {{ left }} {{ threshold_y }} L {{ right }} {{ threshold_y }}" stroke="#c0392b" stroke-dasharray="4 2" fill="none"/>
<text x="{{ left - 4 }}" y="{{ bars_top + 10 }}" text-anchor="end">E_hat</text>
{% if has_labels %}<text x="{{ left - 4 }}" y="{{ labels_y }}" text-anchor="end">E*</text>
{% endif %}</svg>
"""
)

__CURVES_TEMPLATE__ = jinja2.Template(
    """<svg xmlns="http://www.w3.org/2000/svg" width="{{ width }}" height="{{ height }}" font-family="monospace" font-size="10">
<title>{{ title }}</title>
{% if digest %}<desc>config_digest={{ digest }}</desc>
{% endif %}<rect x="0" y="0" width="{{ width }}" height="{{ height }}" fill="#ffffff"/>
<text x="{{ margin }}" y="16" font-size="12">{{ title }}</text>
{% for panel in panels %}<rect x="{{ margin }}" y="{{ panel.top }}" width="{{ panel_width }}" height="{{ panel_height }}" fill="none" stroke="#999999"/>
<text x="{{ margin + 4 }}" y="{{ panel.top + 12 }}">{{ panel.name }}</text>
<text x="{{ margin - 4 }}" y="{{ panel.top + 10 }}" text-anchor="end">{{ panel.high }}</text>
<text x="{{ margin - 4 }}" y="{{ panel.top + panel_height }}" text-anchor="end">{{ panel.low }}</text>
<path d="{{ panel.path }}" stroke="#2c7fb8" fill="none"/>
{% endfor %}<text x="{{ margin }}" y="{{ height - 8 }}">step {{ first_step }}</text>
<text x="{{ margin + panel_width }}" y="{{ height - 8 }}" text-anchor="end">step {{ last_step }}</text>
</svg>
"""
)


def _fmt(value: float) -> Text:
    return f"{value:.2f}"


def _gray(intensity: float) -> Text:
    level = int(round(255 * (1.0 - min(max(intensity, 0.0), 1.0))))
    return f"#{level:02x}{level:02x}{level:02x}"


def _red(intensity: float) -> Text:
    level = int(round(255 * (1.0 - min(max(intensity, 0.0), 1.0))))
    return f"#ff{level:02x}{level:02x}"


def render_heatmap(
    utt_id: Text,
    phonemes: Sequence[int],
    attention: np.ndarray,
    mask_probs: Sequence[float],
    scores: Sequence[float],
    decisions: Sequence[int],
    threshold: float,
    labels: Optional[Sequence[int]] = None,
    digest: Text = "",
) -> Text:
    """attention map (unit positions x phonemes) with M_hat on the left and E_hat bars below"""
    attention = np.asarray(attention, dtype=np.float64)
    steps, width = attention.shape
    if len(phonemes) != width or len(scores) != width or len(mask_probs) != steps:
        raise exceptions.DimensionError(
            f"heatmap: attention {attention.shape}, {len(phonemes)} phonemes, "
            f"{len(scores)} scores, {len(mask_probs)} mask values"
        )
    top = MARGIN
    left = MARGIN + 2 * CELL
    strip_x = MARGIN
    peak = attention.max() if attention.size and attention.max() > 0 else 1.0

    cells = [
        {"x": left + i * CELL, "y": top + j * CELL, "fill": _gray(attention[j, i] / peak)}
        for j in range(steps)
        for i in range(width)
    ]
    mask_strip = [
        {
            "x": strip_x,
            "y": top + j * CELL,
            "fill": _red(float(mask_probs[j])),
            "label_x": strip_x - 4,
            "label_y": top + j * CELL + CELL - 5,
            "text": _fmt(float(mask_probs[j])),
        }
        for j in range(steps)
    ]

    bars_top = top + steps * CELL + 10
    bar_height = 60
    columns = []
    for i in range(width):
        score = float(scores[i])
        columns.append(
            {
                "x": left + i * CELL + CELL // 2,
                "phoneme": int(phonemes[i]),
                "bar_x": left + i * CELL + 3,
                "bar_y": _fmt(bars_top + bar_height * (1.0 - score)),
                "bar_height": _fmt(bar_height * score),
                "bar_fill": "#c0392b" if decisions[i] else "#7f8c8d",
                "score": _fmt(score),
                "score_y": bars_top + bar_height + 12,
                "label": int(labels[i]) if labels is not None else None,
                "label_y": bars_top + bar_height + 26,
            }
        )

    return __HEATMAP_TEMPLATE__.render(
        title=f"alignment of {utt_id}",
        width=left + width * CELL + MARGIN,
        height=bars_top + bar_height + 40,
        margin=MARGIN,
        threshold=_fmt(threshold),
        cells=cells,
        mask_strip=mask_strip,
        size=CELL,
        strip_x=strip_x + CELL // 2,
        top=top,
        columns=columns,
        bar_width=CELL - 6,
        left=left,
        right=left + width * CELL,
        bars_top=bars_top,
        threshold_y=_fmt(bars_top + bar_height * (1.0 - threshold)),
        has_labels=labels is not None,
        labels_y=bars_top + bar_height + 26,
        digest=digest,
    )


def _series_path(steps: np.ndarray, values: np.ndarray, top: float) -> Dict:
    low, high = float(values.min()), float(values.max())
    span = high - low or 1.0
    first, last = float(steps[0]), float(steps[-1])
    step_span = last - first or 1.0
    points = []
    for step, value in zip(steps, values):
        x = MARGIN + PANEL_WIDTH * (float(step) - first) / step_span
        y = top + PANEL_HEIGHT * (1.0 - (float(value) - low) / span)
        points.append(f"{x:.1f} {y:.1f}")
    return {"path": "M " + " L ".join(points), "low": f"{low:.4g}", "high": f"{high:.4g}"}


def render_curves(
    title: Text, rows: Sequence[Dict], columns: Sequence[Text], digest: Text = ""
) -> Text:
    """one panel per logged column against the training step"""
    if not rows:
        raise exceptions.ContractError(f"no training rows to plot for {title}")
    steps = np.array([float(r["step"]) for r in rows])
    panels: List[Dict] = []
    for index, name in enumerate(c for c in columns if c in rows[0]):
        top = 30 + index * (PANEL_HEIGHT + 20)
        values = np.array([float(r[name]) for r in rows])
        panel = _series_path(steps, values, top)
        panel.update(name=name, top=top)
        panels.append(panel)

    return __CURVES_TEMPLATE__.render(
        title=title,
        width=PANEL_WIDTH + 2 * MARGIN,
        height=30 + len(panels) * (PANEL_HEIGHT + 20) + 20,
        margin=MARGIN,
        panels=panels,
        panel_width=PANEL_WIDTH,
        panel_height=PANEL_HEIGHT,
        first_step=int(steps[0]),
        last_step=int(steps[-1]),
        digest=digest,
    )
