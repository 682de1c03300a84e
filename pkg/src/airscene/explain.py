"""Attention-based explanations of model behavior.

Two complementary views over the captured aircraft-stage attention:

* aircraft-following (Lagrangian): pick one aircraft as the query and read
  its attention row, i.e. how much weight its prediction places on every
  aircraft in the scene (itself included);
* region-fixed (Eulerian): pick a box in the horizontal plane and average
  the rows of whichever aircraft currently sit inside it ("row" mode), or
  ask how much everyone attends into the region ("column" mode).

Scores can be reduced over the attention stack three ways: mean over the
heads of the last aircraft layer (default), mean over all aircraft layers
and heads, or kept per head.  Frames serialize to a stable JSON layout and
render to deterministic SVG with a blue (weak) to yellow (strong) ramp.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import DatasetStats, SceneWindow, normalize
from .model import ModelConfig, SceneOutput, forward
from .numerics import Var

log = logging.getLogger(__name__)

REDUCTIONS = ("last-layer-mean", "mean", "per-head")

COLOR_WEAK = "#2c4fa3"      # blue: lowest score in frame
COLOR_STRONG = "#ffd83d"    # yellow: highest score in frame


@dataclass
class ExplanationFrame:
    """Attention scores over the aircraft of one scene at one time."""

    t0: float
    scores: dict[str, float]

    def ranked(self) -> list[tuple[str, float]]:
        """(id, score) pairs, strongest first, ties broken by id."""
        return sorted(self.scores.items(), key=lambda kv: (-kv[1], kv[0]))


@dataclass
class AttentionTimeSeries:
    query_id: str
    frames: list[ExplanationFrame] = field(default_factory=list)
    skipped: list[tuple[float, str]] = field(default_factory=list)


@dataclass(frozen=True)
class Region:
    """Axis-aligned box in the horizontal plane, km."""

    x_min: float
    x_max: float
    y_min: float
    y_max: float

    def __post_init__(self):
        if self.x_min >= self.x_max or self.y_min >= self.y_max:
            raise ValueError(f"degenerate region {self}")

    def contains(self, xy: np.ndarray) -> bool:
        return bool(
            self.x_min <= xy[0] <= self.x_max and self.y_min <= xy[1] <= self.y_max
        )


# ---------------------------------------------------------------------------
# score extraction
# ---------------------------------------------------------------------------

def _stacked_aircraft_weights(output: SceneOutput) -> np.ndarray:
    """(n_layers, n_heads, N, N) aircraft-stage attention."""
    records = output.aircraft_records()
    if not records:
        raise ValueError("output carries no aircraft attention records")
    return np.stack([r.weights for r in records])


def _reduce(weights: np.ndarray, reduction: str) -> np.ndarray:
    """Collapse (n_layers, n_heads, N, N) to (N, N) for the mean reductions."""
    if reduction == "last-layer-mean":
        return weights[-1].mean(axis=0)
    if reduction == "mean":
        return weights.mean(axis=(0, 1))
    raise ValueError(f"reduction must be one of {REDUCTIONS}, got {reduction!r}")


def _frame_from_row(scene: SceneWindow, row: np.ndarray) -> dict[str, float]:
    return {
        sid: float(row[i])
        for i, (sid, ok) in enumerate(zip(scene.ids, scene.valid))
        if ok
    }


def lagrangian_scores(
    scene: SceneWindow,
    output: SceneOutput,
    query_id: str,
    reduction: str = "last-layer-mean",
):
    """Attention received by each aircraft from one query aircraft.

    For the two mean reductions returns an :class:`ExplanationFrame`; for
    ``"per-head"`` returns a dict mapping ``"layer{l}.head{h}"`` to one
    frame per head of every aircraft layer.
    """
    qi = scene.index_of(query_id)
    if qi is None:
        raise KeyError(f"query {query_id!r} is not a valid aircraft of this scene")
    stacked = _stacked_aircraft_weights(output)
    if reduction == "per-head":
        frames = {}
        for l in range(stacked.shape[0]):
            for h in range(stacked.shape[1]):
                frames[f"layer{l}.head{h}"] = ExplanationFrame(
                    t0=scene.t0, scores=_frame_from_row(scene, stacked[l, h, qi])
                )
        return frames
    row = _reduce(stacked, reduction)[qi]
    return ExplanationFrame(t0=scene.t0, scores=_frame_from_row(scene, row))


def attention_timeseries(
    scenes: Sequence[SceneWindow],
    params: dict[str, Var],
    model_cfg: ModelConfig,
    stats: DatasetStats,
    query_id: str,
    reduction: str = "last-layer-mean",
) -> AttentionTimeSeries:
    """Follow one aircraft's attention row across raw scenes, in t0 order.

    Scenes that do not contain the query are skipped with a notice rather
    than failing the whole series.
    """
    if reduction == "per-head":
        raise ValueError("attention_timeseries supports the mean reductions only")
    series = AttentionTimeSeries(query_id=query_id)
    for scene in sorted(scenes, key=lambda s: s.t0):
        if scene.index_of(query_id) is None:
            series.skipped.append((scene.t0, f"{query_id} not in scene"))
            log.info("t0=%s: skipped, %s not in scene", scene.t0, query_id)
            continue
        output = forward(normalize(scene, stats), params, model_cfg)
        series.frames.append(lagrangian_scores(scene, output, query_id, reduction))
    if not series.frames:
        raise ValueError(
            f"query {query_id!r} appears in none of the {len(list(scenes))} scenes"
        )
    return series


def region_members(scene: SceneWindow, region: Region) -> list[str]:
    """Valid aircraft whose current position lies inside the region."""
    current = scene.current_positions()
    return [
        sid
        for i, (sid, ok) in enumerate(zip(scene.ids, scene.valid))
        if ok and region.contains(current[i, :2])
    ]


def eulerian_scores(
    scene: SceneWindow,
    output: SceneOutput,
    region: Region,
    mode: str = "row",
    reduction: str = "last-layer-mean",
) -> ExplanationFrame:
    """Attention scores for a fixed spatial region instead of one aircraft.

    ``"row"`` mode averages the attention rows of the aircraft currently in
    the region (their mean is still a distribution, so no renormalization
    is applied; a single-member region reproduces that member's scores
    exactly).  ``"column"`` mode averages the attention each aircraft pays
    into the region and renormalizes the result to sum to one.
    """
    members = region_members(scene, region)
    if not members:
        raise ValueError(f"no valid aircraft currently inside {region}")
    if mode not in ("row", "column"):
        raise ValueError(f"mode must be 'row' or 'column', got {mode!r}")
    reduced = _reduce(_stacked_aircraft_weights(output), reduction)
    idx = [scene.index_of(m) for m in members]
    if mode == "row":
        combined = reduced[idx, :].mean(axis=0)
    else:
        combined = reduced[:, idx].mean(axis=1)
        total = combined[scene.valid].sum()
        combined = combined / total
    return ExplanationFrame(t0=scene.t0, scores=_frame_from_row(scene, combined))


def region_timeseries(
    scenes: Sequence[SceneWindow],
    params: dict[str, Var],
    model_cfg: ModelConfig,
    stats: DatasetStats,
    region: Region,
    mode: str = "row",
    reduction: str = "last-layer-mean",
) -> AttentionTimeSeries:
    """Region-fixed counterpart of :func:`attention_timeseries`.

    Scenes where the region is currently empty are skipped with a notice;
    the series query id encodes the region corners.
    """
    if reduction == "per-head":
        raise ValueError("region_timeseries supports the mean reductions only")
    if mode not in ("row", "column"):
        raise ValueError(f"mode must be 'row' or 'column', got {mode!r}")
    label = (f"region({region.x_min:g},{region.y_min:g})-"
             f"({region.x_max:g},{region.y_max:g})")
    series = AttentionTimeSeries(query_id=label)
    for scene in sorted(scenes, key=lambda s: s.t0):
        if not region_members(scene, region):
            series.skipped.append((scene.t0, "region is empty"))
            log.info("t0=%s: skipped, region is empty", scene.t0)
            continue
        output = forward(normalize(scene, stats), params, model_cfg)
        series.frames.append(eulerian_scores(scene, output, region, mode, reduction))
    if not series.frames:
        raise ValueError(
            f"no aircraft ever inside {label} across {len(list(scenes))} scenes"
        )
    return series


# ---------------------------------------------------------------------------
# frames file
# ---------------------------------------------------------------------------

def export_frames(series: AttentionTimeSeries, path) -> None:
    """Write {query_id, frames:[{t0, scores:{id: weight}}]} deterministically."""
    payload = {
        "query_id": series.query_id,
        "frames": [{"t0": f.t0, "scores": f.scores} for f in series.frames],
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True))


def load_frames(path) -> AttentionTimeSeries:
    raw = json.loads(Path(path).read_text())
    return AttentionTimeSeries(
        query_id=raw["query_id"],
        frames=[
            ExplanationFrame(t0=float(f["t0"]),
                             scores={k: float(v) for k, v in f["scores"].items()})
            for f in raw["frames"]
        ],
    )


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

_SVG_W, _SVG_H = 720, 560
_PLOT_PAD = 48.0
_BAR_X, _BAR_W, _BAR_H = 648, 18, 380


def _hex_rgb(color: str) -> tuple[int, int, int]:
    return tuple(int(color[i:i + 2], 16) for i in (1, 3, 5))


def _ramp_color(t: float) -> str:
    """Linear weak->strong color interpolation, t in [0, 1]."""
    c0, c1 = _hex_rgb(COLOR_WEAK), _hex_rgb(COLOR_STRONG)
    rgb = tuple(int(round(a + t * (b - a))) for a, b in zip(c0, c1))
    return "#{:02x}{:02x}{:02x}".format(*rgb)


def _scale(lo: float, hi: float, pad: float = 2.0) -> tuple[float, float]:
    if hi - lo < 1e-9:
        lo, hi = lo - 1.0, hi + 1.0
    return lo - pad, hi + pad


def render_scene(
    scene: SceneWindow,
    frame: ExplanationFrame,
    query_id: str | None = None,
) -> str:
    """Draw one scene as standalone SVG with attention-colored markers.

    Scores are min-max scaled within the frame; the query aircraft (if any)
    is a square, all others circles, each with its recent track as a faded
    polyline.  A colorbar maps the ramp back to raw scores and the header
    carries the scene time.
    """
    if scene.normalized:
        raise ValueError("render expects a raw scene (kilometers)")
    missing = [sid for sid in frame.scores if scene.index_of(sid) is None]
    if missing:
        raise ValueError(f"frame scores name aircraft not in scene: {missing}")

    shown = [i for i, (sid, ok) in enumerate(zip(scene.ids, scene.valid))
             if ok and sid in frame.scores]
    pts = scene.past[shown]                       # (n, T, 3)
    x_lo, x_hi = _scale(float(pts[:, :, 0].min()), float(pts[:, :, 0].max()))
    y_lo, y_hi = _scale(float(pts[:, :, 1].min()), float(pts[:, :, 1].max()))
    plot_w = _BAR_X - 2 * _PLOT_PAD
    plot_h = _SVG_H - 2 * _PLOT_PAD

    def to_px(x: float, y: float) -> tuple[float, float]:
        px = _PLOT_PAD + (x - x_lo) / (x_hi - x_lo) * plot_w
        py = _SVG_H - _PLOT_PAD - (y - y_lo) / (y_hi - y_lo) * plot_h
        return px, py

    values = [frame.scores[scene.ids[i]] for i in shown]
    s_lo, s_hi = min(values), max(values)

    def ramp_t(s: float) -> float:
        if s_hi - s_lo < 1e-15:
            return 0.5
        return (s - s_lo) / (s_hi - s_lo)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_SVG_W}" height="{_SVG_H}" '
        f'viewBox="0 0 {_SVG_W} {_SVG_H}">',
        f'<rect width="{_SVG_W}" height="{_SVG_H}" fill="#ffffff"/>',
        f'<text x="{_PLOT_PAD:.1f}" y="28" font-family="monospace" font-size="15" '
        f'fill="#222222">t0 = {frame.t0:.1f} s</text>',
    ]
    for i in sorted(shown, key=lambda j: scene.ids[j]):
        sid = scene.ids[i]
        color = _ramp_color(ramp_t(frame.scores[sid]))
        trail = " ".join(
            "{:.2f},{:.2f}".format(*to_px(p[0], p[1])) for p in scene.past[i]
        )
        parts.append(
            f'<polyline points="{trail}" fill="none" stroke="{color}" '
            f'stroke-width="1.2" opacity="0.45"/>'
        )
        cx, cy = to_px(scene.past[i, -1, 0], scene.past[i, -1, 1])
        if sid == query_id:
            parts.append(
                f'<rect class="aircraft query" x="{cx - 7:.2f}" y="{cy - 7:.2f}" '
                f'width="14" height="14" fill="{color}" stroke="#222222" '
                f'stroke-width="1.5"/>'
            )
        else:
            parts.append(
                f'<circle class="aircraft" cx="{cx:.2f}" cy="{cy:.2f}" r="7" '
                f'fill="{color}" stroke="#222222" stroke-width="1"/>'
            )
        parts.append(
            f'<text x="{cx + 10:.2f}" y="{cy - 8:.2f}" font-family="monospace" '
            f'font-size="11" fill="#333333">{sid}</text>'
        )

    # colorbar: stacked segments from strong (top) to weak (bottom)
    n_seg = 64
    seg_h = _BAR_H / n_seg
    bar_y = (_SVG_H - _BAR_H) / 2
    for s in range(n_seg):
        t = 1.0 - (s + 0.5) / n_seg
        parts.append(
            f'<rect x="{_BAR_X}" y="{bar_y + s * seg_h:.2f}" width="{_BAR_W}" '
            f'height="{seg_h + 0.5:.2f}" fill="{_ramp_color(t)}"/>'
        )
    parts.append(
        f'<text x="{_BAR_X - 4}" y="{bar_y + 4:.2f}" text-anchor="end" '
        f'font-family="monospace" font-size="11" fill="#222222">{s_hi:.3f}</text>'
    )
    parts.append(
        f'<text x="{_BAR_X - 4}" y="{bar_y + _BAR_H:.2f}" text-anchor="end" '
        f'font-family="monospace" font-size="11" fill="#222222">{s_lo:.3f}</text>'
    )
    parts.append("</svg>")
    return "\n".join(parts)
