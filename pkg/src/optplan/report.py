"""Render run ledgers into CSV tables and SVG plots.

All output is generated with fixed float formatting and no timestamps, so a
given ledger always renders to byte-identical artifacts.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

from .curvefit import CurveFamily, evaluate

CSV_COLUMNS = [
    "from",
    "to",
    "from_label",
    "to_label",
    "epochs_trained",
    "chosen_epoch",
    "value",
    "stop_reason",
    "checkpoint_ref",
]


def _label_map(events: list[dict]) -> dict[int, str]:
    labels: dict[int, str] = {}
    for rec in events:
        if rec["event"] == "transition_started":
            labels[int(rec["from"])] = rec.get("from_label", str(rec["from"]))
            labels[int(rec["to"])] = rec.get("to_label", str(rec["to"]))
    return labels


def stopped_records(events: list[dict]) -> list[dict]:
    return [rec["record"] for rec in events if rec["event"] == "transition_stopped"]


def transitions_csv(events: list[dict]) -> str:
    labels = _label_map(events)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for rec in stopped_records(events):
        writer.writerow(
            [
                rec["from"],
                rec["to"],
                labels.get(int(rec["from"]), str(rec["from"])),
                labels.get(int(rec["to"]), str(rec["to"])),
                rec["epochs_trained"],
                rec["chosen_epoch"],
                f"{rec['value']:.6f}",
                rec["stop_reason"],
                rec["checkpoint_ref"],
            ]
        )
    return buf.getvalue()


def _fmt(v: float) -> str:
    return f"{v:.2f}"


# --- fit overlays ---------------------------------------------------------


_PANEL_W, _PANEL_H = 240, 160
_MARGIN = 34
_COLS = 3


def fits_svg(events: list[dict]) -> str:
    """Small-multiple panels: observed metric trace, fitted curve, knee."""
    labels = _label_map(events)
    records = stopped_records(events)
    rows = (len(records) + _COLS - 1) // _COLS if records else 1
    width = _COLS * (_PANEL_W + _MARGIN) + _MARGIN
    height = rows * (_PANEL_H + _MARGIN + 18) + _MARGIN
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        '<style>text{font-family:monospace;font-size:10px}</style>',
        f'<rect width="{width}" height="{height}" fill="white"/>',
    ]
    for i, rec in enumerate(records):
        col, row = i % _COLS, i // _COLS
        x0 = _MARGIN + col * (_PANEL_W + _MARGIN)
        y0 = _MARGIN + row * (_PANEL_H + _MARGIN + 18)
        parts.extend(_fit_panel(rec, labels, x0, y0))
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _fit_panel(rec: dict, labels: dict[int, str], x0: int, y0: int) -> list[str]:
    trace = [(int(e), float(v)) for e, v in rec["metric_trace"]]
    xs = [e for e, _ in trace]
    ys = [v for _, v in trace]
    fit_doc = rec.get("fit")
    curve: list[tuple[float, float]] = []
    if fit_doc is not None:
        family = CurveFamily.from_tag(fit_doc["family"])
        alpha = fit_doc["alpha"]
        t_max = max(xs) if xs else 1
        steps = 100
        curve = [
            (t_max * k / steps, float(evaluate(family, alpha, t_max * k / steps)))
            for k in range(steps + 1)
        ]
    all_y = ys + [v for _, v in curve]
    lo = min(all_y) if all_y else 0.0
    hi = max(all_y) if all_y else 1.0
    if hi - lo < 1e-9:
        hi = lo + 1e-9
    pad = 0.08 * (hi - lo)
    lo, hi = lo - pad, hi + pad
    x_max = max(xs) if xs else 1

    def px(t: float) -> float:
        return x0 + _PANEL_W * (t / x_max if x_max else 0.0)

    def py(v: float) -> float:
        return y0 + _PANEL_H * (1.0 - (v - lo) / (hi - lo))

    out = [
        f'<rect x="{x0}" y="{y0}" width="{_PANEL_W}" height="{_PANEL_H}" '
        f'fill="none" stroke="#cccccc"/>'
    ]
    title = (
        f"{labels.get(int(rec['from']), rec['from'])} -> "
        f"{labels.get(int(rec['to']), rec['to'])}  "
        f"best={rec['chosen_epoch']} v={rec['value']:.4f}"
    )
    out.append(f'<text x="{x0}" y="{y0 - 6}">{title}</text>')
    if curve:
        pts = " ".join(f"{_fmt(px(t))},{_fmt(py(v))}" for t, v in curve)
        out.append(f'<polyline points="{pts}" fill="none" stroke="#1f77b4" stroke-width="1.5"/>')
    for e, v in trace:
        out.append(
            f'<circle cx="{_fmt(px(e))}" cy="{_fmt(py(v))}" r="1.8" fill="#333333"/>'
        )
    chosen = int(rec["chosen_epoch"])
    out.append(
        f'<line x1="{_fmt(px(chosen))}" y1="{y0}" x2="{_fmt(px(chosen))}" '
        f'y2="{y0 + _PANEL_H}" stroke="#d62728" stroke-dasharray="3,2"/>'
    )
    return out


# --- explored graph ---------------------------------------------------------


@dataclass(frozen=True)
class _Node:
    id: int
    label: str
    sampling: str | None
    clip_idx: int
    lr_idx: int


def _layout(events: list[dict]) -> dict[int, _Node]:
    nodes: dict[int, _Node] = {}
    for rec in events:
        if rec["event"] != "transition_started":
            continue
        hp = rec["hyperparams"]
        to_id = int(rec["to"])
        nodes.setdefault(
            to_id,
            _Node(to_id, rec.get("to_label", str(to_id)), hp["sampling"],
                  int(hp["clip_len_idx"]), int(hp["lr_idx"])),
        )
        from_id = int(rec["from"])
        if from_id not in nodes:
            nodes[from_id] = _Node(from_id, rec.get("from_label", str(from_id)), None, 0, 0)
    return nodes


def graph_svg(events: list[dict]) -> str:
    """Explored transitions in gray, the extracted path in red."""
    nodes = _layout(events)
    explored = [(r["record"]["from"], r["record"]["to"])
                for r in events if r["event"] == "transition_stopped"]
    path_edges: set[tuple[int, int]] = set()
    plan_doc = None
    for rec in events:
        if rec["event"] == "plan_extracted":
            plan_doc = rec["plan"]
    if plan_doc:
        p = [int(v) for v in plan_doc["path"]]
        path_edges = set(zip(p, p[1:]))

    strategies = sorted({n.sampling for n in nodes.values() if n.sampling})
    dx, dy, block_w = 120, 90, 140
    n_clip = 1 + max((n.clip_idx for n in nodes.values() if n.sampling), default=0)
    n_rate = 1 + max((n.lr_idx for n in nodes.values() if n.sampling), default=0)

    def pos(n: _Node) -> tuple[float, float]:
        if n.sampling is None:  # entry state on the left, vertically centered
            return 60.0, 60.0 + dy * (n_rate - 1) / 2.0
        block = strategies.index(n.sampling)
        x = 180.0 + block * (n_clip * dx + block_w) + n.clip_idx * dx
        y = 60.0 + n.lr_idx * dy
        return x, y

    width = int(180 + len(strategies) * (n_clip * dx + block_w) + 40)
    height = int(120 + (n_rate - 1) * dy + 60)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        '<style>text{font-family:monospace;font-size:11px}</style>',
        f'<rect width="{width}" height="{height}" fill="white"/>',
    ]
    for u, v in sorted(set(explored)):
        if u not in nodes or v not in nodes:
            continue
        x1, y1 = pos(nodes[u])
        x2, y2 = pos(nodes[v])
        on_path = (u, v) in path_edges
        color = "#d62728" if on_path else "#999999"
        width_attr = "2.5" if on_path else "1"
        cls = "path" if on_path else "explored"
        parts.append(
            f'<line class="{cls}" x1="{_fmt(x1)}" y1="{_fmt(y1)}" x2="{_fmt(x2)}" '
            f'y2="{_fmt(y2)}" stroke="{color}" stroke-width="{width_attr}"/>'
        )
    for n in sorted(nodes.values(), key=lambda n: n.id):
        x, y = pos(n)
        on_path = plan_doc is not None and n.id in set(plan_doc["path"])
        fill = "#ffd6d6" if on_path else "#eeeeee"
        parts.append(
            f'<circle cx="{_fmt(x)}" cy="{_fmt(y)}" r="17" fill="{fill}" stroke="#333333"/>'
        )
        parts.append(f'<text x="{_fmt(x + 20)}" y="{_fmt(y - 10)}">{n.label}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
