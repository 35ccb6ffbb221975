"""Rendering of evaluation reports: CSV metric tables and static SVG
precision-recall plots. All output is plain deterministic text so identical
reports always serialize to identical bytes."""
from __future__ import annotations

from pathlib import Path

from .metrics import EvalReport


def write_report(report: EvalReport, path: str | Path) -> None:
    Path(path).write_text(report.to_json(), encoding="utf-8")


def load_report(path: str | Path) -> EvalReport:
    return EvalReport.from_json(Path(path).read_text(encoding="utf-8"))


def metrics_csv(report: EvalReport) -> str:
    """Flat split,metric,value table; tau-sweep rows carry the threshold in
    the metric name."""
    lines = ["split,metric,value"]
    for split in sorted(report.splits):
        for metric in sorted(report.splits[split]):
            value = report.splits[split][metric]
            lines.append(f"{split},{metric},{'' if value is None else value}")
    for tau in sorted(report.tau_sweep):
        for split in sorted(report.tau_sweep[tau]):
            for metric in sorted(report.tau_sweep[tau][split]):
                value = report.tau_sweep[tau][split][metric]
                lines.append(f"{split},{metric}[tau={tau}],{'' if value is None else value}")
    return "\n".join(lines) + "\n"


def write_csv(report: EvalReport, path: str | Path) -> None:
    Path(path).write_text(metrics_csv(report), encoding="utf-8")


_W, _H = 480, 360
_ML, _MR, _MT, _MB = 56, 16, 16, 44  # plot margins


def _px(recall: float, precision: float) -> tuple[float, float]:
    x = _ML + recall * (_W - _ML - _MR)
    y = _H - _MB - precision * (_H - _MT - _MB)
    return x, y


def pr_curve_svg(curve_doc: dict, title: str) -> str:
    """Hand-rolled SVG of one precision-recall curve (no plotting library, so
    output bytes depend on nothing but the curve itself)."""
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
        f'viewBox="0 0 {_W} {_H}">',
        f'<rect width="{_W}" height="{_H}" fill="white"/>',
    ]
    x0, y0 = _px(0.0, 0.0)
    x1, y1 = _px(1.0, 1.0)
    parts.append(
        f'<line x1="{x0:.1f}" y1="{y0:.1f}" x2="{x1:.1f}" y2="{y0:.1f}" stroke="black"/>'
    )
    parts.append(
        f'<line x1="{x0:.1f}" y1="{y0:.1f}" x2="{x0:.1f}" y2="{y1:.1f}" stroke="black"/>'
    )
    for k in range(6):
        t = k / 5
        tx, _ = _px(t, 0.0)
        _, ty = _px(0.0, t)
        parts.append(
            f'<text x="{tx:.1f}" y="{y0 + 16:.1f}" font-size="10" text-anchor="middle" '
            f'font-family="monospace">{t:.1f}</text>'
        )
        parts.append(
            f'<text x="{x0 - 6:.1f}" y="{ty + 3:.1f}" font-size="10" text-anchor="end" '
            f'font-family="monospace">{t:.1f}</text>'
        )
    parts.append(
        f'<text x="{(x0 + x1) / 2:.1f}" y="{_H - 8}" font-size="11" text-anchor="middle" '
        f'font-family="monospace">recall</text>'
    )
    parts.append(
        f'<text x="12" y="{(y0 + y1) / 2:.1f}" font-size="11" text-anchor="middle" '
        f'font-family="monospace" transform="rotate(-90 12 {(y0 + y1) / 2:.1f})">precision</text>'
    )
    parts.append(
        f'<text x="{(x0 + x1) / 2:.1f}" y="{_MT - 2}" font-size="11" text-anchor="middle" '
        f'font-family="monospace">{title}</text>'
    )
    points = curve_doc.get("points", [])
    if points:
        coords = " ".join(
            "{:.4f},{:.4f}".format(*_px(r, p)) for _, r, p in points
        )
        parts.append(
            f'<polyline points="{coords}" fill="none" stroke="steelblue" stroke-width="1.5"/>'
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def write_pr_curve_svgs(report: EvalReport, out_dir: str | Path) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for split in sorted(report.pr_curves):
        for name in sorted(report.pr_curves[split]):
            path = out_dir / f"pr_{split}_{name}.svg"
            path.write_text(pr_curve_svg(report.pr_curves[split][name], f"{split} / {name}"), encoding="utf-8")
            written.append(path)
    return written
