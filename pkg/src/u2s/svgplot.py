"""Hand-rolled SVG figures; no plotting dependency, deterministic output."""

from __future__ import annotations

import numpy as np

PALETTE = ("#2ca02c", "#ff7f0e", "#d62728", "#1f77b4", "#9467bd", "#8c564b")

_WIDTH = 640
_HEIGHT = 480
_MARGIN_L = 70
_MARGIN_R = 150
_MARGIN_T = 50
_MARGIN_B = 60


def _escape(text: str) -> str:
    return (
        text.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;").replace('"', "&quot;")
    )


def _document(body: list[str], width: int = _WIDTH, height: int = _HEIGHT) -> str:
    head = (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">'
    )
    return "\n".join([head, '<rect width="100%" height="100%" fill="#ffffff"/>', *body, "</svg>"]) + "\n"


def _axes(title: str, x_label: str, y_label: str, width: int = _WIDTH, height: int = _HEIGHT) -> list[str]:
    left, right = _MARGIN_L, width - _MARGIN_R
    top, bottom = _MARGIN_T, height - _MARGIN_B
    lines = [
        f'<text x="{width / 2:.1f}" y="24" text-anchor="middle" font-size="16" '
        f'font-family="Helvetica">{_escape(title)}</text>',
        f'<line x1="{left}" y1="{bottom}" x2="{right}" y2="{bottom}" stroke="#000" stroke-width="1"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{bottom}" stroke="#000" stroke-width="1"/>',
        f'<text x="{(left + right) / 2:.1f}" y="{height - 18}" text-anchor="middle" font-size="12" '
        f'font-family="Helvetica">{_escape(x_label)}</text>',
        f'<text x="18" y="{(top + bottom) / 2:.1f}" text-anchor="middle" font-size="12" '
        f'font-family="Helvetica" transform="rotate(-90 18 {(top + bottom) / 2:.1f})">{_escape(y_label)}</text>',
    ]
    for i in range(6):
        frac = i / 5
        x = left + frac * (right - left)
        y = bottom - frac * (bottom - top)
        lines.append(
            f'<text x="{x:.1f}" y="{bottom + 16}" text-anchor="middle" font-size="10" '
            f'font-family="Helvetica">{frac:.1f}</text>'
        )
        lines.append(
            f'<text x="{left - 8}" y="{y + 4:.1f}" text-anchor="end" font-size="10" '
            f'font-family="Helvetica">{frac:.1f}</text>'
        )
        lines.append(
            f'<line x1="{left}" y1="{y:.1f}" x2="{right}" y2="{y:.1f}" stroke="#e0e0e0" stroke-width="1"/>'
        )
    return lines


def scatter_svg(series: dict[str, list[tuple[float, float]]], title: str, x_label: str, y_label: str) -> str:
    """Unit-square scatter; one color per named series, legend on the right."""
    left, right = _MARGIN_L, _WIDTH - _MARGIN_R
    top, bottom = _MARGIN_T, _HEIGHT - _MARGIN_B
    body = _axes(title, x_label, y_label)
    for k, (name, points) in enumerate(series.items()):
        color = PALETTE[k % len(PALETTE)]
        for x, y in points:
            px = left + float(x) * (right - left)
            py = bottom - float(y) * (bottom - top)
            body.append(f'<circle cx="{px:.2f}" cy="{py:.2f}" r="4" fill="{color}" fill-opacity="0.8"/>')
        ly = top + 18 * k
        body.append(f'<circle cx="{right + 16}" cy="{ly}" r="4" fill="{color}"/>')
        body.append(
            f'<text x="{right + 26}" y="{ly + 4}" font-size="11" font-family="Helvetica">{_escape(name)}</text>'
        )
    return _document(body)


def histogram_svg(bin_edges, counts, title: str, x_label: str) -> str:
    """Bar chart over [0, 1]-style bins."""
    edges = np.asarray(bin_edges, dtype=float)
    counts = np.asarray(counts)
    left, right = _MARGIN_L, _WIDTH - _MARGIN_R
    top, bottom = _MARGIN_T, _HEIGHT - _MARGIN_B
    peak = max(int(counts.max()), 1)
    body = _axes(title, x_label, "count")
    span = edges[-1] - edges[0]
    for i, count in enumerate(counts):
        x0 = left + (edges[i] - edges[0]) / span * (right - left)
        x1 = left + (edges[i + 1] - edges[0]) / span * (right - left)
        h = (int(count) / peak) * (bottom - top)
        body.append(
            f'<rect x="{x0:.2f}" y="{bottom - h:.2f}" width="{x1 - x0:.2f}" height="{h:.2f}" '
            f'fill="#1f77b4" stroke="#ffffff" stroke-width="0.5"/>'
        )
    body.append(
        f'<text x="{left - 8}" y="{top + 4}" text-anchor="end" font-size="10" '
        f'font-family="Helvetica">{peak}</text>'
    )
    return _document(body)


def matrix_svg(matrix, labels, title: str) -> str:
    """Grayscale grid of values in [0, 1]; dark means similar."""
    m = np.asarray(matrix, dtype=float)
    n = m.shape[0]
    cell = max(12, min(40, 360 // max(n, 1)))
    pad_l, pad_t = 110, 70
    width = pad_l + n * cell + 40
    height = pad_t + n * cell + 40
    body = [
        f'<text x="{width / 2:.1f}" y="24" text-anchor="middle" font-size="16" '
        f'font-family="Helvetica">{_escape(title)}</text>'
    ]
    for i in range(n):
        for j in range(n):
            v = min(max(float(m[i, j]), 0.0), 1.0)
            gray = int(round(255 * (1.0 - v)))
            body.append(
                f'<rect x="{pad_l + j * cell}" y="{pad_t + i * cell}" width="{cell}" height="{cell}" '
                f'fill="rgb({gray},{gray},{gray})" stroke="#cccccc" stroke-width="0.5"/>'
            )
    for i, name in enumerate(labels):
        y = pad_t + i * cell + cell / 2 + 4
        body.append(
            f'<text x="{pad_l - 6}" y="{y:.1f}" text-anchor="end" font-size="9" '
            f'font-family="Helvetica">{_escape(str(name))}</text>'
        )
        x = pad_l + i * cell + cell / 2
        body.append(
            f'<text x="{x:.1f}" y="{pad_t - 6}" text-anchor="start" font-size="9" font-family="Helvetica" '
            f'transform="rotate(-60 {x:.1f} {pad_t - 6})">{_escape(str(name))}</text>'
        )
    return _document(body, width=width, height=height)


def heatmap_grid_svg(panels: list[tuple[str, np.ndarray]], title: str, cols: int = 4) -> str:
    """Grid of small heatmaps; values are used as-is on a [0, 1] gray scale."""
    if not panels:
        return _document([f'<text x="20" y="30" font-size="14">{_escape(title)} (empty)</text>'])
    cell = 18
    rows_h = max(p[1].shape[0] for p in panels)
    cols_w = max(p[1].shape[1] for p in panels)
    panel_w = cols_w * cell + 16
    panel_h = rows_h * cell + 34
    n_cols = min(cols, len(panels))
    n_rows = (len(panels) + n_cols - 1) // n_cols
    width = 20 + n_cols * panel_w
    height = 50 + n_rows * panel_h
    body = [
        f'<text x="{width / 2:.1f}" y="24" text-anchor="middle" font-size="16" '
        f'font-family="Helvetica">{_escape(title)}</text>'
    ]
    for idx, (caption, grid) in enumerate(panels):
        gx = 20 + (idx % n_cols) * panel_w
        gy = 50 + (idx // n_cols) * panel_h
        body.append(
            f'<text x="{gx}" y="{gy - 4}" font-size="10" font-family="Helvetica">{_escape(caption)}</text>'
        )
        g = np.asarray(grid, dtype=float)
        for r in range(g.shape[0]):
            for c in range(g.shape[1]):
                v = min(max(float(g[r, c]), 0.0), 1.0)
                gray = int(round(255 * (1.0 - v)))
                body.append(
                    f'<rect x="{gx + c * cell}" y="{gy + r * cell}" width="{cell}" height="{cell}" '
                    f'fill="rgb({gray},{gray},{gray})" stroke="#dddddd" stroke-width="0.5"/>'
                )
    return _document(body, width=width, height=height)
