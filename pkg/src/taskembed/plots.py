"""Static SVG scatter for 2-D projections (no plotting dependency)."""

from __future__ import annotations

from html import escape

PALETTE = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")


def scatter_svg(rows, width: int = 640, height: int = 480, margin: int = 40) -> str:
    """rows: dicts with x, y, type and task_id; one colour per type."""
    if not rows:
        raise ValueError("nothing to plot")
    xs = [r["x"] for r in rows]
    ys = [r["y"] for r in rows]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    sx = (width - 2 * margin - 140) / ((x1 - x0) or 1.0)
    sy = (height - 2 * margin) / ((y1 - y0) or 1.0)
    types = sorted({r["type"] for r in rows})
    colour = {t: PALETTE[i % len(PALETTE)] for i, t in enumerate(types)}
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
           f'<rect width="{width}" height="{height}" fill="white"/>']
    for r in rows:
        cx = margin + (r["x"] - x0) * sx
        cy = height - margin - (r["y"] - y0) * sy
        out.append(f'<circle cx="{cx:.2f}" cy="{cy:.2f}" r="4" fill="{colour[r["type"]]}">'
                   f'<title>{escape(str(r["task_id"]))}</title></circle>')
    for i, t in enumerate(types):
        y = margin + 18 * i
        out.append(f'<rect x="{width - 150}" y="{y - 9}" width="10" height="10" fill="{colour[t]}"/>')
        out.append(f'<text x="{width - 135}" y="{y}" font-size="11" font-family="sans-serif">'
                   f'{escape(t)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_pca_svg(path, rows) -> None:
    with open(path, "w") as fh:
        fh.write(scatter_svg(rows))
