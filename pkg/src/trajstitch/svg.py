"""Standalone SVG drawings of a maze with trajectory polylines."""

from __future__ import annotations

from xml.sax.saxutils import escape

import numpy as np

from .maze import MazeSpec

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf")


def maze_svg(spec: MazeSpec, polylines=(), px: int = 24, title: str = "", markers=()) -> str:
    """Walls as grey squares; each polyline is a sequence of world-unit states.

    ``markers`` is a list of ``(state, color)`` pairs drawn as dots (e.g. start and goal).
    Output is deterministic text so identical inputs give identical files.
    """
    cs = spec.cell_size
    W, H = spec.width * px, spec.height * px

    def xy(p):
        # world y grows upwards, SVG y grows downwards
        return p[0] / cs * px, H - p[1] / cs * px

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
        f"<title>{escape(title)}</title>",
        f'<rect width="{W}" height="{H}" fill="white"/>',
    ]
    for y, x in np.argwhere(spec.walls):
        out.append(f'<rect x="{x * px}" y="{H - (y + 1) * px}" width="{px}" height="{px}" fill="#777"/>')
    for j, line in enumerate(polylines):
        pts = np.asarray(line, dtype=np.float64).reshape(-1, 2)
        if len(pts) == 0:
            continue
        coords = " ".join(f"{a:.2f},{b:.2f}" for a, b in map(xy, pts))
        color = PALETTE[j % len(PALETTE)]
        out.append(f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="1.5" stroke-opacity="0.8"/>')
    for state, color in markers:
        a, b = xy(np.asarray(state, dtype=np.float64))
        out.append(f'<circle cx="{a:.2f}" cy="{b:.2f}" r="{px / 4:.1f}" fill="{color}"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_svg(path, text: str) -> None:
    with open(path, "w") as fh:
        fh.write(text)
