"""Static SVG renderings of feature maps and monthly curves.

The SVG text is assembled by hand with fixed number formatting, so identical
inputs always give byte-identical files.
"""

from __future__ import annotations

import csv
import math
from pathlib import Path

from .errors import ValidationError

WIDTH, HEIGHT = 640, 480
MARGIN = 48
LEGEND_W = 120

# sequential ramp (light yellow to dark purple)
RAMP = ["#fde725", "#7ad151", "#22a884", "#2a788e", "#414487", "#440154"]
CATEGORY_COLORS = {
    "Non-seasonal": "#d9d9d9",
    "Low": "#fee08b",
    "Medium": "#fc8d59",
    "High": "#d73027",
}
MAP_SKIP = {"lon", "lat", "season_rank"}
MONTHS = "JFMAMJJASOND"


def _f(v):
    return f"{v:.2f}"


def _esc(text):
    return (
        str(text).replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;").replace('"', "&quot;")
    )


def _hex(rgb):
    return "#" + "".join(f"{int(round(c)):02x}" for c in rgb)


def _ramp(t):
    t = min(max(t, 0.0), 1.0) * (len(RAMP) - 1)
    k = min(int(t), len(RAMP) - 2)
    u = t - k
    a = [int(RAMP[k][i : i + 2], 16) for i in (1, 3, 5)]
    b = [int(RAMP[k + 1][i : i + 2], 16) for i in (1, 3, 5)]
    return _hex([x + (y - x) * u for x, y in zip(a, b)])


def _read(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
        header = list(rows[0].keys()) if rows else []
    if not header:
        with open(path, encoding="utf-8") as fh:
            header = fh.readline().strip().split(",")
    return header, rows


def _to_float(v):
    try:
        x = float(v)
    except (TypeError, ValueError):
        return None
    return x if math.isfinite(x) else None


def _svg_open(width, height, title):
    return [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f"<title>{_esc(title)}</title>",
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="#ffffff"/>',
    ]


def map_columns(header):
    return [c for c in header if c not in MAP_SKIP]


def render_map(rows, column, title=None):
    """Scatter map with one marker per location coloured by ``column``."""
    locs = {}
    for r in rows:
        key = (r["lon"], r["lat"])
        rank = r.get("season_rank", "")
        if key not in locs or rank in ("", "1"):
            locs[key] = r
    points = [(float(k[0]), float(k[1]), r.get(column, "")) for k, r in locs.items()]
    points.sort(key=lambda p: (p[0], p[1]))

    numeric = [_to_float(v) for _, _, v in points]
    is_numeric = column != "category" and all(
        x is not None or v == "" for x, (_, _, v) in zip(numeric, points)
    ) and any(x is not None for x in numeric)

    plot_w = WIDTH - 2 * MARGIN - LEGEND_W
    plot_h = HEIGHT - 2 * MARGIN
    lons = [p[0] for p in points] or [0.0]
    lats = [p[1] for p in points] or [0.0]
    x0, x1 = min(lons), max(lons)
    y0, y1 = min(lats), max(lats)
    sx = plot_w / (x1 - x0) if x1 > x0 else 0.0
    sy = plot_h / (y1 - y0) if y1 > y0 else 0.0

    def px(lon, lat):
        x = MARGIN + ((lon - x0) * sx if sx else plot_w / 2)
        y = MARGIN + (plot_h - (lat - y0) * sy if sy else plot_h / 2)
        return x, y

    out = _svg_open(WIDTH, HEIGHT, title or column)
    out.append(
        f'<rect x="{MARGIN}" y="{MARGIN}" width="{plot_w}" height="{plot_h}" '
        'fill="none" stroke="#888888"/>'
    )
    out.append(f'<text x="{MARGIN}" y="{MARGIN - 16}" font-size="14">{_esc(title or column)}</text>')

    legend = []
    if is_numeric:
        vals = [x for x in numeric if x is not None]
        lo, hi = min(vals), max(vals)

        def color(v):
            x = _to_float(v)
            if x is None:
                return "#ffffff"
            return _ramp((x - lo) / (hi - lo) if hi > lo else 0.5)

        for k in range(5):
            v = lo + (hi - lo) * k / 4
            legend.append((_ramp(k / 4), f"{v:.3g}"))
    else:
        present = {v for _, _, v in points}
        levels = [c for c in CATEGORY_COLORS if c in present]
        levels += sorted(present - set(CATEGORY_COLORS))
        palette = {}
        for k, v in enumerate(levels):
            palette[v] = CATEGORY_COLORS.get(v, _ramp(k / max(len(levels) - 1, 1)))

        def color(v):
            return palette[v]

        legend = [(palette[v], v if v != "" else "(none)") for v in levels]

    for lon, lat, v in points:
        x, y = px(lon, lat)
        out.append(
            f'<circle class="marker" cx="{_f(x)}" cy="{_f(y)}" r="5" fill="{color(v)}" '
            f'stroke="#333333" stroke-width="0.5"><title>{_esc(v)}</title></circle>'
        )

    lx = WIDTH - MARGIN - LEGEND_W + 16
    out.append(f'<g class="legend"><text x="{lx}" y="{MARGIN}" font-size="12">{_esc(column)}</text>')
    for k, (c, label) in enumerate(legend):
        y = MARGIN + 16 + 18 * k
        out.append(f'<rect x="{lx}" y="{y}" width="12" height="12" fill="{c}" stroke="#333333" stroke-width="0.5"/>')
        out.append(f'<text x="{lx + 18}" y="{y + 10}" font-size="11">{_esc(label)}</text>')
    out.append("</g>")
    out.append("</svg>")
    return "\n".join(out) + "\n"


def render_curve(months, median, lo, hi, title, ylabel):
    """Twelve-month line with a shaded band between ``lo`` and ``hi``."""
    plot_w = WIDTH - 2 * MARGIN
    plot_h = HEIGHT - 2 * MARGIN
    top = max(max(hi), max(median))
    top = top * 1.1 if top > 0 else 1.0

    def px(m, v):
        return MARGIN + (m - 1) * plot_w / 11, MARGIN + plot_h - v / top * plot_h

    out = _svg_open(WIDTH, HEIGHT, title)
    out.append(f'<text x="{MARGIN}" y="{MARGIN - 16}" font-size="14">{_esc(title)}</text>')
    out.append(
        f'<rect x="{MARGIN}" y="{MARGIN}" width="{plot_w}" height="{plot_h}" fill="none" stroke="#888888"/>'
    )
    band = [px(m, v) for m, v in zip(months, hi)] + [px(m, v) for m, v in reversed(list(zip(months, lo)))]
    out.append(
        '<polygon class="band" points="'
        + " ".join(f"{_f(x)},{_f(y)}" for x, y in band)
        + '" fill="#9ecae1" fill-opacity="0.6" stroke="none"/>'
    )
    line = [px(m, v) for m, v in zip(months, median)]
    out.append(
        '<polyline class="median" points="'
        + " ".join(f"{_f(x)},{_f(y)}" for x, y in line)
        + '" fill="none" stroke="#08519c" stroke-width="2"/>'
    )
    for m in range(1, 13):
        x, _ = px(m, 0.0)
        out.append(
            f'<text x="{_f(x)}" y="{HEIGHT - MARGIN + 16}" font-size="11" text-anchor="middle">{MONTHS[m - 1]}</text>'
        )
    out.append(
        f'<text x="{MARGIN - 8}" y="{MARGIN}" font-size="11" text-anchor="end">{top:.3g}</text>'
    )
    out.append(f'<text x="{MARGIN - 8}" y="{MARGIN + plot_h}" font-size="11" text-anchor="end">0</text>')
    out.append(f'<text x="{WIDTH - MARGIN}" y="{MARGIN - 16}" font-size="11" text-anchor="end">{_esc(ylabel)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


CURVE_KINDS = {
    "mpi_median": ("mpi_median", "mpi_lo95", "mpi_hi95", "MPI"),
    "p_median": ("p_median", "p_lo95", "p_hi95", "proportion"),
}


def _safe(text):
    return "".join(ch if ch.isalnum() or ch in "-." else "_" for ch in text)


def render_file(path, outdir, columns=None):
    """Render a features, MPI or proportions CSV into SVG files; returns their paths."""
    header, rows = _read(path)
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    kind = next((k for k in CURVE_KINDS if k in header), None)
    if kind is not None:
        med_c, lo_c, hi_c, label = CURVE_KINDS[kind]
        groups = {}
        for r in rows:
            groups.setdefault((r["lon"], r["lat"]), {})[int(r["month"])] = r
        for k, ((lon, lat), by_month) in enumerate(sorted(groups.items(), key=lambda kv: (float(kv[0][0]), float(kv[0][1])))):
            if sorted(by_month) != list(range(1, 13)):
                raise ValidationError(f"{path}: location ({lon}, {lat}) lacks some months")
            ms = list(range(1, 13))
            svg = render_curve(
                ms,
                [float(by_month[m][med_c]) for m in ms],
                [float(by_month[m][lo_c]) for m in ms],
                [float(by_month[m][hi_c]) for m in ms],
                f"{label} at ({lon}, {lat})",
                label,
            )
            p = out / f"curve_{k:04d}.svg"
            p.write_text(svg, encoding="utf-8")
            written.append(p)
        return written

    if "lon" not in header or "lat" not in header:
        raise ValidationError(f"{path}: needs lon and lat columns")
    available = map_columns(header)
    wanted = list(columns) if columns else available
    unknown = [c for c in wanted if c not in available]
    if unknown:
        raise ValidationError(
            f"unknown column(s) {', '.join(unknown)}; available: {', '.join(available)}"
        )
    for c in wanted:
        p = out / f"map_{_safe(c)}.svg"
        p.write_text(render_map(rows, c), encoding="utf-8")
        written.append(p)
    return written
