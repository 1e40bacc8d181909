"""Learning-curve SVGs and cross-run comparison tables from training logs."""
import csv
import datetime
import logging
import math
from pathlib import Path

from .trainer import CSV_HEADER, MODES

log = logging.getLogger(__name__)

SERIES = (("seg", ("seg1", "seg2")), ("adv", ("adv1", "adv2")), ("d", ("d1", "d2")))
COLORS = {"seg1": "#1f77b4", "seg2": "#aec7e8", "adv1": "#d62728", "adv2": "#ff9896",
          "d1": "#2ca02c", "d2": "#98df8a"}


def read_log(path):
    """Rows of a training log as dicts of floats (missing fields are None).

    Malformed rows are skipped with a warning.
    """
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return rows
        if tuple(header) != CSV_HEADER:
            log.warning("%s: unexpected header %s", path, header)
        for lineno, raw in enumerate(reader, start=2):
            if len(raw) != len(CSV_HEADER):
                log.warning("%s:%d: expected %d fields, got %d; skipped",
                            path, lineno, len(CSV_HEADER), len(raw))
                continue
            try:
                row = {k: (float(v) if v.strip() else None) for k, v in zip(CSV_HEADER, raw)}
            except ValueError:
                log.warning("%s:%d: unparsable value; skipped", path, lineno)
                continue
            if any(v is not None and not math.isfinite(v) for v in row.values()):
                log.warning("%s:%d: non-finite value; skipped", path, lineno)
                continue
            rows.append(row)
    return rows


def _polyline(xs, ys, x0, y0, w, h, lo, hi, xmax):
    pts = []
    for x, y in zip(xs, ys):
        px = x0 + (w * x / xmax if xmax else 0.0)
        py = y0 + h - (h * (y - lo) / (hi - lo) if hi > lo else h / 2)
        pts.append(f"{px:.2f},{py:.2f}")
    return " ".join(pts)


def curves_svg(rows, title="", deterministic=False):
    """One panel per loss family; each curve is scaled to its panel's range."""
    width, panel_h, margin = 640, 160, 50
    panels = [(name, [c for c in cols if any(r[c] is not None for r in rows)]) for name, cols in SERIES]
    panels = [p for p in panels if p[1]]
    height = margin + len(panels) * (panel_h + margin)
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'font-family="sans-serif" font-size="11">']
    if not deterministic:
        out.append(f"<!-- generated {datetime.datetime.now().isoformat(timespec='seconds')} -->")
    out.append(f'<text x="{margin}" y="20" font-size="14">{title}</text>')
    xmax = max((r["step"] for r in rows), default=0.0)
    plot_w = width - 2 * margin
    for k, (name, cols) in enumerate(panels):
        y0 = margin + k * (panel_h + margin)
        vals = [r[c] for r in rows for c in cols if r[c] is not None]
        lo, hi = min(vals), max(vals)
        out.append(f'<rect x="{margin}" y="{y0}" width="{plot_w}" height="{panel_h}" '
                   f'fill="none" stroke="#888"/>')
        out.append(f'<text x="{margin}" y="{y0 - 6}">{name} loss</text>')
        out.append(f'<text x="4" y="{y0 + 10}">{hi:.4g}</text>')
        out.append(f'<text x="4" y="{y0 + panel_h}">{lo:.4g}</text>')
        for j, c in enumerate(cols):
            pts = [(r["step"], r[c]) for r in rows if r[c] is not None]
            line = _polyline([p[0] for p in pts], [p[1] for p in pts], margin, y0, plot_w, panel_h,
                             lo, hi, xmax)
            out.append(f'<polyline fill="none" stroke="{COLORS[c]}" stroke-width="1" points="{line}"/>')
            out.append(f'<text x="{width - margin + 4}" y="{y0 + 12 + 12 * j}" '
                       f'fill="{COLORS[c]}">{c}</text>')
    out.append(f'<text x="{margin}" y="{height - 10}">step 0 .. {int(xmax)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def read_manifest(path):
    out = {}
    if Path(path).exists():
        for line in Path(path).read_text().splitlines():
            key, sep, val = line.partition("=")
            if sep:
                out[key.strip()] = val.strip()
    return out


def read_report_miou(path):
    if not Path(path).exists():
        return None
    for line in Path(path).read_text().splitlines():
        key, _, val = line.partition(",")
        if key == "miou":
            return float(val) if val.strip() else None
    return None


def _tail_mean(rows, col, frac=0.1):
    vals = [r[col] for r in rows if r[col] is not None]
    if not vals:
        return None
    tail = vals[-max(1, int(len(vals) * frac)):]
    return sum(tail) / len(tail)


def resolve_log(path):
    path = Path(path)
    return path / "train_log.csv" if path.is_dir() else path


def build_report(log_paths, out_dir, deterministic=False):
    """Write one SVG per log, ``summary.csv`` (one row per run) and
    ``comparison.csv`` (mean mIoU per adaptation mode)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    summary = []
    for i, lp in enumerate(log_paths):
        lp = resolve_log(lp)
        rows = read_log(lp)
        run_dir = lp.parent
        manifest = read_manifest(run_dir / "manifest.txt")
        name = run_dir.name or f"run{i}"
        if rows:
            svg = curves_svg(rows, title=f"{name} ({manifest.get('mode', '?')})",
                             deterministic=deterministic)
            (out_dir / f"{i:02d}_{name}.svg").write_text(svg)
        summary.append({
            "run": name,
            "mode": manifest.get("mode", ""),
            "gan": manifest.get("gan", ""),
            "lambda_adv": manifest.get("lambda_adv", ""),
            "steps": len(rows),
            "seg1": _tail_mean(rows, "seg1"),
            "adv1": _tail_mean(rows, "adv1"),
            "d1": _tail_mean(rows, "d1"),
            "miou": read_report_miou(run_dir / "report.csv"),
        })
    cols = ["run", "mode", "gan", "lambda_adv", "steps", "seg1", "adv1", "d1", "miou"]
    with open(out_dir / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for row in summary:
            w.writerow(["" if row[c] is None else (f"{row[c]:.6g}" if isinstance(row[c], float) else row[c])
                        for c in cols])

    modes = [m for m in MODES if any(r["mode"] == m for r in summary)]
    with open(out_dir / "comparison.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(modes)
        cells = []
        for m in modes:
            vals = [r["miou"] for r in summary if r["mode"] == m and r["miou"] is not None]
            cells.append(f"{sum(vals) / len(vals):.6f}" if vals else "")
        w.writerow(cells)
    return summary
