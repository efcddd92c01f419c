"""Report emission: CSV tables, SVG charts, attribution dumps, manifests.

Charts are written as standalone SVG with the plotted values embedded in
machine-readable data-x / data-y attributes on each polyline, so tests and
downstream tooling can recover the numbers without a renderer.  All float
formatting goes through one helper to keep byte-identical output across
reruns of the same seed.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import struct
from xml.sax.saxutils import escape

import numpy as np
from PIL import Image

from .explain import top_fraction_mask


def fmt(v) -> str:
    """Deterministic short float rendering used in every emitted file."""
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return "nan"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return f"{float(v):.10g}"


def write_csv(path, header, rows) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(fmt(c) if not isinstance(c, str) else c for c in row))
    with open(path, "w", encoding="ascii", newline="") as fh:
        fh.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# concrete tables


def write_history_csv(history, path) -> None:
    rows = []
    for h in history:
        rows.append([h.epoch, h.lr, h.train_loss, h.val_loss, h.val_ap_ivt,
                     h.lr_encoder, h.lr_decoder,
                     h.train_loss_adv if h.train_loss_adv is not None else math.nan])
    write_csv(path, ["epoch", "lr", "train_loss", "val_loss", "val_ap_ivt",
                     "lr_encoder", "lr_decoder", "train_loss_adv"], rows)


def write_metric_report(reports, path, extra_rows=()) -> None:
    """Per-class and mean AP rows in 'metric,class,value' form."""
    rows = []
    for rep in reports:
        for k, v in enumerate(rep.per_class):
            if not math.isnan(v):
                rows.append([f"AP_{rep.component}", str(k), v])
        rows.append([f"mean_AP_{rep.component}", "", rep.mean])
        rows.append([f"scored_classes_{rep.component}", "", rep.n_scored])
        rows.append([f"absent_classes_{rep.component}", "", rep.n_absent])
    rows.extend(extra_rows)
    write_csv(path, ["metric", "class", "value"], rows)


def write_robustness_csv(records, path, fraction, explainer) -> None:
    rows = [[r.example_id, explainer, fraction,
             r.mask_spec.rsplit("/", 1)[-1], str(r.norm), r.epsilon, r.success, r.queries]
            for r in records]
    write_csv(path, ["example_id", "explainer", "fraction", "set", "norm_p",
                     "epsilon", "success", "queries"], rows)


def write_robustness_jsonl(records, path, delta_dir=None) -> None:
    """One JSON object per record; deltas land in .npy sidecars when asked."""
    if delta_dir:
        os.makedirs(delta_dir, exist_ok=True)
    with open(path, "w", encoding="ascii") as fh:
        for i, r in enumerate(records):
            obj = {"example_id": r.example_id, "mask_spec": r.mask_spec,
                   "norm_p": str(r.norm), "epsilon": float(r.epsilon),
                   "success": bool(r.success), "queries": int(r.queries)}
            if delta_dir:
                sidecar = os.path.join(delta_dir, f"delta_{i:05d}.npy")
                np.save(sidecar, r.delta)
                obj["delta_file"] = os.path.basename(sidecar)
            fh.write(json.dumps(obj, sort_keys=True) + "\n")


def write_curve_csv(curve, path) -> None:
    rows = []
    for i, f in enumerate(curve.fractions):
        rows.append([f, curve.mean_relevant[i], curve.mean_irrelevant[i],
                     curve.censored_relevant[i], curve.censored_irrelevant[i]])
    write_csv(path, ["fraction", "mean_eps_relevant", "mean_eps_irrelevant",
                     "censored_relevant", "censored_irrelevant"], rows)


def top5_table(per_class_ap) -> list:
    """(rank, class, ap) rows for the five best defined classes."""
    ap = np.asarray(per_class_ap, dtype=float)
    order = [k for k in np.argsort(-np.nan_to_num(ap, nan=-1.0), kind="stable")
             if not math.isnan(ap[k])][:5]
    return [[rank + 1, int(k), float(ap[k])] for rank, k in enumerate(order)]


def core_spurious_mass(attr, core_mask, spurious_mask, p: float) -> dict:
    """Fractions of the top-p attribution pixels in core / spurious / rest."""
    core = np.asarray(core_mask, dtype=bool)
    spur = np.asarray(spurious_mask, dtype=bool)
    if np.logical_and(core, spur).any():
        raise ValueError("core and spurious masks overlap")
    sel, _ = top_fraction_mask(np.asarray(attr), p, provenance="core_spurious_mass")
    n = max(sel.count, 1)
    core_frac = float(np.logical_and(sel.bits, core).sum() / n)
    spur_frac = float(np.logical_and(sel.bits, spur).sum() / n)
    return {"core_frac": core_frac, "spurious_frac": spur_frac,
            "background_frac": 1.0 - core_frac - spur_frac}


# ---------------------------------------------------------------------------
# SVG line charts


def _scale(vals, lo, hi, out_lo, out_hi):
    if hi - lo < 1e-12:
        return [0.5 * (out_lo + out_hi) for _ in vals]
    return [out_lo + (v - lo) / (hi - lo) * (out_hi - out_lo) for v in vals]


_SERIES_COLOURS = ("#1f6fb2", "#c24a4a", "#3d8f5f", "#8a63b8", "#c78f2e", "#5a5a5a")


def line_chart_svg(series, path, title="", x_label="", y_label="",
                   width=640, height=420) -> None:
    """Write a line chart; series is a list of (name, xs, ys) triples.

    Each polyline carries its data in data-x / data-y attributes.  NaN
    points are dropped from the drawn line but kept in the attributes.
    """
    ml, mr, mt, mb = 64, 20, 36, 48
    finite = [(x, y) for _, xs, ys in series for x, y in zip(xs, ys)
              if not (math.isnan(x) or math.isnan(y))]
    if not finite:
        raise ValueError("line_chart_svg: nothing finite to plot")
    xs_all = [p[0] for p in finite]
    ys_all = [p[1] for p in finite]
    x_lo, x_hi = min(xs_all), max(xs_all)
    y_lo, y_hi = min(ys_all), max(ys_all)
    pad = 0.05 * (y_hi - y_lo or 1.0)
    y_lo, y_hi = y_lo - pad, y_hi + pad

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'viewBox="0 0 {width} {height}">',
             f'<rect width="{width}" height="{height}" fill="white"/>',
             f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" font-size="14">'
             f"{escape(title)}</text>",
             f'<line x1="{ml}" y1="{height - mb}" x2="{width - mr}" y2="{height - mb}" '
             'stroke="black"/>',
             f'<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{height - mb}" stroke="black"/>']
    for i, tick in enumerate(np.linspace(x_lo, x_hi, 5)):
        px = _scale([tick], x_lo, x_hi, ml, width - mr)[0]
        parts.append(f'<text x="{px:.1f}" y="{height - mb + 16}" text-anchor="middle" '
                     f'font-size="10">{fmt(tick)}</text>')
    for tick in np.linspace(y_lo, y_hi, 5):
        py = _scale([tick], y_lo, y_hi, height - mb, mt)[0]
        parts.append(f'<text x="{ml - 6}" y="{py:.1f}" text-anchor="end" '
                     f'font-size="10">{fmt(tick)}</text>')
    parts.append(f'<text x="{(ml + width - mr) / 2:.1f}" y="{height - 10}" '
                 f'text-anchor="middle" font-size="12">{escape(x_label)}</text>')
    parts.append(f'<text x="16" y="{(mt + height - mb) / 2:.1f}" text-anchor="middle" '
                 f'font-size="12" transform="rotate(-90 16 {(mt + height - mb) / 2:.1f})">'
                 f"{escape(y_label)}</text>")

    for s_idx, (name, xs, ys) in enumerate(series):
        colour = _SERIES_COLOURS[s_idx % len(_SERIES_COLOURS)]
        pts = []
        for x, y in zip(xs, ys):
            if math.isnan(x) or math.isnan(y):
                continue
            px = _scale([x], x_lo, x_hi, ml, width - mr)[0]
            py = _scale([y], y_lo, y_hi, height - mb, mt)[0]
            pts.append(f"{px:.2f},{py:.2f}")
        data_x = " ".join(fmt(x) for x in xs)
        data_y = " ".join(fmt(y) for y in ys)
        parts.append(f'<polyline fill="none" stroke="{colour}" stroke-width="1.5" '
                     f'data-series="{escape(name)}" data-x="{data_x}" data-y="{data_y}" '
                     f'points="{" ".join(pts)}"/>')
        ly = mt + 14 * s_idx
        parts.append(f'<line x1="{width - mr - 110}" y1="{ly}" x2="{width - mr - 90}" '
                     f'y2="{ly}" stroke="{colour}" stroke-width="2"/>')
        parts.append(f'<text x="{width - mr - 84}" y="{ly + 4}" font-size="10">'
                     f"{escape(name)}</text>")
    parts.append("</svg>")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(parts) + "\n")


def read_svg_series(path) -> dict:
    """Recover {series name: (xs, ys)} from a chart's data attributes."""
    import re

    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    out = {}
    for m in re.finditer(r'data-series="([^"]*)" data-x="([^"]*)" data-y="([^"]*)"', text):
        name, xs, ys = m.group(1), m.group(2), m.group(3)
        out[name] = ([float(v) for v in xs.split()], [float(v) for v in ys.split()])
    return out


# ---------------------------------------------------------------------------
# attribution dumps and overlays

_ATTR_MAGIC = b"ATTR"


def save_attribution(attr_values, method: str, target_class: int, path) -> None:
    """Binary grid dump: header {H, W, method, class} + float32 LE values."""
    vals = np.asarray(attr_values, dtype=np.float32)
    if vals.ndim != 2:
        raise ValueError("attribution dump expects an (H, W) grid")
    mb = method.encode()
    with open(path, "wb") as fh:
        fh.write(_ATTR_MAGIC)
        fh.write(struct.pack("<II i H", vals.shape[0], vals.shape[1], int(target_class), len(mb)))
        fh.write(mb)
        fh.write(vals.astype("<f4").tobytes())


def load_attribution(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _ATTR_MAGIC:
        raise ValueError(f"{path}: not an attribution dump")
    h, w, cls, mlen = struct.unpack("<II i H", blob[4:18])
    method = blob[18:18 + mlen].decode()
    vals = np.frombuffer(blob[18 + mlen:], dtype="<f4").reshape(h, w)
    return vals.copy(), method, cls


def save_png(array_u8, path) -> None:
    Image.fromarray(array_u8).save(path, format="PNG")


# ---------------------------------------------------------------------------
# manifest


def write_manifest(out_dir, config_text: str, extra: dict | None = None) -> dict:
    """Hash every file under out_dir (except the manifest) into manifest.json."""
    import triprobe

    files = []
    for root, _, names in os.walk(out_dir):
        for name in sorted(names):
            if name == "manifest.json":
                continue
            full = os.path.join(root, name)
            rel = os.path.relpath(full, out_dir)
            with open(full, "rb") as fh:
                digest = hashlib.sha256(fh.read()).hexdigest()
            files.append({"path": rel.replace(os.sep, "/"), "sha256": digest})
    files.sort(key=lambda f: f["path"])
    manifest = {
        "config_hash": hashlib.sha256(config_text.encode()).hexdigest(),
        "versions": {"triprobe": triprobe.__version__, "numpy": np.__version__},
        "files": files,
    }
    if extra:
        manifest.update(extra)
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="ascii") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest
