"""Image-fidelity and segmentation metrics, evaluation regions and report emission."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy import ndimage, signal

from .phantom import BLADDER, CLASS_NAMES, GAS, HU_MAX, HU_MIN, RECTUM, ImageSlice, LabelMap

REPORT_SCHEMA = "structsyn-metrics/1"
BONE_THRESHOLD_HU = 150.0
GAS_THRESHOLD_HU = -500.0
PSNR_CAP = 100.0
ORGAN_COLUMNS = {"gas": GAS, "rectum": RECTUM, "bladder": BLADDER}
SCALAR_METRICS = ("mae_entire", "mae_bone", "mae_gas", "mae_rectum", "mae_bladder", "psnr", "ssim")
CROSS = ndimage.generate_binary_structure(2, 1)


def _px(img) -> np.ndarray:
    return np.asarray(img.pixels if isinstance(img, ImageSlice) else img, dtype=np.float64)


def _cls(lab) -> np.ndarray:
    return np.asarray(lab.classes if isinstance(lab, LabelMap) else lab)


def mae(a, b, region=None) -> float | None:
    """Mean absolute difference in HU, over ``region`` if given; ``None`` for an empty region."""
    a, b = _px(a), _px(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    diff = np.abs(a - b)
    if region is None:
        return float(diff.mean())
    region = np.asarray(region, dtype=bool)
    if not region.any():
        return None
    return float(diff[region].mean())


def bone_region(ct_real, ct_syn, threshold: float = BONE_THRESHOLD_HU) -> np.ndarray:
    return (_px(ct_real) >= threshold) | (_px(ct_syn) >= threshold)


def organ_intersection_region(label_mr, label_ct, organ: int) -> np.ndarray:
    a, b = _cls(label_mr), _cls(label_ct)
    if a.shape != b.shape:
        raise ValueError("label maps differ in shape")
    return (a == organ) & (b == organ)


def body_mask(ct, threshold: float = GAS_THRESHOLD_HU) -> np.ndarray:
    """Largest above-threshold component with its interior holes filled."""
    tissue = _px(ct) > threshold
    lab, n = ndimage.label(tissue)
    if n == 0:
        return np.zeros_like(tissue)
    sizes = ndimage.sum(tissue, lab, index=range(1, n + 1))
    largest = lab == (int(np.argmax(sizes)) + 1)
    return ndimage.binary_fill_holes(largest)


def gas_identify(ct, threshold: float = GAS_THRESHOLD_HU) -> np.ndarray:
    """Dark pockets inside the body, cleaned by a cross-shaped opening then closing."""
    dark = (_px(ct) <= threshold) & body_mask(ct, threshold)
    opened = ndimage.binary_opening(dark, structure=CROSS)
    return ndimage.binary_closing(opened, structure=CROSS) & body_mask(ct, threshold)


def to_unit(img) -> np.ndarray:
    """CT in HU onto [0, 1]; arrays already in [0, 1] pass through."""
    if isinstance(img, ImageSlice):
        lo, hi = img.value_range
        return (_px(img) - lo) / (hi - lo)
    return np.asarray(img, dtype=np.float64)


def psnr(a, b) -> float:
    x, y = to_unit(a), to_unit(b)
    mse = float(np.mean((x - y) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax ** 2) / (2 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim(a, b, window: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean structural similarity over all fully-contained window positions (data range 1)."""
    x, y = to_unit(a), to_unit(b)
    if x.shape != y.shape:
        raise ValueError("shape mismatch")
    if min(x.shape) < window:
        raise ValueError(f"images must be at least {window} pixels per side")
    w = gaussian_window(window, sigma)
    filt = lambda z: signal.correlate2d(z, w, mode="valid")  # noqa: E731
    mx, my = filt(x), filt(y)
    sxx = filt(x * x) - mx * mx
    syy = filt(y * y) - my * my
    sxy = filt(x * y) - mx * my
    c1, c2 = k1 ** 2, k2 ** 2
    smap = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))
    return float(smap.mean())


def dsc(pred_mask, gt_mask) -> float:
    a = np.asarray(pred_mask, dtype=bool)
    b = np.asarray(gt_mask, dtype=bool)
    if a.shape != b.shape:
        raise ValueError("mask shapes differ")
    denom = a.sum() + b.sum()
    if denom == 0:
        return 1.0
    return float(2.0 * (a & b).sum() / denom)


def record_metrics(synct, real_ct, pred_labels, label_mr, label_ct) -> dict:
    row = {
        "mae_entire": mae(synct, real_ct),
        "mae_bone": mae(synct, real_ct, bone_region(real_ct, synct)),
        "psnr": psnr(synct, real_ct),
        "ssim": ssim(synct, real_ct),
    }
    for name, cls in ORGAN_COLUMNS.items():
        row[f"mae_{name}"] = mae(synct, real_ct, organ_intersection_region(label_mr, label_ct, cls))
    row["dsc"] = {name: dsc(_cls(pred_labels) == cls, _cls(label_mr) == cls) for name, cls in ORGAN_COLUMNS.items()}
    return row


def _mean_present(values):
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


@dataclass
class MetricsReport:
    """Per-subject metrics plus mean/std aggregates across subjects."""

    subjects: list[dict] = field(default_factory=list)
    label: str = ""

    @property
    def aggregate(self) -> dict:
        agg = {}
        keys = list(SCALAR_METRICS) + [f"dsc_{n}" for n in ORGAN_COLUMNS]
        for k in keys:
            vals = [self._get(s, k) for s in self.subjects]
            vals = [v for v in vals if v is not None]
            agg[k] = {"mean": float(np.mean(vals)) if vals else None,
                      "std": float(np.std(vals)) if vals else None, "n": len(vals)}
        return agg

    @staticmethod
    def _get(row, key):
        if key.startswith("dsc_"):
            return row["dsc"][key[4:]]
        return row[key]

    def mean(self, key: str):
        return self.aggregate[key]["mean"]

    def to_dict(self) -> dict:
        return {"schema": REPORT_SCHEMA, "label": self.label,
                "entire_includes_inconsistent_regions": True,
                "units": {"mae": "HU", "psnr": "dB", "ssim": "unitless", "dsc": "unitless"},
                "subjects": self.subjects, "aggregate": self.aggregate}

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        if d.get("schema") != REPORT_SCHEMA:
            raise ValueError(f"unsupported report schema {d.get('schema')!r}")
        return cls(subjects=list(d["subjects"]), label=d.get("label", ""))

    def __eq__(self, other):
        return isinstance(other, MetricsReport) and self.to_dict() == other.to_dict()


def aggregate_subjects(rows: list[dict]) -> list[dict]:
    """Collapse slice rows to one row per subject, ordered by subject id."""
    by_subject: dict[str, list[dict]] = {}
    for r in rows:
        by_subject.setdefault(r["subject_id"], []).append(r)
    out = []
    for sid in sorted(by_subject):
        group = by_subject[sid]
        row = {"subject_id": sid, "n_slices": len(group)}
        for k in SCALAR_METRICS:
            row[k] = _mean_present([g[k] for g in group])
        row["dsc"] = {n: _mean_present([g["dsc"][n] for g in group]) for n in ORGAN_COLUMNS}
        out.append(row)
    return out


Predictor = Callable[[tuple], tuple]


def evaluate(model, split, label: str = "", plots_dir=None) -> MetricsReport:
    """Score ``model`` on ``split``.

    ``model`` is a trained bundle or a callable mapping a
    ``(mr, ct, label_mr, label_ct)`` tuple to ``(synct, pred_labels)``.
    ``split`` items are dataset records (with ``.load()``) or such tuples;
    records carry their subject id, tuples are numbered.
    """
    items = list(split)
    if not items:
        raise ValueError("evaluation split is empty")
    predict = _as_predictor(model)
    rows = []
    for i, item in enumerate(items):
        if hasattr(item, "load"):
            pair, sid, name = item.load(), item.subject_id, f"{item.subject_id}_{item.slice_id}"
        else:
            pair, sid, name = item, f"case{i:04d}", f"case{i:04d}"
        mr, ct, lmr, lct = pair
        synct, pred = predict(pair)
        row = record_metrics(synct, ct, pred, lmr, lct)
        row["subject_id"] = sid
        rows.append(row)
        if plots_dir is not None:
            save_comparison_plot(Path(plots_dir) / f"{name}.png", mr, ct, synct, pred, lmr)
    return MetricsReport(aggregate_subjects(rows), label)


def _as_predictor(model) -> Predictor:
    if callable(model) and not hasattr(model, "G"):
        return model
    from .training import infer
    return lambda pair: infer(model, pair[0])


def _fmt(stat) -> str:
    if stat["mean"] is None:
        return "n/a"
    return f"{stat['mean']:.1f} ± {stat['std']:.1f}"


def format_tables(reports: dict[str, MetricsReport]) -> str:
    """Aligned plain-text MAE/PSNR/SSIM and DSC tables, one row per method."""
    head = ["Method", "Entire (HU)", "Bone (HU)", "Rectal gas (HU)", "Rectum (HU)", "Bladder (HU)", "PSNR (dB)", "SSIM"]
    rows = []
    for name, rep in reports.items():
        agg = rep.aggregate
        ssim_s = agg["ssim"]
        rows.append([name] + [_fmt(agg[k]) for k in ("mae_entire", "mae_bone", "mae_gas", "mae_rectum",
                                                       "mae_bladder", "psnr")]
                    + ["n/a" if ssim_s["mean"] is None else f"{ssim_s['mean']:.3f} ± {ssim_s['std']:.3f}"])
    dsc_head = ["Method", "Bladder", "Rectal gas", "Rectum"]
    dsc_rows = []
    for name, rep in reports.items():
        agg = rep.aggregate
        dsc_rows.append([name] + [f"{agg[k]['mean']:.3f} ± {agg[k]['std']:.3f}" if agg[k]["mean"] is not None
                                  else "n/a" for k in ("dsc_bladder", "dsc_gas", "dsc_rectum")])
    return _table(head, rows) + "\n\nDice similarity (predicted vs MR labels)\n" + _table(dsc_head, dsc_rows) + "\n"


def _table(head, rows) -> str:
    widths = [max(len(str(r[i])) for r in [head] + rows) for i in range(len(head))]
    line = lambda r: "  ".join(str(c).ljust(w) for c, w in zip(r, widths)).rstrip()  # noqa: E731
    return "\n".join([line(head), "  ".join("-" * w for w in widths)] + [line(r) for r in rows])


def emit_report(reports: dict[str, MetricsReport], out_dir) -> dict[str, Path]:
    """Write ``report.json`` and ``table.txt`` for one or more methods."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    json_path = out_dir / "report.json"
    json_path.write_text(json.dumps({name: r.to_dict() for name, r in reports.items()}, indent=2))
    table_path = out_dir / "table.txt"
    table_path.write_text(format_tables(reports))
    return {"json": json_path, "table": table_path}


def read_reports(path) -> dict[str, MetricsReport]:
    data = json.loads(Path(path).read_text())
    if "schema" in data:
        return {data.get("label") or "model": MetricsReport.from_dict(data)}
    return {name: MetricsReport.from_dict(d) for name, d in data.items()}


def save_comparison_plot(path, mr, ct, synct, pred_labels, label_mr) -> Path:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, axes = plt.subplots(1, 6, figsize=(15, 2.8))
    panels = [
        ("MR", _px(mr), dict(cmap="gray", vmin=0, vmax=1)),
        ("CT", _px(ct), dict(cmap="gray", vmin=-400, vmax=800)),
        ("synCT", _px(synct), dict(cmap="gray", vmin=-400, vmax=800)),
        ("|synCT - CT| (HU)", np.abs(_px(synct) - _px(ct)), dict(cmap="magma", vmin=0, vmax=500)),
        ("MR labels", _cls(label_mr), dict(cmap="viridis", vmin=0, vmax=3)),
        ("predicted", _cls(pred_labels), dict(cmap="viridis", vmin=0, vmax=3)),
    ]
    for ax, (title, img, kw) in zip(axes, panels):
        ax.imshow(img, interpolation="nearest", **kw)
        ax.set_title(title, fontsize=9)
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=80)
    plt.close(fig)
    return path


__all__ = [
    "mae", "bone_region", "organ_intersection_region", "gas_identify", "psnr", "ssim", "dsc",
    "MetricsReport", "evaluate", "emit_report", "format_tables", "read_reports", "CLASS_NAMES",
    "HU_MIN", "HU_MAX",
]
