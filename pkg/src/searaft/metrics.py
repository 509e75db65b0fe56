"""Benchmark-style flow metrics: EPE, 1px, Fl-all, WAUC."""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass

import numpy as np

from .fields import FlowField

WAUC_THRESHOLDS = 0.05 * np.arange(1, 101)
WAUC_WEIGHTS = 1.0 - WAUC_THRESHOLDS / 5.0


@dataclass
class MetricReport:
    epe: float
    px1: float
    fl_all: float
    wauc: float
    n_valid: int
    label: str = ""

    def as_row(self) -> dict:
        return asdict(self)


def _vectors(f) -> np.ndarray:
    return f.vectors if isinstance(f, FlowField) else np.asarray(f)


def endpoint_errors(pred, gt, valid=None) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel EPE at valid pixels, plus the ground-truth magnitude there.

    The mask comes from ``valid`` if given, else from ``gt`` when it is a
    :class:`FlowField`, else every pixel counts.
    """
    p = _vectors(pred).astype(np.float64)
    g = _vectors(gt).astype(np.float64)
    if p.shape != g.shape:
        raise ValueError(f"prediction {p.shape} and ground truth {g.shape} differ")
    if valid is None:
        valid = gt.valid if isinstance(gt, FlowField) else np.ones(g.shape[:-1], dtype=bool)
    valid = np.asarray(valid, dtype=bool)
    if not valid.any():
        raise ValueError("no valid pixels to evaluate")
    d = p[valid] - g[valid]
    return np.hypot(d[:, 0], d[:, 1]), np.hypot(g[valid][:, 0], g[valid][:, 1])


def epe(pred, gt, valid=None) -> float:
    e, _ = endpoint_errors(pred, gt, valid)
    return float(np.sum(e) / e.size)


def px1(pred, gt, valid=None) -> float:
    """Percentage of valid pixels with EPE strictly above 1."""
    e, _ = endpoint_errors(pred, gt, valid)
    return 100.0 * np.count_nonzero(e > 1.0) / e.size


def fl_all(pred, gt, valid=None) -> float:
    """Percentage of valid pixels with EPE > 3 px and > 5% of the true magnitude."""
    e, mag = endpoint_errors(pred, gt, valid)
    return 100.0 * np.count_nonzero((e > 3.0) & (e > 0.05 * mag)) / e.size


def wauc(pred, gt, valid=None) -> float:
    """Weighted area under the inlier-rate curve over thresholds 0.05 .. 5 px."""
    e, _ = endpoint_errors(pred, gt, valid)
    return _wauc_from_errors(e)


def _wauc_from_errors(e: np.ndarray) -> float:
    es = np.sort(e)
    inlier = np.searchsorted(es, WAUC_THRESHOLDS, side="right") / e.size
    return float(100.0 * np.sum(WAUC_WEIGHTS * inlier) / np.sum(WAUC_WEIGHTS))


def evaluate(pred, gt, valid=None, label: str = "") -> MetricReport:
    e, mag = endpoint_errors(pred, gt, valid)
    n = e.size
    return MetricReport(
        epe=float(np.sum(e) / n),
        px1=100.0 * np.count_nonzero(e > 1.0) / n,
        fl_all=100.0 * np.count_nonzero((e > 3.0) & (e > 0.05 * mag)) / n,
        wauc=_wauc_from_errors(e),
        n_valid=int(n),
        label=label,
    )


def aggregate(reports: list[MetricReport], label: str = "all") -> MetricReport:
    """Valid-pixel-weighted mean of per-sample reports."""
    if not reports:
        raise ValueError("nothing to aggregate")
    n = np.array([r.n_valid for r in reports], dtype=np.float64)
    total = n.sum()

    def mean(attr):
        return float(np.sum(np.array([getattr(r, attr) for r in reports]) * n) / total)

    return MetricReport(mean("epe"), mean("px1"), mean("fl_all"), mean("wauc"), int(total), label)


def error_map(pred, gt) -> np.ndarray:
    """Per-pixel EPE with invalid pixels set to NaN."""
    p = _vectors(pred).astype(np.float64)
    g = _vectors(gt).astype(np.float64)
    e = np.hypot(*(p - g).transpose(2, 0, 1))
    if isinstance(gt, FlowField):
        e = np.where(gt.valid, e, np.nan)
    return e


def error_map_image(errors: np.ndarray, max_error: float = 5.0) -> np.ndarray:
    """Grayscale-to-red rendering of an error map, (H, W, 3) uint8; NaN is black."""
    t = np.clip(np.nan_to_num(errors, nan=0.0) / max_error, 0, 1)
    img = np.stack((t, 1 - t, 1 - t), axis=-1) * 255
    img[np.isnan(errors)] = 0
    return img.round().astype(np.uint8)


COLUMNS = ["label", "epe", "px1", "fl_all", "wauc", "n_valid"]


def reports_to_csv(reports: list[MetricReport]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in reports:
        w.writerow({k: getattr(r, k) for k in COLUMNS})
    return buf.getvalue()


def reports_to_text(reports: list[MetricReport]) -> str:
    lines = [f"{'label':<24}{'EPE':>10}{'1px%':>10}{'Fl%':>10}{'WAUC':>10}{'n':>8}"]
    for r in reports:
        lines.append(f"{r.label:<24}{r.epe:>10.4f}{r.px1:>10.3f}{r.fl_all:>10.3f}{r.wauc:>10.3f}{r.n_valid:>8d}")
    return "\n".join(lines)
