"""Overlap metrics, aggregate evaluation reports and difference overlays."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .volume import Volume3D, mip


class MetricsError(ValueError):
    pass


@dataclass(frozen=True)
class OverlapMetrics:
    dice: float
    iou: float
    tp: int
    fp: int
    fn: int


def _mask(m) -> np.ndarray:
    arr = m.data if isinstance(m, Volume3D) else np.asarray(m)
    return arr.astype(bool)


def overlap_metrics(pred, ref) -> OverlapMetrics:
    """Dice and IoU from voxel counts; two empty masks score 1.0."""
    p, r = _mask(pred), _mask(ref)
    if p.shape != r.shape:
        raise MetricsError(f"mask dims differ: {p.shape} vs {r.shape}")
    tp = int(np.count_nonzero(p & r))
    fp = int(np.count_nonzero(p & ~r))
    fn = int(np.count_nonzero(~p & r))
    denom = 2 * tp + fp + fn
    if denom == 0:
        return OverlapMetrics(1.0, 1.0, 0, 0, 0)
    return OverlapMetrics(2 * tp / denom, tp / (tp + fp + fn), tp, fp, fn)


def dice(pred, ref) -> float:
    return overlap_metrics(pred, ref).dice


@dataclass
class EvalReport:
    method: str
    names: list[str]
    per_volume: list[OverlapMetrics]
    summary: dict[str, tuple[float, float]] = field(default_factory=dict)

    def __post_init__(self):
        if not self.summary:
            self.summary = {m: _mean_std([getattr(o, m) for o in self.per_volume]) for m in ("dice", "iou")}

    def records(self) -> list[dict]:
        rows = [{"method": self.method, "volume": n, **asdict(o)} for n, o in zip(self.names, self.per_volume)]
        rows.append({
            "method": self.method, "volume": "mean",
            "dice_mean": self.summary["dice"][0], "dice_std": self.summary["dice"][1],
            "iou_mean": self.summary["iou"][0], "iou_std": self.summary["iou"][1],
            "n": len(self.per_volume),
        })
        return rows


def _mean_std(values: Sequence[float]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        return float("nan"), float("nan")
    std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return float(arr.mean()), std


def evaluate(preds: Sequence, refs: Sequence, method: str = "method",
             names: Sequence[str] | None = None) -> EvalReport:
    if len(preds) != len(refs):
        raise MetricsError(f"{len(preds)} predictions for {len(refs)} references")
    names = list(names) if names is not None else [f"vol{i}" for i in range(len(preds))]
    return EvalReport(method, names, [overlap_metrics(p, r) for p, r in zip(preds, refs)])


def format_table(reports: Sequence[EvalReport], kinds: Sequence[str] | None = None) -> str:
    """Plain-text table: mean ± sample std-dev in percent, two decimals."""
    kinds = list(kinds) if kinds is not None else [""] * len(reports)
    rows = [("Type", "Method", "Dice (%)", "IOU (%)")]
    for kind, rep in zip(kinds, reports):
        d, i = rep.summary["dice"], rep.summary["iou"]
        rows.append((kind, rep.method, f"{100 * d[0]:.2f} ± {100 * d[1]:.2f}", f"{100 * i[0]:.2f} ± {100 * i[1]:.2f}"))
    widths = [max(len(r[c]) for r in rows) for c in range(4)]
    sep = "+" + "+".join("-" * (w + 2) for w in widths) + "+"
    lines = [sep]
    for n, row in enumerate(rows):
        lines.append("| " + " | ".join(cell.ljust(w) for cell, w in zip(row, widths)) + " |")
        if n == 0:
            lines.append(sep)
    lines.append(sep)
    lines.append("± is the sample standard deviation across test volumes")
    return "\n".join(lines)


def write_records(reports: Sequence[EvalReport], path) -> None:
    with open(path, "w") as fh:
        for rep in reports:
            for row in rep.records():
                fh.write(json.dumps(row, sort_keys=True) + "\n")


GREEN = (0, 255, 0)
RED = (255, 0, 0)
WHITE = (255, 255, 255)


def diff_overlay(pred, ref, base: np.ndarray, axis: str = "z") -> np.ndarray:
    """RGB image over a grayscale MIP: green = over-, red = under-segmentation."""
    pm = mip(_mask(pred), axis)
    rm = mip(_mask(ref), axis)
    base = np.asarray(base, dtype=np.float64)
    if base.shape != pm.shape or rm.shape != pm.shape:
        raise MetricsError(f"overlay dims differ: base {base.shape}, masks {pm.shape}/{rm.shape}")
    lo, hi = base.min(), base.max()
    gray = np.zeros_like(base) if hi <= lo else (base - lo) / (hi - lo)
    img = np.repeat(np.floor(255 * gray + 0.5).astype(np.uint8)[..., None], 3, axis=-1)
    img[pm & ~rm] = GREEN
    img[~pm & rm] = RED
    img[pm & rm] = WHITE
    return img
