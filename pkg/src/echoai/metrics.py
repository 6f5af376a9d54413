"""EF regression metrics (RMSE, MAE, RMSPE, MAPE, R2) and scatter export.

Percentage errors are relative to the ground-truth EF of each sample, with
population denominators throughout. Predictions are never clamped.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import InsufficientDataError, ValidationError


@dataclass(frozen=True)
class EvalPair:
    truth: float
    prediction: float
    file_name: str = ""


@dataclass(frozen=True)
class EvalReport:
    rmse: float
    mae: float
    rmspe: float
    mape: float
    r2: float
    n: int

    FIELDS = ("rmse", "mae", "rmspe", "mape", "r2", "n")

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.FIELDS}

    def key_values(self) -> str:
        return "\n".join(f"{k}={v:.6f}" if isinstance(v, float) else f"{k}={v}"
                         for k, v in self.as_dict().items())

    def table(self) -> str:
        rows = [
            ("Root Mean Squared Error (RMSE)", f"{self.rmse:.2f}"),
            ("Mean Absolute Error (MAE)", f"{self.mae:.2f}"),
            ("Root Mean Squared Percentage Error (RMSPE)", f"{self.rmspe:.2f}%"),
            ("Mean Absolute Percentage Error (MAPE)", f"{self.mape:.2f}%"),
            ("R2", f"{self.r2:.2f}"),
            ("n", str(self.n)),
        ]
        width = max(len(name) for name, _ in rows)
        return "\n".join(f"{name:<{width}}  {value:>8}" for name, value in rows)


def compute_report(pairs: Sequence[EvalPair]) -> EvalReport:
    if len(pairs) < 2:
        raise InsufficientDataError(f"need at least 2 pairs, got {len(pairs)}")
    y = np.array([p.truth for p in pairs], dtype=np.float64)
    yhat = np.array([p.prediction for p in pairs], dtype=np.float64)
    if np.any(y <= 0):
        bad = [p.file_name or str(i) for i, p in enumerate(pairs) if p.truth <= 0]
        raise ValidationError(f"ground-truth EF must be positive: {', '.join(bad)}")
    err = y - yhat
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0:
        raise InsufficientDataError("R2 is undefined: ground-truth EF has zero variance")
    rel = err / y
    return EvalReport(
        rmse=math.sqrt(float(np.mean(err ** 2))),
        mae=float(np.mean(np.abs(err))),
        rmspe=100.0 * math.sqrt(float(np.mean(rel ** 2))),
        mape=100.0 * float(np.mean(np.abs(rel))),
        r2=1.0 - float(np.sum(err ** 2)) / ss_tot,
        n=len(pairs),
    )


def export_scatter(pairs: Sequence[EvalPair], path, svg_path=None) -> None:
    if not pairs:
        raise InsufficientDataError("scatter export needs at least one pair")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["FileName", "Truth", "Prediction"])
        for p in pairs:
            writer.writerow([p.file_name, repr(float(p.truth)), repr(float(p.prediction))])
    if svg_path is not None:
        Path(svg_path).write_text(scatter_svg(pairs))


def load_scatter(path) -> list[EvalPair]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return [EvalPair(float(r["Truth"]), float(r["Prediction"]), r["FileName"]) for r in reader]


def scatter_svg(pairs: Iterable[EvalPair], size: int = 400, margin: int = 40) -> str:
    """Static truth-vs-prediction plot with a y = x reference line; one <circle> per pair."""
    pairs = list(pairs)
    values = [v for p in pairs for v in (p.truth, p.prediction)]
    lo, hi = min(0.0, min(values)), max(100.0, max(values))
    span = hi - lo
    inner = size - 2 * margin

    def sx(v):
        return margin + (v - lo) / span * inner

    def sy(v):
        return size - margin - (v - lo) / span * inner

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">',
        f'<rect x="{margin}" y="{margin}" width="{inner}" height="{inner}" fill="none" stroke="#444"/>',
        f'<line x1="{sx(lo):.2f}" y1="{sy(lo):.2f}" x2="{sx(hi):.2f}" y2="{sy(hi):.2f}" '
        'stroke="#888" stroke-dasharray="4 3"/>',
        f'<text x="{size / 2}" y="{size - 8}" text-anchor="middle" font-size="12">Ground-truth EF (%)</text>',
        f'<text x="12" y="{size / 2}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 12 {size / 2})">Predicted EF (%)</text>',
    ]
    for p in pairs:
        parts.append(f'<circle cx="{sx(p.truth):.2f}" cy="{sy(p.prediction):.2f}" r="3" '
                     'fill="#1f77b4" fill-opacity="0.7"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
