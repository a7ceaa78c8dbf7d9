"""Depth-estimation evaluation metrics.

Per-pixel selection: mask == 1 and ground truth in (d_min, d_max]. Threshold
accuracies, absolute relative error, and RMSE use the raw prediction; the
prediction is clamped to a small positive floor only before logarithms
(log10 error and the scale-invariant log metric). Aggregation defaults to
pixel-weighted pooling (exactly reproducing a concatenated-pixel evaluation)
with per-image averaging available behind a flag.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ArgumentError, EmptyEvaluationError
from .focal_net import LossConfig
from .numerics import Plane2D

DEFAULT_CAP = (1e-3, 10.0)
PRED_LOG_FLOOR = 1e-3  # meters; applied before logarithms only

_FIELDS = ("delta1", "delta2", "delta3", "abs_rel", "rmse", "log10_err", "silog")


@dataclass
class MetricsReport:
    delta1: float
    delta2: float
    delta3: float
    abs_rel: float
    rmse: float
    log10_err: float
    silog: float
    valid_pixels: int
    depth_cap: tuple
    # Sufficient statistics for exact pooling of the scale-invariant metric;
    # not part of the serialized surface.
    _log_diff_sum: Optional[float] = field(default=None, repr=False, compare=False)
    _log_diff_sq_sum: Optional[float] = field(default=None, repr=False, compare=False)
    _silog_alpha: Optional[float] = field(default=None, repr=False, compare=False)
    _silog_lambda: Optional[float] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.depth_cap = (float(self.depth_cap[0]), float(self.depth_cap[1]))
        if self.valid_pixels <= 0:
            raise EmptyEvaluationError("a report needs at least one valid pixel")
        if not self.delta1 <= self.delta2 <= self.delta3:
            raise ArgumentError(
                f"threshold accuracies must be monotone: {self.delta1}, {self.delta2}, {self.delta3}"
            )

    def to_json_dict(self) -> dict:
        out = {name: getattr(self, name) for name in _FIELDS}
        out["valid_pixels"] = self.valid_pixels
        out["depth_cap"] = list(self.depth_cap)
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict())

    @classmethod
    def from_json_dict(cls, obj: dict) -> "MetricsReport":
        return cls(
            **{name: float(obj[name]) for name in _FIELDS},
            valid_pixels=int(obj["valid_pixels"]),
            depth_cap=tuple(obj["depth_cap"]),
        )

    @staticmethod
    def csv_header() -> str:
        return ",".join(_FIELDS + ("valid_pixels", "depth_cap"))

    def to_csv_row(self) -> str:
        vals = [repr(getattr(self, name)) for name in _FIELDS]
        vals.append(str(self.valid_pixels))
        vals.append(f"{self.depth_cap[0]!r}:{self.depth_cap[1]!r}")
        return ",".join(vals)

    @classmethod
    def from_csv_row(cls, row: str) -> "MetricsReport":
        parts = row.strip().split(",")
        cap = tuple(float(x) for x in parts[-1].split(":"))
        return cls(
            **{name: float(parts[i]) for i, name in enumerate(_FIELDS)},
            valid_pixels=int(parts[len(_FIELDS)]),
            depth_cap=cap,
        )


def evaluate(
    pred: Plane2D,
    gt: Plane2D,
    mask: Plane2D,
    cap=DEFAULT_CAP,
    loss_cfg: Optional[LossConfig] = None,
    pred_floor: float = PRED_LOG_FLOOR,
) -> MetricsReport:
    """Evaluate one prediction against ground truth over masked-in pixels."""
    if pred.shape != gt.shape or pred.shape != mask.shape:
        raise ArgumentError(f"shape mismatch: pred {pred.shape}, gt {gt.shape}, mask {mask.shape}")
    d_min, d_max = float(cap[0]), float(cap[1])
    if not 0 <= d_min < d_max:
        raise ArgumentError(f"cap must satisfy 0 <= d_min < d_max, got {cap}")
    loss_cfg = loss_cfg or LossConfig()

    sel = (mask.data == 1) & (gt.data > d_min) & (gt.data <= d_max)
    n = int(np.count_nonzero(sel))
    if n == 0:
        raise EmptyEvaluationError("no pixel passes the mask and depth cap")
    p = pred.data[sel]
    g = gt.data[sel]

    ratio = np.maximum(p / g, g / p)
    delta1 = float(np.mean(ratio < 1.25))
    delta2 = float(np.mean(ratio < 1.25**2))
    delta3 = float(np.mean(ratio < 1.25**3))
    abs_rel = float(np.mean(np.abs(p - g) / g))
    rmse = float(np.sqrt(np.mean((p - g) ** 2)))

    p_log = np.clip(p, pred_floor, None)
    log10_err = float(np.mean(np.abs(np.log10(p_log) - np.log10(g))))
    log_diff = np.log(p_log) - np.log(g)
    s1 = float(np.sum(log_diff))
    s2 = float(np.sum(log_diff**2))
    silog = loss_cfg.silog_alpha * float(
        np.sqrt(max(s2 / n - loss_cfg.silog_lambda * (s1 / n) ** 2, 0.0))
    )

    return MetricsReport(
        delta1=delta1,
        delta2=delta2,
        delta3=delta3,
        abs_rel=abs_rel,
        rmse=rmse,
        log10_err=log10_err,
        silog=silog,
        valid_pixels=n,
        depth_cap=(d_min, d_max),
        _log_diff_sum=s1,
        _log_diff_sq_sum=s2,
        _silog_alpha=loss_cfg.silog_alpha,
        _silog_lambda=loss_cfg.silog_lambda,
    )


def aggregate(reports: Sequence[MetricsReport], per_image: bool = False) -> MetricsReport:
    """Combine per-image reports into one.

    Pooled mode (default) weights every mean by its pixel count and folds
    RMSE through per-image MSE, which reproduces an evaluation over the
    concatenated pixels exactly. per_image=True instead averages the
    per-image metric values unweighted.
    """
    reports = list(reports)
    if not reports:
        raise ArgumentError("aggregate needs at least one report")
    cap = reports[0].depth_cap
    for r in reports[1:]:
        if r.depth_cap != cap:
            raise ArgumentError(f"mixed depth caps: {r.depth_cap} vs {cap}")
    n_total = sum(r.valid_pixels for r in reports)

    if per_image:
        mean = lambda name: float(np.mean([getattr(r, name) for r in reports]))
        return MetricsReport(
            delta1=mean("delta1"),
            delta2=mean("delta2"),
            delta3=mean("delta3"),
            abs_rel=mean("abs_rel"),
            rmse=mean("rmse"),
            log10_err=mean("log10_err"),
            silog=mean("silog"),
            valid_pixels=n_total,
            depth_cap=cap,
        )

    weighted = lambda name: sum(getattr(r, name) * r.valid_pixels for r in reports) / n_total
    mse = sum(r.rmse**2 * r.valid_pixels for r in reports) / n_total

    have_stats = all(
        r._log_diff_sum is not None and r._silog_alpha is not None for r in reports
    )
    if have_stats and len({(r._silog_alpha, r._silog_lambda) for r in reports}) == 1:
        alpha = reports[0]._silog_alpha
        lam = reports[0]._silog_lambda
        s1 = sum(r._log_diff_sum for r in reports)
        s2 = sum(r._log_diff_sq_sum for r in reports)
        silog = alpha * float(np.sqrt(max(s2 / n_total - lam * (s1 / n_total) ** 2, 0.0)))
        stats = dict(
            _log_diff_sum=s1, _log_diff_sq_sum=s2, _silog_alpha=alpha, _silog_lambda=lam
        )
    else:
        # Deserialized reports lack the log-error sums; fall back to a
        # pixel-weighted mean of the per-image values.
        silog = weighted("silog")
        stats = {}

    return MetricsReport(
        delta1=weighted("delta1"),
        delta2=weighted("delta2"),
        delta3=weighted("delta3"),
        abs_rel=weighted("abs_rel"),
        rmse=float(np.sqrt(mse)),
        log10_err=weighted("log10_err"),
        silog=silog,
        valid_pixels=n_total,
        depth_cap=cap,
        **stats,
    )
