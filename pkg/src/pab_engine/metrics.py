"""Frame-wise fidelity metrics computed against a reference run.

Inputs are frame grids: axis 0 indexes frames, remaining axes are the frame
payload (PSNR and MSE flatten it; SSIM requires one 2-D grid per frame).
Metrics are evaluated per frame in float64 and then averaged across frames.
At this scale the grids are raw latents, so the PSNR/SSIM peak value defaults
to the empirical range of the reference input and is recorded alongside the
result; only comparisons between runs are meaningful, not absolute values.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError, ValidationError
from .profiler import diff_metric


@dataclass
class FrameMetricResult:
    metric: str
    per_frame: list[float]
    mean: float
    params: dict

    def rows(self) -> list[tuple]:
        rows = [
            (self.metric, i, value, self.mean, json.dumps(self.params, sort_keys=True))
            for i, value in enumerate(self.per_frame)
        ]
        return rows


def _check_frames(a: np.ndarray, b: np.ndarray):
    if a.shape != b.shape:
        raise ShapeError(f"frame grids differ in shape: {a.shape} vs {b.shape}")
    if a.ndim < 2:
        raise ShapeError("frame grids need a leading frame axis plus payload axes")


def _default_peak(reference: np.ndarray) -> float:
    peak = float(reference.max() - reference.min())
    return peak if peak > 0 else 1.0


def mse_video(a: np.ndarray, b: np.ndarray) -> FrameMetricResult:
    """Per-frame mean squared error; the mean field is the global MSE."""
    a = np.asarray(a)
    b = np.asarray(b)
    _check_frames(a, b)
    per_frame = []
    for fa, fb in zip(a, b):
        d = fa.astype(np.float64).ravel() - fb.astype(np.float64).ravel()
        per_frame.append(float(np.mean(d * d)))
    return FrameMetricResult(
        metric="mse",
        per_frame=per_frame,
        mean=diff_metric(a, b, "mse"),
        params={},
    )


def psnr(
    a: np.ndarray,
    b: np.ndarray,
    peak: float | None = None,
    inf_mode: str = "propagate",
) -> FrameMetricResult:
    """10*log10(peak^2 / MSE) per frame; identical frames yield +inf.

    ``inf_mode`` controls the frame average: "propagate" (default) makes the
    mean +inf when any frame is +inf, "exclude" averages the finite frames.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    _check_frames(a, b)
    if inf_mode not in ("propagate", "exclude"):
        raise ValidationError(f"unknown inf_mode {inf_mode!r}")
    if peak is None:
        peak = _default_peak(b)
    if not peak > 0:
        raise ValidationError(f"peak value must be positive, got {peak}")
    per_frame = []
    for fa, fb in zip(a, b):
        d = fa.astype(np.float64).ravel() - fb.astype(np.float64).ravel()
        mse = float(np.mean(d * d))
        per_frame.append(math.inf if mse == 0.0 else 10.0 * math.log10(peak * peak / mse))
    finite = [v for v in per_frame if math.isfinite(v)]
    if inf_mode == "propagate":
        mean = math.inf if len(finite) < len(per_frame) else float(np.mean(per_frame))
    else:
        mean = float(np.mean(finite)) if finite else math.inf
    return FrameMetricResult(
        metric="psnr",
        per_frame=per_frame,
        mean=mean,
        params={"peak": peak, "inf_mode": inf_mode},
    )


def ssim(
    a: np.ndarray,
    b: np.ndarray,
    c1: float | None = None,
    c2: float | None = None,
    window: int = 8,
    stride: int = 1,
    peak: float | None = None,
) -> FrameMetricResult:
    """Sliding-window structural similarity, uniformly averaged.

    Windows are ``window`` x ``window`` patches at the given stride with
    uniform weights and population variances; defaults C1=(0.01*peak)^2,
    C2=(0.03*peak)^2.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    _check_frames(a, b)
    if a.ndim != 3:
        raise ShapeError("ssim expects (frames, rows, cols) grids")
    if window < 1 or stride < 1:
        raise ValidationError("window and stride must be >= 1")
    if window > a.shape[1] or window > a.shape[2]:
        raise ValidationError(
            f"window {window} exceeds frame extent {a.shape[1]}x{a.shape[2]}"
        )
    if peak is None:
        peak = _default_peak(b)
    if c1 is None:
        c1 = (0.01 * peak) ** 2
    if c2 is None:
        c2 = (0.03 * peak) ** 2
    per_frame = []
    for fa, fb in zip(a.astype(np.float64), b.astype(np.float64)):
        wa = sliding_window_view(fa, (window, window))[::stride, ::stride]
        wb = sliding_window_view(fb, (window, window))[::stride, ::stride]
        mu_a = wa.mean(axis=(-1, -2))
        mu_b = wb.mean(axis=(-1, -2))
        da = wa - mu_a[..., None, None]
        db = wb - mu_b[..., None, None]
        var_a = (da * da).mean(axis=(-1, -2))
        var_b = (db * db).mean(axis=(-1, -2))
        cov = (da * db).mean(axis=(-1, -2))
        num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
        den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
        per_frame.append(float(np.mean(num / den)))
    return FrameMetricResult(
        metric="ssim",
        per_frame=per_frame,
        mean=float(np.mean(per_frame)),
        params={"c1": c1, "c2": c2, "window": window, "stride": stride, "peak": peak},
    )


def write_quality_csv(results: list[FrameMetricResult], path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "frame", "value", "mean", "params"])
        for result in results:
            for row in result.rows():
                writer.writerow(row)
