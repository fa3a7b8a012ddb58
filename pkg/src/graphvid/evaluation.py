"""Metrics: windowed SSIM, a diagonal Fréchet distance over video features and retrieval accuracy."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

SSIM_WINDOW = 8


def ssim(a, b, data_range: float = 1.0, window: int = SSIM_WINDOW) -> float:
    """Mean SSIM over all ``window``×``window`` sliding windows (stride 1, uniform weights).

    Frames are (H, W) or (H, W, C); channels are averaged. Window statistics
    use population (1/N) moments.
    """
    x = np.asarray(a, dtype=np.float64)
    y = np.asarray(b, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"ssim shape mismatch {x.shape} vs {y.shape}")
    if x.ndim == 2:
        x, y = x[..., None], y[..., None]
    H, W = x.shape[:2]
    if H < window or W < window:
        raise ValueError(f"frame {H}x{W} is smaller than the {window}x{window} window")
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    wx = sliding_window_view(x, (window, window), axis=(0, 1))
    wy = sliding_window_view(y, (window, window), axis=(0, 1))
    mx, my = wx.mean(axis=(-1, -2)), wy.mean(axis=(-1, -2))
    vx = (wx * wx).mean(axis=(-1, -2)) - mx * mx
    vy = (wy * wy).mean(axis=(-1, -2)) - my * my
    cov = (wx * wy).mean(axis=(-1, -2)) - mx * my
    num = (2 * mx * my + c1) * (2 * cov + c2)
    den = (mx ** 2 + my ** 2 + c1) * (vx + vy + c2)
    return float((num / den).mean())


def video_ssim(real, fake, data_range: float = 1.0) -> float:
    """Average per-frame SSIM between two (T, H, W[, C]) videos."""
    real, fake = np.asarray(real), np.asarray(fake)
    if real.shape != fake.shape:
        raise ValueError("videos must share a shape")
    return float(np.mean([ssim(r, f, data_range) for r, f in zip(real, fake)]))


def fvd_proxy(real_features, fake_features) -> float:
    """Fréchet distance between diagonal Gaussian fits of two (N, d) feature sets."""
    r = np.asarray(real_features, dtype=np.float64)
    f = np.asarray(fake_features, dtype=np.float64)
    if r.ndim != 2 or f.ndim != 2 or r.shape[1] != f.shape[1]:
        raise ValueError("feature sets must be (N, d) with matching d")
    if len(r) < 2 or len(f) < 2:
        raise ValueError("fvd_proxy needs at least two samples per set")
    mu1, mu2 = r.mean(axis=0), f.mean(axis=0)
    s1, s2 = r.var(axis=0, ddof=1), f.var(axis=0, ddof=1)
    # s1 + s2 - 2 sqrt(s1 s2) written as a square so roundoff cannot make it negative
    return float(((mu1 - mu2) ** 2).sum() + ((np.sqrt(s1) - np.sqrt(s2)) ** 2).sum())


def retrieval_accuracy(g, f) -> float:
    """Fraction of rows whose most cosine-similar ``f`` row is their own; ties fail."""
    g = np.asarray(g, dtype=np.float64)
    f = np.asarray(f, dtype=np.float64)
    if g.shape != f.shape or g.ndim != 2:
        raise ValueError("retrieval needs two (B, d) arrays")
    if len(g) < 2:
        raise ValueError("retrieval needs B >= 2")
    gn, fn = np.linalg.norm(g, axis=1), np.linalg.norm(f, axis=1)
    if np.any(gn == 0) or np.any(fn == 0):
        raise ValueError("zero-norm row: cosine similarity is undefined")
    sim = (g / gn[:, None]) @ (f / fn[:, None]).T
    hits = 0
    for i, row in enumerate(sim):
        best = row.max()
        if row[i] == best and np.count_nonzero(row == best) == 1:
            hits += 1
    return hits / len(g)


def video_features(frame_vectors) -> np.ndarray:
    """(N, T, d) frame vectors -> (N, 2d): mean vector and mean absolute temporal difference."""
    v = np.asarray(frame_vectors, dtype=np.float64)
    if v.shape[1] < 2:
        raise ValueError("videos need at least two frames for motion features")
    return np.concatenate([v.mean(axis=1), np.abs(np.diff(v, axis=1)).mean(axis=1)], axis=1)


@dataclass
class MetricReport:
    metric: str
    values: list

    @property
    def mean(self) -> float:
        return float(np.mean(self.values))

    @property
    def std(self) -> float:
        return float(np.std(self.values))

    @property
    def repeats(self) -> int:
        return len(self.values)


def report(metric: str, values) -> MetricReport:
    values = [float(v) for v in values]
    if not values:
        raise ValueError("a metric report needs at least one repeat")
    return MetricReport(metric, values)


CSV_HEADER = ("metric", "mean", "std", "repeats", "config_hash")


def reports_to_csv(reports, config_hash: str) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in reports:
        w.writerow([r.metric, f"{r.mean:.6g}", f"{r.std:.6g}", r.repeats, config_hash])
    return buf.getvalue()
