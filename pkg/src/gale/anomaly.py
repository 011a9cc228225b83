"""Residual-energy anomaly scores and threshold warnings.

The score of an axis is the trailing-window RMS of the forecast residual
divided by the residual standard deviation observed on a healthy baseline
segment, so a healthy structure scores about one.
"""
from __future__ import annotations

import csv
import json
from collections import deque
from dataclasses import asdict, dataclass, field

import numpy as np


@dataclass(frozen=True)
class AnomalyConfig:
    window_seconds: float = 5.0
    multiplier: float = 3.0
    dwell_seconds: float = 1.0
    baseline_segment: str = "val"
    axes: tuple | None = None       # None scores every axis

    def __post_init__(self):
        if self.window_seconds <= 0 or self.dwell_seconds < 0:
            raise ValueError("window must be positive and dwell non-negative")
        if self.multiplier <= 0:
            raise ValueError("multiplier must be positive")

    def window(self, fs):
        return max(1, int(round(self.window_seconds * fs)))

    def dwell(self, fs):
        return max(1, int(round(self.dwell_seconds * fs)))


@dataclass
class AnomalyScoreSeries:
    t: np.ndarray
    scores: np.ndarray             # (T, n_axes)
    axes: tuple
    sigma_base: np.ndarray
    threshold: float
    window: int

    def __post_init__(self):
        if np.any(self.scores < 0):
            raise ValueError("scores must be non-negative")

    def to_csv(self, path, header_lines=()):
        with open(path, "w", newline="") as fh:
            for line in header_lines:
                fh.write(f"# {line}\n")
            w = csv.writer(fh)
            w.writerow(["t"] + [f"score_{a}" for a in self.axes] + ["threshold"])
            for i in range(len(self.t)):
                w.writerow([repr(float(self.t[i]))] + [repr(float(v)) for v in self.scores[i]]
                           + [repr(float(self.threshold))])


@dataclass
class WarningEvent:
    start: int
    end: int                       # inclusive
    axes: list
    peak: float
    threshold: float
    t_start: float | None = None
    t_end: float | None = None

    def __post_init__(self):
        if self.end < self.start:
            raise ValueError("event ends before it starts")
        if self.peak < self.threshold:
            raise ValueError("event peak below threshold")


def _as_2d(x):
    x = np.asarray(x, dtype=float)
    return x[:, None] if x.ndim == 1 else x


def trailing_rms(r, window):
    """RMS over the last ``window`` samples (fewer during warm-up)."""
    r = _as_2d(r)
    c = np.vstack([np.zeros((1, r.shape[1])), np.cumsum(r * r, axis=0)])
    n = np.arange(1, len(r) + 1)
    lo = np.maximum(n - window, 0)
    counts = (n - lo)[:, None]
    ms = (c[n] - c[lo]) / counts
    return np.sqrt(np.maximum(ms, 0.0))


def baseline_sigma(pred, meas):
    """Per-axis residual standard deviation on a healthy segment."""
    e = _as_2d(meas) - _as_2d(pred)
    sigma = e.std(axis=0)
    if np.any(sigma <= 0):
        raise ValueError("baseline residual has zero spread on at least one axis")
    return sigma


def residual_energy_score(pred, meas, sigma_base, cfg=None, fs=200.0, t=None, axes=None):
    pred, meas = _as_2d(pred), _as_2d(meas)
    if pred.shape != meas.shape:
        raise ValueError("prediction and measurement grids differ")
    cfg = cfg or AnomalyConfig()
    sigma_base = np.broadcast_to(np.asarray(sigma_base, dtype=float), (pred.shape[1],))
    if np.any(sigma_base <= 0):
        raise ValueError("baseline sigma must be positive")
    axes = tuple(axes) if axes is not None else tuple(f"{j}" for j in range(pred.shape[1]))
    win = cfg.window(fs)
    scores = trailing_rms(meas - pred, win) / sigma_base
    if t is None:
        t = np.arange(len(pred)) / fs
    return AnomalyScoreSeries(np.asarray(t, dtype=float), scores, axes, np.array(sigma_base), cfg.multiplier, win)


class StreamingScore:
    """Online version of :func:`residual_energy_score` for one axis."""

    def __init__(self, sigma_base, window):
        if sigma_base <= 0 or window < 1:
            raise ValueError("need positive sigma and window")
        self.sigma = float(sigma_base)
        self.buf = deque(maxlen=int(window))
        self.acc = 0.0

    def update(self, residual):
        sq = float(residual) ** 2
        if len(self.buf) == self.buf.maxlen:
            self.acc -= self.buf[0]
        self.buf.append(sq)
        self.acc += sq
        return float(np.sqrt(max(self.acc, 0.0) / len(self.buf))) / self.sigma


def _runs(mask):
    """``(start, end_inclusive)`` of True runs."""
    m = np.concatenate([[False], np.asarray(mask, bool), [False]])
    d = np.diff(m.astype(np.int8))
    return list(zip(np.flatnonzero(d == 1), np.flatnonzero(d == -1) - 1))


def threshold_warnings(series, cfg=None, fs=200.0):
    cfg = cfg or AnomalyConfig()
    sel = [j for j, a in enumerate(series.axes) if cfg.axes is None or a in cfg.axes]
    if not sel:
        return []
    s = series.scores[:, sel]
    over = s >= series.threshold
    dwell = cfg.dwell(fs)
    events = []
    for a, b in _runs(over.any(axis=1)):
        if b - a + 1 < dwell:
            continue
        seg = s[a:b + 1]
        involved = [series.axes[sel[j]] for j in range(len(sel)) if over[a:b + 1, j].any()]
        events.append(WarningEvent(int(a), int(b), involved, float(seg.max()), float(series.threshold),
                                   float(series.t[a]), float(series.t[b])))
    return events


def write_events_json(events, path, meta=None):
    with open(path, "w") as fh:
        json.dump({"meta": meta or {}, "events": [asdict(e) for e in events]}, fh, indent=2)


def read_events_json(path):
    with open(path) as fh:
        doc = json.load(fh)
    return [WarningEvent(**e) for e in doc["events"]]


def inject_amplitude_change(x, t0, factor=1.5):
    """Copy of ``x`` with samples from index ``t0`` onward scaled by ``factor``."""
    y = np.array(x, dtype=float, copy=True)
    y[t0:] *= factor
    return y


@dataclass
class DetectionResult:
    series: AnomalyScoreSeries
    events: list = field(default_factory=list)

    @property
    def first_start(self):
        return self.events[0].start if self.events else None
