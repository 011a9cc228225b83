"""Ingestion, alignment, cleaning, normalisation and windowing of sensor streams."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage, signal

SPLIT_NAMES = ("train", "val", "test")


@dataclass
class ChannelSeries:
    name: str
    rate: float
    values: np.ndarray
    timestamps: np.ndarray | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.timestamps is not None:
            self.timestamps = np.asarray(self.timestamps, dtype=float)
            if self.timestamps.shape != self.values.shape:
                raise ValueError(f"channel {self.name}: timestamps and values differ in length")
            if np.any(np.diff(self.timestamps) <= 0):
                raise ValueError(f"channel {self.name}: timestamps are not strictly increasing")

    def times(self):
        if self.timestamps is not None:
            return self.timestamps
        return np.arange(self.values.size) / self.rate


@dataclass
class AlignedFrame:
    """Wind and acceleration matrices on one uniform time grid."""

    t: np.ndarray
    wind: np.ndarray
    acc: np.ndarray
    wind_names: list = field(default_factory=list)
    acc_names: list = field(default_factory=list)
    rate: float = 200.0

    def __post_init__(self):
        self.wind = np.asarray(self.wind, dtype=float).reshape(len(self.t), -1)
        self.acc = np.asarray(self.acc, dtype=float).reshape(len(self.t), -1)

    def __len__(self):
        return len(self.t)

    @property
    def d_w(self):
        return self.wind.shape[1]

    @property
    def d_a(self):
        return self.acc.shape[1]

    def copy(self, **changes):
        kw = dict(t=self.t.copy(), wind=self.wind.copy(), acc=self.acc.copy(),
                  wind_names=list(self.wind_names), acc_names=list(self.acc_names), rate=self.rate)
        kw.update(changes)
        return AlignedFrame(**kw)


@dataclass
class CleaningConfig:
    sg_order: int = 2
    sg_window: int = 7
    outlier_sigma: float = 5.0
    stuck_duration: float = 0.5
    hp_cutoff: float = 0.05
    hp_order: int = 4
    running_window: float = 2.0

    def __post_init__(self):
        if self.sg_window % 2 == 0 or self.sg_window <= self.sg_order:
            raise ValueError("sg_window must be odd and larger than sg_order")
        if self.hp_cutoff <= 0 or self.outlier_sigma <= 0 or self.stuck_duration <= 0:
            raise ValueError("cleaning thresholds must be positive")


@dataclass
class NormStats:
    wind_mean: np.ndarray
    wind_std: np.ndarray
    acc_mean: np.ndarray
    acc_std: np.ndarray
    fit_segment: str = "train"

    def apply(self, frame):
        return frame.copy(wind=(frame.wind - self.wind_mean) / self.wind_std,
                          acc=(frame.acc - self.acc_mean) / self.acc_std)

    def invert(self, frame):
        return frame.copy(wind=frame.wind * self.wind_std + self.wind_mean,
                          acc=frame.acc * self.acc_std + self.acc_mean)

    def invert_acc(self, values):
        return np.asarray(values) * self.acc_std + self.acc_mean


@dataclass(frozen=True)
class SplitSpec:
    """Contiguous ``[start, stop)`` ranges for train, validation and test."""

    bounds: tuple

    def segment(self, name):
        return self.bounds[SPLIT_NAMES.index(name)]

    @property
    def length(self):
        return self.bounds[-1][1]


# ---------------------------------------------------------------------------
# ingestion and alignment
# ---------------------------------------------------------------------------

def _is_number(s):
    try:
        float(s)
    except ValueError:
        return False
    return True


def load_channels(path, time_column="t", rate=None):
    """Read a headed CSV into one :class:`ChannelSeries` per non-time column.

    Lines starting with ``#`` are skipped.  Without a time column the channels
    are aligned row-wise and ``rate`` (Hz) is required.
    """
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(line for line in fh if not line.startswith("#")) if r]
    if not rows:
        raise ValueError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    if all(_is_number(h) for h in header):
        raise ValueError(f"{path}: missing header row (first row is numeric)")
    data = np.empty((len(rows) - 1, len(header)))
    for i, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise ValueError(f"{path}: ragged row {i}: {len(row)} fields, header has {len(header)}")
        try:
            data[i - 2] = [float(v) for v in row]
        except ValueError as exc:
            raise ValueError(f"{path}: unparseable number on row {i}: {exc}") from None
    ts = None
    if time_column in header:
        ts = data[:, header.index(time_column)]
        if rate is None:
            rate = 1.0 / float(np.median(np.diff(ts))) if ts.size > 1 else 1.0
    elif rate is None:
        raise ValueError(f"{path}: no '{time_column}' column; a sample rate is required")
    return [ChannelSeries(name, float(rate), data[:, j].copy(), None if ts is None else ts.copy())
            for j, name in enumerate(header) if name != time_column]


def align_streams(wind, acc, target_rate=200.0):
    """Interpolate every channel onto a uniform grid at ``target_rate``.

    The grid starts at the first acceleration time inside the common support and
    the non-overlapping edges are trimmed.
    """
    if not wind or not acc:
        raise ValueError("need at least one wind and one acceleration channel")
    chans = list(wind) + list(acc)
    lo = max(c.times()[0] for c in chans)
    hi = min(c.times()[-1] for c in chans)
    if hi <= lo:
        raise ValueError("wind and acceleration streams do not overlap in time")
    ref = acc[0].times()
    start = ref[np.searchsorted(ref, lo - 1e-12)]
    n = int(math.floor((hi - start) * target_rate + 1e-9)) + 1
    grid = start + np.arange(n) / target_rate
    grid = grid[grid <= hi + 1e-12]
    w = np.column_stack([np.interp(grid, c.times(), c.values) for c in wind])
    a = np.column_stack([np.interp(grid, c.times(), c.values) for c in acc])
    return AlignedFrame(grid, w, a, [c.name for c in wind], [c.name for c in acc], float(target_rate))


# ---------------------------------------------------------------------------
# cleaning
# ---------------------------------------------------------------------------

def savitzky_golay(x, cfg=None):
    """Forward-backward Savitzky-Golay smoothing (polynomial fits at the edges)."""
    cfg = cfg or CleaningConfig()
    x = np.asarray(x, dtype=float)
    if x.size < cfg.sg_window:
        raise ValueError(f"series of length {x.size} is shorter than the window {cfg.sg_window}")
    y = signal.savgol_filter(x, cfg.sg_window, cfg.sg_order, mode="interp")
    return signal.savgol_filter(y[::-1], cfg.sg_window, cfg.sg_order, mode="interp")[::-1]


def _stuck_mask(x, min_samples):
    mask = np.zeros(x.size, dtype=bool)
    if x.size == 0:
        return mask
    change = np.flatnonzero(np.diff(x) != 0) + 1
    starts = np.concatenate([[0], change])
    stops = np.concatenate([change, [x.size]])
    for s, e in zip(starts, stops):
        if e - s > min_samples:
            mask[s:e] = True
    return mask


def detect_outliers(x, cfg=None, fs=200.0):
    """Flag 5-sigma excursions from a centred running mean, stuck runs and non-finite samples.

    Sigma is a running 1.4826*MAD over the same window as the mean.
    """
    cfg = cfg or CleaningConfig()
    x = np.asarray(x, dtype=float)
    bad = ~np.isfinite(x)
    if bad.all():
        return bad.copy()
    xf = np.where(bad, np.median(x[~bad]), x)
    win = int(round(cfg.running_window * fs)) | 1
    if win > xf.size:
        win = xf.size if xf.size % 2 else xf.size - 1
    # mirrored edges: repeating the end sample would collapse the MAD there
    mean = ndimage.uniform_filter1d(xf, win, mode="mirror")
    med = ndimage.median_filter(xf, size=win, mode="mirror")
    sigma = 1.4826 * ndimage.median_filter(np.abs(xf - med), size=win, mode="mirror")
    global_sigma = 1.4826 * np.median(np.abs(xf - np.median(xf)))
    sigma = np.where(sigma > 0, sigma, global_sigma)
    spikes = (sigma > 0) & (np.abs(xf - mean) > cfg.outlier_sigma * sigma)
    # a run of k equal samples lasts (k - 1) / fs seconds
    stuck = _stuck_mask(xf, int(math.floor(cfg.stuck_duration * fs + 1e-9)) + 1)
    stuck &= ~bad
    return bad | spikes | stuck


def repair(x, mask):
    """Linear interpolation across flagged samples; flat extension at the ends."""
    x = np.asarray(x, dtype=float)
    mask = np.asarray(mask, dtype=bool)
    if mask.all():
        raise ValueError("every sample is flagged; nothing to interpolate from")
    if not mask.any():
        return x.copy()
    idx = np.arange(x.size)
    out = x.copy()
    out[mask] = np.interp(idx[mask], idx[~mask], x[~mask])
    return out


def butter_highpass(fs, cfg=None):
    cfg = cfg or CleaningConfig()
    if not fs > 2.0 * cfg.hp_cutoff:
        raise ValueError(f"cutoff {cfg.hp_cutoff} Hz is not below Nyquist for fs={fs}")
    sos = signal.butter(cfg.hp_order, cfg.hp_cutoff, btype="highpass", fs=fs, output="sos")
    if not np.all(np.abs(np.roots([1.0, *sos[0, 4:]])) < 1.0):
        raise ValueError("unstable high-pass coefficient synthesis")
    return sos


def highpass_filtfilt(x, fs, cfg=None):
    """Zero-phase Butterworth high-pass (forward-backward biquad cascade).

    Odd reflection padding of ``3 * (order + 1)`` samples.
    """
    cfg = cfg or CleaningConfig()
    sos = butter_highpass(fs, cfg)
    x = np.asarray(x, dtype=float)
    padlen = min(3 * (cfg.hp_order + 1), x.shape[-1] - 1)
    return signal.sosfiltfilt(sos, x, axis=-1, padtype="odd", padlen=padlen)


def clean_frame(frame, cfg=None, smooth=True):
    """Outlier repair then optional smoothing, per channel."""
    cfg = cfg or CleaningConfig()
    wind, acc = frame.wind.copy(), frame.acc.copy()
    flagged = 0
    for mat in (wind, acc):
        for j in range(mat.shape[1]):
            mask = detect_outliers(mat[:, j], cfg, frame.rate)
            flagged += int(mask.sum())
            col = repair(mat[:, j], mask) if mask.any() else mat[:, j]
            mat[:, j] = savitzky_golay(col, cfg) if smooth else col
    return frame.copy(wind=wind, acc=acc), flagged


# ---------------------------------------------------------------------------
# splitting, normalisation, windowing
# ---------------------------------------------------------------------------

def chronological_split(T, fractions=(0.7, 0.15, 0.15), min_length=0):
    if len(fractions) != 3 or any(f <= 0 for f in fractions):
        raise ValueError(f"split fractions must be three positive numbers, got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("split fractions must sum to 1")
    a = int(round(fractions[0] * T))
    b = a + int(round(fractions[1] * T))
    bounds = ((0, a), (a, b), (b, T))
    for name, (s, e) in zip(SPLIT_NAMES, bounds):
        if e - s < max(1, min_length):
            raise ValueError(f"{name} segment has {e - s} samples, need at least {max(1, min_length)}")
    return SplitSpec(bounds)


def fit_norm(frame, split):
    s, e = split.segment("train")
    if e <= s:
        raise ValueError("empty training segment")
    eps = 1e-12
    w, a = frame.wind[s:e], frame.acc[s:e]
    return NormStats(w.mean(axis=0), np.maximum(w.std(axis=0), eps),
                     a.mean(axis=0), np.maximum(a.std(axis=0), eps))


def apply_norm(frame, stats):
    return stats.apply(frame)


@dataclass
class WindowedDataset:
    """Sliding windows over a (normalised) frame.

    Windows are materialised on demand from ``wind``/``acc`` and ``starts``;
    ``labels`` holds the split index (0 train, 1 val, 2 test) of each window.
    """

    wind: np.ndarray
    acc: np.ndarray
    starts: np.ndarray
    labels: np.ndarray
    L_enc: int
    L_pred: int
    stride: int
    split: SplitSpec
    norm: NormStats | None = None
    meta: dict = field(default_factory=dict)
    rate: float = 1.0
    wind_names: tuple = ()
    acc_names: tuple = ()

    def __len__(self):
        return len(self.starts)

    @property
    def d_w(self):
        return self.wind.shape[1]

    @property
    def d_a(self):
        return self.acc.shape[1]

    def indices(self, name):
        return np.flatnonzero(self.labels == SPLIT_NAMES.index(name))

    def count(self, name):
        return int(np.sum(self.labels == SPLIT_NAMES.index(name)))

    def batch(self, idx):
        """``(X_wind, X_acc, Y)`` arrays for the given window indices."""
        idx = np.atleast_1d(np.asarray(idx, dtype=int))
        s = self.starts[idx][:, None]
        enc = s + np.arange(self.L_enc)
        fut = s + self.L_enc + np.arange(self.L_pred)
        return self.wind[enc], self.acc[enc], self.acc[fut]

    def subset(self, name, step=1, limit=None):
        idx = self.indices(name)[::step]
        return idx if limit is None else idx[:limit]


def window_count(seg_len, L_enc, L_pred, stride=1):
    span = L_enc + L_pred
    if seg_len < span:
        return 0
    return (seg_len - span) // stride + 1


def make_windows(frame, split, L_enc=100, L_pred=20, stride=1, norm=None):
    if stride < 1:
        raise ValueError("stride must be >= 1")
    starts, labels = [], []
    for k, name in enumerate(SPLIT_NAMES):
        s, e = split.segment(name)
        n = window_count(e - s, L_enc, L_pred, stride)
        starts.append(s + stride * np.arange(n))
        labels.append(np.full(n, k))
    return WindowedDataset(frame.wind.copy(), frame.acc.copy(), np.concatenate(starts).astype(np.int64),
                           np.concatenate(labels).astype(np.int64), L_enc, L_pred, stride, split, norm,
                           rate=float(frame.rate), wind_names=tuple(frame.wind_names),
                           acc_names=tuple(frame.acc_names))


def shift_wind_delay(frame, delay):
    """``wind[t] <- wind[t - delay]`` with zero fill; accelerations untouched."""
    if delay < 0:
        raise ValueError("delay must be non-negative")
    if delay == 0:
        return frame.copy()
    wind = np.zeros_like(frame.wind)
    if delay < len(frame):
        wind[delay:] = frame.wind[:-delay]
    return frame.copy(wind=wind)


def derive_wind_features(anemometers, fs, ti_window=60.0):
    """Four features per 3-D anemometer: speed, unwrapped direction, turbulence intensity, vertical.

    ``anemometers`` is a sequence of ``(u, v, w)`` component arrays.  Turbulence
    intensity is the centred running std over running mean of the horizontal
    speed, zero wherever the running mean speed vanishes.
    """
    feats, names = [], []
    win = max(1, int(round(ti_window * fs)))
    for k, comps in enumerate(anemometers):
        u, v = np.asarray(comps[0], dtype=float), np.asarray(comps[1], dtype=float)
        w = np.asarray(comps[2], dtype=float) if len(comps) > 2 else np.zeros_like(u)
        speed = np.hypot(u, v)
        direction = np.unwrap(np.arctan2(v, u))
        mean = ndimage.uniform_filter1d(speed, win, mode="nearest")
        sq = ndimage.uniform_filter1d(speed * speed, win, mode="nearest")
        std = np.sqrt(np.maximum(sq - mean * mean, 0.0))
        std[std < 1e-12 * np.maximum(1.0, mean)] = 0.0
        ti = np.divide(std, mean, out=np.zeros_like(mean), where=mean > 1e-12)
        feats += [speed, direction, ti, w]
        names += [f"speed{k}", f"dir{k}", f"ti{k}", f"w{k}"]
    return np.column_stack(feats), names
