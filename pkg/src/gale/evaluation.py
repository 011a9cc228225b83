"""Forecast scoring: time-domain, spectral (fixed modal bands) and residual-risk metrics.

Zero denominators yield ``None`` (an explicit undefined cell) rather than an
exception, so every model/horizon cell is reported on the same window set.
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import signal

from .preprocess import CleaningConfig, highpass_filtfilt

DEFAULT_HORIZONS = (1, 8, 18)
BAND_WIDTH = (0.05, 5.0)


@dataclass(frozen=True)
class WelchConfig:
    fs: float = 200.0
    segment_seconds: float = 40.0
    overlap: float = 0.75
    nfft: int = 8192
    window: str = "hann"

    def __post_init__(self):
        if not 0.0 <= self.overlap < 1.0:
            raise ValueError("overlap must be in [0, 1)")
        if self.nfft < self.nperseg:
            raise ValueError(f"nfft={self.nfft} is shorter than the segment ({self.nperseg} samples)")

    @property
    def nperseg(self):
        return int(round(self.segment_seconds * self.fs))

    @property
    def noverlap(self):
        return int(round(self.overlap * self.nperseg))


@dataclass(frozen=True)
class ModalBand:
    f0: float
    lower: float
    upper: float

    def __post_init__(self):
        if not self.lower < self.f0 < self.upper:
            raise ValueError(f"band edges {self.lower}..{self.upper} do not bracket {self.f0}")
        if not BAND_WIDTH[0] - 1e-9 <= self.width <= BAND_WIDTH[1] + 1e-9:
            raise ValueError(f"band width {self.width:.4g} Hz outside {BAND_WIDTH}")

    @property
    def width(self):
        return self.upper - self.lower


@dataclass
class ResidualStats:
    mu_acc: float
    mu_mm: float
    sigma_acc: float
    sigma_mm: float
    delta_mu: float
    r_sigma: float | None
    threshold: float | None
    p_acc: float | None
    p_mm: float | None
    delta_p: float | None
    axis: str = ""
    horizon: int = 0


# ---------------------------------------------------------------------------
# scalar metrics
# ---------------------------------------------------------------------------

def _ratio(num, den):
    return None if den == 0 or not np.isfinite(den) else float(num / den)


def delta_peak(pred, meas, negative=False):
    """Percent error of the horizon maximum (minimum with ``negative``)."""
    pred, meas = np.asarray(pred, float), np.asarray(meas, float)
    if negative:
        pred, meas = -pred, -meas
    mp, mm = np.max(pred), np.max(meas)
    r = _ratio(mp - mm, mm)
    return None if r is None else 100.0 * r


def rmsr(pred, meas):
    pred, meas = np.asarray(pred, float), np.asarray(meas, float)
    return _ratio(math.sqrt(np.mean(pred ** 2)), math.sqrt(np.mean(meas ** 2)))


def rmse_mae(pred, meas):
    e = np.asarray(pred, float) - np.asarray(meas, float)
    if e.size == 0:
        raise ValueError("empty input")
    return float(np.sqrt(np.mean(e * e))), float(np.mean(np.abs(e)))


def win_rate(metric_mm, metric_acc):
    """Percent of paired windows where the multimodal value is strictly smaller."""
    a, b = np.asarray(metric_mm, float), np.asarray(metric_acc, float)
    if a.size == 0 or a.shape != b.shape:
        raise ValueError("win_rate needs two non-empty, equally shaped metric sets")
    return 100.0 * float(np.mean(a < b))


def residual_stats(errors_acc, errors_mm, axis="", horizon=0, k=3.0):
    """Bias shift, spread ratio and exceedance of the fixed ``k * sigma_acc`` threshold."""
    ea, em = np.asarray(errors_acc, float).ravel(), np.asarray(errors_mm, float).ravel()
    mu_a, mu_m = float(ea.mean()), float(em.mean())
    s_a, s_m = float(ea.std()), float(em.std())
    if s_a == 0:
        return ResidualStats(mu_a, mu_m, s_a, s_m, mu_m - mu_a, None, None, None, None, None, axis, horizon)
    thr = k * s_a
    p_a, p_m = float(np.mean(np.abs(ea) > thr)), float(np.mean(np.abs(em) > thr))
    return ResidualStats(mu_a, mu_m, s_a, s_m, mu_m - mu_a, s_m / s_a, thr, p_a, p_m, p_m - p_a, axis, horizon)


# ---------------------------------------------------------------------------
# spectra
# ---------------------------------------------------------------------------

def welch_psd(x, cfg=None):
    """One-sided Welch density; ``sum(S) * df`` approximates the variance."""
    cfg = cfg or WelchConfig()
    x = np.asarray(x, dtype=float)
    if x.shape[-1] < cfg.nperseg:
        raise ValueError(f"series of {x.shape[-1]} samples is shorter than one segment ({cfg.nperseg})")
    return signal.welch(x, fs=cfg.fs, window=cfg.window, nperseg=cfg.nperseg,
                        noverlap=cfg.noverlap, nfft=cfg.nfft, detrend=False,
                        scaling="density", axis=-1)


def _half_power_edge(f, S, i, step):
    half = S[i] / 2.0
    j = i
    while 0 < j < len(S) - 1 and S[j + step] > half:
        j += step
    k = j + step
    if not 0 <= k < len(S):
        return f[j]
    # linear interpolation between the last bin above and the first below
    s0, s1 = S[j], S[k]
    frac = (s0 - half) / (s0 - s1) if s0 != s1 else 0.0
    return f[j] + frac * (f[k] - f[j])


def pick_modal_bands(f, S, prominence=5.0, min_spacing=0.20, fmin=0.05, fmax=5.0,
                     min_width=BAND_WIDTH[0], max_width=BAND_WIDTH[1]):
    """Peaks above ``prominence`` x median level in ``[fmin, fmax]``, spaced ``min_spacing`` apart.

    Band edges are the interpolated half-power crossings around each peak,
    widened or narrowed symmetrically to keep the width within
    ``[min_width, max_width]``.
    """
    f, S = np.asarray(f, float), np.asarray(S, float)
    sel = (f >= fmin) & (f <= fmax)
    if not sel.any():
        return []
    floor = float(np.median(S[sel]))
    if floor <= 0:
        floor = float(np.max(S[sel])) * 1e-12
    if floor <= 0:
        return []
    cand = [i for i in np.flatnonzero(sel)
            if 0 < i < len(S) - 1 and S[i] > S[i - 1] and S[i] >= S[i + 1] and S[i] >= prominence * floor]
    cand.sort(key=lambda i: -S[i])
    kept = []
    for i in cand:
        if all(abs(f[i] - f[j]) >= min_spacing for j in kept):
            kept.append(i)
    bands = []
    for i in sorted(kept):
        lo, hi = _half_power_edge(f, S, i, -1), _half_power_edge(f, S, i, +1)
        f0 = float(f[i])
        if hi - lo < min_width:
            pad = 0.5 * (min_width - (hi - lo))
            lo, hi = lo - pad, hi + pad
        elif hi - lo > max_width:
            lo, hi = max(lo, f0 - max_width / 2), min(hi, f0 + max_width / 2)
        if not lo < f0 < hi:
            # degenerate edge on a one-sided peak: centre the minimum band instead
            lo, hi = f0 - min_width / 2, f0 + min_width / 2
        bands.append(ModalBand(f0, float(lo), float(hi)))
    return bands


def _in_band(f, band):
    return (f >= band.lower) & (f <= band.upper)


def ber(f, S_pred, S_meas, band):
    m = _in_band(np.asarray(f), band)
    df = f[1] - f[0]
    return _ratio(np.sum(S_pred[m]) * df, np.sum(S_meas[m]) * df)


def mpe(f, S_pred, S_meas, f0):
    i = int(np.argmin(np.abs(np.asarray(f) - f0)))
    r = _ratio(S_pred[i] - S_meas[i], S_meas[i])
    return None if r is None else 100.0 * r


def ober(f, S_pred, S_meas, bands, fmin=0.05, fmax=5.0):
    """Out-of-band energy ratio in ``[fmin, fmax]`` (an assumed definition, flagged in reports)."""
    f = np.asarray(f)
    m = (f >= fmin) & (f <= fmax)
    for b in bands:
        m &= ~_in_band(f, b)
    return _ratio(np.sum(S_pred[m]), np.sum(S_meas[m]))


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

def default_axes(channel_names):
    """Group channels into axes by their trailing ``_x``/``_y``/``_z`` tag; else one axis per channel."""
    axes = {}
    for j, name in enumerate(channel_names):
        tag = name.rsplit("_", 1)[-1].lower() if "_" in name else ""
        key = tag if tag in ("x", "y", "z") else name
        axes.setdefault(key, []).append(j)
    return axes


def _median(vals):
    vals = [v for v in vals if v is not None]
    return float(np.median(vals)) if vals else None


def _mean(vals):
    vals = [v for v in vals if v is not None]
    return float(np.mean(vals)) if vals else None


@dataclass
class MetricsReport:
    scalar: dict = field(default_factory=dict)
    spectral: dict = field(default_factory=dict)
    residual: dict = field(default_factory=dict)
    win_rate: dict = field(default_factory=dict)
    bands: dict = field(default_factory=dict)
    strata: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    plot_data: dict = field(default_factory=dict, repr=False)

    def to_dict(self):
        return {"meta": self.meta, "bands": {a: [asdict(b) for b in bs] for a, bs in self.bands.items()},
                "scalar": self.scalar, "spectral": self.spectral, "residual": self.residual,
                "win_rate": self.win_rate, "strata": self.strata}

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, allow_nan=False)

    def rows(self):
        """Flat ``(axis, horizon, model, metric, band, value)`` rows."""
        out = []
        for axis, by_h in self.scalar.items():
            for h, by_m in by_h.items():
                for model, mets in by_m.items():
                    for k, v in mets.items():
                        out.append((axis, h, model, k, "", v))
        for axis, by_h in self.spectral.items():
            for h, by_m in by_h.items():
                for model, mets in by_m.items():
                    for k, v in mets.items():
                        if k == "bands":
                            for b in v:
                                out.append((axis, h, model, "ber", b["f0"], b["ber"]))
                                out.append((axis, h, model, "mpe", b["f0"], b["mpe"]))
                        else:
                            out.append((axis, h, model, k, "", v))
        for axis, by_h in self.residual.items():
            for h, st in by_h.items():
                for k, v in st.items():
                    if k not in ("axis", "horizon"):
                        out.append((axis, h, "pair", k, "", v))
        for axis, by_h in self.win_rate.items():
            for h, mets in by_h.items():
                for k, v in mets.items():
                    out.append((axis, h, "pair", f"win_rate_{k}", "", v))
        return out

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["axis", "horizon", "model", "metric", "band", "value"])
            for row in self.rows():
                w.writerow(["" if v is None else v for v in row])


def windows_digest(starts):
    return hashlib.sha256(np.asarray(starts, dtype=np.int64).tobytes()).hexdigest()[:16]


def lead_series(pred, meas, h):
    """Per-window values at lead ``h`` (1-based) stacked along the window axis."""
    return pred[:, h - 1, :], meas[:, h - 1, :]


def compute_report(preds, meas, starts, fs, channel_names=None, axes=None, horizons=DEFAULT_HORIZONS,
                   welch=None, cleaning=None, highpass=True, bands=None, prominence=5.0,
                   wind_speed=None, negative_peak=False, meta=None, _strata=True):
    """Score two models' forecasts on identical windows.

    ``preds`` maps model name (``"acc"``, ``"mm"``) to ``(N, L_pred, d_a)``
    forecasts; ``meas`` is the matching ``(N, L_pred, d_a)`` truth and
    ``starts`` the window start indices (consecutive windows should be one
    sample apart for the spectral metrics to describe a continuous record).
    Each lead-``h`` series is high-passed before any metric, measured and
    predicted alike.  Modal bands are picked once per axis on the measured
    lead-1 series and then held fixed.
    """
    names = list(preds)
    if len(names) != 2:
        raise ValueError("compute_report needs exactly two models")
    acc_name, mm_name = names
    meas = np.asarray(meas, float)
    for k in names:
        if preds[k].shape != meas.shape:
            raise ValueError(f"forecast set {k} does not match the measured windows")
    N, L_pred, d_a = meas.shape
    channel_names = channel_names or [f"ch{j}" for j in range(d_a)]
    axes = axes or default_axes(channel_names)
    welch = welch or WelchConfig(fs=fs)
    cleaning = cleaning or CleaningConfig()
    horizons = [h for h in horizons if 1 <= h <= L_pred]

    def hp(x):
        if not highpass or x.shape[0] <= 3 * (cleaning.hp_order + 1):
            return x
        return highpass_filtfilt(x.T, fs, cleaning).T

    # lead-h series for every horizon step that any H-window needs
    need = range(1, max(horizons) + 1)
    filt = {m: np.stack([hp(preds[m][:, h - 1, :]) for h in need], axis=1) for m in names}
    filt_meas = np.stack([hp(meas[:, h - 1, :]) for h in need], axis=1)

    report = MetricsReport(meta=dict(meta or {}))
    report.meta.update({"n_windows": int(N), "windows_digest": windows_digest(starts),
                        "horizons": horizons, "axes": {a: [channel_names[j] for j in c] for a, c in axes.items()},
                        "models": names, "highpass": bool(highpass),
                        "ober_note": "OBER = out-of-band energy ratio; not defined in the source method"})
    can_welch = N >= welch.nperseg
    for axis, chans in axes.items():
        if can_welch:
            if bands is not None and axis in bands:
                axis_bands = bands[axis]
            else:
                f, S = welch_psd(filt_meas[:, 0, chans].T, welch)
                axis_bands = pick_modal_bands(f, S.mean(axis=0), prominence=prominence)
        else:
            axis_bands = []
        report.bands[axis] = axis_bands
        report.scalar[axis], report.spectral[axis] = {}, {}
        report.residual[axis], report.win_rate[axis] = {}, {}
        for H in horizons:
            cell, spec, per_window = {}, {}, {}
            y = filt_meas[:, :H, chans]
            for m in names:
                p = filt[m][:, :H, chans]
                dp = [delta_peak(p[n, :, c], y[n, :, c], negative_peak) for n in range(N) for c in range(len(chans))]
                rr = [rmsr(p[n, :, c], y[n, :, c]) for n in range(N) for c in range(len(chans))]
                e_lead = p[:, H - 1, :] - y[:, H - 1, :]
                rmse, mae = rmse_mae(p[:, H - 1, :], y[:, H - 1, :])
                cell[m] = {"delta_peak": _mean(dp), "delta_peak_median": _median(dp),
                           "rmsr": _mean(rr), "rmsr_median": _median(rr), "rmse": rmse, "mae": mae}
                err = p - y
                per_window[m] = (np.sqrt(np.mean(err ** 2, axis=(1, 2))), np.mean(np.abs(err), axis=(1, 2)))
                if can_welch:
                    f, Sp = welch_psd(p[:, H - 1, :].T, welch)
                    _, Sm = welch_psd(y[:, H - 1, :].T, welch)
                    Sp, Sm = Sp.mean(axis=0), Sm.mean(axis=0)
                    band_cells = [{"f0": b.f0, "lower": b.lower, "upper": b.upper,
                                   "ber": ber(f, Sp, Sm, b), "mpe": mpe(f, Sp, Sm, b.f0)} for b in axis_bands]
                    spec[m] = {"bands": band_cells,
                               "median_ber": _median([b["ber"] for b in band_cells]),
                               "median_mpe": _median([b["mpe"] for b in band_cells]),
                               "ober": ober(f, Sp, Sm, axis_bands)}
                    report.plot_data[(axis, H, m)] = (f, Sm, Sp)
                per_window[m] = per_window[m] + (e_lead,)
            report.scalar[axis][H] = cell
            report.spectral[axis][H] = spec
            rs = residual_stats(per_window[acc_name][2], per_window[mm_name][2], axis, H)
            report.residual[axis][H] = asdict(rs)
            report.win_rate[axis][H] = {
                "rmse": win_rate(per_window[mm_name][0], per_window[acc_name][0]),
                "mae": win_rate(per_window[mm_name][1], per_window[acc_name][1])}
            report.plot_data[("residual", axis, H)] = (per_window[acc_name][2], per_window[mm_name][2])
    report.meta["spectral_medians"] = spectral_medians(report)
    if wind_speed is not None and _strata:
        ws = np.asarray(wind_speed, float)
        cut = float(np.median(ws))
        report.meta["wind_split_threshold"] = cut
        for label, sel in (("low_wind", ws <= cut), ("high_wind", ws > cut)):
            if sel.sum() < 2:
                continue
            sub = compute_report({m: preds[m][sel] for m in names}, meas[sel], np.asarray(starts)[sel], fs,
                                 channel_names, axes, horizons, welch, cleaning, highpass,
                                 bands=report.bands, prominence=prominence, negative_peak=negative_peak,
                                 _strata=False)
            report.strata[label] = {"n_windows": int(sel.sum()), "scalar": sub.scalar, "win_rate": sub.win_rate}
    return report


def spectral_medians(report):
    """Median BER/MPE per (horizon, model), aggregated across bands, across axes, and pooled.

    ``per_axis`` is the median over each axis's modal bands; ``across_axes``
    is the median of those per-axis medians; ``pooled`` is the median over
    every (axis, band) cell.
    """
    out = {}
    for H in report.meta.get("horizons", []):
        for model in report.meta.get("models", []):
            per_axis, pooled = {}, {"ber": [], "mpe": []}
            for axis, by_h in report.spectral.items():
                cell = by_h.get(H, {}).get(model)
                if not cell:
                    continue
                per_axis[axis] = {"ber": cell["median_ber"], "mpe": cell["median_mpe"]}
                for b in cell["bands"]:
                    pooled["ber"].append(b["ber"])
                    pooled["mpe"].append(b["mpe"])
            out.setdefault(str(H), {})[model] = {
                "per_axis": per_axis,
                "across_axes": {k: _median([v[k] for v in per_axis.values()]) for k in ("ber", "mpe")},
                "pooled": {k: _median(v) for k, v in pooled.items()},
            }
    return out


def evaluate_pair(dataset, indices, acc_checkpoint, mm_checkpoint, horizons=DEFAULT_HORIZONS,
                  batch=256, physical_units=True, **kw):
    """Roll out both checkpoints on the same windows and score them.

    ``indices`` are dataset window indices; the effective sample rate of the
    lead series is the frame rate divided by the index spacing.
    """
    from .training import predict

    indices = np.asarray(indices, dtype=int)
    if indices.size == 0:
        raise ValueError("no windows to evaluate")
    steps = np.diff(dataset.starts[indices])
    step = int(steps[0]) if steps.size else 1
    if steps.size and np.any(steps != step):
        raise ValueError("evaluation windows must be evenly spaced")
    H = max(horizons)
    preds = {}
    for name, ck in (("acc", acc_checkpoint), ("mm", mm_checkpoint)):
        if ck.config.L_enc != dataset.L_enc:
            raise ValueError(f"{name} checkpoint was trained for a different window length")
        preds[name] = predict(dataset, indices, ck.tensors(), ck.config, batch, H)
    _, _, Y = dataset.batch(indices)
    Y = Y[:, :H]
    if physical_units and dataset.norm is not None:
        preds = {k: dataset.norm.invert_acc(v) for k, v in preds.items()}
        Y = dataset.norm.invert_acc(Y)
    kw.setdefault("channel_names", list(dataset.acc_names))
    if "wind_speed" not in kw and dataset.d_w:
        Xw, _, _ = dataset.batch(indices)
        ws = Xw[..., 0]
        if physical_units and dataset.norm is not None:
            ws = ws * dataset.norm.wind_std[0] + dataset.norm.wind_mean[0]
        kw["wind_speed"] = ws.mean(axis=1)
    meta = dict(kw.pop("meta", {}) or {})
    meta.update({"window_step": step, "acc_epoch": acc_checkpoint.epoch, "mm_epoch": mm_checkpoint.epoch})
    return compute_report(preds, Y, dataset.starts[indices], dataset.rate / step, horizons=horizons,
                          meta=meta, **kw)


def write_psd_csv(report, path, axis, horizon, names=("acc", "mm")):
    f, Sm, Sa = report.plot_data[(axis, horizon, names[0])]
    _, _, Smm = report.plot_data[(axis, horizon, names[1])]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frequency", "S_meas", "S_pred_acc", "S_pred_mm"])
        for row in zip(f, Sm, Sa, Smm):
            w.writerow([repr(float(v)) for v in row])


def write_histogram_csv(report, path, axis, horizon, bins=60, tail=20000):
    ea, em = report.plot_data[("residual", axis, horizon)]
    ea, em = ea.ravel()[-tail:], em.ravel()[-tail:]
    lo, hi = float(min(ea.min(), em.min())), float(max(ea.max(), em.max()))
    if hi <= lo:
        hi = lo + 1.0
    edges = np.linspace(lo, hi, bins + 1)
    ca, _ = np.histogram(ea, edges)
    cm, _ = np.histogram(em, edges)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_lo", "bin_hi", "count_acc", "count_mm"])
        for i in range(bins):
            w.writerow([repr(float(edges[i])), repr(float(edges[i + 1])), int(ca[i]), int(cm[i])])
