"""Desk-scale workflow shared by the command line and the acceptance suite.

A synthetic record is simulated on the wind-stable deck, corrupted with a
little sensor noise, subsampled to the forecasting rate and cut into
windows.  The training and detection helpers below fix the small-model
settings that fit a single CPU.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import anomaly as A
from . import bench as B
from . import models as M
from . import preprocess as P
from . import training as TR

DECKS = ("stable", "reference")
WIND_CHANNELS = ("u",)
ACC_CHANNELS = ("h_ddot", "phi_ddot")


@dataclass(frozen=True)
class DeskConfig:
    """Synthetic record and windowing settings.

    ``noise`` is the white sensor noise level as a fraction of each
    acceleration channel's standard deviation.  ``decimate`` keeps every
    n-th sample; the deck response is band-limited far below the reduced
    Nyquist rate.
    """

    duration: float = 600.0
    dt: float = 0.01
    mean_speed: float = 10.0
    u_s: float = 0.4
    deck: str = "stable"
    noise: float = 0.05
    decimate: int = 2
    L_enc: int = 50
    L_pred: int = 20
    stride: int = 1
    fractions: tuple = (0.7, 0.15, 0.15)
    clean: bool = False
    smooth: bool = False
    wind_delay: int = 0

    def __post_init__(self):
        if self.deck not in DECKS:
            raise ValueError(f"deck must be one of {DECKS}, got {self.deck!r}")
        if self.duration <= 0 or self.dt <= 0:
            raise ValueError("duration and dt must be positive")
        if self.noise < 0:
            raise ValueError("noise must be non-negative")
        if self.decimate < 1 or self.wind_delay < 0:
            raise ValueError("decimate must be >= 1 and wind_delay >= 0")

    @property
    def rate(self):
        return 1.0 / (self.dt * self.decimate)


def deck_params(name="stable"):
    if name == "stable":
        return B.stable_deck()
    if name == "reference":
        return B.DeckParams()
    raise ValueError(f"unknown deck {name!r}")


def wind_config(cfg, seed):
    return B.WindFieldConfig(mean_speed=cfg.mean_speed, u_s=cfg.u_s, seed=int(seed))


def simulate_record(cfg, seed):
    u = B.generate_wind(wind_config(cfg, seed), cfg.duration, cfg.dt)
    return B.simulate(deck_params(cfg.deck), u, cfg.dt)


def noise_rng(seed):
    # separate stream from the wind phases, same root seed
    return np.random.default_rng(np.random.SeedSequence([int(seed), 1]))


def frame_from_channels(t, wind, acc, cfg, seed, wind_names=WIND_CHANNELS, acc_names=ACC_CHANNELS):
    """Noisy, subsampled :class:`~gale.preprocess.AlignedFrame` from raw columns."""
    wind = np.asarray(wind, float).reshape(len(t), -1)
    acc = np.asarray(acc, float).reshape(len(t), -1)
    if cfg.noise > 0:
        acc = acc + cfg.noise * acc.std(axis=0) * noise_rng(seed).standard_normal(acc.shape)
    k = cfg.decimate
    return P.AlignedFrame(np.asarray(t, float)[::k], wind[::k], acc[::k], list(wind_names), list(acc_names),
                          cfg.rate)


def frame_from_result(result, cfg, seed):
    return frame_from_channels(result.t, result.u, np.column_stack([result.h_ddot, result.phi_ddot]), cfg, seed)


def build_dataset(frame, cfg, cleaning=None, meta=None):
    """Clean (optionally), delay the wind, split, normalise on train, and window."""
    flagged = 0
    if cfg.clean:
        frame, flagged = P.clean_frame(frame, cleaning, smooth=cfg.smooth)
    frame = P.shift_wind_delay(frame, cfg.wind_delay)
    split = P.chronological_split(len(frame), cfg.fractions, cfg.L_enc + cfg.L_pred)
    norm = P.fit_norm(frame, split)
    ds = P.make_windows(norm.apply(frame), split, cfg.L_enc, cfg.L_pred, cfg.stride, norm)
    ds.meta.update(meta or {})
    ds.meta["flagged_samples"] = flagged
    return ds


def desk_dataset(cfg=None, seed=1):
    cfg = cfg or DeskConfig()
    return build_dataset(frame_from_result(simulate_record(cfg, seed), cfg, seed), cfg, meta={"seed": int(seed)})


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

# Small-model settings for one CPU.  The full-scale per-mode defaults in
# training.MODE_DEFAULTS use batch 8 and tiny learning rates sized for far
# longer records.
DESK_TRAIN = dict(batch_size=32, lr=3e-4, weight_decay=0.0, grad_clip=1.0, max_epochs=8, patience=4,
                  train_step=5, val_step=10)
DESK_DROPOUT = 0.1


def desk_model_config(mode, dataset, **overrides):
    kw = dict(d_w=dataset.d_w, d_a=dataset.d_a, L_enc=dataset.L_enc, L_pred=dataset.L_pred, dropout=DESK_DROPOUT)
    kw.update(overrides)
    return M.tiny_config(mode, **kw)


def desk_train_config(mode, seed=0, **overrides):
    kw = dict(DESK_TRAIN, mode=mode, seed=int(seed))
    kw.update(overrides)
    return TR.TrainConfig(**kw)


def train_desk(dataset, mode, seed=0, progress=None, model_overrides=None, **train_overrides):
    mcfg = desk_model_config(mode, dataset, **(model_overrides or {}))
    return TR.train(dataset, mcfg, desk_train_config(mode, seed, **train_overrides), progress)


def evaluation_indices(dataset, split="test", step=2):
    return dataset.subset(split, step)


# ---------------------------------------------------------------------------
# detection
# ---------------------------------------------------------------------------

def lead_forecast(dataset, checkpoint, split, horizon=1, batch=256):
    """Lead-``horizon`` prediction and truth for every window of one split.

    Returns ``(t, pred, meas)`` where ``t`` is the time (s) of each target
    sample; consecutive windows are one sample apart.
    """
    idx = dataset.indices(split)
    if idx.size == 0:
        raise ValueError(f"split {split!r} has no windows")
    pred = TR.predict(dataset, idx, checkpoint.tensors(), checkpoint.config, batch, horizon)[:, horizon - 1]
    _, _, Y = dataset.batch(idx)
    target = dataset.starts[idx] + dataset.L_enc + horizon - 1
    return target / dataset.rate, pred, Y[:, horizon - 1]


def detect(dataset, checkpoint, cfg=None, segment="test", horizon=1, inject_factor=None, inject_at=None,
           batch=256):
    """Score one segment against a healthy baseline and threshold it.

    The baseline residual spread comes from ``cfg.baseline_segment``.  With
    ``inject_factor`` set, the measured stream of ``segment`` is scaled by
    that factor from ``inject_at`` seconds after the first scored sample;
    the forecaster's inputs are left as recorded.  Returns
    ``(DetectionResult, t0)`` with ``t0`` the absolute injection time or None.
    """
    cfg = cfg or A.AnomalyConfig()
    names = tuple(dataset.acc_names) or tuple(f"{j}" for j in range(dataset.d_a))
    _, pb, mb = lead_forecast(dataset, checkpoint, cfg.baseline_segment, horizon, batch)
    sigma = A.baseline_sigma(pb, mb)
    t, pred, meas = lead_forecast(dataset, checkpoint, segment, horizon, batch)
    t0 = None
    if inject_factor is not None:
        offset = 0.5 * (t[-1] - t[0]) if inject_at is None else float(inject_at)
        k0 = int(np.searchsorted(t, t[0] + offset))
        if not 0 < k0 < len(t):
            raise ValueError("injection time falls outside the scored segment")
        meas = A.inject_amplitude_change(meas, k0, inject_factor)
        t0 = float(t[k0])
    series = A.residual_energy_score(pred, meas, sigma, cfg, dataset.rate, t, names)
    return A.DetectionResult(series, A.threshold_warnings(series, cfg, dataset.rate)), t0

