import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from gale import anomaly as A

FS = 50.0


def test_perfect_forecast_scores_zero(rng):
    x = rng.standard_normal((500, 2))
    s = A.residual_energy_score(x, x, [1.0, 1.0], fs=FS)
    assert not s.scores.any()


def test_baseline_like_residual_scores_one(rng):
    meas = rng.standard_normal(200_000)
    s = A.residual_energy_score(np.zeros_like(meas), 0.7 * meas, 0.7, fs=FS)
    assert s.scores[1000:].mean() == pytest.approx(1.0, abs=0.01)


def test_doubled_residual_scores_two(rng):
    e = rng.standard_normal(100_000)
    s = A.residual_energy_score(np.zeros_like(e), 2 * e, 1.0, fs=FS)
    assert s.scores[1000:].mean() == pytest.approx(2.0, abs=0.02)


def test_trailing_window_matches_direct(rng):
    r = rng.standard_normal(300)
    got = A.trailing_rms(r, 25)[:, 0]
    ref = [np.sqrt(np.mean(r[max(0, i - 24):i + 1] ** 2)) for i in range(300)]
    np.testing.assert_allclose(got, ref, rtol=1e-12)


def test_streaming_matches_batch(rng):
    r = rng.standard_normal(400)
    batch = A.residual_energy_score(np.zeros(400), r, 0.9, A.AnomalyConfig(window_seconds=1.0), fs=FS).scores[:, 0]
    online = A.StreamingScore(0.9, 50)
    np.testing.assert_allclose([online.update(v) for v in r], batch, rtol=1e-10)


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, 200, elements=st.floats(-5, 5)), st.floats(0.01, 100))
def test_scale_invariance(r, alpha):
    a = A.residual_energy_score(np.zeros(200), r, 1.3, fs=FS).scores
    b = A.residual_energy_score(np.zeros(200), alpha * r, alpha * 1.3, fs=FS).scores
    np.testing.assert_allclose(a, b, rtol=1e-9, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, 150, elements=st.floats(-5, 5)), hnp.arrays(np.float64, 150, elements=st.floats(0, 3)))
def test_monotone_in_residual(r, extra):
    a = A.residual_energy_score(np.zeros(150), r, 1.0, fs=FS).scores
    bigger = np.sign(r) * (np.abs(r) + extra)
    b = A.residual_energy_score(np.zeros(150), bigger, 1.0, fs=FS).scores
    assert np.all(b >= a - 1e-12)


def test_zero_baseline_sigma():
    with pytest.raises(ValueError):
        A.residual_energy_score(np.zeros(5), np.ones(5), 0.0)
    with pytest.raises(ValueError):
        A.baseline_sigma(np.zeros(5), np.ones(5))


def _series(scores, thr=3.0):
    scores = np.asarray(scores, float)
    return A.AnomalyScoreSeries(np.arange(len(scores)) / FS, scores[:, None] if scores.ndim == 1 else scores,
                                ("z",) if scores.ndim == 1 else ("x", "y"), np.ones(1), thr, 10)


def test_no_events_below_threshold():
    assert A.threshold_warnings(_series(np.full(300, 2.9)), fs=FS) == []


def test_single_run_one_event():
    s = np.ones(500)
    s[100:200] = 4.0
    s[150] = 7.0
    (ev,) = A.threshold_warnings(_series(s), fs=FS)
    assert (ev.start, ev.end, ev.peak, ev.axes) == (100, 199, 7.0, ["z"])


def test_dwell_suppresses_short_runs():
    s = np.ones(500)
    s[100:140] = 4.0        # 0.8 s < 1 s dwell
    s[300:360] = 4.0        # 1.2 s
    events = A.threshold_warnings(_series(s), fs=FS)
    assert [(e.start, e.end) for e in events] == [(300, 359)]


def test_axis_toggle():
    s = np.ones((300, 2))
    s[50:200, 1] = 5.0
    ser = _series(s)
    assert A.threshold_warnings(ser, A.AnomalyConfig(axes=("x",)), fs=FS) == []
    (ev,) = A.threshold_warnings(ser, fs=FS)
    assert ev.axes == ["y"]


def test_injection_detected_within_one_window(rng):
    n, t0 = 6000, 3500
    meas = rng.standard_normal(n)
    pred = meas + 0.1 * rng.standard_normal(n)
    sigma = A.baseline_sigma(pred[:3000], meas[:3000])
    injected = A.inject_amplitude_change(meas, t0, 1.5)
    cfg = A.AnomalyConfig()
    events = A.threshold_warnings(A.residual_energy_score(pred, injected, sigma, cfg, fs=FS), cfg, fs=FS)
    assert events and t0 <= events[0].start <= t0 + cfg.window(FS)


def test_event_invariants():
    with pytest.raises(ValueError):
        A.WarningEvent(5, 4, [], 4.0, 3.0)
    with pytest.raises(ValueError):
        A.WarningEvent(1, 4, [], 2.0, 3.0)
    with pytest.raises(ValueError):
        A.AnomalyConfig(multiplier=0)


def test_exports(tmp_path, rng):
    x = rng.standard_normal((100, 3))
    s = A.residual_energy_score(x, x * 1.1, [1, 1, 1], fs=FS, axes=("x", "y", "z"))
    s.to_csv(tmp_path / "scores.csv")
    assert (tmp_path / "scores.csv").read_text().splitlines()[0] == "t,score_x,score_y,score_z,threshold"
    ev = [A.WarningEvent(1, 4, ["x"], 4.0, 3.0, 0.02, 0.08)]
    A.write_events_json(ev, tmp_path / "ev.json")
    assert A.read_events_json(tmp_path / "ev.json") == ev
