"""Acceptance criteria, one test per criterion.

Each test is tagged with ``@pytest.mark.criterion`` and the run ends with a
PASS/FAIL line per criterion (see ``conftest.py``).  Measured values are
attached with ``record_property`` so the summary shows them.  Criteria 9
and 10 train six small models and take most of the suite's runtime.
"""
import json
import math
import time

import numpy as np
import pytest
from scipy import signal
from scipy.stats import norm

from gale import bench as B
from gale import evaluation as E
from gale import io as IO
from gale import models as M
from gale import pipeline as PL
from gale import preprocess as P
from gale import tensor as T
from gale.tensor import Tensor

from conftest import rel_err

SEEDS = (0, 1, 2)
DATA_SEED = 1


class Clock:
    def __init__(self, limit):
        self.limit, self.t0 = limit, time.perf_counter()

    @property
    def elapsed(self):
        return time.perf_counter() - self.t0

    def check(self, record):
        record("seconds", round(self.elapsed, 2))
        assert self.elapsed < self.limit, f"took {self.elapsed:.1f}s, limit {self.limit}s"


# ---------------------------------------------------------------------------
# 1-2: synthetic bench
# ---------------------------------------------------------------------------

@pytest.mark.criterion(1, "stability reproduction")
def test_stability_reproduction(record_property):
    clock = Clock(1.0)
    rep = B.stability_report(B.DeckParams(), dt=0.01)
    want = np.array([-1.6260 - 50.0234j, -1.6260 + 50.0234j, -0.2490 - 4.4607j, -0.2490 + 4.4607j])
    worst = max(np.min(np.abs(rep.continuous - w)) / abs(w) for w in want)
    record_property("max_rel_eig_err", f"{worst:.2e}")
    record_property("rho", f"{rep.spectral_radius:.6f}")
    assert worst < 1e-3
    assert abs(rep.spectral_radius - 0.99751) < 1e-4
    clock.check(record_property)


def _rk4_error(dt, duration=12.0):
    p = B.DeckParams()
    n = int(round(duration / dt)) + 1
    init = B.SimState(h=0.01, phi=0.001)
    r = B.simulate(p, np.zeros(n), dt, init=init)
    return np.abs(r.states() - B.propagate_exact(p, init.as_array(), dt, n))


@pytest.mark.criterion(2, "integrator order")
def test_integrator_order(record_property):
    clock = Clock(5.0)
    err, err_half = _rk4_error(0.01), _rk4_error(0.005)
    end, end_half = float(np.max(err[-1])), float(np.max(err_half[-1]))
    ratio = end / end_half
    record_property("end_err", f"{end:.2e}")
    record_property("ratio", f"{ratio:.2f}")
    record_property("max_err_over_run", f"{np.max(err):.2e}")
    assert end < 1e-8
    assert 12 <= ratio <= 20
    clock.check(record_property)


# ---------------------------------------------------------------------------
# 3-4: model math
# ---------------------------------------------------------------------------

def _weighted(y, seed=7):
    w = np.random.default_rng(seed).standard_normal(y.shape)
    return (y * w).sum()


def _check(build, *arrays):
    params = [T.parameter(a.copy()) for a in arrays]
    T.backward(build(*params))
    worst = 0.0
    for i, a in enumerate(arrays):
        def f(x, i=i):
            return build(*[Tensor(x if j == i else arrays[j]) for j in range(len(arrays))]).item()
        worst = max(worst, rel_err(params[i].grad, T.finite_diff_gradient(f, a, 1e-5)))
    return worst


def _small(mode):
    return M.ModelConfig(mode=mode, d_model=8, n_heads=2, d_ff=12, n_enc_layers=0 if mode == "acc_only" else 1,
                         n_dec_layers=1, d_w=2, d_a=3, L_enc=6, L_pred=2, dropout=0.0, cnn_channels=5,
                         cnn_enc_layers=1, cnn_dec_layers=1)


@pytest.mark.criterion(3, "gradient suite")
def test_gradient_suite(record_property):
    clock = Clock(60.0)
    rng = np.random.default_rng(3)
    r = rng.standard_normal
    relu_in = r((5, 3))
    relu_in[np.abs(relu_in) < 1e-3] = 0.5
    mask = np.triu(np.ones((4, 4), bool), 1)
    ops = {
        "elementwise": (lambda x, y: _weighted(x * y + x - y * 2.0 + 1.0 - x / 4.0), r((3, 4)), r(4)),
        "matmul": (lambda x, y: _weighted(x @ y), r((2, 3, 4)), r((4, 5))),
        "relu": (lambda x: _weighted(T.relu(x)), relu_in),
        "exp": (lambda x: _weighted(T.exp(0.3 * x)), r((3, 3))),
        "softmax": (lambda x: _weighted(T.softmax_rows(x, mask)), r((2, 4, 4))),
        "layer_norm": (lambda x, g, b: _weighted(T.layer_norm(x, g, b)), r((2, 3, 6)), 1 + 0.1 * r(6), 0.1 * r(6)),
        "linear": (lambda x, w, b: _weighted(T.linear(x, w, b)), r((2, 5, 3)), r((3, 4)), r(4)),
        "causal_conv": (lambda x, w, b: _weighted(T.causal_conv1d(x, w, b, 2)), r((2, 7, 3)), r((3, 3, 2)), r(2)),
        "reshape_index": (lambda x: _weighted(T.concat([x.reshape(2, 6, 2).transpose(0, 2, 1)[:, :, 1:4],
                                                        x.reshape(2, 2, 6)[:, :, :3]], axis=1)).mean(),
                          r((4, 6))),
        "mse": (lambda p, t: T.mse_loss(p, t), r((2, 3)), r((2, 3))),
    }
    worst = {name: _check(fn, *arrs) for name, (fn, *arrs) in ops.items()}
    for mode in M.MODES:
        cfg = _small(mode)
        Xw, Xa, Y = r((2, 6, 2)), r((2, 6, 3)), r((2, 2, 3))
        weights = M.init_weights(cfg, rng)
        T.backward(T.mse_loss(M.teacher_forced_forward(Xw, Xa, Y, weights, cfg), Y))
        base = M.weights_to_arrays(weights)
        err = 0.0
        for name, w in weights.items():
            def f(x, name=name):
                ws = {k: Tensor(x if k == name else v) for k, v in base.items()}
                return T.mse_loss(M.teacher_forced_forward(Xw, Xa, Y, ws, cfg), Tensor(Y)).item()
            err = max(err, rel_err(w.grad, T.finite_diff_gradient(f, base[name], 1e-5)))
        worst[f"loss_{mode}"] = err
    top = max(worst, key=worst.get)
    record_property("max_rel_err", f"{worst[top]:.1e} ({top})")
    assert all(v < 1e-4 for v in worst.values()), worst
    clock.check(record_property)


def _future_perturbed(x, t, rng):
    y = x.copy()
    y[:, t + 1:] += rng.standard_normal(y[:, t + 1:].shape)
    return y


@pytest.mark.criterion(4, "causality suite")
def test_causality_suite(record_property):
    clock = Clock(30.0)
    rng = np.random.default_rng(4)
    trials = 0
    for mode in M.MODES:
        cfg = _small(mode)
        cfg = M.ModelConfig(**{**cfg.to_dict(), "L_enc": 8})
        step = M._step_model(rng.standard_normal((1, 8, cfg.d_w)), M.init_weights(cfg, rng), cfg, 1)
        for _ in range(100):
            Xa = rng.standard_normal((1, 8, cfg.d_a))
            t = int(rng.integers(0, 7))
            with T.no_grad():
                a, b = step(Xa).data, step(_future_perturbed(Xa, t, rng)).data
            assert np.array_equal(a[:, :t + 1], b[:, :t + 1]), mode
            trials += 1
    for _ in range(100):
        K, d = int(rng.integers(1, 4)), int(rng.integers(1, 5))
        x = rng.standard_normal((2, 12, 3))
        w, b = Tensor(rng.standard_normal((K, 3, 4))), Tensor(rng.standard_normal(4))
        t = int(rng.integers(0, 11))
        a = T.causal_conv1d(Tensor(x), w, b, d).data
        c = T.causal_conv1d(Tensor(_future_perturbed(x, t, rng)), w, b, d).data
        assert np.array_equal(a[:, :t + 1], c[:, :t + 1])
        trials += 1
    record_property("trials", trials)
    clock.check(record_property)


# ---------------------------------------------------------------------------
# 5-8: signal processing and metrics
# ---------------------------------------------------------------------------

@pytest.mark.criterion(5, "DSP suite")
def test_dsp_suite(record_property):
    clock = Clock(10.0)
    x = np.arange(50.0)
    quad = 0.3 * x ** 2 - 2 * x + 1
    assert np.allclose(P.savitzky_golay(quad), quad, atol=1e-9 * np.abs(quad).max())
    # least-squares centre weights of a quadratic on 7 points
    c = np.linalg.pinv(np.vander(np.arange(-3, 4), 3, increasing=True))[0]
    np.testing.assert_allclose(c, np.array([-2, 3, 6, 7, 6, 3, -2]) / 21, atol=1e-12)
    # the smoother runs forward then backward, so its interior impulse
    # response is the autocorrelation of those weights
    impulse = np.zeros(31)
    impulse[15] = 1.0
    np.testing.assert_allclose(P.savitzky_golay(impulse)[9:22], np.convolve(c, c[::-1]), atol=1e-12)
    fs = 200.0
    dc = P.highpass_filtfilt(np.full(40000, 3.0), fs)
    assert np.max(np.abs(dc)) < 1e-6 * 3.0
    t = np.arange(40000) / fs
    s = np.sin(2 * np.pi * t)
    y = P.highpass_filtfilt(s, fs)
    mid = slice(8000, 32000)
    lags = np.arange(-20, 21)
    assert lags[int(np.argmax([np.dot(s[mid], np.roll(y, -k)[mid]) for k in lags]))] == 0
    _, h = signal.sosfreqz(P.butter_highpass(fs), worN=[0.05], fs=fs)
    assert abs(h[0]) ** 2 == pytest.approx(0.5, rel=0.01)
    tc = np.arange(int(400 * fs)) / fs
    xc = np.sin(2 * np.pi * 0.05 * tc)
    keep = slice(len(tc) // 4, 3 * len(tc) // 4)
    gain = np.std(P.highpass_filtfilt(xc, fs)[keep]) / np.std(xc[keep])
    record_property("double_pass_gain_at_fc", f"{gain:.4f}")
    assert gain == pytest.approx(0.5, rel=0.01)
    clock.check(record_property)


@pytest.mark.criterion(6, "Welch/Parseval")
def test_welch_parseval(record_property):
    clock = Clock(10.0)
    rng = np.random.default_rng(6)
    cfg = E.WelchConfig(fs=200.0)
    f, S = E.welch_psd(rng.standard_normal(200 * 400), cfg)
    noise = float(np.sum(S) * (f[1] - f[0]))
    t = np.arange(200 * 200) / 200.0
    f2, S2 = E.welch_psd(np.sin(2 * np.pi * t), cfg)
    sine = float(np.sum(S2) * (f2[1] - f2[0]))
    record_property("noise_power", f"{noise:.4f}")
    record_property("sine_power", f"{sine:.4f}")
    assert noise == pytest.approx(1.0, rel=0.05)
    assert sine == pytest.approx(0.5, rel=0.05)
    band = E.ModalBand(1.0, 0.8, 1.2)
    assert E.ber(f2, S2, S2, band) == 1.0
    assert E.mpe(f2, S2, S2, 1.0) == 0.0
    clock.check(record_property)


@pytest.mark.criterion(7, "metric identities")
def test_metric_identities(record_property):
    clock = Clock(5.0)
    rng = np.random.default_rng(7)
    m = rng.standard_normal(64) + 0.5
    assert E.delta_peak(m, m) == 0.0 and E.rmsr(m, m) == 1.0
    assert E.rmse_mae(m, m) == (0.0, 0.0)
    assert E.win_rate(np.ones(5), np.ones(5)) == 0.0
    f = np.linspace(0, 5, 501)
    S = 1.0 / ((f - 1.2) ** 2 + 0.01) + 0.1
    band = E.ModalBand(1.2, 1.0, 1.4)
    assert E.ber(f, S, S, band) == 1.0 and E.mpe(f, S, S, 1.2) == 0.0
    worst = 0.0
    for alpha in (0.25, 0.7, 1.9, 3.0):
        worst = max(worst, abs(E.rmsr(alpha * m, m) - alpha), abs(E.ber(f, alpha ** 2 * S, S, band) - alpha ** 2))
    record_property("max_scaling_err", f"{worst:.1e}")
    assert worst < 1e-9
    clock.check(record_property)


@pytest.mark.criterion(8, "residual risk oracle")
def test_residual_risk_oracle(record_property):
    clock = Clock(5.0)
    rng = np.random.default_rng(8)
    n = 100_000
    s = E.residual_stats(rng.standard_normal(n), rng.standard_normal(n))
    p0 = 2 * (1 - norm.cdf(3))
    band = 3 * math.sqrt(p0 * (1 - p0) / n)
    record_property("p_acc", f"{s.p_acc:.5f}")
    record_property("p_mm", f"{s.p_mm:.5f}")
    assert abs(s.p_acc - p0) < band and abs(s.p_mm - p0) < band
    clock.check(record_property)


# ---------------------------------------------------------------------------
# 9-11: desk-scale pipeline
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def desk():
    return PL.desk_dataset(PL.DeskConfig(), seed=DATA_SEED)


@pytest.fixture(scope="module")
def trained(desk):
    """``{(mode, seed): (checkpoint, seconds)}`` for the three seeds."""
    out = {}
    for seed in SEEDS:
        for mode in ("acc_only", "multimodal"):
            t0 = time.perf_counter()
            ck, _ = PL.train_desk(desk, mode, seed)
            out[mode, seed] = (ck, time.perf_counter() - t0)
    return out


@pytest.mark.slow
@pytest.mark.criterion(9, "desk-scale directional check")
def test_desk_directional(desk, trained, record_property):
    idx = PL.evaluation_indices(desk, "test")
    per_seed = []
    for seed in SEEDS:
        (ca, ta), (cm, tm) = trained["acc_only", seed], trained["multimodal", seed]
        assert max(ta, tm) < 30 * 60, "a model exceeded the 30 min budget"
        rep = E.evaluate_pair(desk, idx, ca, cm, horizons=(18,))
        per_seed.append({axis: (rep.scalar[axis][18]["mm"]["rmse"] / rep.scalar[axis][18]["acc"]["rmse"],
                                rep.win_rate[axis][18]["rmse"]) for axis in rep.scalar})
    axes = list(per_seed[0])
    medians = {a: (float(np.median([s[a][0] for s in per_seed])), float(np.median([s[a][1] for s in per_seed])))
               for a in axes}
    for a, (ratio, win) in medians.items():
        record_property(a, f"rmse_ratio={ratio:.3f} win={win:.1f}%")
    assert any(ratio < 1.0 and win > 50.0 for ratio, win in medians.values()), medians


@pytest.mark.slow
@pytest.mark.criterion(10, "early-warning injection")
def test_early_warning_injection(desk, trained, record_property):
    clock = Clock(300.0)
    ck = trained["multimodal", SEEDS[0]][0]
    res, t0 = PL.detect(desk, ck, segment="test", inject_factor=1.5)
    clean, _ = PL.detect(desk, ck, segment="val")
    window = res.series.window / desk.rate
    first = res.events[0].t_start if res.events else None
    record_property("t0", f"{t0:.2f}")
    record_property("first_event", "none" if first is None else f"{first:.2f}")
    record_property("clean_events", len(clean.events))
    assert first is not None and t0 <= first <= t0 + window
    assert clean.events == []
    clock.check(record_property)


@pytest.mark.criterion(11, "leakage / no boundary crossing")
def test_no_boundary_crossing(desk, record_property):
    clock = Clock(10.0)
    cases = 0
    for T_ in range(40, 301, 13):
        for L_enc, L_pred, stride in ((5, 3, 1), (8, 4, 3), (2, 1, 2)):
            sp = P.chronological_split(T_)
            fr = P.AlignedFrame(np.arange(T_) / 10.0, np.zeros((T_, 1)), np.zeros((T_, 1)), rate=10.0)
            ds = P.make_windows(fr, sp, L_enc, L_pred, stride)
            want = [(s, k) for k, (a, b) in enumerate(sp.bounds) for s in range(a, b - L_enc - L_pred + 1, stride)]
            assert sorted(zip(ds.starts.tolist(), ds.labels.tolist())) == want
            cases += 1
    for k, (a, b) in enumerate(desk.split.bounds):
        sel = desk.labels == k
        st = desk.starts[sel]
        assert np.all(st >= a) and np.all(st + desk.L_enc + desk.L_pred <= b)
        assert sel.sum() == P.window_count(b - a, desk.L_enc, desk.L_pred, desk.stride)
    record_property("brute_force_cases", cases)
    record_property("desk_windows", len(desk))
    clock.check(record_property)


# ---------------------------------------------------------------------------
# 12: containers and reruns
# ---------------------------------------------------------------------------

@pytest.mark.criterion(12, "round trips")
def test_round_trips(tmp_path, record_property):
    from gale import cli
    small = PL.DeskConfig(duration=40.0, L_enc=12, L_pred=6)
    ds = PL.desk_dataset(small, seed=2)
    IO.write_dataset(ds, tmp_path / "d.gtw")
    back = IO.read_dataset(tmp_path / "d.gtw", verify=True)
    for name in ("wind", "acc", "starts", "labels"):
        assert getattr(back, name).tobytes() == getattr(ds, name).tobytes()
    ck, _ = PL.train_desk(ds, "multimodal", 0, model_overrides=dict(d_model=8, n_heads=2, d_ff=8, n_enc_layers=1,
                                                                   n_dec_layers=1),
                          max_epochs=1, patience=1, train_step=20, val_step=20)
    IO.write_checkpoint(ck, tmp_path / "m.gtck")
    ck2 = IO.read_checkpoint(tmp_path / "m.gtck")
    assert all(ck2.weights[k].tobytes() == ck.weights[k].tobytes() for k in ck.weights)
    assert all(a.tobytes() == b.tobytes() for a, b in zip(ck2.optimizer.m, ck.optimizer.m))
    IO.write_checkpoint(ck2, tmp_path / "m2.gtck")
    assert (tmp_path / "m.gtck").read_bytes() == (tmp_path / "m2.gtck").read_bytes()

    def rerun(out):
        cfg = out / "c.cfg"
        out.mkdir()
        steps = [("simulate", "duration = 40.0\n"), ("preprocess", "L_enc = 12\nL_pred = 6\n"),
                 ("train", "d_model = 8\nn_heads = 2\nd_ff = 8\nn_dec_layers = 1\nmax_epochs = 1\npatience = 1\n"
                           "train_step = 20\nval_step = 20\n"),
                 ("forecast", "step = 1\n"), ("detect", "window_seconds = 2.0\n")]
        for cmd, text in steps:
            cfg.write_text(text)
            assert cli.main([cmd, "--config", str(cfg), "--out-dir", str(out), "--seed", "4",
                             "--horizons", "1,3,6"]) == 0
        return {p.name: p.read_bytes() for p in out.iterdir() if p.suffix != ".cfg"}

    a, b = rerun(tmp_path / "r1"), rerun(tmp_path / "r2")
    assert a.keys() == b.keys()
    differing = []
    for name in a:
        x, y = a[name], b[name]
        if name.startswith("manifest_"):
            x, y = ({k: v for k, v in json.loads(m).items() if k != "wall_time_s"} for m in (x, y))
        elif name.startswith("trainlog_"):
            x, y = ([r.split(",")[:3] + r.split(",")[4:] for r in v.decode().splitlines()] for v in (x, y))
        if x != y:
            differing.append(name)
    record_property("rerun_files", len(a))
    assert not differing, differing
