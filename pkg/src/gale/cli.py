"""``gale`` command line: simulate, preprocess, train, forecast, evaluate, detect.

Each run reads an optional ``key = value`` config file, applies flag
overrides (flags win), writes its artifacts under the output directory and
a ``manifest_<command>.json`` describing the run.  Failures print a JSON
error object on stderr and exit nonzero.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import time
from dataclasses import asdict, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from . import anomaly as A
from . import bench as B
from . import evaluation as E
from . import io as IO
from . import models as M
from . import pipeline as PL
from . import preprocess as P
from . import training as TR


class CLIError(Exception):
    """User-facing failure; ``field`` names the offending config key if any."""

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


# Recognised config keys and defaults per command.  ``None`` marks
# "use the derived default".
DEFAULTS = {
    "simulate": dict(duration=600.0, dt=0.01, mean_speed=10.0, u_s=0.4, deck="stable", sigma=0.2, bias=3.0,
                     method="direct", seed=0),
    "preprocess": dict(input="accurate.csv", output="dataset.gtw", wind_channels=PL.WIND_CHANNELS,
                       acc_channels=PL.ACC_CHANNELS, noise=0.05, decimate=2, clean=False, smooth=False,
                       L_enc=50, L_pred=20, stride=1, fractions=(0.7, 0.15, 0.15), wind_delay=0, seed=0),
    "train": dict(dataset="dataset.gtw", mode="multimodal", seed=0, d_model=64, n_heads=4, d_ff=128,
                  n_enc_layers=None, n_dec_layers=2, cnn_channels=64, dropout=PL.DESK_DROPOUT,
                  context="growing", val_limit=None, **{k: v for k, v in PL.DESK_TRAIN.items()}),
    "forecast": dict(dataset="dataset.gtw", checkpoint=None, mode="multimodal", split="test", step=2,
                     horizons=E.DEFAULT_HORIZONS, seed=0),
    "evaluate": dict(acc_forecast="forecast_acc_only.csv", mm_forecast="forecast_multimodal.csv",
                     horizons=E.DEFAULT_HORIZONS, highpass=True, prominence=5.0, seed=0),
    "detect": dict(dataset="dataset.gtw", checkpoint=None, mode="multimodal", segment="test", horizon=1,
                   window_seconds=5.0, multiplier=3.0, dwell_seconds=1.0, baseline_segment="val",
                   inject_factor=None, inject_at=None, seed=0),
}
TUPLE_KEYS = {"wind_channels", "acc_channels", "fractions", "horizons"}


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _as_tuple(v):
    if v is None:
        return None
    if isinstance(v, str):
        return tuple(p.strip() for p in v.split(",") if p.strip())
    if isinstance(v, (list, tuple)):
        return tuple(v)
    return (v,)


def resolve_config(command, args):
    cfg = dict(DEFAULTS[command])
    if args.config:
        try:
            loaded = IO.read_config(args.config)
        except OSError as exc:
            raise CLIError(f"cannot read config: {exc}") from exc
        except ValueError as exc:
            raise CLIError(str(exc)) from exc
        for k in loaded:
            if k not in cfg:
                raise CLIError(f"unknown config key {k!r} for {command}", field=k)
        cfg.update(loaded)
    flag_map = {"seed": "seed", "mode": "mode", "horizons": "horizons", "wind_delay": "wind_delay",
                "sigma": "sigma", "bias": "bias"}
    for attr, key in flag_map.items():
        v = getattr(args, attr, None)
        if v is not None and key in cfg:
            cfg[key] = v
    for k in TUPLE_KEYS & cfg.keys():
        cfg[k] = _as_tuple(cfg[k])
    if "horizons" in cfg:
        try:
            cfg["horizons"] = tuple(int(h) for h in cfg["horizons"])
        except (TypeError, ValueError) as exc:
            raise CLIError("horizons must be integers", field="horizons") from exc
    if not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
        raise CLIError("seed must be a non-negative integer", field="seed")
    return cfg


def _require(cond, key, message):
    if not cond:
        raise CLIError(f"config field {key!r}: {message}", field=key)


def _path(out_dir, p):
    p = Path(p)
    return p if p.is_absolute() else out_dir / p


def _rel(out_dir, p):
    p = Path(p)
    try:
        return str(p.resolve().relative_to(out_dir.resolve()))
    except ValueError:
        return str(p)


def _need(path, what):
    if not Path(path).exists():
        raise CLIError(f"missing input {what}: {path}")
    return path


def _header(path):
    """``# key=value`` comment lines at the top of a CSV."""
    out = {}
    with open(path) as fh:
        for line in fh:
            if not line.startswith("#"):
                break
            k, _, v = line[1:].strip().partition("=")
            out[k.strip()] = v.strip()
    return out


class Run:
    """Book-keeping for one command invocation."""

    def __init__(self, command, cfg, out_dir, args):
        self.command, self.cfg, self.out_dir = command, cfg, out_dir
        self.force = bool(getattr(args, "force", False))
        self.hash = IO.config_hash({"command": command, **cfg})
        self.inputs, self.outputs = {}, {}
        self.workers = args.workers
        self.t0 = time.perf_counter()

    def use(self, path):
        self.inputs[_rel(self.out_dir, path)] = IO.file_hash(path)
        return path

    def made(self, path, digest=IO.file_hash):
        self.outputs[_rel(self.out_dir, path)] = digest(path)
        return path

    def finish(self):
        manifest = {"command": self.command, "config_hash": self.hash, "seed": self.cfg["seed"],
                    "config": {k: list(v) if isinstance(v, tuple) else v for k, v in self.cfg.items()},
                    "inputs": self.inputs, "outputs": self.outputs, "workers": self.workers,
                    "tool_version": __version__, "wall_time_s": round(time.perf_counter() - self.t0, 3)}
        suffix = f"_{self.cfg['mode']}" if self.command in ("train", "forecast") else ""
        path = self.out_dir / f"manifest_{self.command}{suffix}.json"
        IO.write_manifest(path, manifest)
        return manifest


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_simulate(run):
    c = run.cfg
    _require(c["duration"] > 0, "duration", "must be positive")
    _require(c["dt"] > 0, "dt", "must be positive")
    _require(c["sigma"] >= 0, "sigma", "must be non-negative")
    _require(c["deck"] in PL.DECKS, "deck", f"must be one of {PL.DECKS}")
    _require(c["method"] in ("direct", "fft"), "method", "must be 'direct' or 'fft'")
    try:
        wind = B.WindFieldConfig(mean_speed=float(c["mean_speed"]), u_s=float(c["u_s"]), seed=c["seed"])
    except ValueError as exc:
        raise CLIError(f"wind config: {exc}") from exc
    p = PL.deck_params(c["deck"])
    u = B.generate_wind(wind, c["duration"], c["dt"], c["method"])
    u_tilde = B.perturb_wind(u, c["sigma"], c["bias"], c["seed"] + 1)
    acc = B.simulate(p, u, c["dt"])
    pert = B.simulate(p, u_tilde, c["dt"])
    d = run.out_dir
    IO.write_sim_csv(acc, d / "accurate.csv", run.hash)
    IO.write_sim_csv(pert, d / "perturbed.csv", run.hash)
    err, cum = B.compare_runs(acc, pert)
    with open(d / "comparison.csv", "w", newline="") as fh:
        fh.write(f"# config_hash={run.hash}\n")
        w = csv.writer(fh)
        w.writerow(["t"] + [f"err_{n}" for n in B.STATE_NAMES] + [f"cum_abs_err_{n}" for n in B.STATE_NAMES])
        for i in range(len(acc.t)):
            w.writerow([repr(float(acc.t[i]))] + [repr(float(v)) for v in err[i]] + [repr(float(v)) for v in cum[i]])
    report = B.stability_report(p, c["dt"]).to_dict()
    report["config_hash"] = run.hash
    with open(d / "stability.json", "w") as fh:
        json.dump(report, fh, indent=2)
    for name in ("accurate.csv", "perturbed.csv", "comparison.csv", "stability.json"):
        run.made(d / name)


def cmd_preprocess(run):
    c = run.cfg
    src = _need(_path(run.out_dir, c["input"]), "CSV")
    run.use(src)
    try:
        desk = PL.DeskConfig(noise=float(c["noise"]), decimate=int(c["decimate"]), L_enc=int(c["L_enc"]),
                             L_pred=int(c["L_pred"]), stride=int(c["stride"]), fractions=tuple(c["fractions"]),
                             clean=bool(c["clean"]), smooth=bool(c["smooth"]), wind_delay=int(c["wind_delay"]))
    except (ValueError, TypeError) as exc:
        raise CLIError(f"preprocess config: {exc}") from exc
    channels = {ch.name: ch for ch in P.load_channels(src)}
    for key in ("wind_channels", "acc_channels"):
        for name in c[key]:
            _require(name in channels, key, f"channel {name!r} not in {sorted(channels)}")
    first = channels[c["acc_channels"][0]]
    t = first.times()
    wind = np.column_stack([channels[n].values for n in c["wind_channels"]])
    acc = np.column_stack([channels[n].values for n in c["acc_channels"]])
    frame = PL.frame_from_channels(t, wind, acc, replace(desk, dt=1.0 / first.rate), c["seed"],
                                   c["wind_channels"], c["acc_channels"])
    try:
        ds = PL.build_dataset(frame, desk, meta={"config_hash": run.hash, "source_hash": IO.file_hash(src),
                                                 "source_config_hash": IO.read_header_hash(src)})
    except ValueError as exc:
        raise CLIError(str(exc)) from exc
    out = _path(run.out_dir, c["output"])
    IO.write_dataset(ds, out)
    run.made(out)


def _load_dataset(run, key="dataset"):
    path = _need(_path(run.out_dir, run.cfg[key]), "dataset")
    run.use(path)
    try:
        return IO.read_dataset(path), path
    except IO.FormatError as exc:
        raise CLIError(str(exc)) from exc


def _checkpoint_path(run):
    c = run.cfg
    return _path(run.out_dir, c["checkpoint"] or f"model_{c['mode']}.gtck")


def _load_checkpoint(run):
    path = _need(_checkpoint_path(run), "checkpoint")
    run.use(path)
    try:
        return IO.read_checkpoint(path)
    except IO.FormatError as exc:
        raise CLIError(str(exc)) from exc


def _check_lineage(run, ds, ck, force):
    want, got = ds.meta.get("config_hash"), ck.meta.get("dataset_hash")
    if want != got and not force:
        raise CLIError(f"checkpoint was trained on dataset {got}, not {want} (use --force to override)")


def cmd_train(run):
    c = run.cfg
    _require(c["mode"] in M.MODES, "mode", f"must be one of {M.MODES}")
    ds, _ = _load_dataset(run)
    model_kw = {k: c[k] for k in ("d_model", "n_heads", "d_ff", "n_dec_layers", "cnn_channels", "dropout", "context")}
    if c["n_enc_layers"] is not None:
        model_kw["n_enc_layers"] = c["n_enc_layers"]
    train_kw = {f.name: c[f.name] for f in fields(TR.TrainConfig) if f.name in c and f.name not in ("mode", "seed")}
    try:
        mcfg = PL.desk_model_config(c["mode"], ds, **model_kw)
        tcfg = PL.desk_train_config(c["mode"], c["seed"], **train_kw)
    except (ValueError, TypeError) as exc:
        raise CLIError(f"train config: {exc}") from exc
    try:
        ck, log_ = TR.train(ds, mcfg, tcfg)
    except TR.TrainingError as exc:
        raise CLIError(str(exc)) from exc
    ck.meta.update(config_hash=run.hash, dataset_hash=ds.meta.get("config_hash"))
    out = run.out_dir / f"model_{c['mode']}.gtck"
    IO.write_checkpoint(ck, out)
    log_.to_csv(run.out_dir / f"trainlog_{c['mode']}.csv")
    run.made(out)
    run.made(run.out_dir / f"trainlog_{c['mode']}.csv", _log_digest)


def _log_digest(path):
    """Hash of a training log without its wall-clock column, so reruns compare equal."""
    rows = [ln.split(",") for ln in Path(path).read_text().splitlines()]
    drop = rows[0].index("seconds")
    text = "\n".join(",".join(v for j, v in enumerate(r) if j != drop) for r in rows)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def write_forecast_csv(path, starts, wind_mean, pred, meas, names, header):
    with open(path, "w", newline="") as fh:
        for k, v in header.items():
            fh.write(f"# {k}={v}\n")
        w = csv.writer(fh)
        w.writerow(["start", "step", "wind_mean"] + [f"pred_{n}" for n in names] + [f"meas_{n}" for n in names])
        for i in range(len(starts)):
            for s in range(pred.shape[1]):
                w.writerow([int(starts[i]), s + 1, repr(float(wind_mean[i]))]
                           + [repr(float(v)) for v in pred[i, s]] + [repr(float(v)) for v in meas[i, s]])


def read_forecast_csv(path):
    """``(header, starts, wind_mean, pred, meas, names)`` from a forecast CSV."""
    header = _header(path)
    rows = [ln for ln in Path(path).read_text().splitlines() if ln and not ln.startswith("#")]
    cols = rows[0].split(",")
    data = np.array([[float(v) for v in ln.split(",")] for ln in rows[1:]])
    names = [c[5:] for c in cols if c.startswith("pred_")]
    d = len(names)
    H = int(data[:, 1].max())
    data = data.reshape(-1, H, data.shape[1])
    return (header, data[:, 0, 0].astype(np.int64), data[:, 0, 2], data[:, :, 3:3 + d], data[:, :, 3 + d:3 + 2 * d],
            names)


def cmd_forecast(run):
    c = run.cfg
    ds, _ = _load_dataset(run)
    ck = _load_checkpoint(run)
    _check_lineage(run, ds, ck, run.force)
    _require(c["split"] in P.SPLIT_NAMES, "split", f"must be one of {P.SPLIT_NAMES}")
    _require(int(c["step"]) >= 1, "step", "must be positive")
    H = max(c["horizons"])
    _require(1 <= min(c["horizons"]) and H <= ds.L_pred, "horizons", f"must lie in 1..{ds.L_pred}")
    idx = ds.subset(c["split"], int(c["step"]))
    if idx.size == 0:
        raise CLIError(f"split {c['split']!r} has no windows")
    pred = ds.norm.invert_acc(TR.predict(ds, idx, ck.tensors(), ck.config, 256, H))
    Xw, _, Y = ds.batch(idx)
    meas = ds.norm.invert_acc(Y[:, :H])
    wind = (Xw[..., 0] * ds.norm.wind_std[0] + ds.norm.wind_mean[0]).mean(axis=1) if ds.d_w else np.zeros(len(idx))
    out = run.out_dir / f"forecast_{ck.config.mode}.csv"
    header = {"config_hash": run.hash, "dataset_hash": ds.meta.get("config_hash"), "mode": ck.config.mode,
              "rate": repr(float(ds.rate)), "step": int(c["step"]), "split": c["split"]}
    write_forecast_csv(out, ds.starts[idx], wind, pred, meas, ds.acc_names, header)
    run.made(out)


def cmd_evaluate(run):
    c = run.cfg
    sets = {}
    for key, name in (("acc_forecast", "acc"), ("mm_forecast", "mm")):
        path = _need(_path(run.out_dir, c[key]), "forecast")
        run.use(path)
        sets[name] = read_forecast_csv(path)
    (ha, sa, wa, pa, ma, na), (hm, sm, _, pm, mm, nm) = sets["acc"], sets["mm"]
    if ha.get("dataset_hash") != hm.get("dataset_hash") and not run.force:
        raise CLIError("forecasts come from different datasets (use --force to override)")
    if not np.array_equal(sa, sm) or pa.shape != pm.shape:
        raise CLIError("forecast window sets differ; both models must be scored on identical windows")
    if not np.array_equal(ma, mm) or na != nm:
        raise CLIError("forecast files disagree on the measured values")
    H = max(c["horizons"])
    _require(H <= pa.shape[1], "horizons", f"forecasts only reach step {pa.shape[1]}")
    fs = float(ha["rate"]) / int(ha.get("step", 1))
    try:
        report = E.compute_report({"acc": pa, "mm": pm}, ma, sa, fs, channel_names=na, horizons=c["horizons"],
                                  highpass=bool(c["highpass"]), prominence=float(c["prominence"]), wind_speed=wa,
                                  meta={"config_hash": run.hash, "dataset_hash": ha.get("dataset_hash")})
    except ValueError as exc:
        raise CLIError(str(exc)) from exc
    d = run.out_dir
    report.to_json(d / "metrics.json")
    report.to_csv(d / "metrics.csv")
    run.made(d / "metrics.json")
    run.made(d / "metrics.csv")
    for axis in report.bands:
        for h in report.meta["horizons"]:
            if (axis, h, "acc") in report.plot_data:
                E.write_psd_csv(report, d / f"psd_{axis}_h{h}.csv", axis, h)
                run.made(d / f"psd_{axis}_h{h}.csv")
            E.write_histogram_csv(report, d / f"hist_{axis}_h{h}.csv", axis, h)
            run.made(d / f"hist_{axis}_h{h}.csv")


def cmd_detect(run):
    c = run.cfg
    ds, _ = _load_dataset(run)
    ck = _load_checkpoint(run)
    _check_lineage(run, ds, ck, run.force)
    for key in ("segment", "baseline_segment"):
        _require(c[key] in P.SPLIT_NAMES, key, f"must be one of {P.SPLIT_NAMES}")
    _require(1 <= int(c["horizon"]) <= ds.L_pred, "horizon", f"must lie in 1..{ds.L_pred}")
    try:
        acfg = A.AnomalyConfig(float(c["window_seconds"]), float(c["multiplier"]), float(c["dwell_seconds"]),
                               c["baseline_segment"])
        res, t0 = PL.detect(ds, ck, acfg, c["segment"], int(c["horizon"]), c["inject_factor"], c["inject_at"])
    except ValueError as exc:
        raise CLIError(str(exc)) from exc
    d = run.out_dir
    res.series.to_csv(d / "scores.csv", [f"config_hash={run.hash}"])
    A.write_events_json(res.events, d / "events.json",
                        {"config_hash": run.hash, "dataset_hash": ds.meta.get("config_hash"), "t0": t0,
                         "config": asdict(acfg)})
    run.made(d / "scores.csv")
    run.made(d / "events.json")


COMMANDS = {"simulate": cmd_simulate, "preprocess": cmd_preprocess, "train": cmd_train,
            "forecast": cmd_forecast, "evaluate": cmd_evaluate, "detect": cmd_detect}


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def _horizons(s):
    try:
        return tuple(int(p) for p in s.split(","))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {s!r}") from exc


def build_parser():
    ap = argparse.ArgumentParser(prog="gale", description="Wind-deck forecasting pipeline")
    ap.add_argument("command", choices=list(COMMANDS))
    ap.add_argument("--config", help="key = value config file")
    ap.add_argument("--seed", type=int)
    ap.add_argument("--workers", type=int, default=1, help="cap on parallel workers (commands run single-process)")
    ap.add_argument("--out-dir", help="output root (default $GALE_OUT_DIR or ./gale_out)")
    ap.add_argument("--mode", choices=list(M.MODES))
    ap.add_argument("--horizons", type=_horizons)
    ap.add_argument("--wind-delay", type=int, dest="wind_delay")
    ap.add_argument("--sigma", type=float)
    ap.add_argument("--bias", type=float)
    ap.add_argument("--force", action="store_true", help="accept inputs with mismatched config hashes")
    return ap


def _fail(command, exc, code=1):
    err = {"error": type(exc).__name__, "message": str(exc), "command": command}
    if isinstance(exc, CLIError) and exc.field:
        err["field"] = exc.field
    print(json.dumps(err), file=sys.stderr)
    return code


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.workers < 1:
            raise CLIError("--workers must be at least 1", field="workers")
        out_dir = Path(args.out_dir or os.environ.get("GALE_OUT_DIR") or "gale_out")
        out_dir.mkdir(parents=True, exist_ok=True)
        cfg = resolve_config(args.command, args)
        run = Run(args.command, cfg, out_dir, args)
        COMMANDS[args.command](run)
        manifest = run.finish()
    except CLIError as exc:
        return _fail(args.command, exc)
    except (B.SimulationError, IO.FormatError, OSError, ValueError) as exc:
        return _fail(args.command, exc)
    print(json.dumps({"command": args.command, "config_hash": manifest["config_hash"],
                      "outputs": sorted(manifest["outputs"])}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
