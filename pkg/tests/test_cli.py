import json

import numpy as np
import pytest

from gale import cli
from gale import io as IO

SIM = "duration = 40.0\nmean_speed = 10.0\n"
PRE = "L_enc = 12\nL_pred = 6\n"
TRAIN = ("d_model = 8\nn_heads = 2\nd_ff = 8\nn_dec_layers = 1\nmax_epochs = 1\npatience = 1\n"
         "train_step = 20\nval_step = 20\n")


MANIFESTS = ("manifest_simulate.json", "manifest_preprocess.json", "manifest_train_acc_only.json",
             "manifest_train_multimodal.json", "manifest_forecast_acc_only.json",
             "manifest_forecast_multimodal.json", "manifest_evaluate.json", "manifest_detect.json")


def run(tmp_path, *argv, config=None):
    args = list(argv) + ["--out-dir", str(tmp_path)]
    if config is not None:
        path = tmp_path / f"{argv[0]}.cfg"
        path.write_text(config)
        args += ["--config", str(path)]
    return cli.main(args)


def pipeline(out, seed=3):
    assert run(out, "simulate", "--seed", str(seed), config=SIM) == 0
    assert run(out, "preprocess", "--seed", str(seed), config=PRE) == 0
    for mode in ("acc_only", "multimodal"):
        assert run(out, "train", "--mode", mode, "--seed", str(seed), config=TRAIN) == 0
        assert run(out, "forecast", "--mode", mode, "--horizons", "1,3,6", config="step = 1\n") == 0
    assert run(out, "evaluate", "--horizons", "1,3,6") == 0
    assert run(out, "detect", config="window_seconds = 2.0\n") == 0


@pytest.fixture(scope="module")
def first_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run1")
    pipeline(out)
    return out


def _stable(manifest):
    return {k: v for k, v in manifest.items() if k != "wall_time_s"}


def test_pipeline_artifacts(first_run):
    names = {p.name for p in first_run.iterdir()}
    for want in ("accurate.csv", "perturbed.csv", "comparison.csv", "stability.json", "dataset.gtw",
                 "model_acc_only.gtck", "model_multimodal.gtck", "trainlog_multimodal.csv",
                 "forecast_acc_only.csv", "metrics.json", "metrics.csv", "scores.csv", "events.json"):
        assert want in names
    for name in MANIFESTS:
        m = IO.read_manifest(first_run / name)
        assert name.startswith(f"manifest_{m['command']}") and len(m["config_hash"]) == 16
        assert all(IO.file_hash(first_run / p) == h for p, h in m["outputs"].items() if "trainlog" not in p)
    rep = json.loads((first_run / "metrics.json").read_text())
    assert rep["meta"]["horizons"] == [1, 3, 6]
    assert (first_run / "scores.csv").read_text().splitlines()[1] == "t,score_h_ddot,score_phi_ddot,threshold"
    assert (first_run / "trainlog_multimodal.csv").read_text().startswith("epoch,train_loss,val_loss,seconds,is_best")


def test_artifacts_carry_config_hash(first_run):
    sim_hash = IO.read_manifest(first_run / "manifest_simulate.json")["config_hash"]
    assert IO.read_header_hash(first_run / "accurate.csv") == sim_hash
    assert json.loads((first_run / "stability.json").read_text())["config_hash"] == sim_hash
    pre_hash = IO.read_manifest(first_run / "manifest_preprocess.json")["config_hash"]
    ds = IO.read_dataset(first_run / "dataset.gtw")
    assert ds.meta["config_hash"] == pre_hash and ds.meta["source_config_hash"] == sim_hash
    ck = IO.read_checkpoint(first_run / "model_multimodal.gtck")
    assert ck.meta["dataset_hash"] == pre_hash


def test_stability_report_eigenvalues(first_run):
    rep = json.loads((first_run / "stability.json").read_text())
    lam = [complex(*z) for z in rep["continuous_eigenvalues"]]
    for want in (complex(-1.6260, 50.0234), complex(-0.2490, 4.4607)):
        assert min(abs(z - want) / abs(want) for z in lam) < 1e-3
    assert abs(rep["spectral_radius"] - 0.99751) < 1e-4


def test_fixed_seed_rerun_identical(first_run, tmp_path):
    pipeline(tmp_path)
    for name in MANIFESTS:
        assert _stable(IO.read_manifest(first_run / name)) == _stable(IO.read_manifest(tmp_path / name)), name
    for p in first_run.iterdir():
        if p.suffix == ".cfg" or p.name.startswith("manifest_"):
            continue
        a, b = p.read_bytes(), (tmp_path / p.name).read_bytes()
        if p.name.startswith("trainlog_"):
            # the seconds column is wall-clock time
            a, b = ([r.split(",")[:3] + r.split(",")[4:] for r in x.decode().splitlines()] for x in (a, b))
        assert a == b, p.name


def test_zero_perturbation_pair_identical(tmp_path):
    assert run(tmp_path, "simulate", "--sigma", "0", "--bias", "0", config="duration = 5.0\n") == 0
    assert (tmp_path / "accurate.csv").read_bytes() == (tmp_path / "perturbed.csv").read_bytes()


def test_seed_changes_output(tmp_path):
    for s in ("1", "2"):
        (tmp_path / s).mkdir()
        assert run(tmp_path / s, "simulate", "--seed", s, config="duration = 2.0\n") == 0
    assert (tmp_path / "1" / "accurate.csv").read_bytes() != (tmp_path / "2" / "accurate.csv").read_bytes()


def _error(capsys):
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


def test_corrupt_checkpoint_names_magic(first_run, tmp_path, capsys):
    for name in ("dataset.gtw", "model_multimodal.gtck"):
        (tmp_path / name).write_bytes((first_run / name).read_bytes())
    ck = tmp_path / "model_multimodal.gtck"
    ck.write_bytes(b"JUNK" + ck.read_bytes()[4:])
    assert run(tmp_path, "forecast", "--mode", "multimodal") != 0
    err = _error(capsys)
    assert "GTCK" in err["message"] and err["command"] == "forecast"


def test_mismatched_window_sets_abort(first_run, tmp_path, capsys):
    for name in ("forecast_acc_only.csv", "forecast_multimodal.csv"):
        (tmp_path / name).write_bytes((first_run / name).read_bytes())
    lines = (tmp_path / "forecast_multimodal.csv").read_text().splitlines()
    body = [ln for ln in lines if not ln.startswith("#")]
    head = [ln for ln in lines if ln.startswith("#")]
    # drop the last window (6 steps)
    (tmp_path / "forecast_multimodal.csv").write_text("\n".join(head + body[:-6]) + "\n")
    assert run(tmp_path, "evaluate", "--horizons", "1,3,6") != 0
    assert "window sets differ" in _error(capsys)["message"]


def test_mixed_hash_needs_force(first_run, tmp_path, capsys):
    for name in ("forecast_acc_only.csv", "forecast_multimodal.csv"):
        (tmp_path / name).write_bytes((first_run / name).read_bytes())
    p = tmp_path / "forecast_acc_only.csv"
    text = p.read_text()
    ds_hash = IO.read_dataset(first_run / "dataset.gtw").meta["config_hash"]
    p.write_text(text.replace(f"dataset_hash={ds_hash}", "dataset_hash=0000000000000000"))
    assert run(tmp_path, "evaluate", "--horizons", "1,3,6") != 0
    assert "different datasets" in _error(capsys)["message"]
    assert run(tmp_path, "evaluate", "--horizons", "1,3,6", "--force") == 0


def test_checkpoint_dataset_lineage(first_run, tmp_path, capsys):
    (tmp_path / "model_multimodal.gtck").write_bytes((first_run / "model_multimodal.gtck").read_bytes())
    (tmp_path / "accurate.csv").write_bytes((first_run / "accurate.csv").read_bytes())
    assert run(tmp_path, "preprocess", "--seed", "9", config=PRE) == 0
    assert run(tmp_path, "detect") != 0
    assert "--force" in _error(capsys)["message"]


def test_config_errors(tmp_path, capsys):
    assert run(tmp_path, "simulate", config="durashun = 3\n") != 0
    assert _error(capsys)["field"] == "durashun"
    assert run(tmp_path, "simulate", config="dt = -1\n") != 0
    err = _error(capsys)
    assert err["field"] == "dt" and "positive" in err["message"]
    assert run(tmp_path, "train") != 0
    assert "missing input" in _error(capsys)["message"]


def test_flags_override_config(tmp_path):
    assert run(tmp_path, "simulate", "--seed", "5", config="seed = 4\nduration = 1.0\n") == 0
    assert IO.read_manifest(tmp_path / "manifest_simulate.json")["seed"] == 5


def test_out_dir_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("GALE_OUT_DIR", str(tmp_path / "env"))
    cfg = tmp_path / "s.cfg"
    cfg.write_text("duration = 1.0\n")
    assert cli.main(["simulate", "--config", str(cfg)]) == 0
    assert (tmp_path / "env" / "accurate.csv").exists()


def test_wind_delay_flag(first_run, tmp_path):
    (tmp_path / "accurate.csv").write_bytes((first_run / "accurate.csv").read_bytes())
    assert run(tmp_path, "preprocess", "--seed", "3", "--wind-delay", "4", config=PRE) == 0
    a = IO.read_dataset(first_run / "dataset.gtw")
    b = IO.read_dataset(tmp_path / "dataset.gtw")
    assert np.all(b.wind[:4] == b.wind[0]) and not np.array_equal(a.wind, b.wind)
