"""Command-line pipeline: round trips, validation exit codes, reproducibility."""

import csv
import json
import os

import numpy as np
import pytest

from rainfield.cli import main


def run_cli(*args):
    return main([str(a) for a in args])


def truncate_observations(dirpath, t_max):
    """Training-window observation file: rows with time <= t_max."""
    src = os.path.join(dirpath, "observations.csv")
    dst = os.path.join(dirpath, "obs_train.csv")
    with open(src, newline="") as fh:
        rows = list(csv.reader(fh))
    keep = [rows[0]] + [r for r in rows[1:] if int(r[0]) <= t_max]
    with open(dst, "w", newline="") as fh:
        csv.writer(fh).writerows(keep)
    return dst


@pytest.fixture(scope="module")
def sim_dir(tmp_path_factory):
    # simulate 15 steps; the fit window is 1..12, leaving 3 held-out steps
    out = tmp_path_factory.mktemp("sim")
    cfg = out / "sim.cfg"
    cfg.write_text("t_len=15\nn_sites=6\nseed=77\nmissing_rate=0.05\n")
    assert run_cli("--out", out, "--config", cfg, "simulate") == 0
    truncate_observations(out, 12)
    return out


@pytest.fixture(scope="module")
def fit_dir(sim_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("fit")
    chain = out / "chain.cfg"
    chain.write_text("n_burnin=30\nn_samples=60\nthin=2\nseed=5\n")
    rc = run_cli("--out", out, "--config", chain, "fit",
                 "--stations", sim_dir / "stations.csv",
                 "--observations", sim_dir / "obs_train.csv",
                 "--covariates", sim_dir / "covariates.csv",
                 "--wind", sim_dir / "wind.csv",
                 "--model", "conv-drift")
    assert rc == 0
    return out


class TestSimulate:
    def test_artifacts_present(self, sim_dir):
        for name in ("stations.csv", "observations.csv", "covariates.csv",
                     "wind.csv", "truth.csv", "manifest.json"):
            assert (sim_dir / name).exists()

    def test_truth_lists_generating_parameters(self, sim_dir):
        from rainfield.dataio import load_truth

        truth = load_truth(sim_dir / "truth.csv")
        for key in ("lambda", "tau2", "sigma2", "rho0", "phi", "u", "rho1",
                    "alpha", "c", "beta.intercept", "max_spectral_radius"):
            assert key in truth
        assert truth["max_spectral_radius"] < 1.0


class TestSimulateParamsFile:
    def test_generator_parameters_from_file(self, tmp_path):
        params_file = tmp_path / "gen.params"
        lines = ["lambda=1.2", "beta.intercept=0.5", "tau2=0.1", "sigma2=0.9",
                 "rho0=70", "phi=0.4", "u=0", "rho1=50", "alpha=0.3", "c=1"]
        for i in range(1, 7):
            lines.append(f"beta.cov{i}=0.0")
        params_file.write_text("\n".join(lines) + "\n")
        cfg = tmp_path / "sim.cfg"
        cfg.write_text(f"t_len=6\nn_sites=5\nseed=4\nkind=separable\n"
                       f"params={params_file}\n")
        out = tmp_path / "out"
        assert run_cli("--out", out, "--config", cfg, "simulate") == 0
        from rainfield.dataio import load_truth

        truth = load_truth(out / "truth.csv")
        assert truth["lambda"] == 1.2
        assert truth["phi"] == 0.4


class TestTessellate:
    def test_report(self, sim_dir, tmp_path):
        out = tmp_path / "tess"
        assert run_cli("--out", out, "tessellate", "--stations",
                       sim_dir / "stations.csv") == 0
        with open(out / "cells.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 6
        assert all(float(r["area"]) > 0 for r in rows)
        assert (out / "neighbors.csv").exists()


class TestFit:
    def test_outputs(self, fit_dir):
        for name in ("draws.csv", "acceptance.csv", "scaling.csv", "latent.npz",
                     "fit_meta.json", "manifest.json"):
            assert (fit_dir / name).exists()
        with open(fit_dir / "draws.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 30
        assert "log_posterior" in rows[0]
        assert "beta.cov1" in rows[0]

    def test_manifest_lists_inputs_and_outputs(self, fit_dir):
        manifest = json.loads((fit_dir / "manifest.json").read_text())
        assert set(manifest["inputs"]) == {"stations", "observations", "covariates", "wind"}
        assert "draws.csv" in manifest["outputs"]
        assert manifest["config"]["mode_spectral_radius"] < 1.0

    def test_no_ar_freezes_phi_at_zero(self, sim_dir, tmp_path):
        out = tmp_path / "fit-noar"
        chain = tmp_path / "chain.cfg"
        chain.write_text("n_burnin=10\nn_samples=20\nthin=1\nseed=2\n")
        rc = run_cli("--out", out, "--config", chain, "fit",
                     "--stations", sim_dir / "stations.csv",
                     "--observations", sim_dir / "obs_train.csv",
                     "--covariates", sim_dir / "covariates.csv",
                     "--model", "no-ar")
        assert rc == 0
        with open(out / "draws.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert all(float(r["phi"]) == 0.0 for r in rows)

    def test_malformed_header_exits_2(self, sim_dir, tmp_path, capsys):
        bad = tmp_path / "bad_obs.csv"
        bad.write_text("time,site,value\n1,s00,1.0\n")
        rc = run_cli("--out", tmp_path / "x", "fit",
                     "--stations", sim_dir / "stations.csv",
                     "--observations", bad,
                     "--covariates", sim_dir / "covariates.csv",
                     "--model", "separable")
        assert rc == 2
        err = capsys.readouterr().err
        assert "site" in err or "station" in err

    def test_chain_worker_count_does_not_change_output(self, sim_dir, tmp_path):
        chain = tmp_path / "chain.cfg"
        chain.write_text("n_burnin=10\nn_samples=20\nthin=2\nseed=3\nstore_latent=false\n")
        outs = []
        for workers in (1, 2):
            out = tmp_path / f"fit-w{workers}"
            rc = run_cli("--out", out, "--config", chain, "fit",
                         "--stations", sim_dir / "stations.csv",
                         "--observations", sim_dir / "obs_train.csv",
                         "--covariates", sim_dir / "covariates.csv",
                         "--wind", sim_dir / "wind.csv",
                         "--model", "conv-drift",
                         "--chains", 2, "--workers", workers)
            assert rc == 0
            outs.append((out / "draws.csv").read_bytes())
        assert outs[0] == outs[1]


@pytest.fixture(scope="module")
def predict_dir(sim_dir, fit_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("pred")
    region = out / "region.csv"
    # a box around the station layout
    with open(sim_dir / "stations.csv") as fh:
        rows = list(csv.DictReader(fh))
    xs = [float(r["x"]) for r in rows]
    ys = [float(r["y"]) for r in rows]
    region.write_text("x,y\n"
                      f"{min(xs)},{min(ys)}\n{max(xs)},{min(ys)}\n"
                      f"{max(xs)},{max(ys)}\n{min(xs)},{max(ys)}\n")
    request = out / "request.csv"
    sid = rows[0]["id"]
    request.write_text("time,target\n"
                       f"13,{sid}\n14,{sid}\n"
                       f"13,{region}\n"
                       f"5,{xs[0] + 3.0}:{ys[0] + 2.0}\n")
    rc = run_cli("--out", out, "predict",
                 "--fit", fit_dir,
                 "--stations", sim_dir / "stations.csv",
                 "--observations", sim_dir / "obs_train.csv",
                 "--covariates", sim_dir / "covariates.csv",
                 "--wind", sim_dir / "wind.csv",
                 "--request", request,
                 "--ensemble", 30)
    assert rc == 0
    return out


class TestPredictAndScore:
    def test_samples_and_quantiles(self, predict_dir):
        with open(predict_dir / "samples.csv") as fh:
            rows = list(csv.DictReader(fh))
        targets = {(r["time"], r["target"]) for r in rows}
        assert len(targets) == 4
        assert all(float(r["value"]) >= 0 for r in rows)
        with open(predict_dir / "quantiles.csv") as fh:
            qrows = list(csv.DictReader(fh))
        assert len(qrows) == 4
        for r in qrows:
            qs = [float(r[k]) for k in ("q05", "q25", "q50", "q75", "q95")]
            assert qs == sorted(qs)

    def test_score_pipeline(self, sim_dir, predict_dir, tmp_path):
        # score the in-window station predictions against the simulated truth:
        # times 13, 14 are beyond the 12 observed steps, so extend observations
        # is not possible; score only the window target at time 5
        out = tmp_path / "score"
        rc = run_cli("--out", out, "score",
                     "--predictions", predict_dir / "samples.csv",
                     "--observations", sim_dir / "observations.csv",
                     "--stations", sim_dir / "stations.csv",
                     "--origin", 12)
        assert rc == 0
        with open(out / "scores.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert rows, "no score rows produced"
        for r in rows:
            assert r["metric"] in ("CRPS", "MAE")
            assert float(r["value"]) >= 0

    def test_score_refuses_tampered_predictions(self, sim_dir, predict_dir, tmp_path):
        samples = predict_dir / "samples.csv"
        original = samples.read_text()
        try:
            samples.write_text(original + "15,s00,0,1.0\n")
            rc = run_cli("--out", tmp_path / "s1", "score",
                         "--predictions", samples,
                         "--observations", sim_dir / "observations.csv",
                         "--stations", sim_dir / "stations.csv",
                         "--origin", 12)
            assert rc == 1
            rc = run_cli("--out", tmp_path / "s2", "score",
                         "--predictions", samples,
                         "--observations", sim_dir / "observations.csv",
                         "--stations", sim_dir / "stations.csv",
                         "--origin", 12, "--force")
            assert rc == 0
        finally:
            samples.write_text(original)


class TestReproducibility:
    def test_simulate_byte_identical(self, tmp_path):
        cfg = tmp_path / "sim.cfg"
        cfg.write_text("t_len=6\nn_sites=5\nseed=9\n")
        blobs = []
        for run in ("a", "b"):
            out = tmp_path / run
            assert run_cli("--out", out, "--config", cfg, "simulate") == 0
            blobs.append(b"".join((out / n).read_bytes()
                                  for n in ("stations.csv", "observations.csv",
                                            "covariates.csv", "wind.csv", "truth.csv")))
        assert blobs[0] == blobs[1]
