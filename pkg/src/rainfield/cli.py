"""Command-line pipeline: tessellate, simulate, fit, predict, score.

Every command writes its artifacts plus a ``manifest.json`` recording input
hashes, the effective configuration and output hashes; identical inputs,
configuration and seed give byte-identical artifacts regardless of worker
count.
"""

from __future__ import annotations

import argparse
import os
import sys
import time as time_mod
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import dataio
from .dataio import SchemaError
from .geometry import GeometryError, areal_weights, build_tessellation, load_region_csv, load_stations_csv
from .mcmc import ChainConfig, ChainOutput, PriorConfig, RainModel, run_chain
from .model import CovariateGrid, ModelError, ObservationGrid
from .predict import PredictiveEnsemble, predict_ahead, predict_areal, predict_new_sites
from .score import ForecastCase, score_table
from .synth import SynthSpec, desk_scale_spec, simulate


class ManifestMismatch(RuntimeError):
    pass


def _ensure_out(args) -> str:
    os.makedirs(args.out, exist_ok=True)
    return args.out


# -- tessellate ----------------------------------------------------------------


def cmd_tessellate(args) -> int:
    t0 = time_mod.monotonic()
    out = _ensure_out(args)
    stations = load_stations_csv(args.stations)
    tess = build_tessellation(stations)
    cells_path = os.path.join(out, "cells.csv")
    dataio.write_csv(
        cells_path, ["id", "x", "y", "area", "unbounded"],
        [(sid, repr(float(x)), repr(float(y)), repr(float(a)), int(u))
         for sid, (x, y), a, u in zip(stations.ids, stations.coords, tess.area,
                                      tess.is_unbounded)])
    nb_path = os.path.join(out, "neighbors.csv")
    rows = []
    for i, nbrs in enumerate(tess.neighbors):
        for j in nbrs:
            rows.append((stations.ids[i], stations.ids[j]))
    dataio.write_csv(nb_path, ["id", "neighbor"], rows)
    dataio.write_manifest(out, "tessellate", {"stations": args.stations},
                          [cells_path, nb_path], args.seed, {},
                          time_mod.monotonic() - t0)
    return 0


# -- simulate ------------------------------------------------------------------


def _synth_spec_from_config(args) -> SynthSpec:
    overrides = dataio.load_keyvalues(args.config) if args.config else {}
    spec = desk_scale_spec()
    known = {"t_len": int, "n_sites": int, "kind": str, "missing_rate": float,
             "seed": int, "wind_mode": str, "n_covariates": int,
             "phi_target_radius": float}
    params_file = overrides.pop("params", None)
    for key, val in overrides.items():
        if key not in known:
            raise SchemaError(f"{args.config}: unknown simulate key {key!r}")
        setattr(spec, key, known[key](val))
    if params_file is not None:
        names = ["intercept"] + [f"cov{i + 1}" for i in range(spec.n_covariates)]
        spec.params = dataio.load_params(params_file, names)
        spec.phi_target_radius = None  # the file's phi is taken as-is
    if args.seed is not None:
        spec.seed = args.seed
    spec.__post_init__()
    return spec


def cmd_simulate(args) -> int:
    t0 = time_mod.monotonic()
    out = _ensure_out(args)
    spec = _synth_spec_from_config(args)
    res = simulate(spec)
    st_path = os.path.join(out, "stations.csv")
    dataio.write_csv(st_path, ["id", "x", "y"],
                     [(sid, repr(float(x)), repr(float(y)))
                      for sid, (x, y) in zip(res.stations.ids, res.stations.coords)])
    obs_path = os.path.join(out, "observations.csv")
    dataio.save_observations(obs_path, res.obs, res.stations)
    # emit the generator's raw (pre-standardization) covariates
    raw = (res.covariates.values[:, :, 1:] * res.covariates.sds + res.covariates.means)
    cov_path = os.path.join(out, "covariates.csv")
    dataio.save_covariates(cov_path, raw, res.covariate_names, res.stations)
    wind_path = os.path.join(out, "wind.csv")
    dataio.save_wind(wind_path, res.wind)
    truth_path = os.path.join(out, "truth.csv")
    dataio.save_truth(truth_path, res.params, res.covariates.names,
                      extra=[("max_spectral_radius", res.max_radius)])
    outputs = [st_path, obs_path, cov_path, wind_path, truth_path]
    dataio.write_manifest(out, "simulate", {"config": args.config} if args.config else {},
                          outputs, spec.seed, {"spec": repr(spec)},
                          time_mod.monotonic() - t0)
    return 0


# -- fit -----------------------------------------------------------------------


def _chain_worker(payload):
    model, config, chain_idx = payload
    rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(chain_idx,)))
    return run_chain(model, config, rng)


def cmd_fit(args) -> int:
    t0 = time_mod.monotonic()
    out = _ensure_out(args)
    stations = load_stations_csv(args.stations)
    tess = build_tessellation(stations)
    obs = dataio.load_observations(args.observations, stations)
    raw, names, cov_times = dataio.load_covariates(args.covariates, stations)
    if cov_times[0] != obs.times[0] or raw.shape[0] < obs.n_times:
        raise SchemaError(
            f"covariates must cover the observation window (times {obs.times[0]}.."
            f"{obs.times[-1]}); got {cov_times[0]}..{cov_times[-1]}")
    covariates = CovariateGrid.build(raw[: obs.n_times], names)
    wind = None
    if args.wind:
        wind, wind_times = dataio.load_wind(args.wind)
        if wind_times[0] != obs.times[0] or wind.values.shape[0] < obs.n_times:
            raise SchemaError("wind series must cover the observation window")
        from .model import WindSeries

        wind = WindSeries(wind.values[: obs.n_times])
    priors = dataio.load_priors(args.priors) if args.priors else PriorConfig()
    config = dataio.load_chain_config(args.config) if args.config else ChainConfig()
    if args.seed is not None:
        config.seed = args.seed
    model = RainModel(stations, tess, obs, covariates, wind, kind=args.model, priors=priors)

    payloads = [(model, config, c) for c in range(args.chains)]
    if args.workers > 1 and args.chains > 1:
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            outputs = list(pool.map(_chain_worker, payloads))
    else:
        outputs = [_chain_worker(p) for p in payloads]
    merged = outputs[0] if len(outputs) == 1 else ChainOutput.merge(outputs)

    draws_path = os.path.join(out, "draws.csv")
    dataio.save_draws(draws_path, merged)
    acc_path = os.path.join(out, "acceptance.csv")
    dataio.save_acceptance(acc_path, merged)
    scale_path = os.path.join(out, "scaling.csv")
    dataio.save_scaling(scale_path, covariates)
    meta_path = os.path.join(out, "fit_meta.json")
    dataio.save_fit_meta(meta_path, args.model, obs.n_times, covariates.names, config)
    outputs_files = [draws_path, acc_path, scale_path, meta_path]
    if config.store_latent:
        latent_path = os.path.join(out, "latent.npz")
        dataio.save_latent(latent_path, merged)
        outputs_files.append(latent_path)
    inputs = {"stations": args.stations, "observations": args.observations,
              "covariates": args.covariates}
    if args.wind:
        inputs["wind"] = args.wind
    cfg = {"model": args.model, "chains": args.chains, "n_burnin": config.n_burnin,
           "n_samples": config.n_samples, "thin": config.thin, "seed": config.seed,
           "strategy": config.strategy,
           "mode_spectral_radius": merged.mode_spectral_radius}
    dataio.write_manifest(out, "fit", inputs, outputs_files, config.seed, cfg,
                          time_mod.monotonic() - t0)
    print(f"fit: {merged.n_draws} draws; acceptance "
          + ", ".join(f"{k}={v[0]:.2f}" for k, v in sorted(merged.acceptance.items()))
          + f"; mode spectral radius {merged.mode_spectral_radius:.4f}")
    return 0


# -- predict -------------------------------------------------------------------


def _load_fit(fit_dir):
    meta = dataio.load_fit_meta(os.path.join(fit_dir, "fit_meta.json"))
    columns, draws, log_post = dataio.load_draws(os.path.join(fit_dir, "draws.csv"))
    xi, w = dataio.load_latent(os.path.join(fit_dir, "latent.npz"))
    names, means, sds = dataio.load_scaling(os.path.join(fit_dir, "scaling.csv"))
    beta_names = meta["beta_names"]
    output = ChainOutput(columns=columns, draws=draws, log_post=log_post,
                         beta_names=beta_names, kind=meta["kind"], acceptance={},
                         latent_xi=xi, latent_w=w, seed=meta["chain"]["seed"])
    return meta, output, (names, means, sds)


def cmd_predict(args) -> int:
    t0 = time_mod.monotonic()
    out = _ensure_out(args)
    meta, output, (scale_names, means, sds) = _load_fit(args.fit)
    t_fit = meta["t_fit"]
    stations = load_stations_csv(args.stations)
    tess = build_tessellation(stations)
    obs_all = dataio.load_observations(args.observations, stations)
    raw, names, _ = dataio.load_covariates(args.covariates, stations)
    if names != scale_names:
        raise SchemaError(f"covariate columns {names} do not match fitted ones {scale_names}")
    x_all = CovariateGrid.build(raw, names, stats=(means, sds))
    wind_all = None
    if args.wind:
        wind_all, _ = dataio.load_wind(args.wind)

    from .model import WindSeries

    obs_fit = ObservationGrid(values=obs_all.values[:t_fit], times=obs_all.times[:t_fit])
    x_fit = CovariateGrid(values=x_all.values[:t_fit], names=x_all.names,
                          means=x_all.means, sds=x_all.sds)
    wind_fit = WindSeries(wind_all.values[:t_fit]) if wind_all is not None else None
    model = RainModel(stations, tess, obs_fit, x_fit, wind_fit, kind=meta["kind"])

    requests = dataio.load_request(args.request)
    t_origin = obs_all.n_times
    rng = np.random.default_rng(np.random.SeedSequence(args.seed if args.seed is not None
                                                       else output.seed + 1))

    ahead_req = [(t, tgt) for t, tgt in requests if t > t_origin]
    station_req = [(t, tgt) for t, tgt in ahead_req if tgt in stations.ids]
    region_req = [(t, tgt) for t, tgt in ahead_req
                  if tgt not in stations.ids and ":" not in tgt]
    coord_req = [(t, tgt) for t, tgt in requests if ":" in tgt]
    bad = [r for r in requests if r not in station_req + region_req + coord_req]
    if bad:
        raise SchemaError(f"unsupported request rows (station/region targets must lie "
                          f"after the last observation, time {t_origin}): {bad}")

    pieces: list[PredictiveEnsemble] = []
    ahead = None
    if station_req or region_req:
        horizon = max(t for t, _ in ahead_req) - t_origin
        ahead = predict_ahead(output, model, obs_all, x_all, wind_all, horizon,
                              n_ensemble=args.ensemble, rng=rng)
    if station_req:
        rows = [ahead.targets.index((t, tgt)) for t, tgt in station_req]
        pieces.append(PredictiveEnsemble(targets=station_req,
                                         samples=ahead.samples[rows],
                                         draw_indices=ahead.draw_indices))
    for t, path in region_req:
        region = load_region_csv(path)
        w = areal_weights(tess, region)
        sub = PredictiveEnsemble(
            targets=[(t, sid) for sid in stations.ids],
            samples=np.vstack([ahead.samples[ahead.targets.index((t, sid))]
                               for sid in stations.ids]),
            draw_indices=ahead.draw_indices)
        pieces.append(predict_areal(sub, stations.ids, w, region_id=path))
    for t, tgt in coord_req:
        x, y = (float(v) for v in tgt.split(":"))
        ens = predict_new_sites(output, model, np.array([[x, y]]), t,
                                n_ensemble=args.ensemble, rng=rng)
        pieces.append(PredictiveEnsemble(targets=[(t, tgt)], samples=ens.samples,
                                         draw_indices=ens.draw_indices))

    if not pieces:
        raise SchemaError("request file produced no predictable targets")
    merged = PredictiveEnsemble(
        targets=[tgt for p in pieces for tgt in p.targets],
        samples=np.vstack([p.samples for p in pieces]),
        draw_indices=pieces[0].draw_indices)

    samples_path = os.path.join(out, "samples.csv")
    dataio.save_samples(samples_path, merged)
    quant_path = os.path.join(out, "quantiles.csv")
    dataio.save_quantiles(quant_path, merged)
    inputs = {"stations": args.stations, "observations": args.observations,
              "covariates": args.covariates, "request": args.request,
              "draws": os.path.join(args.fit, "draws.csv")}
    if args.wind:
        inputs["wind"] = args.wind
    dataio.write_manifest(out, "predict", inputs, [samples_path, quant_path],
                          args.seed, {"ensemble": args.ensemble},
                          time_mod.monotonic() - t0)
    return 0


# -- score ---------------------------------------------------------------------


def cmd_score(args) -> int:
    t0 = time_mod.monotonic()
    out = _ensure_out(args)
    ok = dataio.check_manifest_hash(args.predictions)
    if ok is False and not args.force:
        raise ManifestMismatch(
            f"{args.predictions} does not match its manifest hash; rerun predict or "
            f"pass --force")
    stations = load_stations_csv(args.stations)
    obs = dataio.load_observations(args.observations, stations)
    t0_obs = int(obs.times[0])
    samples = dataio.load_samples(args.predictions)
    exclude = {int(s) for s in args.exclude_times.split(",") if s} if args.exclude_times else set()

    cases = []
    for (t, target), vals in samples:
        lead = t - args.origin
        if target in stations.ids:
            row = t - t0_obs
            if not (0 <= row < obs.n_times):
                continue
            y = obs.values[row, stations.index_of(target)]
            if np.isnan(y):
                continue
            cases.append(ForecastCase(lead=lead, target_class="station",
                                      samples=vals, observed=float(y), time=t))
        elif ":" in target:
            continue  # no observations exist at free coordinates
        else:
            region = load_region_csv(target)
            tess = build_tessellation(stations)
            w = areal_weights(tess, region)
            row = t - t0_obs
            if not (0 <= row < obs.n_times):
                continue
            yrow = obs.values[row]
            mask = ~np.isnan(yrow)
            total = w[mask].sum()
            if total <= 0:
                continue
            y_areal = float(w[mask] @ yrow[mask] / total * w.sum())
            cases.append(ForecastCase(lead=lead, target_class="areal",
                                      samples=vals, observed=y_areal, time=t))
    if not cases:
        raise SchemaError("no scoreable (prediction, observation) pairs found")
    table = score_table(cases, exclude_times=exclude)
    scores_path = os.path.join(out, "scores.csv")
    dataio.save_scores(scores_path, table)
    dataio.write_manifest(out, "score",
                          {"predictions": args.predictions,
                           "observations": args.observations},
                          [scores_path], args.seed,
                          {"origin": args.origin, "exclude": sorted(exclude)},
                          time_mod.monotonic() - t0)
    return 0


# -- argument parsing ------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rainfield",
        description="censored spatio-temporal rainfall modeling pipeline")
    parser.add_argument("--seed", type=int, default=None, help="master RNG seed")
    parser.add_argument("--out", default="out", help="output directory")
    parser.add_argument("--config", default=None, help="command-specific config file")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("tessellate", help="Voronoi report for a station file")
    p.add_argument("--stations", required=True)
    p.set_defaults(func=cmd_tessellate)

    p = sub.add_parser("simulate", help="generate a synthetic dataset")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="run the MCMC sampler")
    p.add_argument("--stations", required=True)
    p.add_argument("--observations", required=True)
    p.add_argument("--covariates", required=True)
    p.add_argument("--wind", default=None)
    p.add_argument("--model", default="conv-drift",
                   choices=["conv-drift", "conv-iso", "separable", "no-ar"])
    p.add_argument("--priors", default=None)
    p.add_argument("--chains", type=int, default=1)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("predict", help="sample predictive distributions")
    p.add_argument("--fit", required=True, help="directory produced by fit")
    p.add_argument("--stations", required=True)
    p.add_argument("--observations", required=True)
    p.add_argument("--covariates", required=True)
    p.add_argument("--wind", default=None)
    p.add_argument("--request", required=True)
    p.add_argument("--ensemble", type=int, default=200)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("score", help="CRPS / MAE tables from predictions")
    p.add_argument("--predictions", required=True)
    p.add_argument("--observations", required=True)
    p.add_argument("--stations", required=True)
    p.add_argument("--origin", type=int, required=True)
    p.add_argument("--exclude-times", default=None)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_score)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (SchemaError, GeometryError, ModelError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ManifestMismatch as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
