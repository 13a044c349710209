"""File formats shared by the command-line pipeline.

All tables are plain CSV with exact headers; an empty observation field
means missing. Parameter, prior and chain-config files are flat
``key=value`` text. Every write is whole-file atomic (write then rename)
and float formatting is the shortest round-trip representation, so
identical inputs produce byte-identical outputs.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import tempfile
from dataclasses import asdict

import numpy as np

from .geometry import StationSet
from .mcmc import ChainConfig, ChainOutput, PriorConfig
from .model import CovariateGrid, ModelError, ObservationGrid, Params, WindSeries


class SchemaError(ValueError):
    """Malformed input file; carries row/column diagnostics in the message."""


def _fmt(x: float) -> str:
    return repr(float(x))


def atomic_write_text(path, text: str) -> None:
    path = os.fspath(path)
    d = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=".part")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_csv(path, header: list[str], rows) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(str(c) for c in row))
    atomic_write_text(path, "\n".join(lines) + "\n")


def _check_header(path, got, expected: list[str], prefix_ok: bool = False) -> None:
    got = [h.strip() for h in (got or [])]
    ok = got[: len(expected)] == expected if prefix_ok else got == expected
    if not ok:
        missing = [c for c in expected if c not in got]
        name = missing[0] if missing else (got[len(expected):] or got)[0]
        raise SchemaError(
            f"{path}: malformed header; expected columns {expected}"
            f"{' (in leading positions)' if prefix_ok else ''}, got {got}; "
            f"problem column: {name!r}"
        )


# -- observation / covariate / wind tables ----------------------------------


def _read_rows(path, expected_header, prefix_ok=False):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        _check_header(path, header, expected_header, prefix_ok)
        rows = [r for r in reader if r and any(c.strip() for c in r)]
    return [h.strip() for h in header], rows


def _time_index(path, times: list[int]) -> np.ndarray:
    uniq = sorted(set(times))
    if not uniq:
        raise SchemaError(f"{path}: no data rows")
    if uniq != list(range(uniq[0], uniq[0] + len(uniq))):
        gaps = [t for t in range(uniq[0], uniq[-1]) if t not in set(uniq)]
        raise SchemaError(f"{path}: time axis has gaps at {gaps[:5]}")
    return np.asarray(uniq)


def load_observations(path, stations: StationSet) -> ObservationGrid:
    """Long-format observations ``time,station,value``; empty value = missing.

    An optional trailing ``iso`` column (ISO-8601 stamps) is tolerated and
    ignored by the model.
    """
    header, rows = _read_rows(path, ["time", "station", "value"], prefix_ok=True)
    extra = header[3:]
    if extra and extra != ["iso"]:
        raise SchemaError(f"{path}: unexpected extra columns {extra}; only 'iso' is allowed")
    times = []
    triplets = []
    for ln, row in enumerate(rows, start=2):
        if len(row) < 3:
            raise SchemaError(f"{path}, line {ln}: expected at least 3 fields")
        try:
            t = int(row[0])
        except ValueError:
            raise SchemaError(f"{path}, line {ln}, column 'time': not an integer: {row[0]!r}")
        sid = row[1].strip()
        if sid not in stations.ids:
            raise SchemaError(f"{path}, line {ln}, column 'station': unknown station id {sid!r}")
        raw = row[2].strip()
        if raw == "":
            val = np.nan
        else:
            try:
                val = float(raw)
            except ValueError:
                raise SchemaError(f"{path}, line {ln}, column 'value': not a number: {raw!r}")
            if val < 0:
                raise SchemaError(f"{path}, line {ln}, column 'value': negative rainfall {val}")
        times.append(t)
        triplets.append((t, sid, val))
    tindex = _time_index(path, times)
    t0 = tindex[0]
    n, t_len = len(stations), tindex.size
    grid = np.full((t_len, n), np.nan)
    seen = np.zeros((t_len, n), dtype=bool)
    for t, sid, val in triplets:
        i, j = t - t0, stations.index_of(sid)
        if seen[i, j]:
            raise SchemaError(f"{path}: duplicate entry for time {t}, station {sid!r}")
        seen[i, j] = True
        grid[i, j] = val
    if not seen.all():
        i, j = np.argwhere(~seen)[0]
        raise SchemaError(f"{path}: missing row for time {t0 + i}, station "
                          f"{stations.ids[j]!r} (write an empty value for missing data)")
    return ObservationGrid(values=grid, times=tindex)


def save_observations(path, obs: ObservationGrid, stations: StationSet) -> None:
    rows = []
    for i, t in enumerate(obs.times):
        for j, sid in enumerate(stations.ids):
            v = obs.values[i, j]
            rows.append((t, sid, "" if np.isnan(v) else _fmt(v)))
    write_csv(path, ["time", "station", "value"], rows)


def load_covariates(path, stations: StationSet) -> tuple[np.ndarray, list[str], np.ndarray]:
    """Covariate table ``time,station,<name>...`` -> (raw (T,N,k), names, times)."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        _check_header(path, header, ["time", "station"], prefix_ok=True)
        names = [h.strip() for h in header[2:]]
        if not names:
            raise SchemaError(f"{path}: no covariate columns after 'time,station'")
        rows = [r for r in reader if r and any(c.strip() for c in r)]
    times = []
    entries = []
    for ln, row in enumerate(rows, start=2):
        if len(row) != 2 + len(names):
            raise SchemaError(f"{path}, line {ln}: expected {2 + len(names)} fields")
        try:
            t = int(row[0])
        except ValueError:
            raise SchemaError(f"{path}, line {ln}, column 'time': not an integer: {row[0]!r}")
        sid = row[1].strip()
        if sid not in stations.ids:
            raise SchemaError(f"{path}, line {ln}, column 'station': unknown station id {sid!r}")
        try:
            vals = [float(c) for c in row[2:]]
        except ValueError:
            bad = next(c for c in row[2:] if not _is_float(c))
            raise SchemaError(f"{path}, line {ln}: non-numeric covariate value {bad!r}")
        times.append(t)
        entries.append((t, sid, vals))
    tindex = _time_index(path, times)
    t0 = tindex[0]
    raw = np.full((tindex.size, len(stations), len(names)), np.nan)
    for t, sid, vals in entries:
        raw[t - t0, stations.index_of(sid)] = vals
    if np.isnan(raw).any():
        i, j, _ = np.argwhere(np.isnan(raw))[0]
        raise SchemaError(f"{path}: missing covariates for time {t0 + i}, "
                          f"station {stations.ids[j]!r}")
    return raw, names, tindex


def _is_float(s: str) -> bool:
    try:
        float(s)
        return True
    except ValueError:
        return False


def save_covariates(path, raw: np.ndarray, names: list[str], stations: StationSet,
                    times=None) -> None:
    t_len = raw.shape[0]
    times = range(1, t_len + 1) if times is None else times
    rows = []
    for i, t in enumerate(times):
        for j, sid in enumerate(stations.ids):
            rows.append((t, sid, *[_fmt(v) for v in raw[i, j]]))
    write_csv(path, ["time", "station", *names], rows)


def load_wind(path) -> tuple[WindSeries, np.ndarray]:
    header, rows = _read_rows(path, ["time", "wx", "wy"])
    times, vals = [], []
    for ln, row in enumerate(rows, start=2):
        if len(row) != 3:
            raise SchemaError(f"{path}, line {ln}: expected 3 fields")
        try:
            times.append(int(row[0]))
            vals.append((float(row[1]), float(row[2])))
        except ValueError:
            raise SchemaError(f"{path}, line {ln}: non-numeric wind entry {row!r}")
    tindex = _time_index(path, times)
    order = np.argsort(times, kind="stable")
    return WindSeries(np.asarray(vals)[order]), tindex


def save_wind(path, wind: WindSeries, times=None) -> None:
    t_len = wind.values.shape[0]
    times = range(1, t_len + 1) if times is None else times
    rows = [(t, _fmt(w[0]), _fmt(w[1])) for t, w in zip(times, wind.values)]
    write_csv(path, ["time", "wx", "wy"], rows)


# -- key=value files ----------------------------------------------------------


def load_keyvalues(path) -> dict:
    out = {}
    with open(path) as fh:
        for ln, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise SchemaError(f"{path}, line {ln}: expected key=value, got {line!r}")
            key, val = line.split("=", 1)
            out[key.strip()] = val.strip()
    return out


def save_keyvalues(path, items) -> None:
    atomic_write_text(path, "".join(f"{k}={v}\n" for k, v in items))


PARAM_KEYS = ("lambda", "tau2", "sigma2", "rho0", "phi", "u", "rho1", "alpha", "c")


def load_params(path, beta_names: list[str]) -> Params:
    kv = load_keyvalues(path)
    missing = [k for k in PARAM_KEYS if k not in kv]
    beta_keys = [f"beta.{n}" for n in beta_names]
    missing += [k for k in beta_keys if k not in kv]
    if missing:
        raise SchemaError(f"{path}: missing parameter keys {missing}")
    beta = np.array([float(kv[k]) for k in beta_keys])
    return Params(lam=float(kv["lambda"]), beta=beta, tau2=float(kv["tau2"]),
                  sigma2=float(kv["sigma2"]), rho0=float(kv["rho0"]), phi=float(kv["phi"]),
                  u=float(kv["u"]), rho1=float(kv["rho1"]), alpha=float(kv["alpha"]),
                  c=float(kv["c"]))


def save_params(path, params: Params, beta_names: list[str]) -> None:
    save_keyvalues(path, [(k, _fmt(v)) for k, v in params.scalar_items(beta_names)])


def load_priors(path) -> PriorConfig:
    kv = load_keyvalues(path)
    kwargs = {}
    for key in ("rho_mean", "rho_var", "c_mean", "c_var", "u_mean", "u_var"):
        if key in kv:
            kwargs[key] = float(kv[key])
    unknown = set(kv) - {"rho_mean", "rho_var", "c_mean", "c_var", "u_mean", "u_var"}
    if unknown:
        raise SchemaError(f"{path}: unknown prior keys {sorted(unknown)}")
    return PriorConfig(**kwargs)


def load_chain_config(path) -> ChainConfig:
    kv = load_keyvalues(path)
    kwargs = {}
    ints = {"n_burnin", "n_samples", "thin", "seed", "adapt_window"}
    for key, val in kv.items():
        if key in ints:
            kwargs[key] = int(val)
        elif key == "strategy":
            kwargs[key] = val
        elif key == "store_latent":
            kwargs[key] = val.lower() in ("1", "true", "yes")
        elif key.startswith("proposal."):
            kwargs.setdefault("proposal_scales", {})[key.split(".", 1)[1]] = float(val)
        else:
            raise SchemaError(f"{path}: unknown chain-config key {key!r}")
    return ChainConfig(**kwargs)


# -- chain output -------------------------------------------------------------


def save_draws(path, output: ChainOutput) -> None:
    header = output.columns + ["log_posterior"]
    rows = [tuple(_fmt(v) for v in (*output.draws[i], output.log_post[i]))
            for i in range(output.n_draws)]
    write_csv(path, header, rows)


def load_draws(path) -> tuple[list[str], np.ndarray, np.ndarray]:
    header, rows = _read_rows(path, ["lambda"], prefix_ok=True)
    if header[-1] != "log_posterior":
        raise SchemaError(f"{path}: last draws column must be 'log_posterior'")
    data = np.array([[float(c) for c in row] for row in rows])
    return header[:-1], data[:, :-1], data[:, -1]


def save_acceptance(path, output: ChainOutput) -> None:
    rows = [(name, _fmt(rate), n) for name, (rate, n) in sorted(output.acceptance.items())]
    write_csv(path, ["block", "accept_rate", "n_proposals"], rows)


def save_latent(path, output: ChainOutput) -> None:
    if output.latent_xi is None:
        raise ModelError("chain output holds no latent snapshots")
    path = os.fspath(path)
    d = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=".npz")
    try:
        with os.fdopen(fd, "wb") as fh:
            np.savez_compressed(fh, xi=output.latent_xi, w=output.latent_w)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_latent(path) -> tuple[np.ndarray, np.ndarray]:
    dat = np.load(path)
    return dat["xi"], dat["w"]


def save_scaling(path, grid: CovariateGrid) -> None:
    rows = [(name, _fmt(mu), _fmt(sd))
            for name, mu, sd in zip(grid.names[1:], grid.means, grid.sds)]
    write_csv(path, ["name", "mean", "sd"], rows)


def load_scaling(path) -> tuple[list[str], np.ndarray, np.ndarray]:
    header, rows = _read_rows(path, ["name", "mean", "sd"])
    names = [r[0] for r in rows]
    means = np.array([float(r[1]) for r in rows])
    sds = np.array([float(r[2]) for r in rows])
    return names, means, sds


def save_truth(path, params: Params, beta_names: list[str], extra=()) -> None:
    rows = [(k, _fmt(v)) for k, v in params.scalar_items(beta_names)]
    rows += [(k, _fmt(v)) for k, v in extra]
    write_csv(path, ["parameter", "value"], rows)


def load_truth(path) -> dict:
    header, rows = _read_rows(path, ["parameter", "value"])
    return {r[0]: float(r[1]) for r in rows}


# -- prediction tables ---------------------------------------------------------


def save_samples(path, ens) -> None:
    rows = []
    for i, (t, target) in enumerate(ens.targets):
        for m, v in enumerate(ens.samples[i]):
            rows.append((t, target, m, _fmt(v)))
    write_csv(path, ["time", "target", "sample_index", "value"], rows)


def load_samples(path):
    """-> list of ((time, target), samples array)."""
    header, rows = _read_rows(path, ["time", "target", "sample_index", "value"])
    groups: dict[tuple[int, str], list[float]] = {}
    for ln, row in enumerate(rows, start=2):
        try:
            t, target, _, v = int(row[0]), row[1], int(row[2]), float(row[3])
        except (ValueError, IndexError):
            raise SchemaError(f"{path}, line {ln}: malformed sample row {row!r}")
        groups.setdefault((t, target), []).append(v)
    return [(key, np.array(vals)) for key, vals in groups.items()]


def save_quantiles(path, ens) -> None:
    from .predict import ensemble_quantiles

    rows = [(t, target, *[_fmt(q) for q in qs])
            for (t, target, *qs) in ensemble_quantiles(ens)]
    write_csv(path, ["time", "target", "q05", "q25", "q50", "q75", "q95"], rows)


def save_scores(path, table) -> None:
    rows = [(r.lead, r.target_class, r.metric, _fmt(r.value), r.n) for r in table.rows]
    write_csv(path, ["lead", "class", "metric", "value", "n"], rows)


def load_request(path) -> list[tuple[int, str]]:
    header, rows = _read_rows(path, ["time", "target"])
    out = []
    for ln, row in enumerate(rows, start=2):
        try:
            out.append((int(row[0]), row[1].strip()))
        except (ValueError, IndexError):
            raise SchemaError(f"{path}, line {ln}: malformed request row {row!r}")
    return out


# -- manifests ------------------------------------------------------------------


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir, command: str, inputs: dict, outputs: list[str], seed,
                   config: dict, wall_time: float) -> None:
    from . import __version__

    manifest = {
        "command": command,
        "version": __version__,
        "seed": seed,
        "config": config,
        "config_hash": hashlib.sha256(
            json.dumps(config, sort_keys=True).encode()).hexdigest(),
        "inputs": {name: sha256_file(p) for name, p in inputs.items()},
        "outputs": {os.path.basename(p): sha256_file(p) for p in outputs},
        "wall_time_s": round(wall_time, 3),
    }
    atomic_write_text(os.path.join(out_dir, "manifest.json"),
                      json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def check_manifest_hash(file_path) -> bool | None:
    """Verify a file against the manifest sitting next to it.

    Returns True/False for a recorded file, None when no manifest or no
    entry exists.
    """
    mpath = os.path.join(os.path.dirname(os.fspath(file_path)) or ".", "manifest.json")
    if not os.path.exists(mpath):
        return None
    with open(mpath) as fh:
        manifest = json.load(fh)
    entry = manifest.get("outputs", {}).get(os.path.basename(os.fspath(file_path)))
    if entry is None:
        return None
    return entry == sha256_file(file_path)


def save_fit_meta(path, model_kind: str, t_fit: int, beta_names: list[str],
                  config: ChainConfig) -> None:
    meta = {"kind": model_kind, "t_fit": t_fit, "beta_names": beta_names,
            "chain": {k: v for k, v in asdict(config).items()}}
    atomic_write_text(path, json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_fit_meta(path) -> dict:
    with open(path) as fh:
        return json.load(fh)
