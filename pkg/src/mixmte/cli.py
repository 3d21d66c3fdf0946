"""Command-line front end: simulate | fit | mc | aggregate.

Every command reads a JSON config, runs deterministically given the seed,
and writes its artifacts plus a provenance JSON (fully resolved config,
seed, package version) to the output directory. Files are written to a
temp name and renamed so interrupted runs never leave partial outputs.

Exit codes: 0 success, 2 config error, 3 data error, 4 estimation
failure, 5 Monte Carlo abort.
"""

from __future__ import annotations

import csv
import json
import os
import sys
import tempfile

import click
import numpy as np

from . import __version__
from .aggregates import (BinaryIvDataset, CounterfactualPolicy, ate, cate,
                         prte, wald_late)
from .data import DataError, GroupSpec, load_csv, validate_exclusions
from .dgp import DgpConfig, McSettings, mc_run, simulate, simulate_binary_iv
from .inference import build_inference_matrices, mte_ci
from .mixture import EmSettings, EstimationError, em_fit
from .numerics import BasisSpec, SolverConfig
from .series import OutcomeStageFit, StageInput, default_grid, fit_outcome_stage

SCHEMA_VERSION = 1
FLOAT_FMT = "%.10g"

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_ESTIMATION = 4
EXIT_MC_ABORT = 5


class ConfigError(ValueError):
    pass


def _merge_config(defaults: dict, user: dict, path: str = "") -> dict:
    """Overlay a user config on the defaults, rejecting unknown keys."""
    out = {}
    for key, default in defaults.items():
        here = f"{path}.{key}" if path else key
        if key in user and isinstance(default, dict) \
                and user[key] is not None:
            if not isinstance(user[key], dict):
                raise ConfigError(f"config key '{here}' must be an object")
            out[key] = _merge_config(default, user[key], here)
        elif key in user:
            out[key] = user[key]
        elif isinstance(default, dict):
            out[key] = _merge_config(default, {}, here)
        else:
            out[key] = default
    unknown = set(user) - set(defaults)
    if unknown:
        where = path or "top level"
        raise ConfigError(
            f"unknown config key(s) at {where}: {', '.join(sorted(unknown))}"
        )
    return out


def _load_config(path, defaults: dict) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            user = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON in {path}: {exc}") from exc
    if not isinstance(user, dict):
        raise ConfigError("config must be a JSON object")
    return _merge_config(defaults, user)


def _atomic_write(out_dir, name, writer):
    """Write via temp-then-rename so readers never see partial files."""
    fd, tmp = tempfile.mkstemp(dir=out_dir, prefix=f".{name}.")
    try:
        with os.fdopen(fd, "w", newline="", encoding="utf-8") as fh:
            writer(fh)
        os.replace(tmp, os.path.join(out_dir, name))
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _write_json(out_dir, name, payload):
    _atomic_write(out_dir, name,
                  lambda fh: json.dump(payload, fh, indent=2, sort_keys=True))


def _write_csv(out_dir, name, header, rows):
    def writer(fh):
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([FLOAT_FMT % v if isinstance(v, float) else v
                        for v in row])

    _atomic_write(out_dir, name, writer)


def _provenance(out_dir, command, config, seed):
    _write_json(out_dir, "provenance.json", {
        "schema_version": SCHEMA_VERSION,
        "command": command,
        "config": config,
        "seed": seed,
        "version": __version__,
    })


def _dgp_from_config(cfg: dict, n: int) -> DgpConfig:
    kwargs = {k: tuple(v) if isinstance(v, list) else v
              for k, v in cfg.items() if v is not None}
    try:
        return DgpConfig(n=n, **kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid DGP settings: {exc}") from exc


_DGP_DEFAULTS = {
    "pi": None, "gamma1": None, "gamma2": None,
    "beta1_0": None, "beta2_0": None, "beta1_1": None, "beta2_1": None,
    "eta_sd": None,
}

_EM_DEFAULTS = {
    "n_starts": 10, "max_iter": 500, "tol": 1e-8,
    "newton_tol": 1e-10, "newton_max_iter": 100, "perturb_sd": 0.5,
}


def _em_settings(cfg: dict, seed: int) -> EmSettings:
    try:
        return EmSettings(seed=seed, **cfg)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid EM settings: {exc}") from exc


def _run_command(fn):
    try:
        fn()
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    except DataError as exc:
        click.echo(f"data error: {exc}", err=True)
        sys.exit(EXIT_DATA)
    except EstimationError as exc:
        if "replications failed" in str(exc):
            click.echo(f"monte carlo aborted: {exc}", err=True)
            sys.exit(EXIT_MC_ABORT)
        click.echo(f"estimation failed: {exc}", err=True)
        sys.exit(EXIT_ESTIMATION)


def _common_options(fn):
    fn = click.option("--config", "config_path", required=True,
                      type=click.Path(), help="JSON config file")(fn)
    fn = click.option("--out", "out_dir", required=True,
                      type=click.Path(), help="output directory")(fn)
    fn = click.option("--seed", type=int, default=0, show_default=True)(fn)
    fn = click.option("--threads", type=int, default=1, show_default=True,
                      help="worker cap for parallel sections")(fn)
    return fn


@click.group()
@click.version_option(__version__)
def main():
    """Estimation toolkit for group-wise marginal treatment effects."""


@main.command("simulate")
@_common_options
def cmd_simulate(config_path, out_dir, seed, threads):
    """Draw a synthetic dataset and write observed plus latent columns."""

    def run():
        defaults = {"n": 1000, "dgp": _DGP_DEFAULTS, "binary_iv": False}
        cfg = _load_config(config_path, defaults)
        if not isinstance(cfg["n"], int) or cfg["n"] < 1:
            raise ConfigError(f"n must be a positive integer, got {cfg['n']!r}")
        os.makedirs(out_dir, exist_ok=True)
        config = _dgp_from_config(cfg["dgp"], cfg["n"])
        if cfg["binary_iv"]:
            sim = simulate_binary_iv(config, seed)
            n = config.n
            _write_csv(out_dir, "data.csv",
                       ["y", "d", "z1", "z2"],
                       ((float(sim.data.y[i]), float(sim.data.d[i]),
                         float(sim.data.z[i, 0]), float(sim.data.z[i, 1]))
                        for i in range(n)))
            _write_csv(out_dir, "latent.csv",
                       ["s", "d_off", "d_on", "y0", "y1"],
                       ((int(sim.s[i]), float(sim.d_off[i]),
                         float(sim.d_on[i]), float(sim.y0[i]),
                         float(sim.y1[i])) for i in range(n)))
        else:
            sim = simulate(config, seed)
            ds = sim.dataset
            _write_csv(out_dir, "data.csv",
                       ["y", "d", "x1", "zeta1", "zeta2"],
                       ((float(ds.y[i]), float(ds.d[i]), float(ds.x[i, 1]),
                         float(ds.z_blocks[0][i, 2]),
                         float(ds.z_blocks[1][i, 2]))
                        for i in range(config.n)))
            _write_csv(out_dir, "latent.csv",
                       ["s", "v1", "v2", "p1", "p2", "y0", "y1"],
                       ((int(sim.s[i]), float(sim.v[i, 0]),
                         float(sim.v[i, 1]), float(sim.p_true[i, 0]),
                         float(sim.p_true[i, 1]), float(sim.y0[i]),
                         float(sim.y1[i])) for i in range(config.n)))
        _provenance(out_dir, "simulate", cfg, seed)

    _run_command(run)


_FIT_DEFAULTS = {
    "data": None,
    "roles": None,
    "groups": None,
    "add_intercept": True,
    "basis": {"order": 3, "inner_knots": 1},
    "solver": {"ridge_lambda": None, "pinv_rel_tol": 1e-10},
    "em": _EM_DEFAULTS,
    "grid": None,
    "x_points": None,
    "ci_level": 0.95,
    "force": False,
}


def _load_dataset(cfg):
    if not cfg["data"] or not cfg["roles"] or not cfg["groups"]:
        raise ConfigError("config must set 'data', 'roles', and 'groups'")
    spec = GroupSpec(cfg["groups"], add_intercept=cfg["add_intercept"])
    data = load_csv(cfg["data"], spec, cfg["roles"])
    covs = [c for c, r in cfg["roles"].items() if r == "covariate"]
    violations = validate_exclusions(spec, covs)
    for v in violations:
        click.echo(f"warning: {v}", err=True)
    return data, spec


@main.command("fit")
@_common_options
def cmd_fit(config_path, out_dir, seed, threads):
    """Two-stage fit with confidence bands on user data."""

    def run():
        cfg = _load_config(config_path, _FIT_DEFAULTS)
        data, _ = _load_dataset(cfg)
        os.makedirs(out_dir, exist_ok=True)

        fit1 = em_fit(data, _em_settings(cfg["em"], seed))
        try:
            basis = BasisSpec(**cfg["basis"])
            # Default ridge penalty is 10/n on the sum-of-squares objective,
            # which is 10/n^2 in the solver's (1/n)-normalized objective.
            lam = cfg["solver"]["ridge_lambda"]
            lam = 10.0 / data.n ** 2 if lam is None else float(lam)
            solver = SolverConfig(ridge_lambda=lam,
                                  pinv_rel_tol=cfg["solver"]["pinv_rel_tol"])
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        stage = StageInput.from_mixture_fit(fit1)
        fit2 = fit_outcome_stage(data, stage, basis, solver,
                                 force=cfg["force"])
        mats = build_inference_matrices(data, fit2)

        grid = np.asarray(cfg["grid"], dtype=float) if cfg["grid"] \
            else default_grid()
        x_points = [np.asarray(p, dtype=float) for p in cfg["x_points"]] \
            if cfg["x_points"] else [data.x.mean(axis=0)]

        rows = []
        for x in x_points:
            for j in range(data.n_groups):
                curve = mte_ci(fit2, mats, j, x, grid, cfg["ci_level"])
                for k, p in enumerate(curve.grid):
                    rows.append((",".join(FLOAT_FMT % v for v in x), j + 1,
                                 float(p), float(curve.values[k]),
                                 float(curve.se[k]), float(curve.ci_low[k]),
                                 float(curve.ci_high[k])))
        _write_csv(out_dir, "mte_curves.csv",
                   ["x", "group", "p", "mte", "se", "lo", "hi"], rows)

        fit1.save_json(os.path.join(out_dir, "mixture_fit.json"))
        _write_json(out_dir, "outcome_fit.json", fit2.to_dict())
        per_group, overall = ate(fit2, data)
        _write_json(out_dir, "summary.json", {
            "schema_version": SCHEMA_VERSION,
            "loglik": fit1.loglik,
            "aic": fit1.aic,
            "pi": fit1.params.pi.tolist(),
            "converged": fit1.converged,
            "ate_by_group": per_group.tolist(),
            "ate_overall": overall,
        })
        _provenance(out_dir, "fit", cfg, seed)

    _run_command(run)


_MC_DEFAULTS = {
    "n": 1000,
    "replications": 100,
    "dgp": _DGP_DEFAULTS,
    "basis": {"order": 3, "inner_knots": 1},
    "ridge": True,
    "estimators": ["feasible", "infeasible"],
    "em": _EM_DEFAULTS,
    "second_stage": True,
    "compute_se": False,
    "ci_level": 0.95,
}


@main.command("mc")
@_common_options
def cmd_mc(config_path, out_dir, seed, threads):
    """Monte Carlo bias/RMSE experiment on the synthetic design."""

    def run():
        cfg = _load_config(config_path, _MC_DEFAULTS)
        os.makedirs(out_dir, exist_ok=True)
        config = _dgp_from_config(cfg["dgp"], cfg["n"])
        bad = set(cfg["estimators"]) - {"feasible", "infeasible"}
        if bad:
            raise ConfigError(
                f"unknown estimator(s): {', '.join(sorted(bad))}"
            )
        try:
            settings = McSettings(
                basis=BasisSpec(**cfg["basis"]),
                ridge=bool(cfg["ridge"]),
                em=_em_settings(cfg["em"], seed),
                estimators=tuple(cfg["estimators"]),
                second_stage=bool(cfg["second_stage"]),
                compute_se=bool(cfg["compute_se"]),
                ci_level=float(cfg["ci_level"]),
            )
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

        def progress(done, total):
            if done % 50 == 0 or done == total:
                click.echo(f"replication {done}/{total}", err=True)

        report = mc_run(config, settings, cfg["replications"], seed,
                        workers=max(1, threads), progress=progress)

        ml_rows = [(c.label, config.n, c.bias, c.rmse)
                   for c in report.ml_cells]
        _write_csv(out_dir, "table4.csv", ["parameter", "n", "bias", "rmse"],
                   ml_rows)
        mte_rows = []
        for name, cells in report.mte_cells.items():
            for c in cells:
                mte_rows.append((
                    name, config.n, settings.basis.inner_knots,
                    int(settings.ridge), c.label, c.bias, c.rmse,
                ))
        _write_csv(out_dir, "table3.csv",
                   ["estimator", "n", "inner_knots", "ridge", "cell",
                    "bias", "rmse"], mte_rows)
        _write_json(out_dir, "report.json", report.to_dict())
        _provenance(out_dir, "mc", cfg, seed)

    _run_command(run)


_AGG_DEFAULTS = {
    "data": None,
    "roles": None,
    "groups": None,
    "add_intercept": True,
    "outcome_fit": None,
    "x_points": None,
    "policy_csv": None,
    "late": {"data": None},
}


@main.command("aggregate")
@_common_options
def cmd_aggregate(config_path, out_dir, seed, threads):
    """CATE/ATE/PRTE/LATE report from fitted artifacts."""

    def run():
        cfg = _load_config(config_path, _AGG_DEFAULTS)
        os.makedirs(out_dir, exist_ok=True)
        report = {"schema_version": SCHEMA_VERSION}

        if cfg["data"]:
            data, _ = _load_dataset(cfg)
            if not cfg["outcome_fit"]:
                raise ConfigError("'outcome_fit' artifact path is required "
                                  "when 'data' is set")
            try:
                with open(cfg["outcome_fit"], encoding="utf-8") as fh:
                    fit2 = OutcomeStageFit.from_dict(json.load(fh))
            except OSError as exc:
                raise ConfigError(
                    f"missing fit artifact {cfg['outcome_fit']}: {exc}"
                ) from exc
            x_points = [np.asarray(p, dtype=float) for p in cfg["x_points"]] \
                if cfg["x_points"] else [data.x.mean(axis=0)]
            report["cate"] = [
                {"x": x.tolist(),
                 "by_group": [cate(fit2, j, x)
                              for j in range(fit2.n_groups)]}
                for x in x_points
            ]
            per_group, overall = ate(fit2, data)
            report["ate_by_group"] = per_group.tolist()
            report["ate_overall"] = overall
            if cfg["policy_csv"]:
                policy = _read_policy(cfg["policy_csv"], data.n,
                                      fit2.n_groups)
                report["prte"] = prte(fit2, data, policy)

        if cfg["late"]["data"]:
            late_data = _read_binary_iv(cfg["late"]["data"])
            late = {"pooled": wald_late(late_data, "pooled")}
            for j in range(late_data.n_groups):
                cell = np.zeros(late_data.n_groups)
                cell[j] = 1.0
                count = int(np.all(late_data.z == cell, axis=1).sum())
                late[f"group{j + 1}"] = {
                    "estimate": wald_late(late_data, j),
                    "cell_count": count,
                }
            report["late"] = late

        if len(report) == 1:
            raise ConfigError("nothing to aggregate: set 'data' and/or "
                              "'late.data'")
        _write_json(out_dir, "aggregates.json", report)
        _provenance(out_dir, "aggregate", cfg, seed)

    _run_command(run)


def _read_policy(path, n, s) -> CounterfactualPolicy:
    cols = [f"pstar{j + 1}" for j in range(s)]
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            missing = set(cols) - set(reader.fieldnames or [])
            if missing:
                raise DataError(
                    f"policy file lacks columns: {', '.join(sorted(missing))}"
                )
            rows = [[float(rec[c]) for c in cols] for rec in reader]
    except OSError as exc:
        raise DataError(f"cannot read policy file {path}: {exc}") from exc
    arr = np.asarray(rows, dtype=float)
    if arr.shape != (n, s):
        raise DataError(
            f"policy file has {arr.shape[0]} rows, dataset has {n}"
        )
    return CounterfactualPolicy(draws=arr)


def _read_binary_iv(path) -> BinaryIvDataset:
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            fields = reader.fieldnames or []
            z_cols = sorted(c for c in fields if c.startswith("z"))
            if "y" not in fields or "d" not in fields or not z_cols:
                raise DataError(
                    "binary-IV file needs columns y, d, and z1..zS"
                )
            rows = [(float(r["y"]), float(r["d"]),
                     [float(r[c]) for c in z_cols]) for r in reader]
    except OSError as exc:
        raise DataError(f"cannot read binary-IV file {path}: {exc}") from exc
    return BinaryIvDataset(
        y=np.array([r[0] for r in rows]),
        d=np.array([r[1] for r in rows]),
        z=np.array([r[2] for r in rows]),
    )


if __name__ == "__main__":
    main()
