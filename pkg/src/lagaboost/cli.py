"""Command-line interface: train, predict, simulate, sweep, tune.

Exit codes: 0 success, 2 usage or validation error, 3 partial replicate
failure, 4 numerical failure.
"""

from __future__ import annotations

import csv
import json
import os
import sys

import click
import numpy as np

from .boosting import (BoostConfig, BoostedModel, NumericalError,
                       fit_independent_boosting, fit_lagaboost,
                       fit_lagaboost_oos, fit_linear_baseline)
from .likelihoods import get_likelihood
from .prediction import predict_latent, response_from_moments
from .simulation import (SimConfig, log_loss, run_experiment, run_sweep,
                         tune_grid)
from .structures import make_structure

EXIT_USAGE = 2
EXIT_PARTIAL = 3
EXIT_NUMERICAL = 4


class CliError(click.ClickException):
    exit_code = EXIT_USAGE


def _fail(msg, code=EXIT_USAGE):
    click.echo(f"error: {msg}", err=True)
    sys.exit(code)


def _read_csv(path):
    try:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None:
                _fail(f"{path}: empty file, a header row is required")
            rows = list(reader)
    except OSError as exc:
        _fail(str(exc))
    return [h.strip() for h in header], rows


def _numeric_column(rows, col_idx, name, path):
    out = np.empty(len(rows))
    for i, row in enumerate(rows):
        try:
            out[i] = float(row[col_idx])
        except (ValueError, IndexError):
            _fail(f"{path}: non-numeric value in column '{name}' at data row {i + 1}")
    return out


def _load_table(path, response_col=None, group_col=None, loc_cols=None):
    header, rows = _read_csv(path)
    for col in filter(None, [response_col, group_col] + list(loc_cols or [])):
        if col not in header:
            _fail(f"{path}: missing column '{col}'")
    special = {c for c in [response_col, group_col, *(loc_cols or [])] if c}
    feature_cols = [c for c in header if c not in special]
    data = {}
    for name in header:
        data[name] = _numeric_column(rows, header.index(name), name, path)
    X = (np.column_stack([data[c] for c in feature_cols])
         if feature_cols else np.empty((len(rows), 0)))
    y = data[response_col] if response_col else None
    group = data[group_col].astype(np.int64) if group_col else None
    locs = (np.column_stack([data[c] for c in loc_cols]) if loc_cols else None)
    return X, y, group, locs, feature_cols


def _merge_config(config_path, kwargs):
    """Flat-key JSON config; explicitly passed flags win."""
    if not config_path:
        return kwargs
    try:
        with open(config_path) as fh:
            file_vals = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        _fail(f"config file: {exc}")
    merged = dict(kwargs)
    for key, val in file_vals.items():
        key = key.replace("-", "_")
        if merged.get(key) is None:
            merged[key] = val
    return merged


def _resolve_threads(threads):
    if threads is not None:
        return max(1, int(threads))
    env = os.environ.get("LAGABOOST_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            _fail("LAGABOOST_THREADS must be an integer")
    return os.cpu_count() or 1


@click.group()
def main():
    """Boosted trees combined with latent Gaussian models."""


@main.command()
@click.option("--data", required=True, type=click.Path())
@click.option("--model", "model_path", required=True, type=click.Path())
@click.option("--config", "config_path", type=click.Path())
@click.option("--likelihood", type=click.Choice(["bernoulli-probit", "poisson-log"]),
              default=None)
@click.option("--structure", "structure_kind", type=click.Choice(["grouped", "gp"]),
              default=None)
@click.option("--response-col", default=None)
@click.option("--group-col", default=None)
@click.option("--loc-cols", default=None, help="comma-separated pair of columns")
@click.option("--iterations", type=int, default=None)
@click.option("--learning-rate", type=float, default=None)
@click.option("--max-depth", type=int, default=None)
@click.option("--min-leaf", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--algorithm", type=click.Choice(
    ["lagaboost", "lagaboost-oos", "linear", "independent"]), default=None)
@click.option("--folds", type=int, default=None)
@click.option("--out", "log_path", type=click.Path(), default=None,
              help="fit log destination (default: <model>.log)")
def train(**kwargs):
    """Fit a model on a CSV file and write it as JSON."""
    opts = _merge_config(kwargs.pop("config_path"), kwargs)
    likelihood = opts.get("likelihood") or "bernoulli-probit"
    structure_kind = opts.get("structure_kind") or ("grouped" if opts.get("group_col")
                                                    else "gp")
    response_col = opts.get("response_col")
    if not response_col:
        _fail("--response-col is required")
    loc_cols = opts.get("loc_cols")
    if isinstance(loc_cols, str):
        loc_cols = [c.strip() for c in loc_cols.split(",") if c.strip()]
    if structure_kind == "grouped" and not opts.get("group_col"):
        _fail("grouped structure needs --group-col")
    if structure_kind == "gp" and not loc_cols:
        _fail("gp structure needs --loc-cols")

    X, y, group, locs, feature_cols = _load_table(
        opts["data"], response_col=response_col, group_col=opts.get("group_col"),
        loc_cols=loc_cols)
    try:
        lik = get_likelihood(likelihood)
        y = lik.validate_response(y)
    except ValueError as exc:
        _fail(str(exc))

    cfg = BoostConfig(
        n_iter=opts.get("iterations") if opts.get("iterations") is not None else 100,
        learning_rate=opts.get("learning_rate") if opts.get("learning_rate") is not None else 0.1,
        max_depth=opts.get("max_depth") if opts.get("max_depth") is not None else 5,
        min_samples_leaf=opts.get("min_leaf") if opts.get("min_leaf") is not None else 10,
        seed=opts.get("seed") or 0)
    algorithm = opts.get("algorithm") or "lagaboost"

    log_lines = [f"algorithm={algorithm} likelihood={likelihood} "
                 f"structure={structure_kind} n={len(y)} features={feature_cols}"]
    try:
        if algorithm == "independent":
            cols = [X]
            if group is not None:
                cols.append(group.reshape(-1, 1).astype(float))
            if locs is not None:
                cols.append(locs)
            model = fit_independent_boosting(np.hstack(cols), y, lik, cfg)
        else:
            structure = make_structure(structure_kind, group_index=group,
                                       locations=locs)
            if algorithm == "lagaboost-oos":
                folds = opts.get("folds") or 4
                model = fit_lagaboost_oos(X, y, lik, structure, cfg, folds=folds)
                log_lines.append(
                    f"oos: theta estimated out-of-sample="
                    f"{np.asarray(model.fit_log['oos_theta']).tolist()}; "
                    f"final refit ran with theta frozen (no hyperparameter steps)")
            elif algorithm == "linear":
                model = fit_linear_baseline(X, y, lik, structure, cfg)
            else:
                model = fit_lagaboost(X, y, lik, structure, cfg, trace_nll=True)
                for i, (nll, th) in enumerate(zip(model.fit_log["nll"],
                                                  model.fit_log["theta"])):
                    log_lines.append(f"iter={i} nll={nll!r} theta={th.tolist()}")
    except NumericalError as exc:
        _fail(str(exc), EXIT_NUMERICAL)
    except (ValueError, np.linalg.LinAlgError) as exc:
        _fail(str(exc))

    if isinstance(model, BoostedModel):
        doc = model.to_json()
    else:  # linear model
        doc = json.dumps({"format_version": 1, "model": "linear",
                          "likelihood": model.likelihood_kind,
                          "beta": model.beta.tolist(),
                          "theta": model.theta.tolist(),
                          "structure_kind": model.structure_kind,
                          "structure_data": {k: np.asarray(v).tolist()
                                             for k, v in model.structure_data.items()},
                          "mode_b": model.mode_b.tolist(),
                          "mode_d1": model.mode_d1.tolist(),
                          "mode_w": model.mode_w.tolist(),
                          "converged": model.converged})
    with open(opts["model_path"], "w") as fh:
        fh.write(doc)
    log_lines.append(f"final_nll={model.fit_log.get('final_nll')!r} "
                     f"theta={np.asarray(model.theta).tolist()}")
    log_path = opts.get("log_path") or (opts["model_path"] + ".log")
    with open(log_path, "w") as fh:
        fh.write("\n".join(log_lines) + "\n")
    click.echo(f"model written to {opts['model_path']}")


def _load_model(path):
    try:
        with open(path) as fh:
            text = fh.read()
        doc = json.loads(text)
    except (OSError, json.JSONDecodeError) as exc:
        _fail(f"model file: {exc}")
    if doc.get("model") == "linear":
        from .boosting import LinearModel
        return LinearModel(
            likelihood_kind=doc["likelihood"],
            beta=np.asarray(doc["beta"], dtype=float),
            theta=np.asarray(doc["theta"], dtype=float),
            structure_kind=doc["structure_kind"],
            structure_data=doc["structure_data"],
            mode_b=np.asarray(doc["mode_b"], dtype=float),
            mode_d1=np.asarray(doc["mode_d1"], dtype=float),
            mode_w=np.asarray(doc["mode_w"], dtype=float),
            converged=doc["converged"])
    return BoostedModel.from_json(text)


@main.command()
@click.option("--data", required=True, type=click.Path())
@click.option("--model", "model_path", required=True, type=click.Path())
@click.option("--out", required=True, type=click.Path())
@click.option("--group-col", default=None)
@click.option("--loc-cols", default=None)
def predict(data, model_path, out, group_col, loc_cols):
    """Write latent mean/variance and response predictions for a CSV file."""
    model = _load_model(model_path)
    if loc_cols:
        loc_cols = [c.strip() for c in loc_cols.split(",") if c.strip()]
    if model.structure_kind == "grouped" and not group_col:
        _fail("grouped model needs --group-col")
    if model.structure_kind == "gp" and not loc_cols:
        _fail("gp model needs --loc-cols")
    X, _, group, locs, _ = _load_table(data, group_col=group_col, loc_cols=loc_cols)

    if model.structure_kind == "none":
        # independent models consume ids/coordinates as plain features
        cols = [X]
        if group is not None:
            cols.append(group.reshape(-1, 1).astype(float))
        if locs is not None:
            cols.append(locs)
        X, group, locs = np.hstack(cols), None, None

    if model.structure_kind == "grouped" and group is not None:
        m = model.structure_data["m"]
        unseen = int(np.sum((group < 0) | (group >= m)))
        if unseen:
            click.echo(f"note: {unseen} rows with unseen group ids use the "
                       f"prior predictive", err=True)

    if X.shape[0] == 0:
        with open(out, "w", newline="") as fh:
            csv.writer(fh).writerow(["row", "latent_mean", "latent_var",
                                     "response_pred"])
        return
    try:
        mom = predict_latent(model, X, group=group, locations=locs)
        resp = response_from_moments(model.likelihood_kind, mom.omega, mom.omega_var)
    except ValueError as exc:
        _fail(str(exc))
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["row", "latent_mean", "latent_var", "response_pred"])
        for i in range(X.shape[0]):
            writer.writerow([i, repr(float(mom.omega[i])),
                             repr(float(mom.omega_var[i])), repr(float(resp[i]))])
    click.echo(f"predictions written to {out}")


def _sim_config(opts):
    scenario = opts.get("scenario")
    if scenario not in ("grouped-binary", "spatial-binary",
                        "grouped-poisson", "spatial-poisson"):
        _fail(f"invalid scenario {scenario!r}")
    kwargs = dict(scenario=scenario, runs=opts.get("runs") or 10,
                  seed=opts.get("seed") or 0)
    for key in ("n", "samples_per_group", "sigma2", "rho"):
        if opts.get(key) is not None:
            kwargs[key] = opts[key]
    return SimConfig(**kwargs)


@main.command()
@click.option("--scenario", required=True)
@click.option("--runs", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--n", type=int, default=None)
@click.option("--samples-per-group", type=int, default=None)
@click.option("--sigma2", type=float, default=None)
@click.option("--rho", type=float, default=None)
@click.option("--out", required=True, type=click.Path(),
              help="report CSV path; a .txt table is written alongside")
@click.option("--threads", type=int, default=None)
@click.option("--config", "config_path", type=click.Path())
def simulate(**kwargs):
    """Run the simulation experiment and write the report."""
    opts = _merge_config(kwargs.pop("config_path"), kwargs)
    config = _sim_config(opts)
    n_jobs = _resolve_threads(opts.get("threads"))
    report = run_experiment(config, n_jobs=n_jobs)
    out = opts["out"]
    with open(out, "w") as fh:
        fh.write(report.to_csv())
    with open(out + ".txt", "w") as fh:
        fh.write(report.to_text() + "\n")
    click.echo(report.to_text())
    if any(report.failures.values()):
        click.echo(f"warning: excluded replicates {report.failures}", err=True)
        sys.exit(EXIT_PARTIAL)


@main.command()
@click.option("--scenario", required=True)
@click.option("--axis", required=True,
              type=click.Choice(["samples_per_group", "rho"]))
@click.option("--runs", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--n", type=int, default=None)
@click.option("--sigma2", type=float, default=None)
@click.option("--out", required=True, type=click.Path())
@click.option("--threads", type=int, default=None)
def sweep(**kwargs):
    """Sweep samples-per-group or the GP range and write plot data."""
    config = _sim_config(kwargs)
    try:
        rows, text = run_sweep(config, kwargs["axis"])
    except ValueError as exc:
        _fail(str(exc))
    with open(kwargs["out"], "w") as fh:
        fh.write(text)
    click.echo(text)


@main.command()
@click.option("--data", required=True, type=click.Path())
@click.option("--likelihood", type=click.Choice(["bernoulli-probit", "poisson-log"]),
              default="bernoulli-probit")
@click.option("--response-col", required=True)
@click.option("--group-col", default=None)
@click.option("--loc-cols", default=None)
@click.option("--grid", "grid_path", required=True, type=click.Path(),
              help="JSON list of tuning cells")
@click.option("--folds", type=int, default=4)
@click.option("--seed", type=int, default=0)
@click.option("--out", required=True, type=click.Path())
def tune(data, likelihood, response_col, group_col, loc_cols, grid_path, folds,
         seed, out):
    """Cross-validated grid tuning; writes the best configuration as JSON."""
    if loc_cols:
        loc_cols = [c.strip() for c in loc_cols.split(",") if c.strip()]
    X, y, group, locs, _ = _load_table(data, response_col=response_col,
                                       group_col=group_col, loc_cols=loc_cols)
    try:
        with open(grid_path) as fh:
            grid = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        _fail(f"grid file: {exc}")
    try:
        best, loss = tune_grid(X, y, likelihood, grid, k=folds, group=group,
                               locations=locs, seed=seed)
    except (ValueError, RuntimeError) as exc:
        _fail(str(exc))
    with open(out, "w") as fh:
        json.dump({"best": best, "mean_validation_negll": loss}, fh)
    click.echo(json.dumps(best))


if __name__ == "__main__":
    main()
