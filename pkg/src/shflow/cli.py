"""Command-line driver: gen-data, train, sample, eval, theory.

Exit codes: 0 success, 1 theory check failed, 2 configuration error,
3 numerical failure.
"""

import argparse
import csv
import dataclasses
import json
import math
import os
import sys
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import yaml

from . import __version__, theory
from .baselines import fit_tempered, importance_reference
from .elbo import ReferenceDistribution, elbo_step_trace, exact_elbo
from .errors import ConfigError, NumericalDivergence, TrainingAborted
from .flow import PhaseState, forward
from .metrics import GaussianSummary, compute_metrics
from .model import (Dataset, make_gaussian_location, make_linreg, make_logreg, read_csv,
                    select_coreset)
from .train import TrainConfig, config_hash, fit, load_checkpoint, manifest_lines, save_checkpoint

EXIT_OK, EXIT_CHECK_FAILED, EXIT_CONFIG, EXIT_NUMERICAL = 0, 1, 2, 3
MODEL_KINDS = ("gaussian", "linreg", "logreg")
METRICS = ("kl", "mean_error", "cov_error", "energy", "ksd")


# --------------------------------------------------------------------------
# run configuration
# --------------------------------------------------------------------------

@dataclass
class ModelSpec:
    kind: str = "gaussian"
    c: float = 100.0

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ConfigError(f"model.kind must be one of {MODEL_KINDS}")
        if not self.c > 0:
            raise ConfigError("model.c must be positive")


@dataclass
class SyntheticSpec:
    N: int = 1000
    d: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.N < 0 or self.d < 1:
            raise ConfigError("synthetic data needs N >= 0 and d >= 1")


@dataclass
class DataSpec:
    synthetic: Optional[SyntheticSpec] = None
    csv: Optional[str] = None
    response: Optional[object] = None
    header: bool = True
    standardize: bool = False

    def __post_init__(self):
        if (self.synthetic is None) == (self.csv is None):
            raise ConfigError("data needs exactly one of 'synthetic' or 'csv'")


@dataclass
class CoresetSpec:
    M: int = 20
    seed: int = 0
    balance: bool = False


@dataclass
class ReferenceSpec:
    mean: object = 0.0
    diag_cov: object = 1.0


@dataclass
class EvalSpec:
    metrics: list = field(default_factory=lambda: ["kl", "mean_error", "cov_error"])
    n_samples: int = 100
    seed: int = 0
    reference_summary: Optional[str] = None
    trace_n_mc: int = 100

    def __post_init__(self):
        bad = [m for m in self.metrics if m not in METRICS]
        if bad:
            raise ConfigError(f"unknown metrics {bad}; choose from {METRICS}")


@dataclass
class RunConfig:
    model: ModelSpec
    data: DataSpec
    coreset: CoresetSpec = field(default_factory=CoresetSpec)
    reference: ReferenceSpec = field(default_factory=ReferenceSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalSpec = field(default_factory=EvalSpec)
    method: str = "shf"
    output: str = "runs/out"

    def __post_init__(self):
        if self.method not in ("shf", "uniform", "tempered"):
            raise ConfigError("method must be 'shf', 'uniform' or 'tempered'")

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["train"] = self.train.to_dict()
        return d


def _build(cls, raw, path):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path} must be a mapping")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - set(names))
    if unknown:
        raise ConfigError(f"unknown key(s) in {path}: {', '.join(unknown)}")
    kwargs = {}
    for key, value in raw.items():
        sub = _NESTED.get((cls, key))
        kwargs[key] = _build(sub, value, f"{path}.{key}") if sub and value is not None else value
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from None


_NESTED = {
    (RunConfig, "model"): ModelSpec,
    (RunConfig, "data"): DataSpec,
    (RunConfig, "coreset"): CoresetSpec,
    (RunConfig, "reference"): ReferenceSpec,
    (RunConfig, "train"): TrainConfig,
    (RunConfig, "eval"): EvalSpec,
    (DataSpec, "synthetic"): SyntheticSpec,
}


def parse_config(raw):
    if "model" not in raw or "data" not in raw:
        raise ConfigError("config needs 'model' and 'data' sections")
    return _build(RunConfig, raw, "config")


def load_config(path):
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh)
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(raw or {})


# --------------------------------------------------------------------------
# data
# --------------------------------------------------------------------------

def synthetic_dataset(kind, N, d, seed, c=100.0):
    """Seeded synthetic data; returns (Dataset or None when N == 0, truth dict).

    ``d`` is the latent dimension for the Gaussian model and the number of
    features otherwise.
    """
    rng = np.random.default_rng(seed)
    if kind == "gaussian":
        theta = rng.standard_normal(d)
        X = theta + math.sqrt(c) * rng.standard_normal((N, d))
        return (Dataset(X) if N else None), {"theta": theta.tolist()}
    beta = rng.standard_normal(d + 1)
    X = rng.standard_normal((N, d))
    logit = beta[0] + X @ beta[1:]
    if kind == "linreg":
        sigma = 0.5
        y = logit + sigma * rng.standard_normal(N)
        truth = {"beta": beta.tolist(), "log_sigma2": 2 * math.log(sigma)}
    else:
        y = (rng.random(N) < 1.0 / (1.0 + np.exp(-logit))).astype(float)
        truth = {"beta": beta.tolist()}
    return (Dataset(X, y) if N else None), truth


def build_model(kind, data, c=100.0):
    if kind == "gaussian":
        return make_gaussian_location(data, c)
    if kind == "linreg":
        return make_linreg(data)
    return make_logreg(data)


def load_data(cfg):
    ds = cfg.data
    if ds.synthetic is not None:
        s = ds.synthetic
        data, _ = synthetic_dataset(cfg.model.kind, s.N, s.d, s.seed, cfg.model.c)
        if data is None:
            raise ConfigError("synthetic data with N = 0 cannot be trained on")
    else:
        response = None if cfg.model.kind == "gaussian" else ds.response
        if cfg.model.kind != "gaussian" and response is None:
            raise ConfigError("data.response is required for regression models")
        data = read_csv(ds.csv, response=response, header=ds.header)
    return data.standardized() if ds.standardize else data


def setup(cfg):
    data = load_data(cfg)
    model = build_model(cfg.model.kind, data, cfg.model.c)
    if not 1 <= cfg.coreset.M <= model.n_data:
        raise ConfigError(f"coreset.M must lie in [1, {model.n_data}]")
    balance = data if (cfg.coreset.balance and cfg.model.kind == "logreg") else None
    coreset = select_coreset(model.n_data, cfg.coreset.M, cfg.coreset.seed, balance)
    try:
        q = ReferenceDistribution(
            np.broadcast_to(np.asarray(cfg.reference.mean, dtype=float), (model.dim,)),
            np.broadcast_to(np.asarray(cfg.reference.diag_cov, dtype=float), (model.dim,)))
    except ValueError as exc:
        raise ConfigError(f"reference: {exc}") from None
    return model, coreset, q


def manifest(cfg_dict, seeds, command):
    return {"artifact": "shflow", "version": __version__, "command": command,
            "config_hash": config_hash(cfg_dict), "seeds": seeds}


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_gen_data(args):
    kind = args.kind
    spec = {"kind": kind, "N": args.N, "d": args.d, "c": args.c, "seed": args.seed}
    data, truth = synthetic_dataset(kind, args.N, args.d, args.seed, args.c)
    man = manifest(spec, {"data": args.seed}, "gen-data") | {"spec": spec, "truth": truth}
    if kind == "gaussian":
        header = [f"x{j}" for j in range(args.d)]
    else:
        header = [f"x{j}" for j in range(args.d)] + ["y"]
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    with open(args.out, "w", newline="") as fh:
        for line in manifest_lines(man):
            fh.write(line + "\n")
        w = csv.writer(fh)
        w.writerow(header)
        if data is not None:
            rows = data.features if kind == "gaussian" else np.column_stack([data.features, data.response])
            for row in rows:
                w.writerow([repr(float(v)) for v in row])
    if data is None:
        warnings.warn("N = 0: wrote a header-only file", RuntimeWarning)
    if args.reference_out and data is not None:
        model = build_model(kind, data, args.c)
        if kind == "gaussian":
            ref = theory.exact_gaussian_posteriors(data, args.c).exact
            info = {"method": "closed-form",
                    "log_evidence": theory.gaussian_log_evidence(data, args.c)}
        else:
            ref, info = importance_reference(model, n_samples=args.reference_samples,
                                             seed=args.seed)
        with open(args.reference_out, "w") as fh:
            json.dump({"manifest": man, "provenance": info} | ref.to_dict(), fh, indent=1)
    return EXIT_OK


def _train_one(cfg, out_dir):
    model, coreset, q = setup(cfg)
    os.makedirs(out_dir, exist_ok=True)
    tc = cfg.train
    if cfg.method == "tempered":
        params, schedule, trace = fit_tempered(model, coreset, q, tc)
        extra = {"tempering_alphas": schedule.alphas.tolist(),
                 "tempering_betas": schedule.betas().tolist()}
    else:
        if cfg.method == "uniform":
            tc = dataclasses.replace(tc, train_weights=False)
        params, trace = fit(model, coreset, q, tc)
        extra = {}
    cfg_dict = cfg.to_dict()
    man = manifest(cfg_dict, {"train": tc.rng_seed, "coreset": cfg.coreset.seed}, "train")
    extra["manifest"] = man
    if trace is not None:
        extra["skipped_iterations"] = trace.skipped_iterations
        extra["best_snapshot"] = trace.best_snapshot
        trace.to_csv(os.path.join(out_dir, "trace.csv"), man)
    save_checkpoint(os.path.join(out_dir, "checkpoint.json"), params, coreset, cfg_dict, extra)
    return out_dir


def _replicate_cfg(cfg, i):
    tc = dataclasses.replace(cfg.train, rng_seed=cfg.train.rng_seed + i)
    cs = dataclasses.replace(cfg.coreset, seed=cfg.coreset.seed + i)
    return dataclasses.replace(cfg, train=tc, coreset=cs)


def cmd_train(args):
    cfg = load_config(args.config)
    out = args.out or cfg.output
    if args.replicates <= 1:
        _train_one(cfg, out)
        print(os.path.join(out, "checkpoint.json"))
        return EXIT_OK
    jobs = [(_replicate_cfg(cfg, i), os.path.join(out, f"rep{i}")) for i in range(args.replicates)]
    if args.workers > 1:
        with ProcessPoolExecutor(args.workers) as pool:
            dirs = list(pool.map(_train_one, *zip(*jobs)))
    else:
        dirs = [_train_one(c, d) for c, d in jobs]
    for d in dirs:
        print(os.path.join(d, "checkpoint.json"))
    return EXIT_OK


def _restore(path):
    params, coreset, payload = load_checkpoint(path)
    cfg = parse_config(_config_for_parse(payload["config"]))
    model, _, q = setup(cfg)
    coreset.validate(model.n_data)
    return cfg, model, params, coreset, q, payload


def _config_for_parse(d):
    d = json.loads(json.dumps(d))
    if d.get("data", {}).get("synthetic") is None:
        d.get("data", {}).pop("synthetic", None)
    return d


def draw_samples(model, params, coreset, q, n, seed):
    """n flow draws; returns (theta, log density of the augmented pushforward)."""
    rng = np.random.default_rng(seed)
    theta0, rho0 = q.sample(n, rng)
    if n == 0:
        return np.zeros((0, model.dim)), np.zeros(0)
    out = forward(model, params, coreset, PhaseState(theta0, rho0))
    return out.final_state.position, q.log_density(theta0, rho0) - out.log_jacobian


def cmd_sample(args):
    cfg, model, params, coreset, q, payload = _restore(args.checkpoint)
    theta, logd = draw_samples(model, params, coreset, q, args.n, args.seed)
    man = manifest(payload["config"], {"sample": args.seed}, "sample") | {"n": args.n}
    with open(args.out, "w", newline="") as fh:
        for line in manifest_lines(man):
            fh.write(line + "\n")
        w = csv.writer(fh)
        w.writerow([f"theta{j}" for j in range(model.dim)] + ["log_density"])
        for row, ld in zip(theta, logd):
            w.writerow([repr(float(v)) for v in row] + [repr(float(ld))])
    return EXIT_OK


def load_reference(path):
    try:
        with open(path) as fh:
            return GaussianSummary.from_dict(json.load(fh))
    except (OSError, KeyError, ValueError) as exc:
        raise ConfigError(f"cannot read reference summary {path}: {exc}") from None


def evaluate_checkpoint(path, metrics, n, seed, reference_path=None, trace_n_mc=100):
    cfg, model, params, coreset, q, payload = _restore(path)
    if reference_path:
        reference = load_reference(reference_path)
    elif cfg.eval.reference_summary:
        reference = load_reference(cfg.eval.reference_summary)
    elif cfg.model.kind == "gaussian":
        reference = theory.exact_gaussian_posteriors(model.data, cfg.model.c).exact
    else:
        raise ConfigError("a reference summary is required for non-Gaussian models")
    theta, _ = draw_samples(model, params, coreset, q, n, seed)
    values = compute_metrics(metrics, theta, reference, score=model.grad_log_joint, seed=seed)
    elbo_mean, elbo_se = exact_elbo(model, params, coreset, q, trace_n_mc, [seed, 7])
    kinds, steps = elbo_step_trace(model, params, coreset, q, trace_n_mc, [seed, 8])
    report = {
        "manifest": manifest(payload["config"], {"eval": seed}, "eval"),
        "checkpoint": os.path.abspath(path),
        "n_samples": n,
        "metrics": values,
        "elbo": {"mean": elbo_mean, "stderr": elbo_se, "n_mc": trace_n_mc},
        "elbo_trace": [{"step": i, "kind": k, "elbo": float(v.mean()),
                        "stderr": float(v.std(ddof=1) / math.sqrt(len(v)))}
                       for i, (k, v) in enumerate(zip(kinds, steps))],
    }
    if cfg.model.kind == "gaussian":
        report["log_evidence"] = theory.gaussian_log_evidence(model.data, cfg.model.c)
    return report


def cmd_eval(args):
    metrics = args.metrics.split(",") if args.metrics else None
    if metrics is None:
        _, _, payload = load_checkpoint(args.checkpoint)
        metrics = payload["config"].get("eval", {}).get("metrics", ["kl"])
    bad = [m for m in metrics if m not in METRICS]
    if bad:
        raise ConfigError(f"unknown metrics {bad}; choose from {METRICS}")
    report = evaluate_checkpoint(args.checkpoint, metrics, args.n, args.seed, args.reference,
                                 args.trace_n_mc)
    _write_json(report, args.out)
    return EXIT_OK


def cmd_theory(args):
    name = args.check
    if name == "lower-bound":
        rep = theory.check_lower_bound(args.mu, args.sigma, args.grid)
        rep["no_tempering"] = theory.check_constant_without_tempering(args.mu, args.sigma)
    elif name == "refresh-identity":
        rep = theory.check_refresh_identity(args.seed, args.d)
    elif name == "hull-curve":
        M_list = [int(m) for m in args.M.split(",")]
        rep = theory.check_hull_curve(args.d, args.N, M_list, args.trials, args.seed)
    else:
        raise ConfigError(f"unknown check {name!r}")
    rep["manifest"] = manifest(rep["config"], {"theory": args.seed}, "theory")
    _write_json(rep, args.out)
    return EXIT_OK if rep["status"] == "pass" else EXIT_CHECK_FAILED


def _write_json(obj, path):
    text = json.dumps(obj, indent=1, default=float)
    if path:
        with open(path, "w") as fh:
            fh.write(text + "\n")
    else:
        print(text)


def build_parser():
    p = argparse.ArgumentParser(prog="shflow", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a seeded synthetic dataset")
    g.add_argument("--kind", choices=MODEL_KINDS, default="gaussian")
    g.add_argument("--N", type=int, default=10000)
    g.add_argument("--d", type=int, default=10, help="latent dim (gaussian) or feature count")
    g.add_argument("--c", type=float, default=100.0)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--reference-out", help="also write a posterior reference summary (JSON)")
    g.add_argument("--reference-samples", type=int, default=20000)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a flow from a YAML run config")
    t.add_argument("--config", required=True)
    t.add_argument("--out", help="output directory (overrides config.output)")
    t.add_argument("--replicates", type=int, default=1)
    t.add_argument("--workers", type=int, default=1)
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="draw samples from a trained flow")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--n", type=int, default=100)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sample)

    e = sub.add_parser("eval", help="metrics and ELBO trace for a trained flow")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--reference", help="JSON with 'mean' and 'covariance'")
    e.add_argument("--metrics", help=f"comma-separated subset of {','.join(METRICS)}")
    e.add_argument("--n", type=int, default=100)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--trace-n-mc", type=int, default=100)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    th = sub.add_parser("theory", help="closed-form Gaussian checks")
    th.add_argument("check", choices=["lower-bound", "refresh-identity", "hull-curve"])
    th.add_argument("--mu", type=float, default=3.0)
    th.add_argument("--sigma", type=float, default=0.5)
    th.add_argument("--grid", type=int, default=50)
    th.add_argument("--d", type=int, default=2)
    th.add_argument("--N", type=int, default=1024)
    th.add_argument("--M", default="5,10,20,40,60")
    th.add_argument("--trials", type=int, default=2000)
    th.add_argument("--seed", type=int, default=0)
    th.add_argument("--out")
    th.set_defaults(func=cmd_theory)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalDivergence, TrainingAborted, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValueError as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
