"""Initialisation, warm start and stochastic optimisation of flow parameters."""

import csv
import hashlib
import json
import math
import time
import warnings
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import _kernels
from .elbo import exact_elbo
from .errors import ConfigError, NumericalDivergence, TrainingAborted
from .flow import ConditionalRefresh, FlowParams, _coreset_view
from .grad import elbo_gradient
from .model import Coreset

VARIANCE_FLOOR = 1e-8
CHECKPOINT_FORMAT = "shflow-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    n_iters: int = 1000
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    adam_betas: tuple = (0.9, 0.999)
    adam_epsilon: float = 1e-8
    S: int = 100
    eval_every: int = 250
    rng_seed: int = 0
    initial_step_size: object = 0.01  # scalar or length-d list
    step_size_overrides: dict = field(default_factory=dict)  # {dim index: step size}
    n_blocks: int = 5
    leapfrogs_per_block: int = 10
    refresh: str = "marginal"  # or "conditional"
    warm_start_batch: int = 100
    n_draws: int = 1
    eval_n_mc: int = 100
    train_weights: bool = True
    max_consecutive_divergent: int = 50
    smoothing_window: int = 10

    def __post_init__(self):
        self.adam_betas = tuple(float(b) for b in self.adam_betas)
        self.step_size_overrides = {int(k): float(v) for k, v in dict(self.step_size_overrides).items()}
        errs = []
        if self.n_iters < 0:
            errs.append("n_iters must be nonnegative")
        if self.optimizer not in ("adam", "sgd"):
            errs.append(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")
        if not self.learning_rate > 0:
            errs.append("learning_rate must be positive")
        if len(self.adam_betas) != 2 or not all(0 <= b < 1 for b in self.adam_betas):
            errs.append("adam_betas must be two values in [0, 1)")
        if not self.adam_epsilon > 0:
            errs.append("adam_epsilon must be positive")
        if self.S < 1:
            errs.append("S must be at least 1")
        if self.eval_every < 1:
            errs.append("eval_every must be at least 1")
        if self.n_blocks < 1:
            errs.append("n_blocks must be at least 1")
        if self.leapfrogs_per_block < 0:
            errs.append("leapfrogs_per_block must be nonnegative")
        if self.refresh not in ("marginal", "conditional"):
            errs.append("refresh must be 'marginal' or 'conditional'")
        if self.warm_start_batch < 2:
            errs.append("warm_start_batch must be at least 2")
        if self.n_draws < 1 or self.eval_n_mc < 2:
            errs.append("n_draws must be >= 1 and eval_n_mc >= 2")
        if np.any(np.asarray(self.initial_step_size, dtype=float) <= 0):
            errs.append("initial step sizes must be positive")
        if errs:
            raise ConfigError("; ".join(errs))

    def to_dict(self):
        d = asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        d["initial_step_size"] = np.asarray(self.initial_step_size, dtype=float).tolist()
        d["step_size_overrides"] = {str(k): v for k, v in self.step_size_overrides.items()}
        return d


# --------------------------------------------------------------------------
# parameter transforms
# --------------------------------------------------------------------------

def to_constrained(params):
    return {
        "weights": params.weights,
        "step_sizes": params.step_sizes,
        "shifts": params.shifts.copy(),
        "scales": np.exp(params.log_scales),
    }


def from_constrained(values, leapfrogs_per_block, conditional=None):
    return FlowParams(np.log(values["weights"]), np.log(values["step_sizes"]),
                      np.array(values["shifts"], dtype=float), np.log(values["scales"]),
                      leapfrogs_per_block, conditional)


FIELDS = ("log_weights", "log_step_sizes", "shifts", "log_scales")


def pack(params):
    return np.concatenate([getattr(params, f).ravel() for f in FIELDS])


def unpack(vec, like):
    out = like.copy()
    pos = 0
    for f in FIELDS:
        a = getattr(out, f)
        a[...] = np.asarray(vec[pos:pos + a.size]).reshape(a.shape)
        pos += a.size
    return out


def pack_gradient(grad):
    return np.concatenate([grad.d_log_weights.ravel(), grad.d_log_step_sizes.ravel(),
                           grad.d_shifts.ravel(), grad.d_log_scales.ravel()])


def trainable_mask(params, train_weights=True):
    mask = np.ones(pack(params).size, dtype=bool)
    if not train_weights:
        mask[:params.log_weights.size] = False
    if params.conditional is not None:
        R, d = params.shifts.shape
        off = params.log_weights.size + params.log_step_sizes.size
        for r, cond in enumerate(params.conditional):
            if cond is not None:
                mask[off + r * d: off + (r + 1) * d] = False
                mask[off + R * d + r * d: off + R * d + (r + 1) * d] = False
    return mask


# --------------------------------------------------------------------------
# initialisation
# --------------------------------------------------------------------------

def initial_step_sizes(config, dim):
    eps = np.broadcast_to(np.asarray(config.initial_step_size, dtype=float), (dim,)).copy()
    for i, v in config.step_size_overrides.items():
        if not -dim <= i < dim:
            raise ConfigError(f"step-size override index {i} out of range for d={dim}")
        eps[i] = v
    return eps


def initial_params(model, coreset, config):
    return FlowParams.initial(coreset, model.dim, config.n_blocks, config.leapfrogs_per_block,
                              initial_step_sizes(config, model.dim))


def warm_start(model, params_init, coreset, q, batch=100, rng_seed=0, refresh="marginal"):
    """Set each refreshment from the momenta of a sample batch pushed up to it.

    Block r is initialised after pushing the batch through blocks 1..r-1
    (with their refreshments already set) and the leapfrogs of block r.
    Marginal refreshments standardise the momentum coordinate-wise;
    ``refresh="conditional"`` instead fits a joint-Gaussian conditional map.
    """
    if batch < 2:
        raise ConfigError("warm-start batch must be at least 2")
    params = params_init.copy()
    idx, w = _coreset_view(params, coreset)
    rng = np.random.default_rng(rng_seed)
    theta, rho = q.sample(batch, rng)
    d = params.dim
    zero = np.zeros((1, d))
    conds = [None] * params.n_blocks
    floored = False
    for r in range(params.n_blocks):
        theta, rho, _ = _kernels.run_forward(
            model, idx, w, params.step_sizes, zero, zero, params.leapfrogs_per_block,
            theta, rho)
        if refresh == "conditional":
            conds[r] = ConditionalRefresh.from_samples(theta, rho)
            rho = conds[r].apply(theta, rho)
            continue
        mean = rho.mean(axis=0)
        var = rho.var(axis=0, ddof=1)
        if np.any(var < VARIANCE_FLOOR):
            floored = True
            var = np.maximum(var, VARIANCE_FLOOR)
        params.shifts[r] = mean
        params.log_scales[r] = -0.5 * np.log(var)
        rho = np.exp(params.log_scales[r]) * (rho - mean)
    if floored:
        warnings.warn("degenerate warm-start batch: momentum variance floored at "
                      f"{VARIANCE_FLOOR:g}", RuntimeWarning, stacklevel=2)
    if refresh == "conditional":
        params.conditional = conds
    return params


# --------------------------------------------------------------------------
# optimisers
# --------------------------------------------------------------------------

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros(n), np.zeros(n), 0)


def adam_step(state, grad, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
    """Bias-corrected ADAM update in the ascent direction; returns (state', delta)."""
    b1, b2 = betas
    t = state.t + 1
    m = b1 * state.m + (1 - b1) * grad
    v = b2 * state.v + (1 - b2) * grad * grad
    m_hat = m / (1 - b1 ** t)
    v_hat = v / (1 - b2 ** t)
    return AdamState(m, v, t), lr * m_hat / (np.sqrt(v_hat) + eps)


def sgd_step(state, grad, lr):
    return state, lr * grad


@dataclass
class TrainTrace:
    iterations: list = field(default_factory=list)
    elbo_mean: list = field(default_factory=list)
    elbo_stderr: list = field(default_factory=list)
    wall_time: list = field(default_factory=list)
    snapshot_id: list = field(default_factory=list)
    skipped_iterations: list = field(default_factory=list)
    best_snapshot: Optional[int] = None

    @property
    def n_skipped(self):
        return len(self.skipped_iterations)

    def record(self, it, mean, se, wall, snap):
        if self.iterations and it <= self.iterations[-1]:
            raise ValueError("trace iterations must increase")
        self.iterations.append(int(it))
        self.elbo_mean.append(float(mean))
        self.elbo_stderr.append(float(se))
        self.wall_time.append(float(wall))
        self.snapshot_id.append(int(snap))

    def smoothed(self, window):
        vals = np.asarray(self.elbo_mean, dtype=float)
        vals = np.where(np.isfinite(vals), vals, -np.inf)
        out = np.empty_like(vals)
        for i in range(len(vals)):
            out[i] = vals[max(0, i - window + 1): i + 1].mean()
        return out

    def rows(self):
        skipped = np.asarray(self.skipped_iterations, dtype=int)
        for it, m, s, w in zip(self.iterations, self.elbo_mean, self.elbo_stderr, self.wall_time):
            yield {"iteration": it, "elbo": m, "stderr": s, "wall_time": w,
                   "skipped": int(np.sum(skipped <= it))}

    def to_csv(self, path, manifest=None):
        with open(path, "w", newline="") as fh:
            for line in manifest_lines(manifest):
                fh.write(line + "\n")
            writer = csv.DictWriter(fh, fieldnames=["iteration", "elbo", "stderr", "wall_time",
                                                    "skipped"])
            writer.writeheader()
            for row in self.rows():
                writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def manifest_lines(manifest):
    if not manifest:
        return []
    return ["# " + json.dumps(manifest, sort_keys=True)]


def optimize(x0, value_and_grad, evaluate, config, mask=None):
    """Generic ascent loop shared by the sparse flow and the tempered baseline.

    ``value_and_grad(x, it)`` returns (objective, gradient) or raises
    NumericalDivergence, in which case the step is skipped.  ``evaluate(x)``
    returns (mean, stderr).  Returns (best x, final x, trace, snapshots).
    """
    x = np.array(x0, dtype=float)
    mask = np.ones(x.size, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    opt_state = AdamState.zeros(int(mask.sum()))
    trace = TrainTrace()
    snapshots = []
    start = time.perf_counter()

    def do_eval(it):
        try:
            mean, se = evaluate(x)
        except NumericalDivergence:
            mean, se = -math.inf, math.inf
        snapshots.append(x.copy())
        trace.record(it, mean, se, time.perf_counter() - start, len(snapshots) - 1)

    do_eval(0)
    consecutive = 0
    for it in range(1, config.n_iters + 1):
        try:
            _, g = value_and_grad(x, it)
            if not np.all(np.isfinite(g)):
                raise NumericalDivergence("non-finite gradient")
        except NumericalDivergence as exc:
            trace.skipped_iterations.append(it)
            consecutive += 1
            if consecutive > config.max_consecutive_divergent:
                raise TrainingAborted(
                    f"{consecutive} consecutive divergent passes (last at iteration {it}: {exc})")
            continue
        consecutive = 0
        if config.optimizer == "adam":
            opt_state, delta = adam_step(opt_state, g[mask], config.learning_rate,
                                         config.adam_betas, config.adam_epsilon)
        else:
            opt_state, delta = sgd_step(opt_state, g[mask], config.learning_rate)
        x[mask] += delta
        if it % config.eval_every == 0 or it == config.n_iters:
            do_eval(it)
    best = int(np.argmax(trace.smoothed(config.smoothing_window)))
    trace.best_snapshot = trace.snapshot_id[best]
    return snapshots[trace.best_snapshot], x, trace, snapshots


def iteration_seed(seed, it):
    return [int(seed), int(it)]


def eval_seed(seed):
    return [int(seed), 0, 1]


def fit(model, coreset, q, config, params_init=None, backend=None):
    """Warm-start then maximise the ELBO; returns (best params, trace)."""
    if params_init is None:
        params = initial_params(model, coreset, config)
        params = warm_start(model, params, coreset, q, config.warm_start_batch,
                            [config.rng_seed, 0, 2], config.refresh)
    else:
        params = params_init.copy()
    if config.n_iters == 0:
        return params, TrainTrace()
    mask = trainable_mask(params, config.train_weights)

    def value_and_grad(x, it):
        p = unpack(x, params)
        elbo, g = elbo_gradient(model, p, coreset, q, config.S, iteration_seed(config.rng_seed, it),
                                n_draws=config.n_draws, backend=backend)
        return elbo, pack_gradient(g)

    def evaluate(x):
        return exact_elbo(model, unpack(x, params), coreset, q, config.eval_n_mc,
                          eval_seed(config.rng_seed), backend=backend)

    best, _, trace, _ = optimize(pack(params), value_and_grad, evaluate, config, mask)
    return unpack(best, params), trace


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

def config_hash(config_dict):
    blob = json.dumps(config_dict, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _cond_to_dict(c):
    if c is None:
        return None
    return {k: np.asarray(getattr(c, k)).tolist()
            for k in ("mean_theta", "mean_rho", "gain", "whiten", "unwhiten")} | {
        "log_jacobian": c.log_jacobian}


def _cond_from_dict(d):
    if d is None:
        return None
    c = ConditionalRefresh.__new__(ConditionalRefresh)
    for k in ("mean_theta", "mean_rho", "gain", "whiten", "unwhiten"):
        setattr(c, k, np.asarray(d[k], dtype=float))
    c.log_jacobian = float(d["log_jacobian"])
    return c


def params_to_dict(params):
    out = {f: getattr(params, f).tolist() for f in FIELDS}
    out["leapfrogs_per_block"] = params.leapfrogs_per_block
    out["conditional"] = (None if params.conditional is None
                          else [_cond_to_dict(c) for c in params.conditional])
    return out


def params_from_dict(d):
    cond = d.get("conditional")
    return FlowParams(np.asarray(d["log_weights"], dtype=float),
                      np.asarray(d["log_step_sizes"], dtype=float),
                      np.asarray(d["shifts"], dtype=float).reshape(-1, len(d["log_step_sizes"])),
                      np.asarray(d["log_scales"], dtype=float).reshape(-1, len(d["log_step_sizes"])),
                      int(d["leapfrogs_per_block"]),
                      None if cond is None else [_cond_from_dict(c) for c in cond])


def save_checkpoint(path, params, coreset, config, extra=None):
    """JSON checkpoint; floats are written with round-trip precision."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config_hash": config_hash(config),
        "config": config,
        "coreset": {"indices": coreset.indices.tolist(), "weights": coreset.weights.tolist()},
        "params": params_to_dict(params),
    }
    if extra:
        payload["extra"] = extra
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1)


def load_checkpoint(path):
    with open(path) as fh:
        payload = json.load(fh)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"{path} is not a checkpoint file")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {payload.get('version')}")
    cs = payload["coreset"]
    coreset = Coreset(np.asarray(cs["indices"], dtype=int), np.asarray(cs["weights"], dtype=float))
    return params_from_dict(payload["params"]), coreset, payload
