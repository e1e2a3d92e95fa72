"""Objective assembly (expected transport cost + KL) and the stochastic training loop."""
from __future__ import annotations

import csv
import logging
import math
import time
import warnings
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import diffcore as dc
from . import variational as vi
from .data import SnapshotDataset, TaskSplit
from .model import (WHITEN_MODES, DecoderParams, Model, ModelConfig, build_model, decode, init_from_data,
                    latent_batch, sample_phi)
from .transport import DEFAULT_BLUR, DEFAULT_SCALING, PointCloud, sinkhorn_divergence

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    """Non-finite loss or parameters during optimization."""

    def __init__(self, iteration: int, parts: dict | None, detail: str = ""):
        self.iteration = iteration
        self.parts = parts or {}
        msg = f"training diverged at iteration {iteration}"
        if self.parts:
            msg += " (" + ", ".join(f"{k}={v:.6g}" for k, v in self.parts.items()) + ")"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


@dataclass
class TrainConfig:
    max_iterations: int = 10_000
    learning_rate: float = 1e-3
    batch_per_time: int = 256
    lr_decay_factor: float = 0.5
    lr_patience_iterations: int = 200
    validation_fraction: float = 0.05
    validation_times: int = 3
    early_stop_patience: int = 1000     # iterations without a new best validation loss
    blur: float = DEFAULT_BLUR
    scaling: float = DEFAULT_SCALING
    sinkhorn_tol: float = 1e-6
    sinkhorn_max_iter: int = 100
    sinkhorn_unroll: bool = False       # record every Sinkhorn iteration instead of the envelope gradient
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    log_every: int = 100
    val_every: int = 10                 # validation cadence; patience counters stay in iterations
    data_init: bool = True              # start from principal axes and per-time moments
    init_whiten: str = "per-time"       # decoder row scale of the data start, see init_from_data

    def __post_init__(self):
        if self.max_iterations < 0:
            raise ValueError("max_iterations must be >= 0")
        for name in ("learning_rate", "batch_per_time", "lr_patience_iterations", "blur",
                     "validation_times", "early_stop_patience", "sinkhorn_max_iter",
                     "val_every"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.lr_decay_factor < 1:
            raise ValueError("lr_decay_factor must lie in (0, 1)")
        if not 0 < self.validation_fraction < 1:
            raise ValueError("validation_fraction must lie in (0, 1)")
        if not 0 < self.scaling < 1:
            raise ValueError("scaling must lie in (0, 1)")
        if self.init_whiten not in WHITEN_MODES:
            raise ValueError(f"init_whiten must be one of {WHITEN_MODES}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Batch:
    """Observed cells at one time: expression rows, category codes (-1 = none)
    and row indices into the per-cell time parameters (None without cell time)."""

    X: np.ndarray
    codes: np.ndarray | None = None
    cell_ids: np.ndarray | None = None


@dataclass
class LossParts:
    transport: float
    kl: float
    per_time: dict

    @property
    def total(self) -> float:
        return self.transport + self.kl


# -- objective ---------------------------------------------------------------

def _sinkhorn_opts(tc: TrainConfig) -> dict:
    return dict(blur=tc.blur, scaling=tc.scaling, tol=tc.sinkhorn_tol, max_iter=tc.sinkhorn_max_iter,
                unroll=tc.sinkhorn_unroll)


def generate_for_batch(model: Model, phi, t: float, batch: Batch, rng: np.random.Generator,
                       state: vi.VariationalState | None = None):
    """Decoded cells paired one-to-one with the observed batch rows."""
    state = model.state if state is None else state
    cfg = model.config
    n = batch.X.shape[0]
    xi = rng.standard_normal((n, cfg.L))
    if cfg.cell_time and batch.cell_ids is not None:
        q = state.tau
        mu = dc.take(q.mean, batch.cell_ids)
        lsd = dc.take(q.log_sd, batch.cell_ids)
        s = vi.sample_gaussian(vi.GaussianDiag(mu, lsd), rng.standard_normal(n))
    else:
        s = np.full(n, float(model.scaler(t)))
    cats = None
    if model.cat is not None:
        codes = np.full(n, -1) if batch.codes is None else np.asarray(batch.codes)
        cats = codes.copy()
        missing = cats < 0
        # unlabeled cells are paired with a uniform draw over categories
        cats[missing] = rng.integers(0, model.cat.C, size=int(missing.sum()))
    return decode(model.decoder, latent_batch(model, phi, s, xi, cats))


def compute_loss(model: Model, batches: dict[float, Batch], tc: TrainConfig,
                 rng: np.random.Generator, tau_prior_means=None):
    """One Monte-Carlo estimate of sum_t S(observed_t, generated_t) + KL.

    ``model`` may hold tape Vars, in which case the returned loss is a Var.
    """
    for t, b in batches.items():
        if b.X.shape[0] == 0:
            raise ValueError(f"empty minibatch at time {t}")
    phi = sample_phi(model.state, rng)
    transport = 0.0
    per_time = {}
    for t in sorted(batches):
        gen = generate_for_batch(model, phi, t, batches[t], rng)
        r = sinkhorn_divergence(PointCloud(batches[t].X), PointCloud(gen), **_sinkhorn_opts(tc))
        per_time[t] = r.cost
        transport = dc.add(transport, r.loss)
    cfg = model.config
    kl = vi.kl_total(model.state, model.basis_f, model.basis_s if model.state.A_s is not None else None,
                     phi.hypers, model.cat, model.cat_s, tau_prior_means, cfg.delta)
    loss = dc.add(transport, kl)
    parts = LossParts(float(dc.value(transport)), float(dc.value(kl)), per_time)
    return loss, parts


VALIDATION_SEED_OFFSET = 7919


def validation_loss(model: Model, val_batches: dict[float, Batch], tc: TrainConfig) -> float:
    """Transport-only loss on held-out cells with a fixed Monte-Carlo draw."""
    rng = np.random.default_rng(tc.seed + VALIDATION_SEED_OFFSET)
    phi = sample_phi(model.state, rng)
    total = 0.0
    for t in sorted(val_batches):
        b = Batch(val_batches[t].X, val_batches[t].codes, None)
        gen = generate_for_batch(model, phi, t, b, rng)
        total += sinkhorn_divergence(PointCloud(b.X), PointCloud(gen), **_sinkhorn_opts(tc)).cost
    return total


# -- optimizer ---------------------------------------------------------------

@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_update(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], opt: AdamState) -> dict:
    """Bias-corrected Adam step; returns new parameter arrays."""
    opt.step += 1
    b1, b2 = opt.beta1, opt.beta2
    c1 = 1.0 - b1**opt.step
    c2 = 1.0 - b2**opt.step
    out = {}
    for k, p in params.items():
        g = grads[k]
        m = opt.m.get(k, np.zeros_like(p))
        v = opt.v.get(k, np.zeros_like(p))
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        opt.m[k], opt.v[k] = m, v
        out[k] = p - opt.lr * (m / c1) / (np.sqrt(v / c2) + opt.eps)
    return out


def model_arrays(model: Model) -> dict[str, np.ndarray]:
    return {**model.state.arrays(), **model.decoder.arrays()}


def model_from_arrays(template: Model, arrs: dict[str, np.ndarray]) -> Model:
    state = vi.VariationalState.from_arrays({k: v for k, v in arrs.items() if not k.startswith("decoder.")})
    return Model(template.config, template.scaler, state, DecoderParams.from_arrays(arrs))


def train_step(model: Model, opt: AdamState, batches: dict[float, Batch], tc: TrainConfig,
               rng: np.random.Generator, tau_prior_means=None, iteration: int = 0,
               frozen: set[str] | None = None) -> tuple[Model, LossParts]:
    """Forward, backward and one Adam update of every leaf not listed in ``frozen``."""
    tape = dc.Tape()
    params = model_arrays(model)
    leaves = {k: tape.param(v, name=k) for k, v in params.items()}
    taped = model_from_arrays(model, leaves)
    try:
        loss, parts = compute_loss(taped, batches, tc, rng, tau_prior_means)
    except dc.NonFiniteError as exc:
        raise DivergenceError(iteration, None, str(exc)) from exc
    if not math.isfinite(parts.total):
        raise DivergenceError(iteration, {"transport": parts.transport, "kl": parts.kl})
    grads = tape.backward(loss, list(leaves.values()))
    frozen = frozen or set()
    active = {k: v for k, v in params.items() if k not in frozen}
    new = adam_update(active, {k: grads[leaves[k]] for k in active}, opt)
    for k, v in new.items():
        if not np.all(np.isfinite(v)):
            raise DivergenceError(iteration, {"transport": parts.transport, "kl": parts.kl},
                                  f"parameter {k} became non-finite")
    params.update(new)
    return model_from_arrays(model, params), parts


# -- data plumbing -----------------------------------------------------------

class _BatchSampler:
    """Without-replacement draws from one time's pool, reshuffled every epoch."""

    def __init__(self, pool: np.ndarray, batch: int, rng: np.random.Generator):
        self.pool = pool
        self.batch = min(batch, pool.size)
        self.rng = rng
        self.order = rng.permutation(pool)
        self.pos = 0

    def next(self) -> np.ndarray:
        if self.pos + self.batch > self.order.size:
            self.order = self.rng.permutation(self.pool)
            self.pos = 0
        out = self.order[self.pos:self.pos + self.batch]
        self.pos += self.batch
        return out


@dataclass
class TrainingData:
    """Training pools, validation batches and per-cell time bookkeeping."""

    times: list[float]
    pools: dict[float, np.ndarray]             # row indices available for training
    val_rows: dict[float, np.ndarray]
    X: dict[float, np.ndarray]
    codes: dict[float, np.ndarray]
    cell_offset: dict[float, int]              # start of each time's rows in the tau vector
    tau_raw_means: np.ndarray

    def batch(self, t: float, rows: np.ndarray, with_ids: bool) -> Batch:
        ids = self.cell_offset[t] + rows if with_ids else None
        return Batch(self.X[t][rows], self.codes[t][rows], ids)

    def validation_batches(self) -> dict[float, Batch]:
        return {t: Batch(self.X[t][r], self.codes[t][r], None) for t, r in self.val_rows.items()}


def prepare_data(ds: SnapshotDataset, split: TaskSplit, tc: TrainConfig,
                 categories: list[str] | None = None) -> TrainingData:
    train = sorted(split.train_times)
    if len(train) < 2:
        raise ValueError("need at least 2 training time points")
    rng = np.random.default_rng(tc.seed)
    if len(train) < tc.validation_times:
        warnings.warn(f"only {len(train)} training times; validation cells drawn from all of them",
                      stacklevel=2)
        val_times = list(train)
    else:
        val_times = sorted(float(t) for t in rng.choice(train, size=tc.validation_times, replace=False))
    cats = ds.categories() if categories is None else categories
    X, codes, pools, val_rows, offset, tau = {}, {}, {}, {}, {}, []
    start = 0
    for t in train:
        k = ds.index_of(t)
        n = ds.matrices[k].shape[0]
        X[t] = ds.matrices[k]
        codes[t] = ds.label_codes(k, cats)
        rows = np.arange(n)
        if t in val_times:
            n_val = max(1, int(round(tc.validation_fraction * n)))
            if n_val >= n:
                raise ValueError(f"time {t:g} has too few cells to hold out validation rows")
            held = np.sort(rng.choice(n, size=n_val, replace=False))
            val_rows[t] = held
            rows = np.setdiff1d(rows, held)
        pools[t] = rows
        offset[t] = start
        start += n
        tau.append(np.full(n, t))
    return TrainingData(list(train), pools, val_rows, X, codes, offset, np.concatenate(tau))


# -- fit ---------------------------------------------------------------------

@dataclass
class TrainReport:
    iterations: list[int] = field(default_factory=list)
    transport: list[float] = field(default_factory=list)
    kl: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    best_iteration: int = 0          # 0 means the initialization
    best_val_loss: float = math.inf
    wall_clock: float = 0.0
    stopped_early: bool = False

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iteration", "transport", "kl", "lr", "val_loss"])
            for row in zip(self.iterations, self.transport, self.kl, self.lr, self.val_loss):
                w.writerow([row[0]] + [repr(float(x)) for x in row[1:]])


@dataclass
class FitResult:
    model: Model
    report: TrainReport
    data: TrainingData


def fit(ds: SnapshotDataset, split: TaskSplit, model_config: ModelConfig, tc: TrainConfig,
        init: Model | None = None, progress=None) -> FitResult:
    """Train on ``split.train_times`` and return the lowest-validation-loss checkpoint.

    The learning rate is multiplied by ``lr_decay_factor`` whenever the
    validation loss has not improved for ``lr_patience_iterations``;
    training stops after ``early_stop_patience`` iterations without a new best.
    """
    if model_config.G != ds.G:
        raise ValueError(f"model expects G={model_config.G}, dataset has {ds.G} genes")
    cats = ds.categories()
    if model_config.C is not None and cats and len(cats) != model_config.C:
        raise ValueError(f"dataset has {len(cats)} categories, model expects C={model_config.C}")
    data = prepare_data(ds, split, tc, cats)
    if init is not None:
        model = init
    else:
        model = build_model(model_config, ds.times, seed=tc.seed,
                            cell_time_means=data.tau_raw_means)
        if tc.data_init:
            model = init_from_data(model, {t: data.X[t][data.pools[t]] for t in data.times},
                                   {t: data.codes[t][data.pools[t]] for t in data.times},
                                   whiten=tc.init_whiten)
    tau_prior = model.scaler(data.tau_raw_means) if model_config.cell_time else None
    report = TrainReport()
    start = time.perf_counter()
    if tc.max_iterations == 0:
        report.wall_clock = time.perf_counter() - start
        return FitResult(model, report, data)

    rng = np.random.default_rng(tc.seed + 1)
    samplers = {t: _BatchSampler(data.pools[t], tc.batch_per_time, rng) for t in data.times}
    val_batches = data.validation_batches()
    opt = AdamState(tc.learning_rate, tc.adam_beta1, tc.adam_beta2, tc.adam_eps)
    best_model = model
    best = validation_loss(model, val_batches, tc)
    report.best_val_loss = best
    plateau_best, since_plateau = best, 0
    for it in range(1, tc.max_iterations + 1):
        batches = {t: data.batch(t, samplers[t].next(), model_config.cell_time) for t in data.times}
        model, parts = train_step(model, opt, batches, tc, rng, tau_prior, iteration=it)
        checked = it % tc.val_every == 0 or it == tc.max_iterations
        val = validation_loss(model, val_batches, tc) if checked else math.nan
        if checked and not math.isfinite(val):
            raise DivergenceError(it, {"transport": parts.transport, "kl": parts.kl},
                                  "validation loss is not finite")
        report.iterations.append(it)
        report.transport.append(parts.transport)
        report.kl.append(parts.kl)
        report.lr.append(opt.lr)
        report.val_loss.append(val)
        if checked:
            if val < best:
                best, best_model = val, model
                report.best_iteration, report.best_val_loss = it, val
            if val < plateau_best:
                plateau_best, since_plateau = val, 0
            else:
                since_plateau += tc.val_every
                if since_plateau >= tc.lr_patience_iterations:
                    opt.lr *= tc.lr_decay_factor
                    since_plateau = 0
        if progress is not None:
            progress(it, parts, val, opt.lr)
        if tc.log_every and it % tc.log_every == 0:
            log.info("iter %d transport %.5g kl %.5g val %.5g lr %.3g",
                     it, parts.transport, parts.kl, val, opt.lr)
        if it - report.best_iteration >= tc.early_stop_patience:
            report.stopped_early = True
            break
    report.wall_clock = time.perf_counter() - start
    return FitResult(best_model, report, data)
