"""Generative process: heteroscedastic latent GP trajectories pushed through a
feed-forward decoder, with optional per-cell times and categorical conditioning."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import diffcore as dc
from . import hsgp
from . import variational as vi
from .transport import PointCloud

NOISE_MODES = ("learned", "fixed")


@dataclass
class ModelConfig:
    L: int = 32
    G: int = 1
    M: int = 8
    M_noise: int | None = None          # defaults to M
    boundary_factor: float = 2.0
    decoder_hidden: tuple[int, ...] = ()
    C: int | None = None                # number of categories; None disables conditioning
    category_kernel: list | None = None  # C x C; None means the identity
    condition_noise: bool = False       # also condition the noise GP on the category
    cell_time: bool = False
    delta: float = 0.1
    noise_mode: str = "learned"         # "fixed" holds the latent sd at fixed_noise_sd
    fixed_noise_sd: float = 0.1

    def __post_init__(self):
        self.decoder_hidden = tuple(int(h) for h in self.decoder_hidden)
        if self.L < 1 or self.M < 1 or self.G < 1:
            raise ValueError("L, M and G must be >= 1")
        if self.M_noise is not None and self.M_noise < 1:
            raise ValueError("M_noise must be >= 1")
        if any(h < 1 for h in self.decoder_hidden):
            raise ValueError("decoder widths must be positive")
        if self.cell_time and not self.delta > 0:
            raise ValueError("delta must be positive when cell time is enabled")
        if self.noise_mode not in NOISE_MODES:
            raise ValueError(f"noise_mode must be one of {NOISE_MODES}")
        if self.noise_mode == "fixed" and not self.fixed_noise_sd > 0:
            raise ValueError("fixed_noise_sd must be positive")
        if self.C is not None:
            if self.C < 1:
                raise ValueError("C must be >= 1")
            if self.category_kernel is not None:
                K = np.asarray(self.category_kernel, dtype=np.float64)
                if K.shape != (self.C, self.C):
                    raise ValueError(f"category_kernel must be {self.C}x{self.C}")

    @property
    def m_noise(self) -> int:
        return self.M if self.M_noise is None else self.M_noise

    def to_dict(self) -> dict:
        d = asdict(self)
        d["decoder_hidden"] = list(self.decoder_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class TimeScaler:
    """t -> (t - shift) / scale; built so the reference times span [-1, 1] in max-abs."""

    shift: float
    scale: float

    @classmethod
    def from_times(cls, times) -> "TimeScaler":
        t = np.asarray(times, dtype=np.float64)
        shift = float(t.mean())
        scale = float(np.max(np.abs(t - shift)))
        return cls(shift, scale if scale > 0 else 1.0)

    def __call__(self, t):
        return (np.asarray(t, dtype=np.float64) - self.shift) / self.scale

    def inverse(self, s):
        return np.asarray(s, dtype=np.float64) * self.scale + self.shift


# -- decoder -----------------------------------------------------------------

@dataclass
class DecoderParams:
    """Affine layers; hidden layers use ReLU, the output layer is linear."""

    weights: list
    biases: list

    def named(self):
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            yield f"decoder.W{i}", W
            yield f"decoder.b{i}", b

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: np.array(dc.value(v)) for k, v in self.named()}

    @classmethod
    def from_arrays(cls, arrs: dict) -> "DecoderParams":
        n = sum(1 for k in arrs if k.startswith("decoder.W"))
        return cls([arrs[f"decoder.W{i}"] for i in range(n)], [arrs[f"decoder.b{i}"] for i in range(n)])

    def on_tape(self, tape: dc.Tape) -> "DecoderParams":
        return DecoderParams.from_arrays({k: tape.param(v, name=k) for k, v in self.arrays().items()})

    @property
    def in_dim(self) -> int:
        return dc.value(self.weights[0]).shape[0]

    @property
    def out_dim(self) -> int:
        return dc.value(self.weights[-1]).shape[1]


def init_decoder(L: int, hidden, G: int, rng: np.random.Generator) -> DecoderParams:
    """Glorot-uniform weights, zero biases."""
    widths = [L, *hidden, G]
    Ws, bs = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        lim = math.sqrt(6.0 / (fan_in + fan_out))
        Ws.append(rng.uniform(-lim, lim, size=(fan_in, fan_out)))
        bs.append(np.zeros(fan_out))
    return DecoderParams(Ws, bs)


def decode(theta: DecoderParams, Z):
    zv = dc.value(Z)
    if zv.ndim != 2 or zv.shape[1] != theta.in_dim:
        raise dc.ShapeError(f"decoder expects (n, {theta.in_dim}) input, got {zv.shape}")
    h = Z
    last = len(theta.weights) - 1
    for i, (W, b) in enumerate(zip(theta.weights, theta.biases)):
        h = dc.add(dc.matmul(h, W), b)
        if i < last:
            h = dc.relu(h)
    return h


# -- model bundle ------------------------------------------------------------

@dataclass
class Model:
    """Configuration, time standardization, variational state and decoder."""

    config: ModelConfig
    scaler: TimeScaler
    state: vi.VariationalState
    decoder: DecoderParams
    basis_f: hsgp.HilbertBasis = field(init=False)
    basis_s: hsgp.HilbertBasis = field(init=False)
    cat: hsgp.CategoricalBasis | None = field(init=False)

    def __post_init__(self):
        cfg = self.config
        # the scaler maps the reference times into [-1, 1], so J = boundary_factor
        self.basis_f = hsgp.basis_with_halfwidth(cfg.M, cfg.boundary_factor)
        self.basis_s = hsgp.basis_with_halfwidth(cfg.m_noise, cfg.boundary_factor)
        self.cat = None
        if cfg.C is not None:
            K = np.eye(cfg.C) if cfg.category_kernel is None else np.asarray(cfg.category_kernel)
            self.cat = hsgp.categorical_decompose(K)

    @property
    def cat_s(self) -> hsgp.CategoricalBasis | None:
        return self.cat if self.config.condition_noise else None

    @property
    def P_f(self) -> int:
        return feature_dims(self.config)[0]

    @property
    def J(self) -> float:
        return self.basis_f.J

    def valid_time_range(self) -> tuple[float, float]:
        lo, hi = self.scaler.inverse([-self.J, self.J])
        return float(lo), float(hi)

    def check_times(self, t) -> np.ndarray:
        """Standardize and reject raw times outside the basis domain."""
        s = np.atleast_1d(self.scaler(t))
        if np.any(np.abs(s) > self.J):
            lo, hi = self.valid_time_range()
            raise ValueError(f"time outside the model domain; valid range is [{lo:.6g}, {hi:.6g}]")
        return s

    def with_state(self, state: vi.VariationalState) -> "Model":
        return Model(self.config, self.scaler, state, self.decoder)

    def copy(self) -> "Model":
        return Model(self.config, self.scaler, self.state.copy(),
                     DecoderParams.from_arrays(self.decoder.arrays()))


def feature_dims(config: ModelConfig) -> tuple[int, int | None]:
    """Weight columns of the signal and noise GPs (None when the noise sd is fixed)."""
    C = config.C or 1
    P_f = config.M * C
    if config.noise_mode == "fixed":
        return P_f, None
    return P_f, config.m_noise * (C if config.condition_noise else 1)


def _unit_prior_variances(config: ModelConfig):
    """Per-column prior weight variances at unit lengthscale and signal sd."""
    out = []
    for M, conditioned in ((config.M, True), (config.m_noise, config.condition_noise)):
        basis = hsgp.basis_with_halfwidth(M, config.boundary_factor)
        s = hsgp.spectral_weights(basis, 1.0, 1.0)
        if config.C is not None and conditioned:
            K = np.eye(config.C) if config.category_kernel is None else config.category_kernel
            s = hsgp.kron_spectral(s, hsgp.categorical_decompose(np.asarray(K)))
        out.append(np.asarray(s))
    return out


def build_model(config: ModelConfig, reference_times, seed: int = 0,
                cell_time_means=None) -> Model:
    """Fresh model whose time standardization is fitted to ``reference_times``.

    ``cell_time_means`` (raw times, one per training cell) is required when
    cell time is enabled.
    """
    rng = np.random.default_rng(seed)
    scaler = TimeScaler.from_times(reference_times)
    P_f, P_s = feature_dims(config)
    n_tau, tau_means = 0, None
    if config.cell_time:
        if cell_time_means is None:
            raise ValueError("cell time enabled: pass the per-cell measurement times")
        tau_means = scaler(cell_time_means)
        n_tau = tau_means.size
    state = vi.init_state(config.L, P_f, P_s, n_tau, tau_means, config.delta, rng,
                          *_unit_prior_variances(config))
    decoder = init_decoder(config.L, config.decoder_hidden, config.G, rng)
    return Model(config, scaler, state, decoder)


def _ridge_weights(F: np.ndarray, prior_var: np.ndarray, y: np.ndarray, jitter: float) -> np.ndarray:
    """Posterior-mean weights of y ~ F a with a ~ N(0, diag prior_var); y is (n, L)."""
    K = (F * prior_var) @ F.T + jitter * np.eye(F.shape[0])
    return (prior_var[:, None] * (F.T @ np.linalg.solve(K, y))).T


WHITEN_MODES = ("per-time", "pooled", "none")


def init_from_data(model: Model, clouds: dict, codes: dict | None = None, jitter: float = 1e-2,
                   whiten: str = "per-time") -> Model:
    """Data-driven starting point for a model with a linear decoder.

    The decoder rows become the leading principal axes of the pooled cells
    (bias at the pooled mean), and the signal and noise weight means are
    GP-ridge fits to each time's projected mean and log spread, with kernel
    hyperparameter means chosen by marginal likelihood. ``whiten`` sets the
    length of each decoder row: "per-time" uses the geometric mean over
    times of the spread along its axis, so fitted log sds centre on the
    prior mean of zero; "pooled" uses the pooled standard deviation; "none"
    keeps unit rows.
    Latent dimensions beyond the data rank keep their random start. With
    hidden layers only the output bias is set.
    """
    times = sorted(clouds)
    pooled = np.vstack([clouds[t] for t in times])
    center = pooled.mean(axis=0)
    decoder = DecoderParams.from_arrays(model.decoder.arrays())
    decoder.biases[-1] = center
    if model.config.decoder_hidden:
        return Model(model.config, model.scaler, model.state, decoder)
    vals, vecs = np.linalg.eigh(np.atleast_2d(np.cov(pooled, rowvar=False)))
    order = np.argsort(vals)[::-1]
    k = int(min(model.config.L, np.sum(vals > 1e-10 * max(vals.max(), 1e-300))))
    axes = vecs[:, order[:k]].T
    if whiten not in WHITEN_MODES:
        raise ValueError(f"whiten must be one of {WHITEN_MODES}, got {whiten!r}")
    gain = np.ones(k)
    if whiten == "pooled":
        gain = np.sqrt(vals[order[:k]])
    elif whiten == "per-time":
        # geometric mean over times of the within-time spread, so typical log sds start at 0
        log_sd = [np.log(((clouds[t] - center) @ axes.T).std(axis=0) + 1e-12)
                  for t in times]
        gain = np.exp(np.mean(log_sd, axis=0))
    W = np.array(decoder.weights[0])
    W[:k] = axes * gain[:, None]
    decoder.weights[0] = W

    cats = codes or {}
    rows_f, rows_s, mean_t, logsd_t = [], [], [], []
    C = model.cat.C if model.cat is not None else None
    for t in times:
        P = (clouds[t] - center) @ axes.T / gain
        s = model.scaler(t)
        lab = cats.get(t)
        groups = [(None, np.ones(P.shape[0], bool))]
        if C is not None:
            known = lab is not None and np.any(lab >= 0)
            groups = [(c, (lab == c) if known else np.ones(P.shape[0], bool)) for c in range(C)]
        for c, mask in groups:
            if mask.sum() < 2:
                continue
            cc = None if c is None else np.array([c])
            rows_f.append(features(model.basis_f, model.cat, np.array([s]), cc)[0])
            rows_s.append(features(model.basis_s, model.cat_s, np.array([s]),
                                   cc if model.cat_s is not None else None)[0])
            mean_t.append(P[mask].mean(axis=0))
            logsd_t.append(np.log(np.maximum(P[mask].std(axis=0), 1e-3)))
    state = model.state.copy()
    _fit_weights(state, "f", model.basis_f, model.cat, np.array(rows_f), np.array(mean_t), k, jitter)
    if state.A_s is not None:
        _fit_weights(state, "s", model.basis_s, model.cat_s, np.array(rows_s), np.array(logsd_t), k,
                     jitter)
    return Model(model.config, model.scaler, state, decoder)


_ELL_GRID = np.geomspace(0.1, 1.0, 21)
_SIG_GRID = np.geomspace(0.1, 5.0, 25)


def _type2_hypers(F, y, basis, cat, jitter):
    """Grid maximiser of the Gaussian marginal likelihood of y ~ F a."""
    best, arg = -np.inf, (1.0, 1.0)
    eye = jitter * np.eye(F.shape[0])
    for ell in _ELL_GRID:
        shape = np.asarray(vi.prior_variances(basis, ell, 1.0, cat))
        for sig in _SIG_GRID:
            K = (F * (sig**2 * shape)) @ F.T + eye
            _, logdet = np.linalg.slogdet(K)
            ll = -0.5 * (y @ np.linalg.solve(K, y) + logdet)
            if ll > best:
                best, arg = ll, (float(ell), float(sig))
    return arg


def _fit_weights(state, which, basis, cat, F, Y, k, jitter, margin=3.0):
    """Set hyperparameter means by type-II ML and ridge-fit the weight means.

    The ridge prior and the variational sds use the lengthscale ``margin``
    hyperparameter sds above its mean. Prior variances of high frequencies
    collapse quickly as the lengthscale grows, so starting at the mean
    would make the sampled weight KL explode on ordinary draws.
    """
    A = getattr(state, f"A_{which}")
    ell_q, sig_q = getattr(state, f"ell_{which}"), getattr(state, f"sig_{which}")
    mean = np.array(dc.value(A.mean))
    log_sd = np.array(dc.value(A.log_sd))
    ell_mu, sig_mu = np.array(dc.value(ell_q.mu)), np.array(dc.value(sig_q.mu))
    ell_sd = np.exp(np.array(dc.value(ell_q.log_sd)))
    for l in range(k):
        ell, sig = _type2_hypers(F, Y[:, l], basis, cat, jitter)
        ell_mu[l], sig_mu[l] = np.log(ell), np.log(sig)
        pv = np.asarray(vi.prior_variances(basis, ell * np.exp(margin * ell_sd[l]), sig, cat))
        mean[l] = _ridge_weights(F, pv, Y[:, l:l + 1], jitter)[0]
        log_sd[l] = np.minimum(log_sd[l], 0.5 * np.log(pv))
    A.mean, A.log_sd = mean, log_sd
    ell_q.mu, sig_q.mu = ell_mu, sig_mu


# -- sampling ----------------------------------------------------------------

@dataclass
class PhiSample:
    """One draw of the global latent-model quantities from q_Psi."""

    A_f: object
    A_s: object
    hypers: vi.HyperSample


def sample_phi(state: vi.VariationalState, rng: np.random.Generator) -> PhiSample:
    A_f = vi.sample_gaussian(state.A_f, rng.standard_normal(state.A_f.shape))
    A_s = None
    if state.A_s is not None:
        A_s = vi.sample_gaussian(state.A_s, rng.standard_normal(state.A_s.shape))
    return PhiSample(A_f, A_s, vi.sample_hypers(state, rng))


def features(basis: hsgp.HilbertBasis, cat: hsgp.CategoricalBasis | None, s, c=None):
    """Basis features at standardized times ``s`` (n,) for categories ``c`` (n,)."""
    if cat is None:
        return hsgp.eval_basis(basis, s)
    return hsgp.kron_features(basis, cat, s, np.asarray(c, dtype=np.int64))


@dataclass
class LatentSampleBatch:
    Z: object
    times: np.ndarray
    categories: np.ndarray | None
    xi: np.ndarray


def latent_sd(model: Model, A_s, s, c=None):
    """Per-cell, per-dimension latent sd at standardized times (n, L)."""
    if model.config.noise_mode == "fixed":
        n = dc.value(s).shape[0]
        return np.full((n, model.config.L), model.config.fixed_noise_sd)
    phi_s = features(model.basis_s, model.cat_s, s, c)
    return dc.exp(dc.matmul(phi_s, dc.transpose(A_s)))


def latent_batch(model: Model, phi: PhiSample, s, xi, c=None):
    """z_i = A_f phi_f(s_i) + exp(A_s phi_s(s_i)) * xi_i for a batch of cells."""
    xi = np.asarray(xi, dtype=np.float64)
    n = dc.value(s).shape[0]
    if xi.shape != (n, model.config.L):
        raise dc.ShapeError(f"xi must have shape ({n}, {model.config.L}), got {xi.shape}")
    if dc.value(phi.A_f).shape[1] != model.P_f:
        raise dc.ShapeError(f"A_f has {dc.value(phi.A_f).shape[1]} columns, features have {model.P_f}")
    phi_f = features(model.basis_f, model.cat, s, c)
    mean = dc.matmul(phi_f, dc.transpose(phi.A_f))
    return dc.add(mean, dc.mul(latent_sd(model, phi.A_s, s, c), xi))


def latent_trajectory(model: Model, phi: PhiSample, t: float, xi, c: int | None = None):
    """Single-cell latent position (L,) at raw time t."""
    s = model.check_times(t)
    z = latent_batch(model, phi, s, np.asarray(xi, dtype=np.float64).reshape(1, -1),
                     None if c is None else np.array([c]))
    return dc.reshape(z, (model.config.L,))


def _categories(model: Model, n: int, c, rng: np.random.Generator):
    if model.cat is None:
        if c is not None:
            raise ValueError("model is not category-conditioned")
        return None
    if c is None:
        return rng.integers(0, model.cat.C, size=n)  # uniform mixture over categories
    c = int(c)
    if not 0 <= c < model.cat.C:
        raise IndexError(f"category {c} outside [0, {model.cat.C})")
    return np.full(n, c, dtype=np.int64)


def generate_population(model: Model, t: float, n: int, c: int | None = None, seed: int = 0,
                        xi=None) -> PointCloud:
    """n decoded cells at raw time t from one draw of Phi; reproducible from ``seed``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    s = model.check_times(t)
    rng = np.random.default_rng(seed)
    phi = sample_phi(model.state, rng)
    if xi is None:
        xi = rng.standard_normal((n, model.config.L))
    cats = _categories(model, n, c, rng)
    z = latent_batch(model, phi, np.full(n, s[0]), xi, cats)
    return PointCloud(decode(model.decoder, z))


def mean_trajectory(model: Model, times, c: int | None = None) -> np.ndarray:
    """Decoded latent mean path (len(times), G) using the variational means.

    Without a category on a conditioned model, the latent mean is averaged
    over all categories.
    """
    s = model.check_times(times)
    st = model.state
    phi = PhiSample(dc.value(st.A_f.mean), None if st.A_s is None else dc.value(st.A_s.mean), None)
    xi = np.zeros((s.size, model.config.L))
    if model.cat is None:
        if c is not None:
            raise ValueError("model is not category-conditioned")
        Z = latent_batch(model, phi, s, xi)
    elif c is not None:
        Z = latent_batch(model, phi, s, xi, np.full(s.size, int(c)))
    else:
        Z = np.mean([latent_batch(model, phi, s, xi, np.full(s.size, k)) for k in range(model.cat.C)],
                    axis=0)
    return np.asarray(decode(model.decoder, Z))


def noise_sd_profile(model: Model, times, c: int | None = None) -> np.ndarray:
    """Latent sd exp(A_s phi_s(t)) at the variational mean weights, shape (len(times), L).

    A noise GP conditioned on categories is read at category ``c`` (0 if omitted).
    """
    s = model.check_times(times)
    if model.config.noise_mode == "fixed":
        return np.full((s.size, model.config.L), model.config.fixed_noise_sd)
    cats = None
    if model.cat_s is not None:
        cats = np.full(s.size, 0 if c is None else int(c))
    return np.asarray(latent_sd(model, dc.value(model.state.A_s.mean), s, cats))


# -- checkpoint --------------------------------------------------------------

def save_model(path, model: Model, extra_meta: dict | None = None) -> None:
    arrays = {**model.state.arrays(), **model.decoder.arrays()}
    meta = {"kind": "snapgp-model", "config": model.config.to_dict(),
            "time_shift": model.scaler.shift, "time_scale": model.scaler.scale}
    if extra_meta:
        meta["extra"] = extra_meta
    vi.write_arrays(path, arrays, meta)


def load_model(path) -> Model:
    arrays, meta = vi.read_arrays(path)
    if meta.get("kind") != "snapgp-model":
        raise ValueError(f"{path}: not a model checkpoint")
    config = ModelConfig.from_dict(meta["config"])
    state = vi.VariationalState.from_arrays({k: v for k, v in arrays.items() if not k.startswith("decoder.")})
    decoder = DecoderParams.from_arrays(arrays)
    return Model(config, TimeScaler(meta["time_shift"], meta["time_scale"]), state, decoder)

