"""Mean-field variational factors, reparameterized sampling and closed-form KLs."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, fields, replace
from typing import Iterator

import numpy as np

from . import diffcore as dc
from . import hsgp


@dataclass
class GaussianDiag:
    """N(mean, diag(exp(log_sd)^2)); both fields are arrays or Vars of equal shape."""

    mean: object
    log_sd: object

    def __post_init__(self):
        ms, ls = dc.value(self.mean).shape, dc.value(self.log_sd).shape
        if ms != ls:
            raise dc.ShapeError(f"mean shape {ms} != log_sd shape {ls}")

    @property
    def shape(self):
        return dc.value(self.mean).shape


@dataclass
class LogNormal:
    """exp(N(mu, exp(log_sd)^2)); vectorized over latent dimensions."""

    mu: object
    log_sd: object


def sample_gaussian(q: GaussianDiag, noise):
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != q.shape:
        raise dc.ShapeError(f"noise shape {noise.shape} != mean shape {q.shape}")
    return dc.add(q.mean, dc.mul(dc.exp(q.log_sd), noise))


def sample_lognormal(q: LogNormal, noise):
    return dc.exp(dc.add(q.mu, dc.mul(dc.exp(q.log_sd), np.asarray(noise, dtype=np.float64))))


def kl_lognormal_std(q: LogNormal):
    """KL(q || Lognormal(0, 1)) summed over entries: 1/2 (nu^2 + mu^2 - 1 - log nu^2)."""
    var = dc.exp(dc.mul(q.log_sd, 2.0))
    terms = dc.sub(dc.add(var, dc.mul(q.mu, q.mu)), dc.add(1.0, dc.mul(q.log_sd, 2.0)))
    return dc.mul(dc.sum(terms), 0.5)


def kl_weights(q: GaussianDiag, spectral):
    """KL(N(mu, diag nu^2) || N(0, diag s)), summed over all entries."""
    if np.any(dc.value(spectral) <= 0):
        raise ValueError("spectral densities must be strictly positive")
    var = dc.exp(dc.mul(q.log_sd, 2.0))
    ratio = dc.div(dc.add(var, dc.mul(q.mean, q.mean)), spectral)
    terms = dc.sub(dc.add(ratio, dc.log(spectral)), dc.add(1.0, dc.mul(q.log_sd, 2.0)))
    return dc.mul(dc.sum(terms), 0.5)


def kl_tau(q: GaussianDiag, prior_means, delta: float):
    """sum_n KL(N(mu_n, nu_n^2) || N(t_n, delta^2))."""
    if delta <= 0:
        raise ValueError("delta must be positive")
    d2 = delta * delta
    diff = dc.sub(q.mean, np.asarray(prior_means, dtype=np.float64))
    var = dc.exp(dc.mul(q.log_sd, 2.0))
    terms = dc.sub(
        dc.div(dc.add(var, dc.mul(diff, diff)), d2),
        dc.add(1.0 - np.log(d2), dc.mul(q.log_sd, 2.0)),
    )
    return dc.mul(dc.sum(terms), 0.5)


@dataclass
class VariationalState:
    """All variational parameters Psi.

    ``A_s`` and the noise hyperparameters are None when the latent noise sd
    is held fixed; ``tau`` is None unless cell-specific times are modeled.
    """

    A_f: GaussianDiag
    ell_f: LogNormal
    sig_f: LogNormal
    A_s: GaussianDiag | None = None
    ell_s: LogNormal | None = None
    sig_s: LogNormal | None = None
    tau: GaussianDiag | None = None

    def named(self) -> Iterator[tuple[str, object]]:
        """(name, array-or-Var) pairs in a fixed order."""
        for f in fields(self):
            comp = getattr(self, f.name)
            if comp is None:
                continue
            for sub in fields(comp):
                yield f"{f.name}.{sub.name}", getattr(comp, sub.name)

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: np.array(dc.value(v)) for k, v in self.named()}

    @classmethod
    def from_arrays(cls, arrs: dict[str, np.ndarray]) -> "VariationalState":
        comps: dict[str, object] = {}
        kinds = {"A_f": GaussianDiag, "A_s": GaussianDiag, "tau": GaussianDiag,
                 "ell_f": LogNormal, "sig_f": LogNormal, "ell_s": LogNormal, "sig_s": LogNormal}
        for name, kind in kinds.items():
            keys = [f.name for f in fields(kind)]
            if all(f"{name}.{k}" in arrs for k in keys):
                comps[name] = kind(*(arrs[f"{name}.{k}"] for k in keys))
        return cls(**comps)

    def on_tape(self, tape: dc.Tape) -> "VariationalState":
        """Copy whose arrays are registered as tape leaves."""
        return VariationalState.from_arrays({k: tape.param(v, name=k) for k, v in self.arrays().items()})

    def copy(self) -> "VariationalState":
        return VariationalState.from_arrays(self.arrays())


def init_state(L: int, P_f: int, P_s: int | None, n_cells_tau: int = 0,
               tau_prior_means=None, delta: float = 0.1,
               rng: np.random.Generator | None = None,
               prior_var_f=None, prior_var_s=None) -> VariationalState:
    """Near-prior start with lognormal factors at (0, log 0.1) and tau means at
    the measurement times with sd delta/2.

    Weight column m gets sd min(0.1, sqrt(prior_var[m])) and a mean drawn from
    N(0, sd^2). ``prior_var_*`` are the prior weight variances at unit
    hyperparameters; when omitted every column uses 0.1. Matching the prior
    scale keeps the initial KL of high-frequency columns small.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    lsd = np.log(0.1)

    def weights(P, prior_var):
        sd = np.full(P, 0.1)
        if prior_var is not None:
            pv = np.asarray(prior_var, dtype=np.float64)
            if pv.shape != (P,):
                raise ValueError(f"prior variances must have shape ({P},), got {pv.shape}")
            sd = np.minimum(sd, np.sqrt(pv))
        sd = np.broadcast_to(sd, (L, P))
        return GaussianDiag(rng.normal(0.0, 1.0, size=(L, P)) * sd, np.log(sd).copy())

    def hyper():
        return LogNormal(np.zeros(L), np.full(L, lsd))

    state = VariationalState(A_f=weights(P_f, prior_var_f), ell_f=hyper(), sig_f=hyper())
    if P_s is not None:
        state = replace(state, A_s=weights(P_s, prior_var_s), ell_s=hyper(), sig_s=hyper())
    if n_cells_tau:
        mu = np.asarray(tau_prior_means, dtype=np.float64).copy()
        if mu.shape != (n_cells_tau,):
            raise ValueError("tau_prior_means must have one entry per cell")
        state = replace(state, tau=GaussianDiag(mu, np.full(n_cells_tau, np.log(delta / 2))))
    return state


@dataclass
class HyperSample:
    """One draw of the kernel hyperparameters (length-L arrays or Vars)."""

    ell_f: object
    sig_f: object
    ell_s: object = None
    sig_s: object = None


def sample_hypers(state: VariationalState, rng: np.random.Generator) -> HyperSample:
    L = dc.value(state.ell_f.mu).shape[0]
    hs = HyperSample(
        ell_f=sample_lognormal(state.ell_f, rng.standard_normal(L)),
        sig_f=sample_lognormal(state.sig_f, rng.standard_normal(L)),
    )
    if state.A_s is not None:
        hs.ell_s = sample_lognormal(state.ell_s, rng.standard_normal(L))
        hs.sig_s = sample_lognormal(state.sig_s, rng.standard_normal(L))
    return hs


def prior_variances(basis: hsgp.HilbertBasis, ell, sig, cat: hsgp.CategoricalBasis | None = None):
    s = hsgp.spectral_weights(basis, ell, sig)
    return hsgp.kron_spectral(s, cat) if cat is not None else s


def kl_total(state: VariationalState, basis_f: hsgp.HilbertBasis, basis_s: hsgp.HilbertBasis | None,
             hypers: HyperSample, cat_f: hsgp.CategoricalBasis | None = None,
             cat_s: hsgp.CategoricalBasis | None = None, tau_prior_means=None,
             delta: float = 0.1):
    """Single-sample estimate of KL(q(Phi) || p(Phi)) (+ the tau term when present)."""
    P_f = basis_f.M * (cat_f.C if cat_f is not None else 1)
    if state.A_f.shape[1] != P_f:
        raise dc.ShapeError(f"A_f has {state.A_f.shape[1]} columns, basis implies {P_f}")
    total = dc.add(
        kl_weights(state.A_f, prior_variances(basis_f, hypers.ell_f, hypers.sig_f, cat_f)),
        dc.add(kl_lognormal_std(state.ell_f), kl_lognormal_std(state.sig_f)),
    )
    if state.A_s is not None:
        if basis_s is None:
            raise ValueError("noise weights present but no noise basis given")
        P_s = basis_s.M * (cat_s.C if cat_s is not None else 1)
        if state.A_s.shape[1] != P_s:
            raise dc.ShapeError(f"A_s has {state.A_s.shape[1]} columns, basis implies {P_s}")
        total = dc.add(total, dc.add(
            kl_weights(state.A_s, prior_variances(basis_s, hypers.ell_s, hypers.sig_s, cat_s)),
            dc.add(kl_lognormal_std(state.ell_s), kl_lognormal_std(state.sig_s)),
        ))
    if state.tau is not None:
        total = dc.add(total, kl_tau(state.tau, tau_prior_means, delta))
    return total


# -- array container ---------------------------------------------------------
# Layout: b"SNAPGP1\n", uint64 little-endian header length H, H bytes of UTF-8
# JSON {"meta": {...}, "arrays": [{"name", "shape", "offset"}, ...]}, then the
# raw float64 little-endian data; offsets are relative to the data start.

MAGIC = b"SNAPGP1\n"


def write_arrays(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    entries, blobs, offset = [], [], 0
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        blobs.append(a.tobytes())
        offset += a.nbytes
    header = json.dumps({"meta": meta or {}, "arrays": entries}).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)


def read_arrays(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if not raw.startswith(MAGIC):
        raise ValueError(f"{path}: not a snapgp array file")
    (hlen,) = struct.unpack_from("<Q", raw, len(MAGIC))
    start = len(MAGIC) + 8
    header = json.loads(raw[start:start + hlen].decode("utf-8"))
    data = start + hlen
    out = {}
    for e in header["arrays"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        a = np.frombuffer(raw, dtype="<f8", count=n, offset=data + e["offset"])
        out[e["name"]] = a.reshape(e["shape"]).astype(np.float64)
    return out, header["meta"]


def save_state(path, state: VariationalState, meta: dict | None = None) -> None:
    write_arrays(path, state.arrays(), meta)


def load_state(path) -> VariationalState:
    arrs, _ = read_arrays(path)
    return VariationalState.from_arrays(arrs)
