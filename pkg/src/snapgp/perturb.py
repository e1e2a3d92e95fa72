"""In-silico perturbation: target construction, gradient steering of the
variational parameters, and a small MLP cell-type classifier for read-out."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from . import variational as vi
from .data import TARGET_SUM
from .model import Model, decode, generate_population, latent_batch, sample_phi
from .transport import DEFAULT_BLUR, DEFAULT_SCALING, PointCloud, sinkhorn_divergence

MODES = ("gene-scaling", "cell-type")


class SteeringError(RuntimeError):
    pass


@dataclass
class PerturbSpec:
    target_time: float
    mode: str = "gene-scaling"
    gene_indices: list[int] = field(default_factory=list)
    scales: list[float] = field(default_factory=list)
    label: str | None = None      # cell-type mode: the class defining the target
    space: str = "log"            # "log": scale log-normalized values; "counts": scale before log1p

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.space not in ("log", "counts"):
            raise ValueError("space must be 'log' or 'counts'")
        if self.mode == "gene-scaling":
            if len(self.gene_indices) != len(self.scales):
                raise ValueError("gene_indices and scales must have equal length")
            if any(not (a >= 0 and math.isfinite(a)) for a in self.scales):
                raise ValueError("scales must be finite and non-negative")
        elif self.label is None:
            raise ValueError("cell-type mode needs a label")


def scale_grid(levels=(-2, -1, 0, 1, 2)) -> np.ndarray:
    """Scaling factors 10**level for a sweep."""
    return 10.0 ** np.asarray(levels, dtype=np.float64)


def perturb_target(X: PointCloud, spec: PerturbSpec, labels=None) -> PointCloud:
    """Gene-scaled copy of X, or the rows of X carrying ``spec.label``."""
    P = np.array(dc.value(X.points), dtype=np.float64)
    if spec.mode == "cell-type":
        if labels is None:
            raise ValueError("cell-type mode needs per-row labels")
        keep = np.asarray(labels, dtype=object) == spec.label
        if not np.any(keep):
            raise ValueError(f"no rows labeled {spec.label!r}")
        return PointCloud(P[keep])
    G = P.shape[1]
    bad = [g for g in spec.gene_indices if not 0 <= g < G]
    if bad:
        raise IndexError(f"gene indices {bad} outside [0, {G})")
    if spec.space == "log":
        for g, a in zip(spec.gene_indices, spec.scales):
            P[:, g] *= a
        return PointCloud(P, X.weights.copy())
    # scale normalized counts, renormalize to the fixed total, re-log
    Y = np.expm1(P)
    for g, a in zip(spec.gene_indices, spec.scales):
        Y[:, g] *= a
    tot = Y.sum(axis=1, keepdims=True)
    if np.any(tot <= 0):
        raise ValueError("scaling left a cell with zero total count")
    return PointCloud(np.log1p(Y / tot * TARGET_SUM), X.weights.copy())


# -- steering ----------------------------------------------------------------

@dataclass
class SteerResult:
    model: Model
    trace: list[float]


def steer(model: Model, target: PointCloud, t: float, eta: float = 1e-3, iterations: int = 100,
          blur: float = DEFAULT_BLUR, scaling: float = DEFAULT_SCALING, seed: int = 0,
          batch: int = 256, kl_anchor: bool = False, c: int | None = None,
          sinkhorn_max_iter: int = 100) -> SteerResult:
    """Plain gradient descent of the variational parameters on the expected
    Sinkhorn divergence to ``target`` at time t; the decoder stays fixed.

    Each iteration draws one Phi sample and ``batch`` generated cells, and
    compares them with ``batch`` target rows drawn without replacement.
    ``kl_anchor`` adds the KL-to-prior term as a trust region.
    """
    if iterations < 0:
        raise ValueError("iterations must be >= 0")
    s = model.check_times(t)[0]
    rng = np.random.default_rng(seed)
    tgt = np.asarray(dc.value(target.points))
    state = model.state.copy()
    trace: list[float] = []
    for it in range(1, iterations + 1):
        n = min(batch, tgt.shape[0])
        rows = rng.choice(tgt.shape[0], size=n, replace=False) if n < tgt.shape[0] else np.arange(n)
        tape = dc.Tape()
        arrs = state.arrays()
        leaves = {k: tape.param(v, name=k) for k, v in arrs.items()}
        sv = vi.VariationalState.from_arrays(leaves)
        phi = sample_phi(sv, rng)
        xi = rng.standard_normal((n, model.config.L))
        cats = None
        if model.cat is not None:
            cats = (np.full(n, int(c)) if c is not None
                    else rng.integers(0, model.cat.C, size=n))
        z = latent_batch(model, phi, np.full(n, s), xi, cats)
        gen = decode(model.decoder, z)
        try:
            r = sinkhorn_divergence(PointCloud(tgt[rows]), PointCloud(gen), blur=blur,
                                    scaling=scaling, max_iter=sinkhorn_max_iter)
            loss = r.loss
            if kl_anchor:
                kl = vi.kl_total(sv, model.basis_f, model.basis_s if sv.A_s is not None else None,
                                 phi.hypers, model.cat, model.cat_s, None, model.config.delta)
                loss = dc.add(loss, kl)
        except dc.NonFiniteError as exc:
            raise SteeringError(f"non-finite cost at iteration {it}: {exc}") from exc
        cost = float(dc.value(loss))
        if not math.isfinite(cost):
            raise SteeringError(f"non-finite cost at iteration {it}")
        trace.append(cost)
        grads = tape.backward(loss, list(leaves.values()))
        state = vi.VariationalState.from_arrays(
            {k: arrs[k] - eta * grads[leaves[k]] for k in arrs})
    return SteerResult(model.with_state(state), trace)


def displacement_norm(a: Model, b: Model) -> float:
    """Euclidean distance between two models' variational parameters."""
    pa, pb = a.state.arrays(), b.state.arrays()
    return math.sqrt(sum(float(np.sum((pa[k] - pb[k]) ** 2)) for k in pa))


def smoothed(trace, window: int = 10) -> np.ndarray:
    """Means over consecutive non-overlapping windows."""
    x = np.asarray(trace, dtype=np.float64)
    k = x.size // window
    if k == 0:
        return x[:0]
    return x[: k * window].reshape(k, window).mean(axis=1)


# -- classifier --------------------------------------------------------------

@dataclass
class ClassifierParams:
    weights: list
    biases: list
    classes: list[str]
    hidden: tuple[int, ...] = (64, 32)
    l2: float = 1e-4

    @property
    def G(self) -> int:
        return self.weights[0].shape[0]


def init_classifier(G: int, classes: list[str], hidden=(64, 32), l2: float = 1e-4,
                    seed: int = 0) -> ClassifierParams:
    rng = np.random.default_rng(seed)
    widths = [G, *hidden, len(classes)]
    Ws, bs = [], []
    for a, b in zip(widths[:-1], widths[1:]):
        lim = math.sqrt(6.0 / (a + b))
        Ws.append(rng.uniform(-lim, lim, size=(a, b)))
        bs.append(np.zeros(b))
    return ClassifierParams(Ws, bs, list(classes), tuple(hidden), l2)


def _logits(Ws, bs, X):
    h = X
    for i, (W, b) in enumerate(zip(Ws, bs)):
        h = dc.add(dc.matmul(h, W), b)
        if i < len(Ws) - 1:
            h = dc.relu(h)
    return h


def classifier_loss(Ws, bs, X, y, l2: float):
    """Mean cross-entropy plus (l2 / 2) * sum of squared weights."""
    logits = _logits(Ws, bs, X)
    lse = dc.logsumexp(logits, axis=1)
    n = X.shape[0]
    picked = dc.take(logits, (np.arange(n), y))
    ce = dc.mean(dc.sub(lse, picked))
    if l2 == 0:
        return ce
    pen = dc.sum(dc.mul(Ws[0], Ws[0]))
    for W in Ws[1:]:
        pen = dc.add(pen, dc.sum(dc.mul(W, W)))
    return dc.add(ce, dc.mul(pen, 0.5 * l2))


@dataclass
class ClassifierReport:
    epoch_loss: list[float]
    train_accuracy: float


def train_classifier(X, labels, params: ClassifierParams | None = None, epochs: int = 500,
                     lr: float = 1e-3, batch: int = 200, seed: int = 0
                     ) -> tuple[ClassifierParams, ClassifierReport]:
    """Adam on cross-entropy + L2 with seeded per-epoch shuffling.

    ``epoch_loss[0]`` is the full-data loss at initialization.
    """
    X = np.asarray(dc.value(X.points) if isinstance(X, PointCloud) else X, dtype=np.float64)
    labels = np.asarray(labels, dtype=object)
    classes = sorted({str(v) for v in labels})
    if len(classes) < 2:
        raise ValueError("classifier needs at least two classes")
    if params is None:
        params = init_classifier(X.shape[1], classes, seed=seed)
    elif list(params.classes) != classes:
        raise ValueError("label set differs from the classifier's classes")
    y = np.array([classes.index(str(v)) for v in labels])
    Ws = [w.copy() for w in params.weights]
    bs = [b.copy() for b in params.biases]
    rng = np.random.default_rng(seed)
    m = [np.zeros_like(p) for p in Ws + bs]
    v = [np.zeros_like(p) for p in Ws + bs]
    step = 0
    losses = [float(classifier_loss(Ws, bs, X, y, params.l2))]
    n = X.shape[0]
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch):
            idx = order[start:start + batch]
            tape = dc.Tape()
            Wl = [tape.param(w) for w in Ws]
            bl = [tape.param(b) for b in bs]
            loss = classifier_loss(Wl, bl, X[idx], y[idx], params.l2)
            grads = tape.backward(loss, Wl + bl)
            step += 1
            c1, c2 = 1 - 0.9**step, 1 - 0.999**step
            flat = Ws + bs
            for i, leaf in enumerate(Wl + bl):
                g = grads[leaf]
                m[i] = 0.9 * m[i] + 0.1 * g
                v[i] = 0.999 * v[i] + 0.001 * g * g
                flat[i] = flat[i] - lr * (m[i] / c1) / (np.sqrt(v[i] / c2) + 1e-8)
            Ws, bs = flat[:len(Ws)], flat[len(Ws):]
        losses.append(float(classifier_loss(Ws, bs, X, y, params.l2)))
    trained = ClassifierParams(Ws, bs, classes, params.hidden, params.l2)
    acc = float(np.mean(predict(trained, X) == y))
    return trained, ClassifierReport(losses, acc)


def predict_proba(clf: ClassifierParams, X) -> np.ndarray:
    X = np.asarray(dc.value(X.points) if isinstance(X, PointCloud) else X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != clf.G:
        raise ValueError(f"classifier expects {clf.G} genes, got shape {X.shape}")
    return np.asarray(dc.softmax(_logits(clf.weights, clf.biases, X), axis=1))


def predict(clf: ClassifierParams, X) -> np.ndarray:
    return np.argmax(predict_proba(clf, X), axis=1)


def classify_fractions(clf: ClassifierParams, generated) -> dict[str, float]:
    """Fraction of rows assigned (argmax) to each class."""
    pred = predict(clf, generated)
    counts = np.bincount(pred, minlength=len(clf.classes))
    return {c: float(k) / pred.size for c, k in zip(clf.classes, counts)}


def fraction_table(clf: ClassifierParams, model: Model, t: float, n: int = 2000,
                   seed: int = 0) -> dict[str, float]:
    return classify_fractions(clf, generate_population(model, t, n, seed=seed))
