"""Snapshot datasets: CSV ingestion, log1p normalization, hold-out splits,
a synthetic generator with known ground truth, the copy-nearest-snapshot
baseline and a shared PCA projection."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import hsgp
from .transport import PointCloud


class DataError(ValueError):
    """Malformed or inconsistent input data."""


@dataclass
class SnapshotDataset:
    """Per-time expression matrices; ``labels[k]`` holds strings ("" = unlabeled)."""

    times: np.ndarray
    matrices: list[np.ndarray]
    labels: list[np.ndarray] | None = None
    gene_names: list[str] | None = None
    identity: str | None = None  # benchmark name (ZB / DR / SC) when applicable

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        if self.times.ndim != 1 or self.times.size == 0:
            raise DataError("dataset needs at least one time point")
        if np.any(np.diff(self.times) <= 0):
            raise DataError("times must be sorted and distinct")
        if len(self.matrices) != self.times.size:
            raise DataError("one matrix per time point is required")
        self.matrices = [np.asarray(m, dtype=np.float64) for m in self.matrices]
        G = None
        for t, m in zip(self.times, self.matrices):
            if m.ndim != 2 or m.shape[0] < 1:
                raise DataError(f"time {t:g}: expression matrix is empty")
            if G is None:
                G = m.shape[1]
            elif m.shape[1] != G:
                raise DataError(f"time {t:g}: {m.shape[1]} genes, expected {G}")
        if self.labels is not None:
            self.labels = [np.asarray(lab, dtype=object) for lab in self.labels]
            for t, m, lab in zip(self.times, self.matrices, self.labels):
                if lab.shape != (m.shape[0],):
                    raise DataError(f"time {t:g}: {lab.shape[0]} labels for {m.shape[0]} cells")
        if self.gene_names is not None and len(self.gene_names) != G:
            raise DataError(f"{len(self.gene_names)} gene names for {G} genes")

    @property
    def G(self) -> int:
        return self.matrices[0].shape[1]

    @property
    def n_cells(self) -> list[int]:
        return [m.shape[0] for m in self.matrices]

    def index_of(self, t: float) -> int:
        hits = np.nonzero(self.times == t)[0]
        if hits.size == 0:
            raise KeyError(f"time {t!r} not in dataset")
        return int(hits[0])

    def categories(self) -> list[str]:
        """Sorted distinct non-empty labels."""
        if self.labels is None:
            return []
        return sorted({str(x) for lab in self.labels for x in lab if str(x) != ""})

    def label_codes(self, k: int, categories: list[str] | None = None) -> np.ndarray:
        """Integer category per cell at time index k; -1 for unlabeled."""
        n = self.matrices[k].shape[0]
        if self.labels is None:
            return np.full(n, -1, dtype=np.int64)
        cats = self.categories() if categories is None else categories
        lookup = {c: i for i, c in enumerate(cats)}
        return np.array([lookup.get(str(x), -1) for x in self.labels[k]], dtype=np.int64)

    def cloud(self, k: int, label: str | None = None) -> PointCloud:
        X = self.matrices[k]
        if label is not None:
            if self.labels is None:
                raise DataError("dataset has no labels")
            X = X[self.labels[k] == label]
            if X.shape[0] == 0:
                raise DataError(f"no cells labeled {label!r} at time {self.times[k]:g}")
        return PointCloud(X)

    def subset(self, keep: list[int]) -> "SnapshotDataset":
        """Dataset restricted to the given time indices."""
        return SnapshotDataset(
            self.times[keep], [self.matrices[k] for k in keep],
            None if self.labels is None else [self.labels[k] for k in keep],
            self.gene_names, self.identity,
        )


# -- CSV ---------------------------------------------------------------------

def load_csv(path, identity: str | None = None) -> SnapshotDataset:
    """Read ``time[,label],g1,...,gG`` rows (any order) into a dataset."""
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}") from exc
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        if not header or header[0] != "time":
            raise DataError(f"{path}:1: first column must be 'time'")
        has_label = len(header) > 1 and header[1] == "label"
        gene_names = header[2:] if has_label else header[1:]
        if not gene_names:
            raise DataError(f"{path}:1: no expression columns")
        width = len(header)
        rows: dict[float, list[list[float]]] = {}
        labs: dict[float, list[str]] = {}
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != width:
                raise DataError(f"{path}:{lineno}: expected {width} fields, got {len(row)}")
            try:
                t = float(row[0])
            except ValueError:
                raise DataError(f"{path}:{lineno}: time {row[0]!r} is not numeric") from None
            if not math.isfinite(t):
                raise DataError(f"{path}:{lineno}: time must be finite")
            vals = row[2:] if has_label else row[1:]
            try:
                x = [float(v) for v in vals]
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-numeric expression value") from None
            if not all(math.isfinite(v) for v in x):
                raise DataError(f"{path}:{lineno}: expression values must be finite")
            rows.setdefault(t, []).append(x)
            labs.setdefault(t, []).append(row[1].strip() if has_label else "")
    if not rows:
        raise DataError(f"{path}: no data rows")
    times = sorted(rows)
    return SnapshotDataset(
        np.array(times), [np.array(rows[t]) for t in times],
        [np.array(labs[t], dtype=object) for t in times] if has_label else None,
        list(gene_names), identity,
    )


def save_csv(path, ds: SnapshotDataset) -> None:
    """Write rows grouped by ascending time; floats use shortest round-trip repr."""
    genes = ds.gene_names or [f"g{j + 1}" for j in range(ds.G)]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["time"] + (["label"] if ds.labels is not None else []) + list(genes))
        for k, t in enumerate(ds.times):
            for i, x in enumerate(ds.matrices[k]):
                lab = [str(ds.labels[k][i])] if ds.labels is not None else []
                w.writerow([repr(float(t))] + lab + [repr(float(v)) for v in x])


# -- preprocessing -----------------------------------------------------------

TARGET_SUM = 1e4


def normalize_log1p(ds: SnapshotDataset) -> SnapshotDataset:
    """Scale each cell to 1e4 total counts, then log(x + 1)."""
    out = []
    for t, X in zip(ds.times, ds.matrices):
        if np.any(X < 0):
            raise DataError(f"time {t:g}: negative counts")
        tot = X.sum(axis=1)
        zero = np.nonzero(tot <= 0)[0]
        if zero.size:
            raise DataError(f"time {t:g}: cell {int(zero[0])} has zero total count")
        out.append(np.log(X / tot[:, None] * TARGET_SUM + 1.0))
    return SnapshotDataset(ds.times.copy(), out, ds.labels, ds.gene_names, ds.identity)


# -- splits ------------------------------------------------------------------

# held-out time-point indices (0-based, into the sorted time list)
BENCHMARK_HOLDOUTS = {
    "ZB": {"n_times": 12, "easy": [4, 6, 8], "medium": [10, 11], "hard": [2, 4, 6, 8, 10, 11]},
    "DR": {"n_times": 11, "easy": [4, 6, 8], "medium": [8, 9, 10], "hard": [2, 4, 6, 8, 9, 10]},
    "SC": {"n_times": 19, "easy": [5, 10, 15], "medium": [16, 17, 18],
           "hard": [5, 7, 9, 11, 15, 16, 17, 18]},
}
TASKS = ("easy", "medium", "hard", "custom")


@dataclass(frozen=True)
class TaskSplit:
    train_times: tuple[float, ...]
    test_times: tuple[float, ...]
    task_name: str

    def to_dict(self) -> dict:
        return asdict(self)


def make_split(ds: SnapshotDataset, task_name: str, heldout: list[int] | None = None) -> TaskSplit:
    """Hold out time indices. Named tasks use the benchmark table when the
    dataset carries a known identity; otherwise ``heldout`` must be given."""
    if task_name not in TASKS:
        raise ValueError(f"unknown task {task_name!r}; choose from {TASKS}")
    n = ds.times.size
    if heldout is None:
        if task_name == "custom":
            raise ValueError("custom split needs an explicit held-out list")
        preset = BENCHMARK_HOLDOUTS.get(ds.identity or "")
        if preset is None:
            raise ValueError(f"no '{task_name}' preset for dataset identity {ds.identity!r}; "
                             "pass explicit held-out indices")
        if preset["n_times"] != n:
            raise DataError(f"{ds.identity} preset expects {preset['n_times']} time points, "
                            f"dataset has {n}")
        heldout = preset[task_name]
    bad = [i for i in heldout if not 0 <= i < n]
    if bad:
        raise ValueError(f"held-out indices {bad} outside [0, {n})")
    held = sorted(set(int(i) for i in heldout))
    train = [k for k in range(n) if k not in held]
    if not train:
        raise ValueError("split leaves no training time points")
    return TaskSplit(tuple(float(ds.times[k]) for k in train),
                     tuple(float(ds.times[k]) for k in held), task_name)


# -- synthetic ground truth --------------------------------------------------

NOISE_PROFILES = ("constant", "increasing", "bump")


@dataclass
class GroundTruth:
    """Everything needed to evaluate the generating process."""

    decoder: np.ndarray          # G x L, orthonormal columns
    mean_coeffs: np.ndarray      # L x n_basis weights on the Hilbert basis
    basis_halfwidth: float
    time_shift: float
    time_scale: float
    noise_profile: str
    noise_base: float
    noise_peak: float
    noise_center: float
    noise_width: float
    class_offset: np.ndarray | None = None  # per-class latent shift reached at the last time

    def standardize(self, t):
        return (np.asarray(t, dtype=np.float64) - self.time_shift) / self.time_scale

    def basis(self) -> hsgp.HilbertBasis:
        return hsgp.basis_with_halfwidth(self.mean_coeffs.shape[1], self.basis_halfwidth)

    def latent_mean(self, t) -> np.ndarray:
        """(n, L) latent means at raw times t."""
        phi = hsgp.eval_basis(self.basis(), np.atleast_1d(self.standardize(t)))
        return phi @ self.mean_coeffs.T

    def latent_sd(self, t) -> np.ndarray:
        """Per-dimension latent sd (shared across dimensions) at raw times t."""
        s = np.atleast_1d(self.standardize(t))
        b, p = self.noise_base, self.noise_peak
        if self.noise_profile == "constant":
            return np.full(s.shape, b)
        if self.noise_profile == "increasing":
            return b + (p - b) * (s + 1.0) / 2.0
        return b + (p - b) * np.exp(-((s - self.noise_center) ** 2) / (2 * self.noise_width**2))

    def to_json(self) -> str:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, np.ndarray):
                d[k] = v.tolist()
        return json.dumps(d, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "GroundTruth":
        d = json.loads(text)
        for k in ("decoder", "mean_coeffs", "class_offset"):
            if d.get(k) is not None:
                d[k] = np.array(d[k], dtype=np.float64)
        return cls(**d)


@dataclass
class SynthSpec:
    """Knobs for :func:`synth_generate` beyond the required arguments."""

    n_basis: int = 3
    boundary_factor: float = 2.0
    mean_scale: float = 1.5
    noise_base: float = 0.3
    noise_peak: float = 1.0
    noise_center: float = -0.2
    noise_width: float = 0.3
    n_classes: int = 0           # >= 2 adds labels with class-specific latent offsets
    class_separation: float = 3.0  # distance between class shifts; shifts grow linearly in time


def synth_generate(L: int, G: int, n_per_time: int, times, seed: int,
                   noise_profile: str = "bump", spec: SynthSpec | None = None
                   ) -> tuple[SnapshotDataset, GroundTruth]:
    """Sample a dataset from a latent model with known smooth means, a known
    noise-sd profile and an orthonormal linear decoder."""
    spec = spec or SynthSpec()
    times = np.sort(np.asarray(times, dtype=np.float64))
    if L > G:
        raise ValueError(f"L={L} exceeds G={G}")
    if times.size < 3:
        raise ValueError("need at least 3 time points")
    if noise_profile not in NOISE_PROFILES:
        raise ValueError(f"noise_profile must be one of {NOISE_PROFILES}")
    rng = np.random.default_rng(seed)
    Q, R = np.linalg.qr(rng.standard_normal((G, L)))
    D = Q * np.sign(np.diag(R))
    coeffs = rng.normal(0.0, spec.mean_scale, size=(L, spec.n_basis))
    shift = float(times.mean())
    scale = float(np.max(np.abs(times - shift))) or 1.0
    offset = None
    if spec.n_classes >= 2:
        offset = rng.standard_normal((spec.n_classes, L))
        offset -= offset.mean(axis=0)
        offset *= spec.class_separation / 2.0 / np.linalg.norm(offset, axis=1, keepdims=True)
    gt = GroundTruth(
        decoder=D, mean_coeffs=coeffs, basis_halfwidth=spec.boundary_factor,
        time_shift=shift, time_scale=scale, noise_profile=noise_profile,
        noise_base=spec.noise_base, noise_peak=spec.noise_peak,
        noise_center=spec.noise_center, noise_width=spec.noise_width,
        class_offset=offset,
    )
    mats, labs = [], []
    for t in times:
        mu = gt.latent_mean(t)[0]
        sd = float(gt.latent_sd(t)[0])
        Z = mu + sd * rng.standard_normal((n_per_time, L))
        if offset is not None:
            cls = rng.integers(0, spec.n_classes, size=n_per_time)
            frac = (t - times[0]) / (times[-1] - times[0])
            Z = Z + frac * offset[cls]
            labs.append(np.array([f"type{c}" for c in cls], dtype=object))
        mats.append(Z @ D.T)
    ds = SnapshotDataset(times, mats, labs if offset is not None else None,
                         [f"g{j + 1}" for j in range(G)])
    return ds, gt


# -- baseline ----------------------------------------------------------------

def baseline_nearest_snapshot(split: TaskSplit, ds: SnapshotDataset) -> dict[float, PointCloud]:
    """Each test time gets the full cloud of the closest training time (ties go earlier)."""
    train = np.array(sorted(split.train_times))
    out = {}
    for t in split.test_times:
        gaps = np.abs(train - t)
        k = int(np.argmin(gaps))  # argmin returns the first, i.e. earliest, minimizer
        out[t] = ds.cloud(ds.index_of(float(train[k])))
    return out


# -- PCA ---------------------------------------------------------------------

@dataclass
class PCAResult:
    projections: list[np.ndarray]
    components: np.ndarray        # k x G, orthonormal rows
    explained_variance: np.ndarray
    center: np.ndarray


def pca_project(clouds: list, k: int = 2, tol: float = 1e-10, max_iter: int = 10_000,
                seed: int = 0) -> PCAResult:
    """Shared principal axes of the pooled clouds via power iteration with deflation."""
    mats = [np.asarray(c.points if isinstance(c, PointCloud) else c, dtype=np.float64) for c in clouds]
    X = np.vstack(mats)
    if X.shape[0] <= k:
        raise ValueError(f"need more than k={k} pooled rows, got {X.shape[0]}")
    center = X.mean(axis=0)
    Xc = X - center
    S = Xc.T @ Xc / (X.shape[0] - 1)
    scale = max(float(np.trace(S)), 1e-300)
    rng = np.random.default_rng(seed)
    comps, vals = [], []
    A = S.copy()
    for _ in range(k):
        v = rng.standard_normal(A.shape[0])
        v /= np.linalg.norm(v)
        for _ in range(max_iter):
            w = A @ v
            nw = np.linalg.norm(w)
            if nw <= 1e-14 * scale:
                raise ValueError(f"k={k} exceeds the rank of the pooled data")
            w /= nw
            if w @ v < 0:
                w = -w
            done = np.linalg.norm(w - v) < tol
            v = w
            if done:
                break
        lam = float(v @ S @ v)
        if lam <= 1e-12 * scale:
            raise ValueError(f"k={k} exceeds the rank of the pooled data")
        # fix the sign so the largest-magnitude loading is positive
        v = v * (1.0 if v[np.argmax(np.abs(v))] >= 0 else -1.0)
        comps.append(v)
        vals.append(lam)
        A = A - lam * np.outer(v, v)
    W = np.array(comps)
    projs = [(m - center) @ W.T for m in mats]
    return PCAResult(projs, W, np.array(vals), center)


def write_pca_csv(path, times: list[float], projections: list[np.ndarray], sources: list[str]) -> None:
    """``time,pc1,pc2,source`` rows, one per projected cell."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["time", "pc1", "pc2", "source"])
        for t, P, src in zip(times, projections, sources):
            for row in P:
                w.writerow([repr(float(t)), repr(float(row[0])), repr(float(row[1])), src])
