"""Command-line entry point: train, evaluate, generate, perturb, synth, pca.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical divergence.
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
import warnings
from pathlib import Path

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4


def _limit_threads(n: int | None) -> None:
    if not n:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMBA_NUM_THREADS"):
        os.environ[var] = str(n)


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="snapgp", description=__doc__.splitlines()[0])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=None, help="cap on worker threads")
    p.add_argument("--config", default=None, help="key = value run configuration file")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="fit a model")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="output directory")

    e = sub.add_parser("evaluate", help="exact W2 on held-out times")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True, help="CSV path")
    e.add_argument("--n-generate", type=int, default=None)
    e.add_argument("--n-seeds", type=int, default=None)
    e.add_argument("--times", default=None, help="comma list overriding the split's test times")
    e.add_argument("--baseline", action="store_true",
                   help="also score the copy-nearest-training-snapshot baseline")

    g = sub.add_parser("generate", help="sample cells at given times")
    g.add_argument("--checkpoint", required=True)
    g.add_argument("--times", required=True, help="comma list of times")
    g.add_argument("--n", type=int, default=2000)
    g.add_argument("--category", type=int, default=None)
    g.add_argument("--out", required=True)
    g.add_argument("--mean-trajectory", default=None,
                   help="optional CSV of the decoded mean path on a 100-point grid")

    q = sub.add_parser("perturb", help="steer the model toward a perturbed target")
    q.add_argument("--checkpoint", required=True)
    q.add_argument("--data", required=True)
    q.add_argument("--time", type=float, required=True)
    q.add_argument("--mode", choices=["gene-scaling", "cell-type"], default="gene-scaling")
    q.add_argument("--genes", default="", help="comma list of 0-based gene indices")
    q.add_argument("--scales", default="", help="comma list of non-negative factors")
    q.add_argument("--label", default=None)
    q.add_argument("--space", choices=["log", "counts"], default="log")
    q.add_argument("--eta", type=float, default=1e-3)
    q.add_argument("--iterations", type=int, default=100)
    q.add_argument("--kl-anchor", action="store_true")
    q.add_argument("--n", type=int, default=2000, help="generated cells for the fraction table")
    q.add_argument("--classifier-epochs", type=int, default=500)
    q.add_argument("--out-trace", required=True)
    q.add_argument("--out-fractions", required=True)
    q.add_argument("--out-checkpoint", default=None)

    s = sub.add_parser("synth", help="write a synthetic dataset with ground truth")
    s.add_argument("--L", type=int, default=3)
    s.add_argument("--G", type=int, default=20)
    s.add_argument("--n-per-time", type=int, default=500)
    s.add_argument("--n-times", type=int, default=8)
    s.add_argument("--profile", choices=["constant", "increasing", "bump"], default="bump")
    s.add_argument("--classes", type=int, default=0)
    s.add_argument("--class-separation", type=float, default=3.0)
    s.add_argument("--out", required=True)
    s.add_argument("--truth", default=None, help="ground-truth JSON path")

    c = sub.add_parser("pca", help="project observed (and generated) cells on 2 PCs")
    c.add_argument("--data", required=True)
    c.add_argument("--checkpoint", default=None)
    c.add_argument("--n", type=int, default=500, help="generated cells per time")
    c.add_argument("--out", required=True)
    return p


def _ints(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def _load_data(path, cfg):
    from . import data
    ds = data.load_csv(path, identity=cfg.identity)
    return data.normalize_log1p(ds) if cfg.normalize else ds


def _split(ds, cfg):
    from . import data
    heldout = list(cfg.heldout) if cfg.heldout or cfg.task == "custom" else None
    try:
        return data.make_split(ds, cfg.task, heldout)
    except ValueError as exc:
        raise data.DataError(str(exc)) from None


def _load_checkpoint(path):
    from . import data, model
    try:
        return model.load_model(path)
    except (OSError, ValueError, KeyError) as exc:
        raise data.DataError(f"cannot load checkpoint {path}: {exc}") from None


def cmd_train(args, cfg) -> int:
    from . import model as mdl
    from . import training
    ds = _load_data(args.data, cfg)
    split = _split(ds, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    res = training.fit(ds, split, cfg.model_config(ds.G), cfg.train_config(args.seed))
    mdl.save_model(out / "model.bin", res.model, {
        "split": split.to_dict(), "best_iteration": res.report.best_iteration,
        "best_val_loss": res.report.best_val_loss, "seed": args.seed})
    res.report.write_csv(out / "train_log.csv")
    (out / "resolved_config.txt").write_text(cfg.to_text(), encoding="utf-8")
    print(f"best iteration {res.report.best_iteration}, validation loss "
          f"{res.report.best_val_loss:.6g}, {res.report.wall_clock:.1f}s")
    return EXIT_OK


def cmd_evaluate(args, cfg) -> int:
    import numpy as np

    from . import data
    from .model import generate_population
    from .transport import w2_distance
    mdl = _load_checkpoint(args.checkpoint)
    ds = _load_data(args.data, cfg)
    split = _split(ds, cfg)
    times = _floats(args.times) if args.times else list(split.test_times)
    n_gen = args.n_generate or cfg.n_generate
    n_seeds = args.n_seeds or cfg.n_seeds
    base = data.baseline_nearest_snapshot(split, ds) if args.baseline else {}
    rows = []
    for t in times:
        obs = ds.cloud(ds.index_of(t))
        for k in range(n_seeds):
            seed = args.seed + k
            try:
                w = w2_distance(generate_population(mdl, t, n_gen, seed=seed), obs)
            except ValueError as exc:
                warnings.warn(f"time {t:g} unavailable: {exc}", stacklevel=1)
                rows.append([t, "unavailable", obs.n, n_gen, seed])
                continue
            rows.append([t, repr(w), obs.n, n_gen, seed])
        ws = [float(r[1]) for r in rows if r[0] == t and r[1] != "unavailable" and r[4] != "baseline"]
        if ws:
            print(f"time {t:g}: W2 mean {np.mean(ws):.6g} sd {np.std(ws):.6g} over {len(ws)} seeds")
        if t in base:
            wb = w2_distance(base[t], obs)
            rows.append([t, repr(wb), obs.n, base[t].n, "baseline"])
            print(f"time {t:g}: baseline W2 {wb:.6g}")
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["time", "w2", "n_observed", "n_generated", "seed"])
        w.writerows(rows)
    return EXIT_OK


def cmd_generate(args, cfg) -> int:
    import numpy as np

    from .model import generate_population, mean_trajectory
    mdl = _load_checkpoint(args.checkpoint)
    times = _floats(args.times)
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["time"] + [f"g{j + 1}" for j in range(mdl.config.G)])
        for k, t in enumerate(times):
            pc = generate_population(mdl, t, args.n, c=args.category, seed=args.seed + k)
            for row in np.asarray(pc.points):
                w.writerow([repr(float(t))] + [repr(float(v)) for v in row])
    if args.mean_trajectory:
        lo, hi = min(times), max(times)
        grid = np.linspace(lo, hi, 100) if hi > lo else np.array([lo])
        path = mean_trajectory(mdl, grid, c=args.category)
        with open(args.mean_trajectory, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["time"] + [f"g{j + 1}" for j in range(mdl.config.G)])
            for t, row in zip(grid, path):
                w.writerow([repr(float(t))] + [repr(float(v)) for v in row])
    return EXIT_OK


def cmd_perturb(args, cfg) -> int:
    from . import data, perturb
    from .model import save_model
    mdl = _load_checkpoint(args.checkpoint)
    ds = _load_data(args.data, cfg)
    k = ds.index_of(args.time)
    spec = perturb.PerturbSpec(args.time, args.mode, _ints(args.genes), _floats(args.scales),
                               args.label, args.space)
    labels = ds.labels[k] if ds.labels is not None else None
    target = perturb.perturb_target(ds.cloud(k), spec, labels)
    res = perturb.steer(mdl, target, args.time, eta=args.eta, iterations=args.iterations,
                        blur=cfg.blur, scaling=cfg.scaling, seed=args.seed,
                        kl_anchor=args.kl_anchor)
    with open(args.out_trace, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "cost"])
        for i, c in enumerate(res.trace, start=1):
            w.writerow([i, repr(c)])
    if labels is None or len({str(x) for x in labels if str(x)}) < 2:
        raise data.DataError(f"time {args.time:g} needs at least two labeled classes for the classifier")
    keep = labels != ""
    clf, rep = perturb.train_classifier(ds.matrices[k][keep], labels[keep],
                                        epochs=args.classifier_epochs, seed=args.seed)
    print(f"classifier training accuracy {rep.train_accuracy:.4f}")
    before = perturb.fraction_table(clf, mdl, args.time, args.n, seed=args.seed)
    after = perturb.fraction_table(clf, res.model, args.time, args.n, seed=args.seed)
    with open(args.out_fractions, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["class", "before", "after"])
        for c in clf.classes:
            w.writerow([c, repr(before[c]), repr(after[c])])
    if args.out_checkpoint:
        save_model(args.out_checkpoint, res.model)
    return EXIT_OK


def cmd_synth(args, cfg) -> int:
    import numpy as np

    from . import data
    ds, truth = data.synth_generate(args.L, args.G, args.n_per_time, np.arange(args.n_times),
                                    args.seed, args.profile, data.SynthSpec(n_classes=args.classes,
                                                                 class_separation=args.class_separation))
    data.save_csv(args.out, ds)
    if args.truth:
        Path(args.truth).write_text(truth.to_json(), encoding="utf-8")
    return EXIT_OK


def cmd_pca(args, cfg) -> int:
    from . import data
    from .model import generate_population
    ds = _load_data(args.data, cfg)
    clouds, times, sources = [], [], []
    for k, t in enumerate(ds.times):
        clouds.append(ds.matrices[k])
        times.append(float(t))
        sources.append("observed")
    if args.checkpoint:
        mdl = _load_checkpoint(args.checkpoint)
        for k, t in enumerate(ds.times):
            clouds.append(generate_population(mdl, float(t), args.n, seed=args.seed + k).points)
            times.append(float(t))
            sources.append("generated")
    res = data.pca_project(clouds, 2, seed=args.seed)
    data.write_pca_csv(args.out, times, res.projections, sources)
    return EXIT_OK


COMMANDS = {"train": cmd_train, "evaluate": cmd_evaluate, "generate": cmd_generate,
            "perturb": cmd_perturb, "synth": cmd_synth, "pca": cmd_pca}


_OUTPUT_ARGS = ("out", "truth", "mean_trajectory", "out_trace", "out_fractions", "out_checkpoint")


def _make_parents(args) -> None:
    for name in _OUTPUT_ARGS:
        path = getattr(args, name, None)
        if path and not (name == "out" and args.command == "train"):
            Path(path).parent.mkdir(parents=True, exist_ok=True)


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    _limit_threads(args.threads)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    from .config import ConfigError, RunConfig, load_config
    from .data import DataError
    from .perturb import SteeringError
    from .training import DivergenceError
    try:
        cfg = load_config(args.config) if args.config else RunConfig()
        _make_parents(args)
        return COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (DivergenceError, SteeringError) as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
