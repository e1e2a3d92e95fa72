"""Steer a fitted model toward one cell type and report classified fractions.

    python scripts/steering_demo.py --target type0 --iterations 100
"""
import argparse
import csv
from pathlib import Path

from snapgp import data as sd
from snapgp import model as gm
from snapgp import perturb as pt
from snapgp import training as tr


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--separation", type=float, default=5.0)
    ap.add_argument("--fit-iterations", type=int, default=60)
    ap.add_argument("--time", type=float, default=5.0)
    ap.add_argument("--target", default="type0")
    ap.add_argument("--eta", type=float, default=1e-3)
    ap.add_argument("--iterations", type=int, default=100)
    ap.add_argument("--trace", type=Path, default=Path("results/steer_trace.csv"))
    args = ap.parse_args()

    ds, _ = sd.synth_generate(2, 10, 500, range(6), seed=args.seed,
                              spec=sd.SynthSpec(n_classes=2, class_separation=args.separation))
    fit = tr.fit(ds, sd.make_split(ds, "custom", []), gm.ModelConfig(L=2, G=10, M=8),
                 tr.TrainConfig(max_iterations=args.fit_iterations, log_every=0))
    k = ds.index_of(args.time)
    clf, rep = pt.train_classifier(ds.matrices[k], ds.labels[k])
    print(f"classifier train accuracy {rep.train_accuracy:.3f}")
    target = pt.perturb_target(ds.cloud(k), pt.PerturbSpec(args.time, mode="cell-type", label=args.target),
                               ds.labels[k])
    res = pt.steer(fit.model, target, args.time, eta=args.eta, iterations=args.iterations)
    before = pt.fraction_table(clf, fit.model, args.time, 2000, seed=1)
    after = pt.fraction_table(clf, res.model, args.time, 2000, seed=1)
    for c in before:
        print(f"{c}: {before[c]:.3f} -> {after[c]:.3f}")
    sm = pt.smoothed(res.trace, 10)
    if sm.size:
        print(f"smoothed cost {sm[0]:.3f} -> {sm[-1]:.3f}")
    args.trace.parent.mkdir(parents=True, exist_ok=True)
    with args.trace.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "cost"])
        w.writerows(enumerate(res.trace, start=1))


if __name__ == "__main__":
    main()
