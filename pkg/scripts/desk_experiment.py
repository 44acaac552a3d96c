"""Desk-scale run: corpus, training, Laplace fit, tuning and the RMA/IoU tables.

    python scripts/desk_experiment.py --out runs/desk [--S 100] [--kind fisher]

Writes the dataset, checkpoint, posterior and report into ``--out`` and
prints per-class RMA and IoU for the MAP map and each percentile.
"""

import argparse
import logging
import time
from pathlib import Path

from bxpqd.laplace import DEFAULT_GRID, fit_laplace, save_posterior, tune_prior_precision
from bxpqd.metrics import evaluate
from bxpqd.nn.model import desk_arch, save_checkpoint
from bxpqd.nn.train import TrainConfig, train
from bxpqd.occlusion import OcclusionConfig
from bxpqd.synth import CLASS_NAMES, CorpusConfig, corpus_dataset, save_dataset


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", default="runs/desk")
    ap.add_argument("--per-class", type=int, default=200)
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--kind", choices=["fisher", "ggn"], default="fisher")
    ap.add_argument("--baseline", choices=["zeros", "nominal_sine"], default="zeros")
    ap.add_argument("--S", type=int, default=100)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    t0 = time.perf_counter()
    ds = corpus_dataset(CorpusConfig(per_class=args.per_class, seed=args.seed))
    save_dataset(ds, out / "data.pqds")
    params, log = train(desk_arch(), ds.arrays("train"), ds.arrays("val"), TrainConfig(epochs=args.epochs, seed=args.seed))
    ckpt_hash = save_checkpoint(params, out / "model.ckpt", log)
    print(f"trained in {time.perf_counter() - t0:.0f}s, best epoch {log['best_epoch']}")

    post = fit_laplace(params, ds.arrays("train"), 1.0, args.kind)
    lam, table = tune_prior_precision(post, ds.arrays("val"), DEFAULT_GRID, n_samples=20, seed=args.seed,
                                      tolerance=0.01)
    for row in table:
        print(f"  prior precision {row['prior_precision']:>9g}  val ensemble acc {row['mean_acc']:.4f}")
    post = post.with_prior_precision(lam)
    save_posterior(post, out / "posterior.pqla", ckpt_hash)
    print(f"chosen prior precision {lam:g}")

    rep = evaluate(params, post, ds.split("test"), cfg=OcclusionConfig(baseline_kind=args.baseline), S=args.S,
                   seed=args.seed)
    (out / "report.csv").write_text(rep.to_csv())
    (out / "report.json").write_text(rep.to_json())
    for k, v in sorted(rep.accuracy.items()):
        print(f"{k:24s} {v:.4f}")
    head = " ".join(f"{v:>7s}" for v in rep.variants)
    for metric in ("rma", "iou"):
        print(f"\n{metric.upper():22s} {head}")
        for cid in sorted(rep.per_class):
            print(f"{CLASS_NAMES[cid]:22s} " + " ".join(f"{rep.score(cid, v, metric):7.4f}" for v in rep.variants))
        print(f"{'Total':22s} " + " ".join(f"{rep.total(v, metric):7.4f}" for v in rep.variants))


if __name__ == "__main__":
    main()
