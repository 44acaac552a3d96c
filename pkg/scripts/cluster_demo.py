"""Cluster S sampled explanations of one test record into k groups.

    python scripts/cluster_demo.py --run runs/desk --cls Sag --S 500 --k 5

Needs the outputs of desk_experiment.py. Writes ``cluster_<cls>.json`` and an
SVG with the signal and one strip per centroid.
"""

import argparse
import time
from pathlib import Path

import numpy as np

from bxpqd.bexplain import cluster_explanations, sample_explanations
from bxpqd.laplace import load_posterior
from bxpqd.nn.model import load_checkpoint
from bxpqd.occlusion import OcclusionConfig
from bxpqd.svg import render
from bxpqd.synth import CLASS_IDS, load_dataset


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--run", default="runs/desk")
    ap.add_argument("--cls", default="Sag", choices=sorted(CLASS_IDS))
    ap.add_argument("--S", type=int, default=500)
    ap.add_argument("--k", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    run = Path(args.run)
    params, _, h = load_checkpoint(run / "model.ckpt")
    post = load_posterior(run / "posterior.pqla", params, h)
    rec = next(r for r in load_dataset(run / "data.pqds").split("test") if r.label == CLASS_IDS[args.cls])

    t0 = time.perf_counter()
    ens = sample_explanations(post, rec.x, args.S, OcclusionConfig(), args.seed)
    res = cluster_explanations(ens, args.k, args.seed)
    print(f"S={args.S} k={args.k} in {time.perf_counter() - t0:.1f}s, inertia {res.inertia:.4g}")
    sizes = np.bincount(res.assignment, minlength=args.k)
    for c in range(args.k):
        in_mask = res.centroids[c][rec.mask.astype(bool)].clip(0).sum() / max(res.centroids[c].clip(0).sum(), 1e-300)
        print(f"  cluster {c}: {sizes[c]:4d} members, positive mass inside mask {in_mask:.3f}")
    (run / f"cluster_{args.cls}.json").write_text(res.to_json())
    strips = {f"c{c} ({sizes[c]})": res.centroids[c] for c in range(args.k)}
    strips["mask"] = rec.mask.astype(float)
    (run / f"cluster_{args.cls}.svg").write_text(render(rec.x, strips, title=f"{args.cls}: {args.k} centroids"))


if __name__ == "__main__":
    main()
