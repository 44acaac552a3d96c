"""Monte-Carlo convergence of the mean explanation for one test record.

    python scripts/mc_probe.py --run runs/desk --cls Interruption

Prints the distance of each S-prefix mean from the largest-S mean, and the
empirical standard error over independent streams next to the 1/sqrt(S) law.
"""

import argparse
from pathlib import Path

import numpy as np

from bxpqd.bexplain import mc_convergence_probe, standard_error_curve
from bxpqd.laplace import load_posterior
from bxpqd.nn.model import load_checkpoint
from bxpqd.occlusion import OcclusionConfig
from bxpqd.synth import CLASS_IDS, load_dataset


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--run", default="runs/desk")
    ap.add_argument("--cls", default="Interruption", choices=sorted(CLASS_IDS))
    ap.add_argument("--repeats", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    run = Path(args.run)
    params, _, h = load_checkpoint(run / "model.ckpt")
    post = load_posterior(run / "posterior.pqla", params, h)
    rec = next(r for r in load_dataset(run / "data.pqds").split("test") if r.label == CLASS_IDS[args.cls])
    cfg = OcclusionConfig()

    for row in mc_convergence_probe(post, rec.x, cfg, [10, 25, 50, 100, 200, 400], args.seed):
        print(f"S={row['S']:4d}  |mean_S - mean_400| = {row['error']:.3e}")
    S_list = [25, 50, 100, 200]
    se = standard_error_curve(post, rec.x, cfg, S_list, args.repeats, args.seed)
    for S in S_list:
        print(f"S={S:4d}  se {se[S]:.3e}  1/sqrt(S) law from S=25: {se[25] * np.sqrt(25 / S):.3e}")


if __name__ == "__main__":
    main()
