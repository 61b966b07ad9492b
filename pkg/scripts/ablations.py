"""Seeded ablation sweep: full objective vs --ablate iis / --ablate uwp.

Prints per-seed mAMS and MLL on held-out scenes plus the directional summaries.

    python scripts/ablations.py --seeds 0 1 2 --n-train 600 --set epochs=12
"""
import argparse
import json

import numpy as np

from itemized_clip.cli import _parse_set
from itemized_clip.experiments import ablation_sweep, relative_reductions

VARIANTS = {"full": (), "no_iis": ("iis",), "no_uwp": ("uwp",)}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--n-train", type=int, default=600)
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    args = ap.parse_args()
    rows = ablation_sweep(_parse_set(args.set), VARIANTS, args.seeds, args.n_train, verbose=True)
    mams_full = [r["mams"] for r in rows["full"]]
    mams_ab = [r["mams"] for r in rows["no_iis"]]
    mll_full = [r["mll"] for r in rows["full"]]
    mll_ab = [r["mll"] for r in rows["no_uwp"]]
    summary = {
        "mams_full": mams_full, "mams_no_iis": mams_ab,
        "mams_median_reduction": float(np.median(relative_reductions(mams_full, mams_ab))),
        "mll_full": mll_full, "mll_no_uwp": mll_ab,
        "mll_wins": int(sum(a > b for a, b in zip(mll_full, mll_ab))),
    }
    print(json.dumps(summary, indent=2))


if __name__ == "__main__":
    main()
