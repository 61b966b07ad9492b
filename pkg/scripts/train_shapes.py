"""Train on the synthetic shapes set and report zero-shot shape accuracy and grounding.

    python scripts/train_shapes.py --n-train 2000 --set epochs=30
"""
import argparse
import json

from itemized_clip.cli import _parse_set
from itemized_clip.config import build_config
from itemized_clip.experiments import grounding, run_training, shape_accuracy


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n-train", type=int, default=2000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    args = ap.parse_args()
    cfg = build_config(dict(_parse_set(args.set), seed=args.seed))
    print("config", cfg.digest(), flush=True)
    res = run_training(cfg, args.n_train, verbose=True)
    zs = shape_accuracy(res.model)
    report = {"seconds": round(res.seconds, 1), "loss_ratio": res.loss_ratio(),
              "balanced_accuracy": zs["balanced_accuracy"], "macro_auc": zs["macro_auc"],
              **grounding(res.model)}
    print(json.dumps(report, indent=2))


if __name__ == "__main__":
    main()
