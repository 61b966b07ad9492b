"""Command-line entry point: gen-data, train, eval, visualize.

Every command prints a single ``config <hash>`` line first. Exit codes: 0 ok,
2 usage/config/data errors, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import metrics as M
from .config import ConfigError, TrainConfig, build_config, read_overrides
from .encoders import Vocabulary
from .synthdata import DatasetError, generate_dataset, load_dataset, split_dataset, write_pgm, write_ppm
from .model import encode_studies, encode_text_array
from .trainer import LOG_FIELDS, format_log_line, load_checkpoint, train

EXIT_USAGE = 2
EXIT_NUMERIC = 3

ABLATIONS = ("ila", "iis", "mps", "kta", "uwp", "mask")
TASKS = ("zs", "retrieval", "mams", "mll", "seg", "region")


class UsageError(Exception):
    pass


def _hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


def _echo(digest: str) -> None:
    print(f"config {digest}", flush=True)


def apply_ablations(cfg: TrainConfig, ablate) -> TrainConfig:
    """Zero-weight (or neutralize) the named components in place."""
    loss = cfg.loss
    for name in ablate or ():
        if name == "ila":
            loss.lambda_ila = 0.0
        elif name == "iis":
            loss.lambda_iis = 0.0
        elif name == "mps":
            loss.lambda_mps = 0.0
        elif name == "kta":
            loss.lambda_kta = 0.0
        elif name == "uwp":
            loss.w_uwp = 1.0
        elif name == "mask":
            loss.p_mask = 0.0
        else:
            raise ConfigError(f"unknown ablation {name!r}; valid: {', '.join(ABLATIONS)}")
    cfg.validate()
    return cfg


def _parse_set(pairs) -> dict:
    """``a.b=value`` overrides; values are parsed as JSON when possible."""
    out: dict = {}
    for pair in pairs or ():
        if "=" not in pair:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        key, raw = pair.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = out
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
    return out


def _merge(base: dict, extra: dict) -> dict:
    out = dict(base)
    for k, v in extra.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def resolve_train_config(args) -> TrainConfig:
    overrides = read_overrides(args.config) if args.config else {}
    overrides = _merge(overrides, _parse_set(args.set))
    if args.seed is not None:
        overrides["seed"] = args.seed
    cfg = build_config(overrides)
    return apply_ablations(cfg, args.ablate)


# -- commands -------------------------------------------------------------

def cmd_gen_data(args) -> int:
    _echo(_hash({"command": "gen-data", "num": args.num, "seed": args.seed,
                 "normal_frac": args.normal_frac}))
    if not 0 <= args.normal_frac <= 1:
        raise UsageError("--normal-frac must be in [0, 1]")
    try:
        manifest = generate_dataset(args.num, args.out, args.seed, args.normal_frac)
    except OSError as exc:
        raise UsageError(f"cannot write dataset to {args.out}: {exc}") from exc
    studies = load_dataset(manifest)
    n_normal = sum(s.is_normal for s in studies)
    n_items = sum(len(s.items) for s in studies)
    print(f"manifest {manifest}")
    print(f"studies {len(studies)} normal {n_normal} items {n_items}")
    return 0


def cmd_train(args) -> int:
    cfg = resolve_train_config(args)
    _echo(cfg.digest())
    studies = load_dataset(args.data)
    train_set, _ = split_dataset(studies, cfg.eval_frac)
    vocab = Vocabulary.from_texts(t for s in studies for t in s.items)
    log_path = Path(args.log) if args.log else Path(str(args.out) + ".log")
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    with open(log_path, "w", encoding="utf-8") as log:
        log.write("\t".join(LOG_FIELDS) + "\n")

        def on_step(record):
            line = format_log_line(record)
            log.write(line + "\n")
            if not args.quiet and record["step"] % args.print_every == 0:
                print(line, flush=True)

        _, _, records = train(cfg, train_set, out_path=args.out, on_step=on_step, vocab=vocab)
    print(f"checkpoint {args.out} steps {len(records)} final_total {records[-1]['total']:.6g}")
    return 0


def _eval_studies(args, cfg: TrainConfig):
    studies = load_dataset(args.data)
    if args.split == "all":
        return studies
    _, held = split_dataset(studies, cfg.eval_frac)
    if not held:
        raise UsageError("evaluation split is empty; use --split all or a larger dataset")
    return held


def parse_tasks(spec: str) -> list[str]:
    tasks = [t.strip() for t in spec.split(",") if t.strip()]
    bad = [t for t in tasks if t not in TASKS]
    if bad or not tasks:
        raise UsageError(f"unknown task(s) {', '.join(bad) or '(none)'}; valid tasks: {', '.join(TASKS)}")
    return tasks


def run_eval(model, cfg: TrainConfig, studies, tasks, threads: int = 1, top_n: int = 4) -> list[dict]:
    chash = cfg.digest()
    data = M.encode_dataset(model, studies)
    located = sum(len(s.masks or []) for s in studies)
    report = []

    def add(name, value, n):
        value = float(value)
        if not np.isfinite(value):
            raise FloatingPointError(f"metric {name} is not finite")
        report.append(M.metric_record(name, value, n, chash))

    for task in tasks:
        if task == "zs":
            zs_task = M.shape_task(studies)
            res = M.evaluate_zero_shot(zs_task, data.vp, model)
            for cls, auc in res["per_class_auc"].items():
                add(f"zs/auc/{cls}", auc, len(studies))
            add("zs/macro_auc", res["macro_auc"], len(studies))
            add("zs/balanced_accuracy", res["balanced_accuracy"], res["n_single"])
        elif task == "retrieval":
            for name, value in M.retrieval_recalls(model, data).items():
                add(f"retrieval/{name}", value, data.size)
        elif task == "mams":
            n = sum(len(s.items) >= 2 for s in studies)
            add("mams", M.mams(model, data, threads), n)
        elif task == "mll":
            value, x100 = M.mll(model, data, threads)
            add("mll", value, data.size)
            add("mll_x100", x100, data.size)
        elif task == "seg":
            add(f"seg/miou_top{top_n}", M.segmentation_miou(model, data, top_n, threads),
                sum(bool(s.masks) for s in studies))
        elif task == "region":
            add("region/attention_mass", M.attention_mass_in_region(model, data, threads), located)
            n_multi = sum(len(s.masks or []) for s in studies if len(s.items) >= 2)
            add("region/retrieval_top1", M.region_retrieval_top1(model, data, threads), n_multi)
    return report


def cmd_eval(args) -> int:
    tasks = parse_tasks(args.tasks)
    model, cfg, _ = load_checkpoint(args.ckpt)
    _echo(cfg.digest())
    studies = _eval_studies(args, cfg)
    report = run_eval(model, cfg, studies, tasks, args.threads, args.top_n)
    for rec in report:
        print(json.dumps(rec, sort_keys=True))
    if args.report:
        doc = {"config_hash": cfg.digest(), "tasks": tasks, "metrics": report}
        Path(args.report).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return 0


def heatmap(amap: np.ndarray, image_size: int) -> np.ndarray:
    """(m,) attention -> (H, W) uint8, min-max scaled, nearest-neighbour upsampled."""
    side = int(round(np.sqrt(amap.size)))
    grid = amap.reshape(side, side)
    lo, hi = grid.min(), grid.max()
    scaled = np.zeros_like(grid) if hi - lo <= 0 else (grid - lo) / (hi - lo)
    pix = np.rint(scaled * 255).astype(np.uint8)
    rep = image_size // side
    return np.repeat(np.repeat(pix, rep, axis=0), rep, axis=1)


def overlay(image: np.ndarray, heat: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    red = np.zeros_like(image, dtype=np.float64)
    red[..., 0] = heat
    return np.rint((1 - alpha) * image.astype(np.float64) + alpha * red).astype(np.uint8)


def cmd_visualize(args) -> int:
    model, cfg, _ = load_checkpoint(args.ckpt)
    _echo(cfg.digest())
    studies = {s.id: s for s in load_dataset(args.data)}
    if args.study not in studies:
        raise UsageError(f"study {args.study!r} not found")
    study = studies[args.study]
    if not 0 <= args.item < len(study.items):
        raise UsageError(f"study {args.study} has {len(study.items)} items; --item {args.item} is out of range")
    _, vp = encode_studies(model, study.image[None])
    t = encode_text_array(model, [study.items[args.item]])
    amap = M.attention_maps(model, t, vp[0])[0]
    heat = heatmap(amap, study.image.shape[0])
    write_pgm(args.out, heat)
    print(f"heatmap {args.out} item {study.items[args.item]!r}")
    if args.overlay:
        write_ppm(args.overlay, overlay(study.image, heat))
        print(f"overlay {args.overlay}")
    return 0


# -- parser ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="itemized-clip", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic shapes dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--num", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--normal-frac", type=float, default=0.1)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train from scratch and write a checkpoint")
    p.add_argument("--config", help="JSON config (all keys optional)")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ablate", action="append", choices=ABLATIONS, default=[])
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="config override, e.g. --set epochs=5 --set loss.p_mask=0.2")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--log", help="step log path (default: <out>.log)")
    p.add_argument("--print-every", type=int, default=50)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the held-out split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--tasks", default=",".join(TASKS))
    p.add_argument("--split", choices=("eval", "all"), default="eval")
    p.add_argument("--top-n", type=int, default=4)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--report", help="also write the report as a JSON document")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("visualize", help="export an item's attention heatmap")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--study", required=True)
    p.add_argument("--item", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--overlay")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_visualize)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else 0
    try:
        return args.func(args)
    except (ConfigError, UsageError, DatasetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FloatingPointError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
