"""Reusable experiment runners behind scripts/ and the acceptance suite."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import metrics as M
from .config import TrainConfig, build_config
from .cli import apply_ablations
from .model import ItemizedCLIP
from .synthdata import make_studies
from .trainer import smoothed, train

TRAIN_SEED = 0
TEST_SEED = 99


@dataclass
class RunResult:
    model: ItemizedCLIP
    cfg: TrainConfig
    losses: list[float]
    seconds: float

    def loss_ratio(self, window: int = 20) -> float:
        s = smoothed(self.losses, window)
        return float(s[-1] / s[0])


def run_training(cfg: TrainConfig, n_train: int, data_seed: int = TRAIN_SEED, verbose: bool = False) -> RunResult:
    studies = make_studies(n_train, data_seed)
    t0 = time.perf_counter()

    def log(rec):
        if verbose and rec["step"] % 50 == 0:
            print(f"step {rec['step']} total {rec['total']:.4f}", flush=True)

    model, _, records = train(cfg, studies, on_step=log)
    return RunResult(model, cfg, [r["total"] for r in records], time.perf_counter() - t0)


def shape_accuracy(model: ItemizedCLIP, n_test: int = 200, seed: int = TEST_SEED) -> dict:
    """Zero-shot shape classification on fresh single-shape scenes."""
    studies = make_studies(n_test, seed, normal_frac=0.0, max_shapes=1)
    data = M.encode_dataset(model, studies)
    return M.evaluate_zero_shot(M.shape_task(studies), data.vp, model)


def grounding(model: ItemizedCLIP, n_test: int = 200, seed: int = TEST_SEED + 1, top_n: int = 4) -> dict:
    studies = make_studies(n_test, seed, normal_frac=0.0)
    data = M.encode_dataset(model, studies)
    return {"attention_mass": M.attention_mass_in_region(model, data),
            f"miou_top{top_n}": M.segmentation_miou(model, data, top_n)}


def analysis_metrics(model: ItemizedCLIP, n_test: int = 200, seed: int = TEST_SEED + 2) -> dict:
    studies = make_studies(n_test, seed)
    data = M.encode_dataset(model, studies)
    return {"mams": M.mams(model, data), "mll": M.mll(model, data)[0]}


def ablation_config(base: dict, ablate=(), seed: int = 0) -> TrainConfig:
    cfg = build_config(dict(base, seed=seed))
    return apply_ablations(cfg, ablate)


def ablation_sweep(base: dict, variants: dict[str, tuple], seeds, n_train: int,
                   verbose: bool = False) -> dict[str, list[dict]]:
    """Train every (variant, seed) pair and collect mAMS / MLL on held-out data."""
    out: dict[str, list[dict]] = {name: [] for name in variants}
    for seed in seeds:
        for name, ablate in variants.items():
            res = run_training(ablation_config(base, ablate, seed), n_train)
            row = analysis_metrics(res.model)
            row.update(seed=seed, seconds=res.seconds)
            if verbose:
                print(name, row, flush=True)
            out[name].append(row)
    return out


def relative_reductions(full: list[float], ablated: list[float]) -> np.ndarray:
    full, ablated = np.asarray(full), np.asarray(ablated)
    return (ablated - full) / np.abs(ablated)
