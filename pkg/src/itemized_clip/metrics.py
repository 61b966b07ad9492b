"""Zero-shot inference, retrieval, segmentation and the item-level analysis metrics.

All metrics use unmasked attention. Inputs are plain arrays: item/prompt
embeddings (n, d) and visual tokens (m, d) or (N, m, d).
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.stats import rankdata

from . import autograd as ag
from .attention import cross_attend_grid, top_indices
from .batching import Study
from .model import ItemizedCLIP, encode_studies, encode_text_array
from .synthdata import COLORS, SHAPES, region_of_mask


# -- core scoring ---------------------------------------------------------

def tcsim_grid(model: ItemizedCLIP, t: np.ndarray, vp: np.ndarray, chunk: int = 64) -> np.ndarray:
    """TCSim of every text against every visual: t (n, d), vp (N, m, d) -> (n, N)."""
    t = np.atleast_2d(np.asarray(t, dtype=np.float64))
    vp = np.asarray(vp, dtype=np.float64)
    out = np.empty((t.shape[0], vp.shape[0]))
    tt = ag.Tensor(t)
    with ag.no_grad():
        for s in range(0, vp.shape[0], chunk):
            z, _ = cross_attend_grid(tt, ag.Tensor(vp[s:s + chunk]), model.cross)
            out[:, s:s + chunk] = ag.cosine_similarity(tt.reshape(t.shape[0], 1, -1), z).data
    return out


def attention_maps(model: ItemizedCLIP, t: np.ndarray, vp: np.ndarray) -> np.ndarray:
    """Head-averaged attention of each text over one visual: (n, d), (m, d) -> (n, m)."""
    t = np.atleast_2d(np.asarray(t, dtype=np.float64))
    with ag.no_grad():
        _, w = cross_attend_grid(ag.Tensor(t), ag.Tensor(np.asarray(vp)[None]), model.cross)
    return w.data[:, 0].mean(axis=1)


def zero_shot_logits(vp: np.ndarray, class_prompts: Sequence[str], model: ItemizedCLIP) -> np.ndarray:
    """logit_k = TCSim(prompt_k, vp). vp (m, d) -> (K,), or (N, m, d) -> (N, K)."""
    if len(class_prompts) < 1:
        raise ValueError("need at least one prompt")
    vp = np.asarray(vp)
    single = vp.ndim == 2
    t = encode_text_array(model, list(class_prompts))
    logits = tcsim_grid(model, t, vp[None] if single else vp).T
    return logits[0] if single else logits


# -- classification metrics ------------------------------------------------

def roc_auc(scores, labels) -> float:
    """Rank-statistic AUC; tied scores count one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC is undefined when only one class is present")
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def balanced_accuracy(pred, truth, n_classes: int | None = None) -> float:
    """Mean per-class recall over the classes present in ``truth``."""
    pred, truth = np.asarray(pred), np.asarray(truth)
    classes = np.unique(truth) if n_classes is None else np.arange(n_classes)
    recalls = [np.mean(pred[truth == c] == c) for c in classes if np.any(truth == c)]
    if not recalls:
        raise ValueError("no labelled examples")
    return float(np.mean(recalls))


def binary_balanced_accuracy(scores, labels, threshold: float = 0.0) -> float:
    pred = (np.asarray(scores) > threshold).astype(int)
    return balanced_accuracy(pred, np.asarray(labels, dtype=int), n_classes=2)


def recall_at_k(scores: np.ndarray, truth, k: int) -> float:
    """Fraction of queries (rows) whose true corpus index (column) ranks in the top k.

    Ties are resolved pessimistically: only strictly higher scores rank ahead.
    """
    scores = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    truth = np.asarray(truth, dtype=np.int64)
    if not 1 <= k <= scores.shape[1]:
        raise ValueError(f"k must be in [1, {scores.shape[1]}], got {k}")
    true_scores = scores[np.arange(len(truth)), truth]
    rank = (scores > true_scores[:, None]).sum(axis=1)
    return float(np.mean(rank < k))


# -- localization -------------------------------------------------------------

def as_token_mask(region, m: int) -> np.ndarray:
    """Boolean (m,) mask from a boolean grid/vector or an index collection."""
    arr = np.asarray(region)
    if arr.dtype == bool:
        arr = arr.reshape(-1)
        if arr.size != m:
            raise ValueError(f"mask has {arr.size} cells, expected {m}")
        return arr
    mask = np.zeros(m, dtype=bool)
    mask[arr.astype(np.int64).reshape(-1)] = True
    return mask


def region_text_retrieval(vp: np.ndarray, region, corpus: Sequence[str] | np.ndarray,
                          model: ItemizedCLIP, top_n: int) -> np.ndarray:
    """Rank corpus texts by TCSim against the region's tokens only.

    ``corpus`` is a list of strings or an (n, d) array of text embeddings.
    Returns corpus indices, best first, ties in corpus order.
    """
    vp = np.asarray(vp)
    keep = as_token_mask(region, vp.shape[0])
    if not keep.any():
        raise ValueError("region is empty")
    t = corpus if isinstance(corpus, np.ndarray) else encode_text_array(model, list(corpus))
    sims = tcsim_grid(model, t, vp[keep][None])[:, 0]
    order = np.argsort(-sims, kind="stable")
    return order[:max(0, min(top_n, len(order)))]


def segment(vp: np.ndarray, prompt: str | np.ndarray, model: ItemizedCLIP, top_n: int) -> np.ndarray:
    """Sorted indices of the ``top_n`` most attended tokens (lower index wins ties)."""
    if top_n < 1:
        raise ValueError("top_n must be >= 1")
    t = encode_text_array(model, [prompt]) if isinstance(prompt, str) else np.atleast_2d(prompt)
    amap = attention_maps(model, t, vp)[0]
    return top_indices(amap, min(top_n, amap.shape[0]))


def iou(pred, gt, m: int | None = None) -> float:
    """|pred & gt| / |pred | gt|; both empty counts as a perfect match."""
    if m is None:
        m = np.asarray(gt).size if np.asarray(gt).dtype == bool else np.asarray(pred).size
    a, b = as_token_mask(pred, m), as_token_mask(gt, m)
    union = int(np.sum(a | b))
    if union == 0:
        return 1.0
    return int(np.sum(a & b)) / union


def mean_iou(pairs: Sequence[tuple]) -> float:
    return float(np.mean([iou(p, g) for p, g in pairs]))


# -- dataset-level evaluation --------------------------------------------------

@dataclass
class EncodedStudies:
    """Cached embeddings of a list of studies: vp per study and item embeddings."""
    studies: list[Study]
    vp: np.ndarray  # (N, m, d)
    item_emb: list[np.ndarray]  # per study (n_i, d)

    @property
    def size(self) -> int:
        return len(self.studies)


def encode_dataset(model: ItemizedCLIP, studies: Sequence[Study]) -> EncodedStudies:
    studies = list(studies)
    _, vp = encode_studies(model, np.stack([s.image for s in studies]))
    texts = [t for s in studies for t in s.items]
    emb = encode_text_array(model, texts)
    bounds = np.cumsum([0] + [len(s.items) for s in studies])
    return EncodedStudies(studies, vp, [emb[a:b] for a, b in zip(bounds[:-1], bounds[1:])])


def _per_study(fn: Callable[[int], object], n: int, threads: int = 1) -> list:
    if threads <= 1:
        return [fn(i) for i in range(n)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, range(n)))


def _cosine_rows(x: np.ndarray) -> np.ndarray:
    unit = x / np.linalg.norm(x, axis=1, keepdims=True)
    return unit @ unit.T


def mams(model: ItemizedCLIP, data: EncodedStudies, threads: int = 1) -> float:
    """Mean cosine similarity of attention maps over unordered item pairs, per study, then over studies."""
    def one(i):
        emb = data.item_emb[i]
        if len(emb) < 2:
            return None
        sim = _cosine_rows(attention_maps(model, emb, data.vp[i]))
        return float(sim[np.triu_indices(len(emb), k=1)].mean())

    vals = [v for v in _per_study(one, data.size, threads) if v is not None]
    if not vals:
        raise ValueError("mAMS needs at least one study with two or more items")
    return float(np.mean(vals))


def study_tcsims(model: ItemizedCLIP, data: EncodedStudies, threads: int = 1) -> list[np.ndarray]:
    """Unmasked TCSim of each study's own items against its own visual."""
    return _per_study(lambda i: tcsim_grid(model, data.item_emb[i], data.vp[i][None])[:, 0],
                      data.size, threads)


def mll(model: ItemizedCLIP, data: EncodedStudies, threads: int = 1) -> tuple[float, float]:
    """Mean over studies of the lowest own-item TCSim; returns (value, value * 100)."""
    value = float(np.mean([s.min() for s in study_tcsims(model, data, threads)]))
    return value, 100.0 * value


def _located_items(data: EncodedStudies):
    for i, s in enumerate(data.studies):
        for j, mask in enumerate(s.masks or []):
            yield i, j, mask


def attention_mass_in_region(model: ItemizedCLIP, data: EncodedStudies, threads: int = 1) -> float:
    """Mean fraction of each item's attention map inside its ground-truth quadrant."""
    def one(i):
        s = data.studies[i]
        if not s.masks:
            return []
        maps = attention_maps(model, data.item_emb[i], data.vp[i])
        return [float(maps[j][region_of_mask(mask).reshape(-1)].sum()) for j, mask in enumerate(s.masks)]

    vals = [v for per in _per_study(one, data.size, threads) for v in per]
    if not vals:
        raise ValueError("no items with ground-truth masks")
    return float(np.mean(vals))


def segmentation_miou(model: ItemizedCLIP, data: EncodedStudies, top_n: int = 4, threads: int = 1) -> float:
    """Dataset mIoU of top-N attention masks: IoU averaged within each study, then across studies."""
    def one(i):
        s = data.studies[i]
        if not s.masks:
            return None
        maps = attention_maps(model, data.item_emb[i], data.vp[i])
        n = min(top_n, maps.shape[1])
        return float(np.mean([iou(top_indices(maps[j], n), mask.reshape(-1))
                              for j, mask in enumerate(s.masks)]))

    vals = [v for v in _per_study(one, data.size, threads) if v is not None]
    if not vals:
        raise ValueError("no items with ground-truth masks")
    return float(np.mean(vals))


def region_retrieval_top1(model: ItemizedCLIP, data: EncodedStudies, threads: int = 1) -> float:
    """Fraction of located items ranked first among their study's items when
    scoring only the tokens of the item's ground-truth mask."""
    def one(i):
        s = data.studies[i]
        if not s.masks or len(s.items) < 2:
            return []
        return [float(region_text_retrieval(data.vp[i], mask, data.item_emb[i], model, 1)[0] == j)
                for j, mask in enumerate(s.masks)]

    vals = [v for per in _per_study(one, data.size, threads) for v in per]
    if not vals:
        raise ValueError("no multi-item studies with masks")
    return float(np.mean(vals))


# -- synthetic zero-shot task -------------------------------------------------

@dataclass
class ZeroShotTask:
    """Classes, one or more prompts per class, and (N, K) binary labels.

    A class logit is the max TCSim over its prompts.
    """
    name: str
    classes: list[str]
    prompts: list[list[str]]
    labels: np.ndarray

    def __post_init__(self):
        if len(self.classes) < 2:
            raise ValueError("a zero-shot task needs at least two classes")
        if len(self.prompts) != len(self.classes) or any(not p for p in self.prompts):
            raise ValueError("every class needs at least one prompt")


def shape_task(studies: Sequence[Study]) -> ZeroShotTask:
    """Shape presence; prompts enumerate colours so the logit is colour-agnostic."""
    labels = np.zeros((len(studies), len(SHAPES)), dtype=bool)
    for i, s in enumerate(studies):
        if s.is_normal:
            continue
        for item in s.items:
            labels[i, SHAPES.index(item.split()[-1])] = True
    prompts = [[f"a {c} {shape}" for c in COLORS] for shape in SHAPES]
    return ZeroShotTask("shape", list(SHAPES), prompts, labels)


def class_logits(task: ZeroShotTask, vp: np.ndarray, model: ItemizedCLIP) -> np.ndarray:
    flat = [p for group in task.prompts for p in group]
    logits = zero_shot_logits(vp, flat, model)
    bounds = np.cumsum([0] + [len(g) for g in task.prompts])
    return np.stack([logits[:, a:b].max(axis=1) for a, b in zip(bounds[:-1], bounds[1:])], axis=1)


def evaluate_zero_shot(task: ZeroShotTask, vp: np.ndarray, model: ItemizedCLIP) -> dict:
    """Per-class AUC, macro AUC, and balanced accuracy of the argmax on
    single-label studies."""
    logits = class_logits(task, vp, model)
    out: dict = {"per_class_auc": {}}
    aucs = []
    for k, name in enumerate(task.classes):
        y = task.labels[:, k]
        if y.all() or not y.any():
            continue
        auc = roc_auc(logits[:, k], y)
        out["per_class_auc"][name] = auc
        aucs.append(auc)
    out["macro_auc"] = float(np.mean(aucs)) if aucs else float("nan")
    single = task.labels.sum(axis=1) == 1
    out["n_single"] = int(single.sum())
    if single.any():
        truth = task.labels[single].argmax(axis=1)
        pred = logits[single].argmax(axis=1)
        out["balanced_accuracy"] = balanced_accuracy(pred, truth)
    else:
        out["balanced_accuracy"] = float("nan")
    return out


def retrieval_recalls(model: ItemizedCLIP, data: EncodedStudies, ks=(1, 5, 10)) -> dict:
    """Item-level retrieval: each located item text against every study image.

    text->image ranks images per item; image->text ranks items per image with
    any of the image's own items counted as a hit.
    """
    t = np.concatenate(data.item_emb)
    owner = np.repeat(np.arange(data.size), [len(e) for e in data.item_emb])
    sims = tcsim_grid(model, t, data.vp)  # (n_items, N)
    out = {}
    for k in ks:
        if k > data.size:
            continue
        out[f"T@{k}"] = recall_at_k(sims, owner, k)
        # image -> text with multiple correct texts: best-ranked own item
        best_own = np.array([sims[owner == i, i].max() for i in range(data.size)])
        rank = (sims.T > best_own[:, None]).sum(axis=1)
        out[f"I@{k}"] = float(np.mean(rank < k))
    return out


# -- report -----------------------------------------------------------------------

def metric_record(name: str, value: float, n: int, chash: str) -> dict:
    return {"name": name, "value": float(value), "n": int(n), "config_hash": chash}
