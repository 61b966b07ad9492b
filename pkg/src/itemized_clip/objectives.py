"""The four training objectives (ILA, IIS, MPS, KTA) and their weighted sum.

All cross-attention readouts are computed on the full (item, visual) grid of
a batch; each loss then gathers the pairs it needs.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .attention import attend, attention_logits, key_token_mask, project_visual, sample_mask
from .autograd import Tensor
from .config import LossWeights
from .model import EncodedBatch, ItemizedCLIP


def siglip_pair(k, z, tau_log, bias) -> Tensor:
    """log sigmoid(z * (exp(tau_log) * k - bias)); losses negate and sum these."""
    return ag.log_sigmoid(ag.as_tensor(z) * (ag.exp(ag.as_tensor(tau_log)) * k - bias))


def uwp_weights(tcsims, w_uwp: float) -> np.ndarray:
    """w_uwp at the first argmin, 1 elsewhere."""
    tcsims = np.asarray(tcsims, dtype=np.float64)
    if tcsims.size == 0:
        raise ValueError("uwp_weights needs at least one similarity")
    w = np.ones_like(tcsims)
    w[int(np.argmin(tcsims))] = w_uwp
    return w


def study_uwp_weights(pos_sims: np.ndarray, item_study: np.ndarray, w_uwp: float) -> np.ndarray:
    w = np.ones_like(pos_sims)
    for s in np.unique(item_study):
        idx = np.flatnonzero(item_study == s)
        w[idx] = uwp_weights(pos_sims[idx], w_uwp)
    return w


def negative_pairs(enc: EncodedBatch) -> tuple[np.ndarray, np.ndarray]:
    """(text item index, visual index) for every valid sampled negative."""
    k, i = np.nonzero(enc.valid_neg)
    return enc.neg_item[k], i


def sample_pair_masks(enc: EncodedBatch, weights: LossWeights, heads: int,
                      rng: np.random.Generator) -> np.ndarray | None:
    """Independent visibility mask for every (item, visual) pair: (n, B, h, m)."""
    if weights.p_mask == 0:
        return None
    n, b, m = enc.t.shape[0], enc.size, enc.vp.shape[1]
    return sample_mask(weights.p_mask, m, heads, rng, shape=(n, b), shared=weights.shared_mask)


def _alignment_loss(sims: Tensor, enc: EncodedBatch, tau_log: Tensor, bias: Tensor,
                    pos_weights: np.ndarray | None = None) -> Tensor:
    n = sims.shape[0]
    pos = sims[np.arange(n), enc.item_study]
    pos_terms = siglip_pair(pos, 1.0, tau_log, bias)
    if pos_weights is not None:
        pos_terms = pos_terms * pos_weights
    total = pos_terms.sum()
    texts, visuals = negative_pairs(enc)
    if len(texts):
        neg = sims[texts, visuals]
        total = total + siglip_pair(neg, -1.0, tau_log, bias).sum()
    return total * (-1.0 / enc.size)


def loss_ila(sims_masked: Tensor, enc: EncodedBatch, model: ItemizedCLIP, w_uwp: float) -> tuple[Tensor, np.ndarray]:
    pos = sims_masked.data[np.arange(sims_masked.shape[0]), enc.item_study]
    w = study_uwp_weights(pos, enc.item_study, w_uwp)
    return _alignment_loss(sims_masked, enc, model.tau_log, model.logit_bias, w), w


def loss_iis(z_masked: Tensor, enc: EncodedBatch, model: ItemizedCLIP) -> tuple[Tensor, np.ndarray]:
    """Own-visual readout of item j against every sibling text item k."""
    n = z_masked.shape[0]
    readout = z_masked[np.arange(n), enc.item_study]  # v^tc for each item's own study
    same = enc.item_study[:, None] == enc.item_study[None, :]
    j, k = np.nonzero(same)
    sims = ag.cosine_similarity(readout[j], enc.t[k])
    signs = np.where(j == k, 1.0, -1.0)
    loss = siglip_pair(sims, signs, model.tau_log, model.logit_bias).sum() * (-1.0 / enc.size)
    table = np.full((n, n), np.nan)
    table[j, k] = sims.data
    return loss, table


def loss_mps(enc: EncodedBatch, model: ItemizedCLIP) -> tuple[Tensor, np.ndarray]:
    n, d = enc.t.shape
    sims = ag.cosine_similarity(enc.t.reshape(n, 1, d), enc.vg.reshape(1, enc.size, d))
    return _alignment_loss(sims, enc, model.tau_log, model.logit_bias), sims.data


def loss_kta(logits: Tensor, values: Tensor, enc: EncodedBatch, model: ItemizedCLIP,
             key_frac: float) -> tuple[Tensor, np.ndarray]:
    """Unmasked alignment restricted to each pair's own top-K% tokens."""
    head_mean = ag.masked_softmax(logits.data).data.mean(axis=2)  # (n, B, m)
    keys = key_token_mask(head_mean, key_frac)
    z, _ = attend(logits, values, model.cross, keys[:, :, None, :])
    n, b, d = z.shape
    sims = ag.cosine_similarity(enc.t.reshape(n, 1, d), z)
    return _alignment_loss(sims, enc, model.tau_log, model.logit_bias), sims.data


@dataclass
class LossBreakdown:
    ila: Tensor
    iis: Tensor
    mps: Tensor
    kta: Tensor
    total: Tensor
    weights: LossWeights
    tables: dict[str, np.ndarray] = field(default_factory=dict)

    def values(self) -> dict[str, float]:
        return {k: getattr(self, k).item() for k in ("ila", "iis", "mps", "kta", "total")}


def _maybe_tracked(enabled: bool):
    return contextlib.nullcontext() if enabled else ag.no_grad()


def loss_total(enc: EncodedBatch, model: ItemizedCLIP, weights: LossWeights,
               rng: np.random.Generator | None = None, masks: np.ndarray | None = None) -> LossBreakdown:
    """lambda_ILA*ILA + lambda_IIS*IIS + lambda_MPS*MPS + lambda_KTA*KTA (lambda_ILA is 1
    unless ablated).

    ``masks`` overrides sampling; otherwise masks are drawn from ``rng``.
    Components with zero weight are evaluated without gradient tracking.
    """
    weights.validate()
    if masks is None and weights.p_mask > 0:
        if rng is None:
            raise ValueError("p_mask > 0 needs an rng or explicit masks")
        masks = sample_pair_masks(enc, weights, model.cross.heads, rng)
    n, d = enc.t.shape
    keys, values = project_visual(enc.vp, model.cross)
    logits = attention_logits(enc.t, keys, model.cross)
    z_masked, _ = attend(logits, values, model.cross, masks)
    sims_masked = ag.cosine_similarity(enc.t.reshape(n, 1, d), z_masked)
    with _maybe_tracked(weights.lambda_ila > 0):
        ila, uwp = loss_ila(sims_masked, enc, model, weights.w_uwp)
    with _maybe_tracked(weights.lambda_iis > 0):
        iis, iis_table = loss_iis(z_masked, enc, model)
    with _maybe_tracked(weights.lambda_mps > 0):
        mps, mps_table = loss_mps(enc, model)
    with _maybe_tracked(weights.lambda_kta > 0):
        kta, kta_table = loss_kta(logits, values, enc, model, weights.key_frac)
    total = ila * weights.lambda_ila + iis * weights.lambda_iis + mps * weights.lambda_mps + kta * weights.lambda_kta
    tables = {"tcsim_masked": sims_masked.data, "uwp": uwp, "iis": iis_table,
              "mps": mps_table, "tcsim_key": kta_table}
    return LossBreakdown(ila, iis, mps, kta, total, weights, tables)
