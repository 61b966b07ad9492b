"""Brute-force loss evaluation, one pair at a time, in plain numpy.

This path shares nothing with the vectorized objectives except the model
parameters, the encoded embeddings, and pre-drawn masks. It is used by tests
to check the vectorized losses term by term.
"""
from __future__ import annotations

import math

import numpy as np

from .model import EncodedBatch, ItemizedCLIP


def _softplus_neg(x: float) -> float:
    """-log(sigmoid(x)) for a Python float."""
    return math.log1p(math.exp(-x)) if x >= 0 else -x + math.log1p(math.exp(x))


def _cos(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.dot(a, b) / (math.sqrt(np.dot(a, a)) * math.sqrt(np.dot(b, b))))


def _pair_attention(model: ItemizedCLIP, t: np.ndarray, vp: np.ndarray,
                    visible: np.ndarray | None) -> tuple[np.ndarray, np.ndarray]:
    """Readout and per-head weights for one (text, visual) pair, head by head."""
    ca = model.cross
    h = ca.heads
    d = t.shape[0]
    e = d // h
    q = t @ ca.q.weight.data + ca.q.bias.data
    k = vp @ ca.k.weight.data + ca.k.bias.data
    v = vp @ ca.v.weight.data + ca.v.bias.data
    heads_out = []
    weights = np.zeros((h, vp.shape[0]))
    for head in range(h):
        sl = slice(head * e, (head + 1) * e)
        scores = [float(np.dot(q[sl], k[tok, sl])) / math.sqrt(e) for tok in range(vp.shape[0])]
        allowed = [tok for tok in range(vp.shape[0]) if visible is None or visible[head, tok]]
        top = max(scores[tok] for tok in allowed)
        denom = sum(math.exp(scores[tok] - top) for tok in allowed)
        for tok in allowed:
            weights[head, tok] = math.exp(scores[tok] - top) / denom
        heads_out.append(sum(weights[head, tok] * v[tok, sl] for tok in allowed))
    z = np.concatenate(heads_out) @ ca.o.weight.data + ca.o.bias.data
    return z, weights


def _key_set(model: ItemizedCLIP, t: np.ndarray, vp: np.ndarray, key_frac: float) -> list[int]:
    _, w = _pair_attention(model, t, vp, None)
    amap = w.mean(axis=0)
    m = len(amap)
    count = max(1, min(m, math.ceil(key_frac * m - 1e-9)))
    ranked = sorted(range(m), key=lambda tok: (-amap[tok], tok))
    return sorted(ranked[:count])


def bruteforce_losses(model: ItemizedCLIP, enc: EncodedBatch, masks: np.ndarray | None,
                      w_uwp: float, key_frac: float) -> dict[str, float]:
    """ILA, IIS, MPS and KTA by explicit enumeration of every pair term.

    ``masks`` is indexed [item, visual, head, token] like the vectorized path.
    """
    t = enc.t.data
    vg = enc.vg.data
    vp = enc.vp.data
    tau = math.exp(float(model.tau_log.data))
    b = float(model.logit_bias.data)
    n_studies = vg.shape[0]
    items_of = [list(np.flatnonzero(enc.item_study == i)) for i in range(n_studies)]
    neg_of = [items_of[k][enc.neg_local[k]] for k in range(n_studies)]

    def term(sim: float, sign: float) -> float:
        return _softplus_neg(sign * (tau * sim - b))

    def mask_for(g: int, i: int):
        return None if masks is None else masks[g, i]

    ila = iis = mps = kta = 0.0
    for i in range(n_studies):
        readouts = {}
        pos_sims = []
        for g in items_of[i]:
            z, _ = _pair_attention(model, t[g], vp[i], mask_for(g, i))
            readouts[g] = z
            pos_sims.append(_cos(t[g], z))
        worst = min(range(len(pos_sims)), key=lambda j: (pos_sims[j], j))
        for j, s in enumerate(pos_sims):
            ila += (w_uwp if j == worst else 1.0) * term(s, 1.0)
        for k in range(n_studies):
            if k == i or not enc.valid_neg[k, i]:
                continue
            g = neg_of[k]
            z, _ = _pair_attention(model, t[g], vp[i], mask_for(g, i))
            ila += term(_cos(t[g], z), -1.0)
        # IIS: readout of item j against every sibling text k
        for j in items_of[i]:
            for k in items_of[i]:
                iis += term(_cos(t[k], readouts[j]), 1.0 if j == k else -1.0)
        # MPS: global embedding
        for g in items_of[i]:
            mps += term(_cos(t[g], vg[i]), 1.0)
        for k in range(n_studies):
            if k != i and enc.valid_neg[k, i]:
                mps += term(_cos(t[neg_of[k]], vg[i]), -1.0)
        # KTA: each pair's own key tokens, no masking, no UWP
        pairs = [(g, 1.0) for g in items_of[i]]
        pairs += [(neg_of[k], -1.0) for k in range(n_studies) if k != i and enc.valid_neg[k, i]]
        h = model.cross.heads
        for g, sign in pairs:
            keys = _key_set(model, t[g], vp[i], key_frac)
            visible = np.zeros((h, vp.shape[1]), dtype=bool)
            visible[:, keys] = True
            z, _ = _pair_attention(model, t[g], vp[i], visible)
            kta += term(_cos(t[g], z), sign)
    scale = 1.0 / n_studies
    return {"ila": ila * scale, "iis": iis * scale, "mps": mps * scale, "kta": kta * scale}


def reference_tcs_mps(model: ItemizedCLIP, enc: EncodedBatch, lambda_mps: float) -> float:
    """Unmasked, unweighted text-conditioned SigLIP plus weighted multi-positive SigLIP."""
    t, vg, vp = enc.t.data, enc.vg.data, enc.vp.data
    tau = math.exp(float(model.tau_log.data))
    b = float(model.logit_bias.data)
    n_studies = vg.shape[0]
    items_of = [list(np.flatnonzero(enc.item_study == i)) for i in range(n_studies)]
    tcs = mps = 0.0
    for i in range(n_studies):
        for g in items_of[i]:
            z, _ = _pair_attention(model, t[g], vp[i], None)
            tcs += _softplus_neg(tau * _cos(t[g], z) - b)
            mps += _softplus_neg(tau * _cos(t[g], vg[i]) - b)
        for k in range(n_studies):
            if k == i or not enc.valid_neg[k, i]:
                continue
            g = items_of[k][enc.neg_local[k]]
            z, _ = _pair_attention(model, t[g], vp[i], None)
            tcs += _softplus_neg(-(tau * _cos(t[g], z) - b))
            mps += _softplus_neg(-(tau * _cos(t[g], vg[i]) - b))
    return (tcs + lambda_mps * mps) / n_studies
