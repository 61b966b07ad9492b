"""Item-conditioned multi-head cross-attention (text query, visual-token keys/values).

The grid functions evaluate every (text, visual) pair of a batch at once;
single-pair helpers are thin wrappers over them.
"""
from __future__ import annotations

import math

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .layers import Linear, Module


class CrossAttention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator, std: float = 0.02):
        if dim % heads:
            raise ValueError("dim must be divisible by heads")
        self.heads = heads
        self.q = Linear(dim, dim, rng, std)
        self.k = Linear(dim, dim, rng, std)
        self.v = Linear(dim, dim, rng, std)
        self.o = Linear(dim, dim, rng, std)

    @property
    def head_dim(self) -> int:
        return self.q.weight.shape[1] // self.heads


def sample_mask(p_mask: float, m: int, h: int, rng: np.random.Generator,
                shape: tuple[int, ...] = (), shared: bool = False) -> np.ndarray:
    """Bernoulli visibility mask of shape ``shape + (h, m)``; True = visible.

    Each cell is hidden with probability ``p_mask``. A head row left with no
    visible token gets one uniformly chosen token forced visible. With
    ``shared`` one m-mask is drawn per pair and repeated over heads.
    """
    if not 0 <= p_mask < 1:
        raise ValueError(f"p_mask must be in [0, 1), got {p_mask}")
    rows = 1 if shared else h
    visible = rng.random(shape + (rows, m)) >= p_mask
    empty = ~visible.any(axis=-1)
    n_empty = int(empty.sum())
    if n_empty:
        rescue = rng.integers(0, m, size=n_empty)
        flat = visible.reshape(-1, m)
        flat[np.flatnonzero(empty.reshape(-1)), rescue] = True
        visible = flat.reshape(visible.shape)
    if shared:
        visible = np.repeat(visible, h, axis=-2)
    return visible


def project_visual(vp: Tensor, params: CrossAttention) -> tuple[Tensor, Tensor]:
    """Keys and values for (B, m, d) tokens, split into heads: (B, m, h, dh)."""
    b, m, d = vp.shape
    h = params.heads
    keys = params.k(vp).reshape(b, m, h, d // h)
    values = params.v(vp).reshape(b, m, h, d // h)
    return keys, values


def attention_logits(t: Tensor, keys: Tensor, params: CrossAttention) -> Tensor:
    """(n, d) queries against (B, m, h, dh) keys -> (n, B, h, m) logits."""
    n, d = t.shape
    b, m, h, e = keys.shape
    q = params.q(t).reshape(n, h, e).transpose(1, 0, 2)  # (h, n, e)
    k = keys.transpose(2, 3, 0, 1).reshape(h, e, b * m)
    logits = ag.matmul(q, k).reshape(h, n, b, m).transpose(1, 2, 0, 3)
    return logits * (1.0 / math.sqrt(e))


def attend(logits: Tensor, values: Tensor, params: CrossAttention,
           visible: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
    """Masked softmax over tokens, value readout, and output projection.

    Returns (z (n, B, d), weights (n, B, h, m)).
    """
    weights = ag.masked_softmax(logits, visible)
    n, b, h, _ = logits.shape
    # (b, h, n, m) @ (b, h, m, e) -> (b, h, n, e)
    mixed = ag.matmul(weights.transpose(1, 2, 0, 3), values.transpose(0, 2, 1, 3))
    z = params.o(mixed.transpose(2, 0, 1, 3).reshape(n, b, -1))
    return z, weights


def cross_attend_grid(t: Tensor, vp: Tensor, params: CrossAttention,
                      visible: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
    """CrossAttn(t_a, vp_b, vp_b) for every text a and visual b."""
    keys, values = project_visual(vp, params)
    return attend(attention_logits(t, keys, params), values, params, visible)


def cross_attend(t, vp, params: CrossAttention, mask: np.ndarray | None = None) -> tuple[Tensor, np.ndarray]:
    """Single pair: t (d,), vp (m, d), mask (h, m) -> (z (d,), attention map (m,))."""
    t, vp = ag.as_tensor(t), ag.as_tensor(vp)
    visible = None if mask is None else np.asarray(mask, dtype=bool)[None, None]
    z, weights = cross_attend_grid(t.reshape(1, -1), vp.reshape(1, *vp.shape), params, visible)
    return z[0, 0], weights.data[0, 0].mean(axis=0)


def tcsim(t, vp, params: CrossAttention, mask: np.ndarray | None = None) -> Tensor:
    """Cosine similarity between t and its cross-attention readout of vp."""
    t = ag.as_tensor(t)
    z, _ = cross_attend(t, vp, params, mask)
    return ag.cosine_similarity(t, z)


def attention_map(t, vp, params: CrossAttention) -> np.ndarray:
    """Unmasked head-averaged attention over the m tokens."""
    with ag.no_grad():
        _, amap = cross_attend(t, vp, params)
    return amap


def key_token_count(key_frac: float, m: int) -> int:
    if not 0 < key_frac <= 1:
        raise ValueError(f"key fraction must be in (0, 1], got {key_frac}")
    return max(1, min(m, math.ceil(key_frac * m - 1e-9)))


def top_indices(scores: np.ndarray, count: int) -> np.ndarray:
    """Indices of the ``count`` largest scores (last axis), lower index wins
    ties, returned in ascending order."""
    order = np.argsort(-scores, axis=-1, kind="stable")[..., :count]
    return np.sort(order, axis=-1)


def key_tokens(t, vp, params: CrossAttention, key_frac: float) -> np.ndarray:
    amap = attention_map(t, vp, params)
    return top_indices(amap, key_token_count(key_frac, amap.shape[0]))


def key_token_mask(head_mean_weights: np.ndarray, key_frac: float) -> np.ndarray:
    """Boolean (..., m) mask of the top-K% tokens of head-averaged maps."""
    m = head_mean_weights.shape[-1]
    idx = top_indices(head_mean_weights, key_token_count(key_frac, m))
    mask = np.zeros(head_mean_weights.shape, dtype=bool)
    np.put_along_axis(mask, idx, True, axis=-1)
    return mask
