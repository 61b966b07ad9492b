"""The full model: encoders, cross-attention, and the shared SigLIP scalars."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autograd as ag
from .attention import CrossAttention
from .autograd import Tensor
from .batching import Batch
from .config import ModelConfig
from .encoders import TextEncoder, VisualEncoder, Vocabulary, tokenize_many
from .layers import Module, param


class ItemizedCLIP(Module):
    def __init__(self, cfg: ModelConfig, vocab: Vocabulary, seed: int = 0):
        cfg.validate()
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.vocab = vocab
        self.visual = VisualEncoder(cfg, rng)
        self.text = TextEncoder(cfg, len(vocab), rng)
        self.cross = CrossAttention(cfg.dim, cfg.cross_heads, rng, cfg.init_std)
        tau_log = cfg.tau_init if cfg.tau_init_mode == "log" else math.log(cfg.tau_init)
        self.tau_log = param(tau_log)
        self.logit_bias = param(cfg.bias_init)

    def encode_texts(self, texts: Sequence[str]) -> Tensor:
        tokens, pad = tokenize_many(list(texts), self.vocab, self.cfg.max_len)
        return self.text(tokens, pad)

    def encode_images(self, images: np.ndarray) -> tuple[Tensor, Tensor]:
        return self.visual(images)


@dataclass
class EncodedBatch:
    t: Tensor  # (n, d) item embeddings
    vg: Tensor  # (B, d)
    vp: Tensor  # (B, m, d)
    item_study: np.ndarray
    item_start: np.ndarray
    neg_local: np.ndarray
    valid_neg: np.ndarray

    @property
    def size(self) -> int:
        return self.vg.shape[0]

    @property
    def neg_item(self) -> np.ndarray:
        return self.item_start + self.neg_local

    @property
    def counts(self) -> np.ndarray:
        return np.bincount(self.item_study, minlength=self.size)


def encode_batch(model: ItemizedCLIP, batch: Batch) -> EncodedBatch:
    t = model.text(batch.tokens, batch.pad)
    vg, vp = model.visual(batch.images)
    return EncodedBatch(t, vg, vp, batch.item_study, batch.item_start, batch.neg_local, batch.valid_neg)


def encode_studies(model: ItemizedCLIP, images: np.ndarray, chunk: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """Inference-time image encoding in chunks; returns plain arrays."""
    vgs, vps = [], []
    with ag.no_grad():
        for start in range(0, len(images), chunk):
            vg, vp = model.visual(images[start:start + chunk])
            vgs.append(vg.data)
            vps.append(vp.data)
    return np.concatenate(vgs), np.concatenate(vps)


def encode_text_array(model: ItemizedCLIP, texts: Sequence[str]) -> np.ndarray:
    with ag.no_grad():
        return model.encode_texts(texts).data
