"""Toy ViT image encoder, toy transformer text encoder, and word vocabulary."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .config import ModelConfig
from .layers import Block, LayerNorm, Linear, Module, normal_init

PAD, START, UNK = "<pad>", "<start>", "<unk>"
RESERVED = (PAD, START, UNK)
PAD_ID, START_ID, UNK_ID = 0, 1, 2


@dataclass
class Vocabulary:
    words: list[str] = field(default_factory=list)

    def __post_init__(self):
        if len(set(self.words)) != len(self.words):
            raise ValueError("vocabulary words must be unique")
        if any(w in RESERVED for w in self.words):
            raise ValueError("vocabulary may not contain reserved tokens")
        self._ids = {w: i + len(RESERVED) for i, w in enumerate(self.words)}

    def __len__(self) -> int:
        return len(RESERVED) + len(self.words)

    def id_of(self, word: str) -> int:
        return self._ids.get(word, UNK_ID)

    def word_of(self, idx: int) -> str:
        if idx < len(RESERVED):
            return RESERVED[idx]
        return self.words[idx - len(RESERVED)]

    @classmethod
    def from_texts(cls, texts: Iterable[str]) -> "Vocabulary":
        words = sorted({w for t in texts for w in t.lower().split()})
        return cls(words)

    def save(self, path) -> None:
        Path(path).write_text("".join(w + "\n" for w in self.words), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        text = Path(path).read_text(encoding="utf-8")
        return cls([line for line in text.split("\n") if line])


def tokenize(text: str, vocab: Vocabulary, max_len: int) -> tuple[np.ndarray, np.ndarray]:
    """Return (token ids, padding flags), both of length ``max_len``."""
    if max_len < 2:
        raise ValueError("max_len must be >= 2")
    ids = [START_ID] + [vocab.id_of(w) for w in text.lower().split()]
    ids = ids[:max_len]
    tokens = np.full(max_len, PAD_ID, dtype=np.int64)
    tokens[: len(ids)] = ids
    pad = np.arange(max_len) >= len(ids)
    return tokens, pad


def tokenize_many(texts: Sequence[str], vocab: Vocabulary, max_len: int) -> tuple[np.ndarray, np.ndarray]:
    if not texts:
        return np.zeros((0, max_len), dtype=np.int64), np.zeros((0, max_len), dtype=bool)
    pairs = [tokenize(t, vocab, max_len) for t in texts]
    return np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs])


class TextEncoder(Module):
    def __init__(self, cfg: ModelConfig, vocab_size: int, rng: np.random.Generator):
        d, std = cfg.dim, cfg.init_std
        self.token_embedding = normal_init(rng, (vocab_size, d), std)
        self.pos_embedding = normal_init(rng, (cfg.max_len, d), std)
        self.blocks = [Block(d, cfg.heads, cfg.mlp_ratio, rng, std) for _ in range(cfg.text_layers)]
        self.norm = LayerNorm(d)

    def __call__(self, tokens: np.ndarray, pad: np.ndarray | None = None) -> Tensor:
        """tokens: (N, L) ids -> (N, d) embeddings pooled at the start token."""
        tokens = np.asarray(tokens)
        if pad is None:
            pad = tokens == PAD_ID
            pad[:, 0] = False
        pad = np.asarray(pad, dtype=bool)
        if tokens.shape[1] > self.pos_embedding.shape[0]:
            raise ValueError("token sequence longer than the positional table")
        # Padded positions are invisible as keys and pooling reads position 0,
        # so trailing all-pad columns and duplicate rows cannot change the output.
        length = max(1, int((~pad).sum(axis=1).max()))
        rows = np.concatenate([tokens[:, :length], pad[:, :length]], axis=1)
        uniq, inverse = np.unique(rows, axis=0, return_inverse=True)
        inverse = inverse.reshape(-1)
        utok, upad = uniq[:, :length], uniq[:, length:].astype(bool)
        x = self.token_embedding[utok] + self.pos_embedding[:length]
        visible = ~upad
        for block in self.blocks:
            x = block(x, visible)
        pooled = self.norm(x[:, 0])
        if len(uniq) == len(tokens) and np.array_equal(inverse, np.arange(len(tokens))):
            return pooled
        return pooled[inverse]


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """(B, H, W, C) -> (B, m, patch*patch*C) in row-major patch order."""
    b, h, w, c = images.shape
    if h % patch or w % patch:
        raise ValueError(f"image {h}x{w} not divisible by patch size {patch}")
    hp, wp = h // patch, w // patch
    x = images.reshape(b, hp, patch, wp, patch, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, hp * wp, patch * patch * c)


def to_float_image(image: np.ndarray) -> np.ndarray:
    """uint8 pixels -> zero-centred float64."""
    arr = np.asarray(image)
    if arr.dtype == np.uint8:
        return arr.astype(np.float64) / 255.0 - 0.5
    return arr.astype(np.float64)


class VisualEncoder(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        d, std = cfg.dim, cfg.init_std
        self.cfg = cfg
        self.patch_embed = Linear(cfg.patch_size ** 2 * cfg.channels, d, rng, std)
        self.cls_token = normal_init(rng, (d,), std)
        self.pos_embedding = normal_init(rng, (cfg.num_tokens + 1, d), std)
        self.blocks = [Block(d, cfg.heads, cfg.mlp_ratio, rng, std) for _ in range(cfg.visual_layers)]
        self.norm = LayerNorm(d)

    def __call__(self, images: np.ndarray) -> tuple[Tensor, Tensor]:
        """images: (B, H, W, C) -> (vg (B, d), vp (B, m, d))."""
        cfg = self.cfg
        images = np.asarray(images)
        if images.ndim != 4 or images.shape[1:] != (cfg.image_size, cfg.image_size, cfg.channels):
            raise ValueError(
                f"expected images of shape (B, {cfg.image_size}, {cfg.image_size}, {cfg.channels}), "
                f"got {images.shape}"
            )
        patches = patchify(to_float_image(images), cfg.patch_size)
        b = patches.shape[0]
        x = self.patch_embed(Tensor(patches))
        cls = ag.reshape(self.cls_token, (1, 1, -1)) + ag.Tensor(np.zeros((b, 1, 1)))
        x = ag.concatenate([cls, x], axis=1) + self.pos_embedding
        for block in self.blocks:
            x = block(x)
        x = self.norm(x)
        return x[:, 0], x[:, 1:]
