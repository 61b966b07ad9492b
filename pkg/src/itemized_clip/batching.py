"""Study records and batch assembly: item capping, negative draws, normal check."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .encoders import Vocabulary, tokenize_many

NORMAL_ITEM = "nothing present"


@dataclass
class Study:
    id: str
    image: np.ndarray  # (H, W, C) uint8
    items: list[str]
    is_normal: bool = False
    masks: list[np.ndarray] | None = None  # per item, (grid, grid) bool

    def __post_init__(self):
        if not self.items:
            raise ValueError(f"study {self.id} has no text items")


@dataclass
class Batch:
    studies: list[Study]
    items: list[list[str]]
    tokens: np.ndarray  # (n, L)
    pad: np.ndarray  # (n, L) bool
    item_study: np.ndarray  # (n,) study index of each item
    item_start: np.ndarray  # (B,) offset of each study's first item
    neg_local: np.ndarray  # (B,) sampled item index r_k within study k (0-based)
    valid_neg: np.ndarray  # (B, B) [text study k, visual i] may form a negative
    item_masks: list[np.ndarray | None] = field(default_factory=list)

    @property
    def size(self) -> int:
        return len(self.studies)

    @property
    def counts(self) -> np.ndarray:
        return np.array([len(x) for x in self.items])

    @property
    def neg_item(self) -> np.ndarray:
        return self.item_start + self.neg_local

    @property
    def images(self) -> np.ndarray:
        return np.stack([s.image for s in self.studies])


def normal_check_grid(is_normal: Sequence[bool]) -> np.ndarray:
    """valid[a, b] is False on the diagonal and when both studies are normal."""
    flags = np.asarray(is_normal, dtype=bool)
    valid = ~(flags[:, None] & flags[None, :])
    np.fill_diagonal(valid, False)
    return valid


def diverse_sample(items: list[str], max_merge: int, flag_p: float,
                   rng: np.random.Generator) -> list[str]:
    """With probability ``flag_p`` merge g in [2, max_merge] random items into one.

    The merged item takes the position of the first merged item; parts are
    joined with ". " in their original order.
    """
    if max_merge < 1:
        raise ValueError("max_merge must be >= 1")
    if len(items) < 2 or max_merge < 2 or rng.random() >= flag_p:
        return list(items)
    g = int(rng.integers(2, min(max_merge, len(items)) + 1))
    chosen = np.sort(rng.choice(len(items), size=g, replace=False))
    merged = ". ".join(items[i] for i in chosen)
    out = []
    for i, item in enumerate(items):
        if i == chosen[0]:
            out.append(merged)
        elif i not in chosen:
            out.append(item)
    return out


def assemble_batch(studies: Sequence[Study], max_items: int, rng: np.random.Generator,
                   vocab: Vocabulary, max_len: int, diverse: tuple[int, float] | None = None) -> Batch:
    """Cap items per study, optionally merge items, tokenize, draw one negative
    item index per study, and build the normal-check grid."""
    if len(studies) == 0:
        raise ValueError("cannot assemble an empty batch")
    if len(studies) < 2:
        raise ValueError("a batch needs at least 2 studies")
    if max_items < 1:
        raise ValueError("max_items must be >= 1")
    all_items: list[list[str]] = []
    all_masks: list[np.ndarray | None] = []
    for s in studies:
        keep = np.arange(len(s.items))
        if len(keep) > max_items:
            keep = np.sort(rng.choice(len(keep), size=max_items, replace=False))
        items = [s.items[i] for i in keep]
        masks = [s.masks[i] if s.masks and i < len(s.masks) else None for i in keep]
        if diverse is not None:
            merged = diverse_sample(items, diverse[0], diverse[1], rng)
            if merged != items:
                masks = [None] * len(merged)
            items = merged
        all_items.append(items)
        all_masks.extend(masks)
    counts = np.array([len(x) for x in all_items])
    neg_local = np.array([rng.integers(0, c) for c in counts], dtype=np.int64)
    flat = [t for items in all_items for t in items]
    tokens, pad = tokenize_many(flat, vocab, max_len)
    item_start = np.concatenate([[0], np.cumsum(counts)[:-1]]).astype(np.int64)
    return Batch(
        studies=list(studies),
        items=all_items,
        tokens=tokens,
        pad=pad,
        item_study=np.repeat(np.arange(len(studies)), counts),
        item_start=item_start,
        neg_local=neg_local,
        valid_neg=normal_check_grid([s.is_normal for s in studies]),
        item_masks=all_masks,
    )
