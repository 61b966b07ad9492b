import numpy as np
import pytest

from itemized_clip.config import ModelConfig
from itemized_clip.encoders import Vocabulary
from itemized_clip.model import ItemizedCLIP
from itemized_clip.synthdata import COLORS, SHAPES


def tiny_model_config(**kw) -> ModelConfig:
    base = dict(image_size=16, patch_size=4, dim=16, visual_layers=1, text_layers=1,
                heads=2, cross_heads=2, mlp_ratio=2, max_len=6)
    base.update(kw)
    return ModelConfig(**base)


def shape_vocab() -> Vocabulary:
    return Vocabulary.from_texts([f"a {c} {s}" for c in COLORS for s in SHAPES] + ["nothing present"])


@pytest.fixture
def tiny_model():
    return ItemizedCLIP(tiny_model_config(), shape_vocab(), seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def tiny_studies(n: int, seed: int, normal_every: int = 0, size: int = 16):
    """Random small studies with 1-3 distinct shape items (every ``normal_every``-th is normal)."""
    from itemized_clip.batching import NORMAL_ITEM, Study

    r = np.random.default_rng(seed)
    combos = [f"a {c} {s}" for c in COLORS for s in SHAPES]
    out = []
    for i in range(n):
        image = r.integers(0, 256, size=(size, size, 3), dtype=np.uint8)
        if normal_every and i % normal_every == normal_every - 1:
            out.append(Study(f"s{i}", image, [NORMAL_ITEM], is_normal=True))
            continue
        k = int(r.integers(1, 4))
        items = [combos[j] for j in r.choice(len(combos), size=k, replace=False)]
        out.append(Study(f"s{i}", image, items))
    return out


def encoded(model, studies, seed=0):
    from itemized_clip.batching import assemble_batch
    from itemized_clip.model import encode_batch

    batch = assemble_batch(studies, 7, np.random.default_rng(seed), model.vocab, model.cfg.max_len)
    return batch, encode_batch(model, batch)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
