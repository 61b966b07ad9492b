"""AdamW with warmup+cosine schedule, binary checkpoints, and the training loop."""
from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .autograd import Tensor
from .batching import Study, assemble_batch
from .config import TrainConfig, config_from_dict
from .encoders import Vocabulary
from .model import ItemizedCLIP, encode_batch
from .objectives import loss_total

log = logging.getLogger(__name__)

MAGIC = b"ITCL"
VERSION = 1
CONFIG_TENSOR = "meta/config"
STEP_TENSOR = "state/step"


def lr_at(step: int, base_lr: float, warmup_steps: int, total_steps: int) -> float:
    """Linear warmup to ``base_lr``, then cosine decay to 0 at ``total_steps``."""
    if step < 0:
        raise ValueError("step must be >= 0")
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * step / warmup_steps
    if total_steps <= warmup_steps:
        return base_lr
    progress = min(1.0, (step - warmup_steps) / (total_steps - warmup_steps))
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def decays(name: str, p: np.ndarray) -> bool:
    """Weight decay only on matrices; biases, norms, scalars and the class token are exempt."""
    return p.ndim >= 2


@dataclass
class AdamW:
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    weight_decay: float = 0.0
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, params: dict[str, Tensor], grads: dict[str, np.ndarray], lr: float) -> None:
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient for parameter {name}")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                g = np.zeros_like(p.data)
            if g.shape != p.data.shape:
                raise ValueError(f"gradient shape {g.shape} does not match parameter {name} {p.data.shape}")
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if self.weight_decay and decays(name, p.data):
                p.data *= 1.0 - lr * self.weight_decay
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads.values():
            g *= scale
    return total


# -- checkpoints --------------------------------------------------------------

@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]

    @property
    def config(self) -> dict:
        raw = self.tensors[CONFIG_TENSOR].astype(np.uint8).tobytes()
        return json.loads(raw.decode("utf-8"))

    @property
    def step(self) -> int:
        return int(self.tensors[STEP_TENSOR]) if STEP_TENSOR in self.tensors else 0


def encode_checkpoint(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def decode_checkpoint(data: bytes) -> Checkpoint:
    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise ValueError("checkpoint is truncated")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    pos = 0
    if take(4) != MAGIC:
        raise ValueError("not a checkpoint file (bad magic)")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        n = int(np.prod(dims)) if rank else 1
        tensors[name] = np.frombuffer(take(8 * n), dtype="<f8").reshape(dims).astype(np.float64)
    if pos != len(data):
        raise ValueError("trailing bytes after checkpoint tensors")
    return Checkpoint(tensors)


def checkpoint_tensors(model: ItemizedCLIP, cfg: TrainConfig, opt: AdamW | None = None) -> dict[str, np.ndarray]:
    meta = {"train": cfg.to_dict(), "vocab": model.vocab.words}
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    tensors = {CONFIG_TENSOR: np.frombuffer(blob, dtype=np.uint8).astype(np.float64)}
    for name, p in model.named_parameters().items():
        tensors[f"param/{name}"] = p.data
    if opt is not None:
        tensors[STEP_TENSOR] = np.array(float(opt.step_count))
        for name in sorted(opt.m):
            tensors[f"adam_m/{name}"] = opt.m[name]
            tensors[f"adam_v/{name}"] = opt.v[name]
    return tensors


def save_checkpoint(path, model: ItemizedCLIP, cfg: TrainConfig, opt: AdamW | None = None) -> None:
    data = encode_checkpoint(checkpoint_tensors(model, cfg, opt))
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)


def read_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())


def load_checkpoint(path) -> tuple[ItemizedCLIP, TrainConfig, AdamW]:
    """Rebuild model, config and optimizer state from a checkpoint file."""
    ckpt = read_checkpoint(path)
    meta = ckpt.config
    cfg = config_from_dict(meta["train"])
    model = ItemizedCLIP(cfg.model, Vocabulary(meta["vocab"]), seed=cfg.seed)
    params = model.named_parameters()
    for name, p in params.items():
        key = f"param/{name}"
        if key not in ckpt.tensors:
            raise ValueError(f"checkpoint is missing parameter {name}")
        if ckpt.tensors[key].shape != p.data.shape:
            raise ValueError(f"shape mismatch for {name}")
        p.data = ckpt.tensors[key].copy()
    opt = AdamW(cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay, step_count=ckpt.step)
    for name in params:
        if f"adam_m/{name}" in ckpt.tensors:
            opt.m[name] = ckpt.tensors[f"adam_m/{name}"].copy()
            opt.v[name] = ckpt.tensors[f"adam_v/{name}"].copy()
    return model, cfg, opt


# -- training loop ------------------------------------------------------------

LOG_FIELDS = ("step", "lr", "ila", "iis", "mps", "kta", "total")


def format_log_line(record: dict) -> str:
    return "\t".join(str(record["step"]) if k == "step" else f"{record[k]:.10g}" for k in LOG_FIELDS)


def steps_per_epoch(n_studies: int, batch_size: int) -> int:
    full, rest = divmod(n_studies, batch_size)
    return full + (1 if rest >= 2 else 0)


def train(cfg: TrainConfig, studies: Sequence[Study], out_path=None,
          on_step: Callable[[dict], None] | None = None,
          vocab: Vocabulary | None = None,
          on_epoch: Callable[[int, ItemizedCLIP], None] | None = None) -> tuple[ItemizedCLIP, AdamW, list[dict]]:
    """Train from scratch; returns (model, optimizer, per-step records).

    Writes a checkpoint to ``out_path`` every ``checkpoint_every`` steps (if
    set) and once at the end.
    """
    cfg.validate()
    if not studies:
        raise ValueError("training needs a nonempty dataset")
    if vocab is None:
        vocab = Vocabulary.from_texts(t for s in studies for t in s.items)
    model = ItemizedCLIP(cfg.model, vocab, seed=cfg.seed)
    opt = AdamW(cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay)
    params = model.named_parameters()
    shuffle_seq, batch_seq, mask_seq = np.random.SeedSequence(cfg.seed).spawn(3)
    shuffle_rng = np.random.default_rng(shuffle_seq)
    batch_rng = np.random.default_rng(batch_seq)
    mask_rng = np.random.default_rng(mask_seq)
    bs = min(cfg.batch_size, len(studies))
    per_epoch = steps_per_epoch(len(studies), bs)
    total_steps = per_epoch * cfg.epochs
    diverse = (cfg.ds_max_merge, cfg.ds_flag_p) if cfg.diverse_sampling else None
    records: list[dict] = []
    step = 0
    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(len(studies))
        for b in range(per_epoch):
            idx = order[b * bs:(b + 1) * bs]
            batch = assemble_batch([studies[i] for i in idx], cfg.max_items, batch_rng,
                                   vocab, cfg.model.max_len, diverse)
            lr = lr_at(step, cfg.lr, cfg.warmup_steps, total_steps)
            model.zero_grad()
            enc = encode_batch(model, batch)
            out = loss_total(enc, model, cfg.loss, rng=mask_rng)
            if not math.isfinite(out.total.item()):
                raise FloatingPointError(f"non-finite loss at step {step}")
            out.total.backward()
            grads = {name: (p.grad if p.grad is not None else np.zeros_like(p.data))
                     for name, p in params.items()}
            gnorm = clip_grad_norm(grads, cfg.grad_clip)
            opt.step(params, grads, lr)
            record = {"step": step, "epoch": epoch, "lr": lr, "grad_norm": gnorm, **out.values()}
            records.append(record)
            if on_step is not None:
                on_step(record)
            step += 1
            if out_path is not None and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                save_checkpoint(out_path, model, cfg, opt)
        if on_epoch is not None:
            on_epoch(epoch, model)
    if out_path is not None:
        save_checkpoint(out_path, model, cfg, opt)
    return model, opt, records


def smoothed(values: Sequence[float], window: int = 20) -> np.ndarray:
    """Trailing moving average."""
    arr = np.asarray(values, dtype=np.float64)
    if len(arr) == 0:
        return arr
    c = np.cumsum(np.concatenate([[0.0], arr]))
    idx = np.arange(1, len(arr) + 1)
    lo = np.maximum(0, idx - window)
    return (c[idx] - c[lo]) / (idx - lo)
