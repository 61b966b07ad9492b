"""Synthetic itemized-shapes scenes with per-item token masks.

Each scene is a 2x2 grid of quadrant regions; a region holds at most one
coloured shape. Item text names colour and shape only ("a red circle"), never
location. On disk: P6 images, P5 token masks, and a JSON-lines manifest.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .batching import NORMAL_ITEM, Study

SHAPES = ("circle", "square", "triangle", "cross")
COLORS = ("red", "green", "blue", "yellow")
RGB = {
    "red": (0.9, 0.15, 0.15),
    "green": (0.15, 0.8, 0.2),
    "blue": (0.2, 0.3, 0.95),
    "yellow": (0.95, 0.9, 0.15),
}
BACKGROUND = 0.1
NOISE_STD = 0.02
MANIFEST = "manifest.jsonl"


class DatasetError(RuntimeError):
    pass


@dataclass
class ShapeSpec:
    shape: str
    color: str

    @property
    def text(self) -> str:
        return f"a {self.color} {self.shape}"


@dataclass
class SceneSpec:
    regions: list[ShapeSpec | None] = field(default_factory=lambda: [None] * 4)
    grid: tuple[int, int] = (2, 2)
    image_size: int = 64
    token_size: int = 8
    coverage: str = "majority"  # or "any"

    @property
    def is_normal(self) -> bool:
        return all(r is None for r in self.regions)


def sample_scene(rng: np.random.Generator, normal_frac: float = 0.1,
                 min_shapes: int = 1, max_shapes: int = 4) -> SceneSpec:
    spec = SceneSpec()
    n_regions = spec.grid[0] * spec.grid[1]
    if rng.random() < normal_frac:
        return spec
    count = int(rng.integers(min_shapes, min(max_shapes, n_regions) + 1))
    where = rng.choice(n_regions, size=count, replace=False)
    combos = rng.choice(len(SHAPES) * len(COLORS), size=count, replace=False)
    for region, combo in zip(where, combos):
        spec.regions[region] = ShapeSpec(SHAPES[combo % len(SHAPES)], COLORS[combo // len(SHAPES)])
    return spec


def _shape_mask(shape: str, size: int) -> np.ndarray:
    """Boolean size x size raster of a shape filling its bounding box."""
    c = (np.arange(size) + 0.5) / size  # pixel centres in [0, 1]
    y, x = np.meshgrid(c, c, indexing="ij")
    if shape == "circle":
        return (x - 0.5) ** 2 + (y - 0.5) ** 2 <= 0.25
    if shape == "square":
        return np.ones((size, size), dtype=bool)
    if shape == "triangle":
        return np.abs(x - 0.5) <= 0.5 * y
    if shape == "cross":
        arm = 0.19
        return (np.abs(x - 0.5) <= arm) | (np.abs(y - 0.5) <= arm)
    raise ValueError(f"unknown shape {shape!r}")


def token_mask(pixels: np.ndarray, token_size: int, coverage: str = "majority") -> np.ndarray:
    """Token-grid mask from a pixel mask: majority (> half) or any coverage."""
    h, w = pixels.shape
    blocks = pixels.reshape(h // token_size, token_size, w // token_size, token_size).sum(axis=(1, 3))
    if coverage == "any":
        return blocks > 0
    return blocks * 2 > token_size * token_size


def render_study(spec: SceneSpec, rng: np.random.Generator, study_id: str = "study") -> Study:
    size, tok = spec.image_size, spec.token_size
    rows, cols = spec.grid
    rh, rw = size // rows, size // cols
    canvas = np.full((size, size, 3), BACKGROUND)
    items, masks = [], []
    for region, shape in enumerate(spec.regions):
        if shape is None:
            continue
        r0, c0 = (region // cols) * rh, (region % cols) * rw
        while True:
            # sides of 24-30 px in a 32 px region: large enough that circle and
            # square differ over whole tokens at the 8 px patch size
            side = int(rng.integers(rh * 3 // 4, rh - 1))
            y0 = r0 + int(rng.integers(1, rh - side))
            x0 = c0 + int(rng.integers(1, rw - side))
            pix = np.zeros((size, size), dtype=bool)
            pix[y0:y0 + side, x0:x0 + side] = _shape_mask(shape.shape, side)
            tmask = token_mask(pix, tok, spec.coverage)
            if tmask.any():
                break
        canvas[pix] = RGB[shape.color]
        items.append(shape.text)
        masks.append(tmask)
    canvas = canvas + rng.normal(0.0, NOISE_STD, canvas.shape)
    image = np.clip(np.rint(canvas * 255.0), 0, 255).astype(np.uint8)
    if not items:
        return Study(study_id, image, [NORMAL_ITEM], is_normal=True, masks=None)
    return Study(study_id, image, items, is_normal=False, masks=masks)


def study_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


def make_studies(n: int, seed: int, normal_frac: float = 0.1,
                 min_shapes: int = 1, max_shapes: int = 4) -> list[Study]:
    """In-memory generation; identical to what generate_dataset writes."""
    out = []
    for i in range(n):
        rng = study_rng(seed, i)
        spec = sample_scene(rng, normal_frac, min_shapes, max_shapes)
        out.append(render_study(spec, rng, f"study_{i:05d}"))
    return out


# -- Netpbm I/O -----------------------------------------------------------

def write_ppm(path, image: np.ndarray) -> None:
    h, w, c = image.shape
    if c != 3 or image.dtype != np.uint8:
        raise ValueError("PPM needs an (H, W, 3) uint8 array")
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(image.tobytes())


def write_pgm(path, image: np.ndarray) -> None:
    if image.ndim != 2 or image.dtype != np.uint8:
        raise ValueError("PGM needs an (H, W) uint8 array")
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(image.tobytes())


def _read_netpbm(path, magic: bytes, channels: int) -> np.ndarray:
    data = Path(path).read_bytes()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: truncated header")
        fields.append(data[start:pos])
    pos += 1
    if fields[0] != magic:
        raise ValueError(f"{path}: expected {magic.decode()} file")
    w, h, maxval = (int(f) for f in fields[1:])
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 is supported")
    payload = data[pos:]
    if len(payload) != w * h * channels:
        raise ValueError(f"{path}: expected {w * h * channels} bytes of pixel data, found {len(payload)}")
    arr = np.frombuffer(payload, dtype=np.uint8)
    return arr.reshape(h, w, channels) if channels > 1 else arr.reshape(h, w)


def read_ppm(path) -> np.ndarray:
    return _read_netpbm(path, b"P6", 3)


def read_pgm(path) -> np.ndarray:
    return _read_netpbm(path, b"P5", 1)


# -- dataset on disk ------------------------------------------------------

def generate_dataset(n: int, out_dir, seed: int, normal_frac: float = 0.1) -> Path:
    """Write images, masks and manifest; return the manifest path."""
    if n < 1:
        raise ValueError("n must be >= 1")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    records = []
    for study in make_studies(n, seed, normal_frac):
        image_rel = f"images/{study.id}.ppm"
        write_ppm(out / image_rel, study.image)
        mask_rels = []
        for j, mask in enumerate(study.masks or []):
            rel = f"masks/{study.id}_{j}.pgm"
            write_pgm(out / rel, (mask.astype(np.uint8) * 255))
            mask_rels.append(rel)
        records.append({
            "id": study.id,
            "image_path": image_rel,
            "is_normal": study.is_normal,
            "items": "\t".join(study.items),
            "mask_paths": mask_rels,
        })
    manifest = out / MANIFEST
    tmp = manifest.with_suffix(".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    os.replace(tmp, manifest)
    return manifest


def load_dataset(path) -> list[Study]:
    """Load a dataset directory (or its manifest file) in manifest order."""
    path = Path(path)
    manifest = path / MANIFEST if path.is_dir() else path
    root = manifest.parent
    if not manifest.exists():
        raise DatasetError(f"manifest not found: {manifest}")
    studies = []
    with open(manifest, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                sid = rec["id"]
            except (json.JSONDecodeError, KeyError) as exc:
                raise DatasetError(f"{manifest}:{lineno}: malformed record ({exc})") from exc
            try:
                image = read_ppm(root / rec["image_path"])
                items = rec["items"].split("\t")
                masks = [read_pgm(root / p) > 127 for p in rec["mask_paths"]]
            except (OSError, ValueError, KeyError) as exc:
                raise DatasetError(f"study {sid}: {exc}") from exc
            if not rec["is_normal"] and len(masks) != len(items):
                raise DatasetError(f"study {sid}: {len(items)} items but {len(masks)} masks")
            studies.append(Study(sid, image, items, bool(rec["is_normal"]), masks or None))
    return studies


def split_dataset(studies: list[Study], eval_frac: float) -> tuple[list[Study], list[Study]]:
    """Deterministic split: the last ``eval_frac`` of manifest order is held out."""
    n_eval = int(round(len(studies) * eval_frac))
    if n_eval == 0:
        return list(studies), []
    return list(studies[:-n_eval]), list(studies[-n_eval:])


def region_of_mask(mask: np.ndarray, grid: tuple[int, int] = (2, 2)) -> np.ndarray:
    """Token mask of the quadrant region holding ``mask``."""
    gh, gw = mask.shape
    rh, rw = gh // grid[0], gw // grid[1]
    ys, xs = np.nonzero(mask)
    r, c = int(ys[0]) // rh, int(xs[0]) // rw
    region = np.zeros_like(mask, dtype=bool)
    region[r * rh:(r + 1) * rh, c * rw:(c + 1) * rw] = True
    return region
