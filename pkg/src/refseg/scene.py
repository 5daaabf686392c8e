"""Synthetic videos of moving coloured shapes with referring expressions."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io

COLORS = {
    "red": (0.9, 0.1, 0.1),
    "green": (0.1, 0.8, 0.2),
    "blue": (0.15, 0.25, 0.95),
    "yellow": (0.95, 0.9, 0.1),
    "magenta": (0.9, 0.15, 0.85),
    "cyan": (0.1, 0.85, 0.9),
}
SHAPES = ("circle", "square", "triangle")
VOCAB = tuple(COLORS) + SHAPES
BACKGROUND = (0.12, 0.12, 0.12)


class SceneError(RuntimeError):
    pass


def token_ids(words) -> tuple[int, ...]:
    try:
        return tuple(VOCAB.index(w) for w in words)
    except ValueError:
        raise KeyError(f"unknown word in {list(words)}") from None


@dataclass
class SceneObject:
    shape: str
    color: str
    size: float
    start: tuple[float, float]
    velocity: tuple[float, float]


@dataclass
class Scene:
    seed: int
    frames: np.ndarray          # [T, 3, H, W] float in [0, 1]
    masks: np.ndarray           # [O, T, H, W] bool, disjoint
    boxes: np.ndarray           # [O, T, 4] normalized (cx, cy, w, h), zero when absent
    present: np.ndarray         # [O, T] bool
    objects: list[SceneObject]
    expressions: list[tuple[int, ...]] = field(default_factory=list)
    targets: list[int] = field(default_factory=list)

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    def expression_words(self, e: int) -> list[str]:
        return [VOCAB[i] for i in self.expressions[e]]


def raster(shape: str, center, size: float, h: int, w: int) -> np.ndarray:
    """Boolean raster sampled at pixel centres."""
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    cy, cx = center
    if shape == "circle":
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= size * size
    if shape == "square":
        return (np.abs(yy - cy) <= size * 0.85) & (np.abs(xx - cx) <= size * 0.85)
    if shape == "triangle":
        # upright isosceles triangle inscribed in the size-radius box
        top, bottom = cy - size, cy + size
        frac = (yy - top) / (2 * size)
        return (yy >= top) & (yy <= bottom) & (np.abs(xx - cx) <= frac * size)
    raise ValueError(f"unknown shape {shape!r}")


def mask_box(mask: np.ndarray) -> tuple[np.ndarray, bool]:
    """Tight normalized (cx, cy, w, h) of a boolean mask; zeros when empty."""
    h, w = mask.shape
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        return np.zeros(4), False
    y0, y1 = rows[0], rows[-1] + 1
    x0, x1 = cols[0], cols[-1] + 1
    return np.array([(x0 + x1) / 2 / w, (y0 + y1) / 2 / h, (x1 - x0) / w, (y1 - y0) / h]), True


def _sample_objects(rng: np.random.Generator, n: int, size: int, frames: int) -> list[SceneObject]:
    combos = [(c, s) for c in COLORS for s in SHAPES]
    picks = rng.choice(len(combos), size=n, replace=False)
    objs = []
    for k in picks:
        color, shape = combos[k]
        radius = rng.uniform(0.11, 0.17) * size
        margin = radius + 1
        span = max(frames - 1, 1)
        start = rng.uniform(margin, size - margin, 2)
        end = rng.uniform(margin, size - margin, 2)
        vel = (end - start) / span
        vel = np.clip(vel, -0.06 * size, 0.06 * size)
        objs.append(SceneObject(shape, color, float(radius), tuple(map(float, start)), tuple(map(float, vel))))
    return objs


def generate_scene(seed: int, frames: int = 3, size: int = 64, objects: int = 2, expressions: int = 2,
                   min_visible: int = 12, retries: int = 50) -> Scene:
    """Deterministic scene; objects later in the list are painted on top.

    Each expression is "<color> <shape>" of a distinct object; a draw is retried
    when an object would be smaller than ``min_visible`` pixels in any frame.
    """
    if size % 16:
        raise ValueError("size must be divisible by 16")
    if not 1 <= expressions <= objects <= len(COLORS) * len(SHAPES):
        raise ValueError("need 1 <= expressions <= objects <= number of attribute pairs")
    rng = np.random.default_rng(seed)
    for _ in range(retries):
        objs = _sample_objects(rng, objects, size, frames)
        rasters = np.zeros((objects, frames, size, size), bool)
        for i, o in enumerate(objs):
            for t in range(frames):
                c = (o.start[0] + o.velocity[0] * t, o.start[1] + o.velocity[1] * t)
                rasters[i, t] = raster(o.shape, c, o.size, size, size)
        masks = rasters.copy()
        for i in range(objects):
            masks[i] &= ~rasters[i + 1:].any(axis=0)
        if masks.sum(axis=(2, 3)).min() >= min_visible:
            break
    else:
        raise SceneError(f"could not place {objects} visible objects after {retries} draws")
    img = np.empty((frames, 3, size, size))
    img[:] = np.asarray(BACKGROUND)[None, :, None, None]
    for i, o in enumerate(objs):
        col = np.asarray(COLORS[o.color])[None, :, None, None]
        img = np.where(masks[i][:, None], col, img)
    boxes = np.zeros((objects, frames, 4))
    present = np.zeros((objects, frames), bool)
    for i in range(objects):
        for t in range(frames):
            boxes[i, t], present[i, t] = mask_box(masks[i, t])
    targets = sorted(rng.choice(objects, size=expressions, replace=False).tolist())
    exprs = [token_ids((objs[i].color, objs[i].shape)) for i in targets]
    return Scene(seed, img, masks, boxes, present, objs, exprs, targets)


def resolve(scene: Scene, expression) -> int:
    """Index of the single object whose attributes match the expression words."""
    words = [VOCAB[i] for i in expression]
    hits = [i for i, o in enumerate(scene.objects) if o.color in words and o.shape in words]
    if len(hits) != 1:
        raise SceneError(f"expression {words} matches {len(hits)} objects")
    return hits[0]


def generate_corpus(seed: int, videos: int, **knobs) -> list[Scene]:
    root = np.random.SeedSequence(seed)
    seeds = [int(s.generate_state(1)[0]) for s in root.spawn(videos)]
    return [generate_scene(s, **knobs) for s in seeds]


def save_scene(scene: Scene, out) -> None:
    """``frames.sgt``, ``scene.json`` and ground truth masks ``gt/eXX/fYY.pgm``."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    io.write_sgt(out / "frames.sgt", scene.frames)
    meta = {
        "seed": scene.seed,
        "objects": [vars(o) for o in scene.objects],
        "expressions": [scene.expression_words(e) for e in range(len(scene.expressions))],
        "targets": scene.targets,
    }
    (out / "scene.json").write_text(json.dumps(meta, indent=2))
    for e, target in enumerate(scene.targets):
        d = out / "gt" / f"e{e:02d}"
        d.mkdir(parents=True, exist_ok=True)
        for t in range(scene.num_frames):
            io.write_pgm(d / f"f{t:02d}.pgm", scene.masks[target, t])


def load_scene(path) -> Scene:
    """Inverse of :func:`save_scene` (masks of non-referred objects are not stored)."""
    path = Path(path)
    meta = json.loads((path / "scene.json").read_text())
    frames = io.read_sgt(path / "frames.sgt").astype(np.float64)
    t, _, h, w = frames.shape
    objs = [SceneObject(o["shape"], o["color"], o["size"], tuple(o["start"]), tuple(o["velocity"]))
            for o in meta["objects"]]
    masks = np.zeros((len(objs), t, h, w), bool)
    for e, target in enumerate(meta["targets"]):
        for f in range(t):
            masks[target, f] = io.read_pgm(path / "gt" / f"e{e:02d}" / f"f{f:02d}.pgm")
    boxes = np.zeros((len(objs), t, 4))
    present = np.zeros((len(objs), t), bool)
    for i in range(len(objs)):
        for f in range(t):
            boxes[i, f], present[i, f] = mask_box(masks[i, f])
    exprs = [token_ids(words) for words in meta["expressions"]]
    return Scene(meta["seed"], frames, masks, boxes, present, objs, exprs, list(meta["targets"]))
