"""Per-object latency of single versus multi mode, plus the feature-drift diagnostic."""
from __future__ import annotations

import statistics
import time

import numpy as np

from . import decoder as D
from . import tensor as T
from .metrics import drift_score
from .model import Model
from .scene import Scene, generate_scene

COUNTS = (1, 2, 5, 10)


def bench_scene(seed: int = 7, size: int = 64, frames: int = 3, objects: int = 10) -> Scene:
    """A fixed scene with one expression per object so every count up to ``objects`` is available."""
    return generate_scene(seed, frames=frames, size=size, objects=objects, expressions=objects,
                          min_visible=4, retries=500)


def time_inference(model: Model, scene: Scene, n_expr: int, mode: str, repeats: int = 5) -> dict:
    """Median wall time of ``repeats`` runs, with counters from the last run."""
    exprs = scene.expressions[:n_expr]
    times = []
    for _ in range(repeats):
        model.counters.reset()
        start = time.perf_counter()
        model.infer(scene.frames, exprs, mode)
        times.append(time.perf_counter() - start)
    median = statistics.median(times)
    return {
        "seconds": median,
        "per_object_frame": median / (n_expr * scene.num_frames),
        "encoder_calls": model.counters.encoder,
        "fusion_calls": model.counters.fusion,
        "visual_calls": model.counters.visual,
    }


def bench_throughput(model: Model, scene: Scene | None = None, counts=COUNTS, repeats: int = 5) -> dict:
    scene = scene or bench_scene(size=model.cfg.data.size, frames=model.cfg.data.frames)
    if max(counts) > len(scene.expressions):
        raise ValueError(f"scene has only {len(scene.expressions)} expressions")
    model.infer(scene.frames, scene.expressions[:1], "multi")    # warm caches
    table = []
    for n in counts:
        single = time_inference(model, scene, n, "single", repeats)
        multi = time_inference(model, scene, n, "multi", repeats)
        table.append({"n_expr": n, "single": single, "multi": multi,
                      "ratio": multi["per_object_frame"] / single["per_object_frame"]})
    return {"frames": scene.num_frames, "size": scene.frames.shape[-1], "repeats": repeats, "table": table}


def encoded_tokens(model: Model, scene: Scene, expression: int = 0) -> np.ndarray:
    """Encoded vision-language tokens ``F_vl`` of one expression, flattened to ``[T*L, C]``."""
    with T.no_grad():
        words, _ = model.text(np.asarray(scene.expressions[expression:expression + 1], np.int64))
        feats = model.visual(scene.frames)
        enc = model.encode(model.fuse(words[0], feats)).data
    return enc.reshape(-1, enc.shape[-1])


def drift_demo(model: Model, scene: Scene, seed: int = 0) -> dict:
    """Drift between ``F_vl`` and a 2-layer nonlinear decoder's output, against a random split of ``F_vl``."""
    f = encoded_tokens(model, scene)
    c = f.shape[-1]
    rng = np.random.default_rng(seed)
    head = D.init_mlp(rng, c, 2 * c, c, 1.0)
    decoded = D.mlp(T.Tensor(f), head).data
    perm = rng.permutation(len(f))
    half = len(f) // 2
    baseline = drift_score(f[perm[:half]], f[perm[half:]])
    decoded_drift = drift_score(f, decoded)
    return {"tokens": int(len(f)), "drift_decoded": decoded_drift, "drift_random_halves": baseline,
            "passed": bool(decoded_drift > baseline)}
