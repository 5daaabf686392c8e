"""Desk-scale training on synthetic scenes, evaluation helpers and optimizers."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io
from . import losses as L
from . import tensor as T
from .config import RunConfig
from .metrics import MaskPair, jf_scores
from .model import Model
from .scene import Scene, generate_corpus

log = logging.getLogger(__name__)


class TrainingDivergedError(FloatingPointError):
    pass


@dataclass
class Corpus:
    scenes: list[Scene]
    frames: np.ndarray        # [V, T, 3, H, W]
    pair_video: np.ndarray    # [B]
    tokens: np.ndarray        # [B, Nw]
    gt: L.GroundTruth         # masks [B, T, H, W], boxes [B, T, 4], present [B, T]


def build_corpus(scenes: list[Scene]) -> Corpus:
    pair_video, tokens, masks, boxes, present = [], [], [], [], []
    for v, s in enumerate(scenes):
        for expr, target in zip(s.expressions, s.targets):
            pair_video.append(v)
            tokens.append(expr)
            masks.append(s.masks[target].astype(float))
            boxes.append(s.boxes[target])
            present.append(s.present[target])
    gt = L.GroundTruth(np.stack(masks), np.stack(boxes), np.stack(present))
    return Corpus(scenes, np.stack([s.frames for s in scenes]), np.array(pair_video),
                  np.array(tokens, dtype=np.int64), gt)


def corpus_from_config(cfg: RunConfig) -> Corpus:
    d = cfg.data
    return build_corpus(generate_corpus(d.seed, d.videos, frames=d.frames, size=d.size,
                                        objects=d.objects, expressions=d.expressions))


def loss_weights(cfg: RunConfig) -> L.LossWeights:
    c = cfg.loss
    return L.LossWeights(c.dice, c.focal, c.l1, c.giou, c.score, c.dice_eps, c.focal_alpha, c.focal_gamma)


def batch_loss(model: Model, corpus: Corpus, weights: L.LossWeights, parts: dict | None = None):
    """Forward all pairs, match one query per pair on patch masks and return ``(loss, matched)``."""
    out, feats = model.forward_pairs(corpus.frames, corpus.pair_video, corpus.tokens)
    mp_all = T.Tensor(model.patch_to_full_values(out.patch_masks.data))
    cost = L.matching_cost(L.Prediction(mp_all, mp_all, out.boxes, out.score_logits), corpus.gt, weights)
    if not np.isfinite(cost).all():
        raise TrainingDivergedError("non-finite matching cost")
    matched = np.array([L.hungarian_select(c[:, None])[0][0] for c in cost])
    b = np.arange(len(matched))
    mp_sel = out.patch_masks[b, :, matched]
    pred = L.Prediction(model.patch_to_full(mp_sel), model.refine(mp_sel, feats), out.boxes, out.score_logits)
    return L.total_loss(pred, corpus.gt, matched, weights, parts), matched


class SGD:
    def __init__(self, lr: float, momentum: float = 0.9):
        self.lr, self.momentum = lr, momentum
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, store: T.ParamStore, grads: dict[str, np.ndarray]) -> None:
        for name, g in grads.items():
            v = self.velocity.get(name)
            v = g.copy() if v is None else self.momentum * v + g
            self.velocity[name] = v
            store[name].data -= self.lr * v


class AdamW:
    def __init__(self, lr: float, weight_decay: float = 0.0, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr, self.wd, self.betas, self.eps = lr, weight_decay, betas, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, store: T.ParamStore, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.betas
        for name, g in grads.items():
            m = self.m.get(name, np.zeros_like(g))
            v = self.v.get(name, np.zeros_like(g))
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            self.m[name], self.v[name] = m, v
            mhat = m / (1 - b1 ** self.t)
            vhat = v / (1 - b2 ** self.t)
            p = store[name].data
            p -= self.lr * (mhat / (np.sqrt(vhat) + self.eps) + self.wd * p)


def make_optimizer(cfg: RunConfig):
    t = cfg.train
    if t.optimizer == "adamw":
        return AdamW(t.lr, t.weight_decay)
    return SGD(t.lr, t.momentum)


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


@dataclass
class TrainResult:
    model: Model
    losses: list[float]
    checkpoints: list[Path] = field(default_factory=list)
    seconds: float = 0.0


def train(cfg: RunConfig, out_dir=None, corpus: Corpus | None = None, iters: int | None = None,
          callback=None) -> TrainResult:
    """Minimise the total loss on the synthetic corpus.

    ``losses[i]`` is the loss evaluated before update ``i``, so ``losses[0]``
    belongs to the initial parameters saved as checkpoint 0. ``callback(i,
    model)`` runs after every update and may return True to stop early.
    """
    cfg.validate()
    iters = cfg.train.iters if iters is None else iters
    corpus = corpus or corpus_from_config(cfg)
    model = Model(cfg)
    weights = loss_weights(cfg)
    opt = make_optimizer(cfg)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.txt").write_text(cfg.to_text())
    result = TrainResult(model, [])
    start = time.perf_counter()
    for it in range(iters):
        if out is not None and it % cfg.train.checkpoint_every == 0:
            result.checkpoints.append(_save(model, out / f"ckpt_{it:06d}.npz", it, cfg))
        model.store.zero_grad()
        parts: dict[str, float] = {}
        try:
            loss, _ = batch_loss(model, corpus, weights, parts)
        except TrainingDivergedError as exc:
            raise TrainingDivergedError(
                f"{exc} at iteration {it}; last finite loss "
                f"{result.losses[-1] if result.losses else None}") from exc
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingDivergedError(
                f"non-finite loss at iteration {it}: {value}; terms {parts}; "
                f"last finite loss {result.losses[-1] if result.losses else None}")
        result.losses.append(value)
        loss.backward()
        grads = model.store.grads()
        norm = clip_gradients(grads, cfg.train.clip)
        if not np.isfinite(norm):
            raise TrainingDivergedError(f"non-finite gradient norm at iteration {it}; loss {value}; terms {parts}")
        opt.step(model.store, grads)
        if it % cfg.train.log_every == 0:
            log.info("iter %d loss %.4f grad %.3f %s", it, value, norm,
                     " ".join(f"{k}={v:.3f}" for k, v in parts.items()))
        if callback is not None and callback(it, model):
            break
    result.seconds = time.perf_counter() - start
    if out is not None:
        result.checkpoints.append(_save(model, out / "final.npz", len(result.losses), cfg))
        (out / "losses.json").write_text(json.dumps(result.losses))
    return result


def _save(model: Model, path: Path, step: int, cfg: RunConfig) -> Path:
    io.save_checkpoint(path, model.store.state(), {"step": step, "config": cfg.to_text()})
    return path


def load_model(path, cfg: RunConfig | None = None) -> Model:
    """Rebuild a model from a checkpoint, using its embedded config unless one is given."""
    from .config import parse_config

    params, meta = io.load_checkpoint(path)
    if cfg is None:
        cfg = parse_config(meta.get("config", ""))
    return Model(cfg, params)


def evaluate(model: Model, scenes: list[Scene], mode: str = "single") -> dict[str, float]:
    """J/F/J&F of thresholded predictions against the referred objects' masks."""
    pairs = []
    for v, s in enumerate(scenes):
        results = model.infer(s.frames, s.expressions, mode)
        for e, (r, target) in enumerate(zip(results, s.targets)):
            for t in range(s.num_frames):
                pairs.append(MaskPair(r.masks()[t], s.masks[target, t], video=str(v), obj=str(e)))
    return jf_scores(pairs)
