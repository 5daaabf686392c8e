"""End-to-end pipeline: toy encoders, fusion, encoding, instance decoding and mask heads.

Two inference modes share one parameter set:

* ``single`` runs the whole pipeline once per expression (fusion with one
  expression at a time);
* ``multi`` encodes the video once, fuses all expressions jointly and only
  runs the light per-expression decoupling and segmentation heads per
  expression.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import decoder as D
from . import encoders as E
from . import mso as M
from . import patch as P
from . import tensor as T
from .config import RunConfig
from .multi import multi_instance_fusion
from .scene import VOCAB
from .spectral import (cross_attention, from_tokens, init_attention_params, init_sa_params, scf,
                       to_tokens)
from .tensor import ParamStore, Tensor

LEVELS = (8, 16, 32)


@dataclass
class Counters:
    visual: int = 0
    fusion: int = 0
    encoder: int = 0
    instance: int = 0

    def reset(self) -> None:
        self.visual = self.fusion = self.encoder = self.instance = 0


@dataclass
class InstanceOutputs:
    """Per-query outputs with layout ``[..., T, N, ...]``."""
    embeddings: Tensor
    patch_masks: Tensor      # [..., T, N, p*p, H/16, W/16]
    score_logits: Tensor     # [..., T, N]
    boxes: Tensor            # [..., T, N, 4]


@dataclass
class ExpressionResult:
    mask_logits: np.ndarray  # [T, H, W]
    boxes: np.ndarray        # [T, 4]
    scores: np.ndarray       # [T]
    query: int

    @property
    def score(self) -> float:
        return float(self.scores.mean())

    def masks(self) -> np.ndarray:
        return self.mask_logits > 0.0


def flatten_tree(tree: dict, prefix: str = "") -> dict[str, np.ndarray]:
    out = {}
    for k, v in tree.items():
        if isinstance(v, dict):
            out.update(flatten_tree(v, f"{prefix}{k}."))
        else:
            out[f"{prefix}{k}"] = np.asarray(v, np.float64)
    return out


def init_params(cfg: RunConfig) -> dict[str, np.ndarray]:
    """Fresh parameters as a flat ``name -> array`` mapping (deterministic in ``model.seed``)."""
    c = cfg.model.dim
    rng = np.random.default_rng(cfg.model.seed)
    tree = {
        "visual": E.init_visual_params(rng, c),
        "text": E.init_text_params(rng, len(VOCAB), c),
        "scf": {str(s): {"pre": init_sa_params(rng, c), "post": init_sa_params(rng, c),
                         "att": init_attention_params(rng, c)} for s in LEVELS},
        "level": rng.normal(0.0, 0.1, (len(LEVELS), c)),
        "encoder": D.init_stack(rng, c, cfg.model.enc_layers),
        "gate": init_attention_params(rng, c),
        "queries": rng.normal(0.0, 1.0, (cfg.model.num_queries, c)),
        "decoder": D.init_stack(rng, c, cfg.model.dec_layers),
        "cpk": P.init_cpk_params(rng, c, cfg.cpk.patch, cfg.cpk.hidden),
        "score": {"w": rng.normal(0.0, 1.0 / np.sqrt(c), (c, 1)), "b": np.full(1, -2.0)},
        "box": D.init_mlp(rng, c, c, 4, 0.5),
        "mso": M.init_mso_params(rng, c, cfg.cpk.patch, cfg.mso.low_dim),
    }
    return flatten_tree(tree)


class Model:
    def __init__(self, cfg: RunConfig, params: dict[str, np.ndarray] | None = None):
        self.cfg = cfg.validate()
        self.store = ParamStore(init_params(cfg))
        if params is not None:
            self.store.load_state(params)
        self.counters = Counters()
        self._pos: dict[tuple[int, int], np.ndarray] = {}

    # -- building blocks ---------------------------------------------------

    @property
    def params(self) -> dict:
        return self.store.tree()

    def visual(self, frames) -> dict[int, Tensor]:
        self.counters.visual += 1
        return E.toy_visual_encoder(frames, self.params["visual"])

    def text(self, tokens) -> tuple[Tensor, Tensor]:
        return E.toy_text_encoder(np.asarray(tokens, dtype=np.int64), self.params["text"])

    def fuse(self, words, feats: dict[int, Tensor], multi: bool = False) -> dict[int, Tensor]:
        """Per-level fusion; ``words`` is one ``[..., Nw, C]`` tensor or, in multi mode, a list."""
        self.counters.fusion += 1
        p, bw, on = self.params["scf"], self.cfg.scf.bandwidth, self.cfg.scf.enabled
        if multi:
            return {s: multi_instance_fusion(words, feats[s], p[str(s)], bw, on) for s in LEVELS}
        return {s: scf(words, feats[s], p[str(s)], bw, enabled=on) for s in LEVELS}

    def _positions(self, h: int, w: int) -> np.ndarray:
        key = (h, w)
        if key not in self._pos:
            self._pos[key] = D.sinusoid_2d(h, w, self.cfg.model.dim)
        return self._pos[key]

    def encode(self, fused: dict[int, Tensor]) -> Tensor:
        """Concatenate multi-scale tokens (with positions) and encode: ``[..., T, L, C]``."""
        self.counters.encoder += 1
        level = self.params["level"]
        parts = []
        for i, s in enumerate(LEVELS):
            h, w = fused[s].shape[-2:]
            parts.append(to_tokens(fused[s]) + self._positions(h, w) + level[i])
        return D.encode_tokens(T.concat(parts, axis=-2), self.params["encoder"])

    def _split_levels(self, tokens: Tensor, size: int) -> dict[int, Tensor]:
        out, start = {}, 0
        for s in LEVELS:
            n = (size // s) ** 2
            out[s] = from_tokens(tokens[..., start:start + n, :], size // s, size // s)
            start += n
        return out

    def instances(self, encoded: Tensor, words: Tensor, sentence: Tensor, size: int) -> InstanceOutputs:
        """Decouple, decode and segment for each expression.

        ``encoded`` is ``[..., T, L, C]`` (shared or per expression), ``words``
        ``[E, Nw, C]`` and ``sentence`` ``[E, C]``; outputs lead with ``E``.
        """
        self.counters.instance += 1
        p = self.params
        cfg = self.cfg.cpk
        w = T.reshape(words, words.shape[:-2] + (1,) + words.shape[-2:])
        gated = encoded * cross_attention(encoded, w, p["gate"])
        queries = D.build_queries(sentence, p["queries"])
        emb = D.decode_embeddings(queries, gated, p["decoder"])
        kernels = P.predict_cpk(emb, gated, p["cpk"], cfg.patch, cfg.hidden)
        lv = self._split_levels(gated, size)
        seg = T.avg_pool2(lv[8]) + lv[16] + T.resize_bilinear(lv[32], 2)
        masks = P.apply_cpk(kernels, seg, patch=cfg.patch, hidden=cfg.hidden)
        return InstanceOutputs(emb, masks, D.score_logits(emb, p["score"]), D.predict_boxes(emb, p["box"]))

    @staticmethod
    def patch_to_full(mask16: Tensor) -> Tensor:
        """Patch masks ``[..., p*p, h, w]`` flattened and bilinearly resized to full resolution."""
        return T.resize_bilinear(T.resize_bilinear(P.flatten_patches(mask16), 2), 2)

    @staticmethod
    def patch_to_full_values(mask16) -> np.ndarray:
        """Same interpolation as :meth:`patch_to_full` evaluated as two matrix products (no graph).

        Used for matching, where the rounding difference is irrelevant and the
        masks of all queries would otherwise dominate the step time.
        """
        img = P.flatten_patches(T.as_tensor(mask16).data).data
        h, w = img.shape[-2:]
        uh = T._upsample_axis(T._upsample_axis(np.eye(h), 0), 0)
        uw = T._upsample_axis(T._upsample_axis(np.eye(w), 0), 0)
        return uh @ img @ uw.T

    def refine(self, mask16: Tensor, feats: dict[int, Tensor]) -> Tensor:
        """Full-resolution logits ``[..., T, H, W]`` for selected patch masks ``[..., T, p*p, h, w]``.

        With ``mso.enabled`` false the optimizer is frozen at identity: both
        residuals are zero, so the result is the flatten of the mask upsampled
        twice in token space.
        """
        if not self.cfg.mso.enabled:
            return P.flatten_patches(M.identity_refine(mask16))
        m = T.reshape(mask16, mask16.shape[:-3] + (1,) + mask16.shape[-3:])
        out = M.optimize_masks(m, feats[8], feats[4], self.params["mso"], self.cfg.cpk.patch)
        return T.reshape(out, out.shape[:-3] + out.shape[-2:])

    # -- inference ----------------------------------------------------------

    def infer(self, frames, expressions, mode: str = "multi") -> list[ExpressionResult]:
        """Predict one mask track per expression for a single video ``[T, 3, H, W]``."""
        if mode not in ("single", "multi"):
            raise ValueError(f"unknown mode {mode!r}")
        frames = np.asarray(frames, np.float64)
        size = frames.shape[-1]
        if frames.shape[-2] != size:
            raise T.ShapeError("frames must be square")
        tokens = np.asarray(expressions, dtype=np.int64)
        with T.no_grad():
            words, sentence = self.text(tokens)
            if mode == "multi":
                feats = self.visual(frames)
                encoded = self.encode(self.fuse([words[e] for e in range(len(tokens))], feats, multi=True))
                outs = [self._select(self.instances(encoded, words, sentence, size), feats)]
            else:
                outs = []
                for e in range(len(tokens)):
                    feats = self.visual(frames)
                    encoded = self.encode(self.fuse(words[e], feats))
                    outs.append(self._select(self.instances(encoded, words[e:e + 1], sentence[e:e + 1], size),
                                             feats))
        results = []
        for logits, boxes, scores, q in outs:
            for e in range(len(q)):
                results.append(ExpressionResult(logits[e], boxes[e], scores[e], int(q[e])))
        return results

    def _select(self, out: InstanceOutputs, feats):
        """Choose the query with the highest mean confidence and refine only that one."""
        logits = out.score_logits.data                          # [E, T, N]
        q = np.argmax(logits.mean(axis=-2), axis=-1)
        e_idx = np.arange(len(q))
        mask16 = out.patch_masks[e_idx, :, q]                   # [E, T, p*p, h, w]
        full = self.refine(mask16, feats).data
        boxes = out.boxes.data[e_idx, :, q]
        scores = T._sigmoid(logits[e_idx, :, q])
        return full, boxes, scores, q

    # -- training -----------------------------------------------------------

    def forward_pairs(self, frames, pair_video, tokens):
        """Batched single-mode forward over (video, expression) pairs.

        ``frames`` is ``[V, T, 3, H, W]``; ``pair_video[b]`` picks the video of
        pair ``b`` and ``tokens`` is ``[B, Nw]``. Visual features are computed
        once per video. Returns ``(InstanceOutputs, gathered stride-8/4 features)``.
        """
        size = np.shape(frames)[-1]
        feats_v = self.visual(frames)
        idx = np.asarray(pair_video)
        feats = {s: f[idx] for s, f in feats_v.items()}
        words, sentence = self.text(tokens)
        w = T.reshape(words, (words.shape[0], 1) + words.shape[1:])
        encoded = self.encode(self.fuse(w, feats))
        return self.instances(encoded, words, sentence, size), feats
