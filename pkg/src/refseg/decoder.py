"""Transformer stand-in: token encoder, instance queries, embedding decoder and heads."""
from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .spectral import cross_attention, from_tokens, init_attention_params, to_tokens
from .tensor import Tensor


def sinusoid_2d(h: int, w: int, c: int) -> np.ndarray:
    """Fixed 2D position code ``[H*W, C]`` on normalized cell centres.

    Using normalized coordinates keeps codes comparable across feature strides.
    """
    if c % 4:
        raise ValueError("positional width must be a multiple of 4")
    ys = (np.arange(h) + 0.5) / h
    xs = (np.arange(w) + 0.5) / w
    freqs = 2.0 * np.pi * (2.0 ** np.arange(c // 4))
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    parts = []
    for coord in (yy.ravel(), xx.ravel()):
        ang = coord[:, None] * freqs[None, :]
        parts += [np.sin(ang), np.cos(ang)]
    return np.concatenate(parts, axis=1) * 0.1


def mlp(x: Tensor, p: dict) -> Tensor:
    return T.matmul(T.gelu(T.matmul(x, p["w1"]) + p["b1"]), p["w2"]) + p["b2"]


def encode_tokens(tokens: Tensor, params: dict, key_mask=None) -> Tensor:
    """Pre-norm self-attention + MLP blocks over ``[..., L, C]`` with residuals."""
    x = tokens
    for i in range(len(params)):
        layer = params[str(i)]
        h = T.layer_norm(x)
        x = x + cross_attention(h, h, layer["att"], key_mask)
        x = x + mlp(T.layer_norm(x), layer["mlp"])
    return x


def encode_features(feat, params: dict, pos: np.ndarray | None = None) -> Tensor:
    """Encode one feature map ``[..., C, H, W]``; shape is preserved.

    ``pos`` (``[H*W, C]``) is added to the tokens before the first layer.
    """
    feat = T.as_tensor(feat)
    h, w = feat.shape[-2:]
    tokens = to_tokens(feat)
    if pos is not None:
        tokens = tokens + pos
    return from_tokens(encode_tokens(tokens, params), h, w)


def build_queries(sentence, learned) -> Tensor:
    """Q[i] = learned[i] + F_s for sentence ``[..., C]`` and embeddings ``[N, C]``."""
    sentence = T.as_tensor(sentence)
    return T.as_tensor(learned) + T.reshape(sentence, sentence.shape[:-1] + (1, sentence.shape[-1]))


def decode_embeddings(queries, tokens, params: dict, key_mask=None) -> Tensor:
    """Stacked cross-attention + MLP blocks; queries attend to each frame's tokens.

    ``queries`` is ``[..., N, C]`` and ``tokens`` ``[..., T, L, C]``; the result is
    ``[..., T, N, C]`` (queries are shared across frames).
    """
    tokens = T.as_tensor(tokens)
    q = T.as_tensor(queries)
    q = T.reshape(q, q.shape[:-2] + (1,) + q.shape[-2:])
    q = T.broadcast_to(q, tokens.shape[:-2] + q.shape[-2:])
    for i in range(len(params)):
        layer = params[str(i)]
        q = q + cross_attention(T.layer_norm(q), tokens, layer["att"], key_mask)
        q = q + mlp(T.layer_norm(q), layer["mlp"])
    return q


def score_logits(emb: Tensor, p: dict) -> Tensor:
    z = T.matmul(emb, p["w"]) + p["b"]
    return T.reshape(z, z.shape[:-1])


def predict_scores(emb: Tensor, p: dict) -> Tensor:
    """Confidence in (0, 1) per frame and query."""
    return T.sigmoid(score_logits(emb, p))


def predict_boxes(emb: Tensor, p: dict) -> Tensor:
    """Normalized (cx, cy, w, h) per frame and query."""
    return T.sigmoid(mlp(emb, p))


def init_mlp(rng: np.random.Generator, c_in: int, hidden: int, c_out: int,
             out_scale: float = 1.0) -> dict[str, np.ndarray]:
    return {
        "w1": rng.normal(0.0, math.sqrt(2.0 / c_in), (c_in, hidden)),
        "b1": np.zeros(hidden),
        "w2": rng.normal(0.0, out_scale / math.sqrt(hidden), (hidden, c_out)),
        "b2": np.zeros(c_out),
    }


def init_stack(rng: np.random.Generator, c: int, layers: int) -> dict:
    return {str(i): {"att": init_attention_params(rng, c), "mlp": init_mlp(rng, c, 2 * c, c, 0.5)}
            for i in range(layers)}
