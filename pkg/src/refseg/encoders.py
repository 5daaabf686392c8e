"""Toy visual backbone (strides 4/8/16/32) and word-embedding text encoder."""
from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .tensor import Tensor

STRIDES = (4, 8, 16, 32)


def toy_visual_encoder(frames, params: dict) -> dict[int, Tensor]:
    """Patchify by 4 then merge 2x2 neighbourhoods three times.

    ``frames`` is ``[..., 3, H, W]``; returns ``{stride: [..., C, H/stride, W/stride]}``.
    Every stage is a point-wise map of non-overlapping blocks, so there is no
    padding and a shift by one block shifts the features by one token.
    """
    frames = T.as_tensor(frames)
    h, w = frames.shape[-2:]
    if h % 32 or w % 32:
        raise T.ShapeError(f"frame size {(h, w)} must be divisible by 32")
    feats = {4: T.conv1x1(T.space_to_depth(frames, 4), params["s4"]["w"], params["s4"]["b"], exact=False)}
    x = feats[4]
    for s in STRIDES[1:]:
        p = params[f"s{s}"]
        x = T.conv1x1(T.space_to_depth(T.gelu(x), 2), p["w"], p["b"], exact=False)
        feats[s] = x
    return feats


def init_visual_params(rng: np.random.Generator, c: int, in_ch: int = 3) -> dict:
    params = {"s4": {"w": rng.normal(0.0, 1.0 / math.sqrt(in_ch * 16), (c, in_ch * 16)) * 2.0,
                     "b": np.zeros(c)}}
    for s in STRIDES[1:]:
        params[f"s{s}"] = {"w": rng.normal(0.0, math.sqrt(2.0 / (4 * c)), (c, 4 * c)), "b": np.zeros(c)}
    return params


def toy_text_encoder(tokens, embed) -> tuple[Tensor, Tensor]:
    """Word features ``F_w = embed[tokens]`` and sentence feature ``F_s = mean(F_w)``.

    ``tokens`` is an integer array ``[..., Nw]``.
    """
    embed = T.as_tensor(embed)
    ids = np.asarray(tokens)
    if ids.size == 0 or ids.shape[-1] == 0:
        raise ValueError("empty expression")
    if not np.issubdtype(ids.dtype, np.integer):
        raise TypeError("token ids must be integers")
    if ids.min() < 0 or ids.max() >= embed.shape[0]:
        raise KeyError(f"token id outside vocabulary of size {embed.shape[0]}")
    words = embed[ids]
    return words, T.mean(words, axis=-2)


def init_text_params(rng: np.random.Generator, vocab: int, c: int) -> np.ndarray:
    return rng.normal(0.0, 1.0, (vocab, c))
