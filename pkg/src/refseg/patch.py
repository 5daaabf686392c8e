"""Conditional patch kernels: prediction, application and patch (un)flattening.

Patch masks are stored channel-first as ``[..., p*p, h, w]``; channel
``a*p + b`` of a token holds the label of pixel ``(a, b)`` of its p x p block.
"""
from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .spectral import cross_attention, init_attention_params
from .tensor import Tensor


class ConfigError(ValueError):
    pass


class FormatError(ValueError):
    pass


def kernel_length(channels: int, patch: int = 4, hidden: int = 16) -> int:
    """Flat size of a two-layer point-wise kernel: C->hidden, hidden->p^2."""
    return channels * hidden + hidden + hidden * patch * patch + patch * patch


def split_kernel(flat: Tensor, channels: int, patch: int = 4, hidden: int = 16):
    """Reshape flat kernels ``[..., K]`` into (w1, b1, w2, b2) conv parameters."""
    p2 = patch * patch
    if flat.shape[-1] != kernel_length(channels, patch, hidden):
        raise ConfigError(f"kernel width {flat.shape[-1]} != {kernel_length(channels, patch, hidden)}")
    lead = flat.shape[:-1]
    bounds = np.cumsum([channels * hidden, hidden, hidden * p2])
    w1 = T.reshape(flat[..., :bounds[0]], lead + (hidden, channels))
    b1 = flat[..., bounds[0]:bounds[1]]
    w2 = T.reshape(flat[..., bounds[1]:bounds[2]], lead + (p2, hidden))
    b2 = flat[..., bounds[2]:]
    return w1, b1, w2, b2


def predict_cpk(queries, tokens, params: dict, patch: int = 4, hidden: int = 16) -> Tensor:
    """FC(Att(Q, F_vl)) giving one flat kernel per query: ``[..., N, K]``."""
    queries = T.as_tensor(queries)
    c = queries.shape[-1]
    width = params["fc_w"].shape[-1]
    if width != kernel_length(c, patch, hidden):
        raise ConfigError(
            f"FC width {width} does not fit C={c}, p={patch}, hidden={hidden} "
            f"(needs {kernel_length(c, patch, hidden)})")
    att = cross_attention(queries, tokens, params["att"])
    return T.matmul(att, params["fc_w"]) + params["fc_b"]


def apply_cpk(kernels, feat, channels: int | None = None, patch: int = 4,
              hidden: int = 16) -> Tensor:
    """Segment ``feat[..., C, h, w]`` with kernels ``[..., N, K]`` -> ``[..., N, p*p, h, w]``.

    Output logits are not activated.
    """
    kernels, feat = T.as_tensor(kernels), T.as_tensor(feat)
    if feat.ndim < 3:
        raise T.ShapeError(f"features must be [..., C, h, w], got {feat.shape}")
    c = feat.shape[-3]
    if channels is not None and channels != c:
        raise T.ShapeError(f"kernel expects {channels} channels, features have {c}")
    w1, b1, w2, b2 = split_kernel(kernels, c, patch, hidden)
    feat = T.reshape(feat, feat.shape[:-3] + (1,) + feat.shape[-3:])
    return T.conv1x1(T.relu(T.conv1x1(feat, w1, b1)), w2, b2)


def _patch_size(channels: int) -> int:
    p = math.isqrt(channels)
    if p * p != channels:
        raise FormatError(f"{channels} channels is not a perfect square")
    return p


def flatten_patches(mask) -> Tensor:
    """Tile each token's p^2 channels into a p x p block: ``[..., p^2, h, w] -> [..., h*p, w*p]``."""
    mask = T.as_tensor(mask)
    *lead, c, h, w = mask.shape
    p = _patch_size(c)
    n = len(lead)
    x = T.reshape(mask, tuple(lead) + (p, p, h, w))
    x = T.transpose(x, tuple(range(n)) + (n + 2, n, n + 3, n + 1))
    return T.reshape(x, tuple(lead) + (h * p, w * p))


def unflatten_patches(image, patch: int) -> Tensor:
    """Inverse of :func:`flatten_patches`."""
    image = T.as_tensor(image)
    *lead, hp, wp = image.shape
    if hp % patch or wp % patch:
        raise FormatError(f"{(hp, wp)} not divisible by patch {patch}")
    h, w = hp // patch, wp // patch
    n = len(lead)
    x = T.reshape(image, tuple(lead) + (h, patch, w, patch))
    x = T.transpose(x, tuple(range(n)) + (n + 1, n + 3, n, n + 2))
    return T.reshape(x, tuple(lead) + (patch * patch, h, w))


def init_cpk_params(rng: np.random.Generator, c: int, patch: int = 4, hidden: int = 16) -> dict:
    k = kernel_length(c, patch, hidden)
    return {
        "att": init_attention_params(rng, c),
        "fc_w": rng.normal(0.0, 0.3 / math.sqrt(c), (c, k)),
        "fc_b": _kernel_bias_init(rng, c, patch, hidden),
    }


def _kernel_bias_init(rng, c, patch, hidden):
    # a sensible static kernel in the bias so early kernels are not all zero
    p2 = patch * patch
    return np.concatenate([
        rng.normal(0.0, math.sqrt(2.0 / c), c * hidden),
        np.zeros(hidden),
        rng.normal(0.0, 1.0 / math.sqrt(hidden), hidden * p2),
        np.full(p2, -2.0),
    ])
