"""Spectrum augmentation, cross-attention and spectrum-guided fusion."""
from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .tensor import Tensor


class EmptyContextError(ValueError):
    pass


def frequency_radius(h: int, w: int) -> np.ndarray:
    """Distance of every DFT bin from DC in cycles/sample, laid out like ``fft2`` output."""
    fu = np.fft.fftfreq(h)[:, None]
    fv = np.fft.fftfreq(w)[None, :]
    return np.sqrt(fu * fu + fv * fv)


def filter_scale(feat: Tensor, params: dict) -> Tensor:
    """softplus(linear(mean-pool(F))) with shape ``[..., 1, 1, 1]``."""
    pooled = T.mean(feat, axis=(-2, -1))                       # [..., C]
    z = T.matmul(T.reshape(pooled, pooled.shape[:-1] + (1, pooled.shape[-1])),
                 params["scale_w"]) + params["scale_b"]        # [..., 1, 1]
    return T.reshape(T.softplus(z), z.shape[:-2] + (1, 1, 1))


def make_gaussian_lowpass(bandwidth: float, feat: Tensor, params: dict,
                          scale: Tensor | None = None) -> Tensor:
    """Input-aware Gaussian low-pass map ``[..., 1, H, W]`` on the unshifted DFT grid."""
    if bandwidth <= 0:
        raise ValueError("bandwidth must be positive")
    h, w = feat.shape[-2:]
    if scale is None:
        scale = filter_scale(feat, params)
    d2 = frequency_radius(h, w) ** 2
    sigma = scale * bandwidth
    return T.exp(T.div(-d2, 2.0 * T.square(sigma)))


def spectral_conv(spec: T.Spectrum, weight: Tensor, bias: Tensor) -> T.Spectrum:
    """One real point-wise conv over stacked (real || imag) channels, split back."""
    c = spec.shape[-3]
    z = T.conv1x1(T.concat([spec.real, spec.imag], axis=-3), weight, bias, exact=False)
    return T.Spectrum(z[..., :c, :, :], z[..., c:, :, :])


def spectrum_augment(feat, bandwidth: float, params: dict,
                     gauss: Tensor | None = None) -> Tensor:
    """F + real(ifft2(Conv(G * fft2(F)))) for ``F[..., C, H, W]``.

    ``params`` holds ``conv_w`` (2C x 2C), ``conv_b`` (2C), ``scale_w`` (C x 1)
    and ``scale_b`` (1). A precomputed filter may be passed as ``gauss``.
    """
    feat = T.as_tensor(feat)
    if gauss is None:
        gauss = make_gaussian_lowpass(bandwidth, feat, params)
    spec = T.fft2(feat)
    filtered = T.Spectrum(spec.real * gauss, spec.imag * gauss)
    mixed = spectral_conv(filtered, params["conv_w"], params["conv_b"])
    # mixing real and imaginary channels breaks Hermitian symmetry; keep the real part
    return feat + T.ifft2(mixed, check=False)


def cross_attention(q, kv, params: dict, key_mask: np.ndarray | None = None) -> Tensor:
    """Single-head softmax(q Wq (kv Wk)^T / sqrt(C)) kv Wv over ``[..., N, C]`` rows.

    ``key_mask`` (broadcastable to ``[..., Nk]``) marks valid keys with True.
    """
    q, kv = T.as_tensor(q), T.as_tensor(kv)
    if kv.shape[-2] == 0:
        raise EmptyContextError("attention needs at least one key")
    if q.shape[-1] != kv.shape[-1]:
        raise T.ShapeError(f"width mismatch {q.shape[-1]} vs {kv.shape[-1]}")
    c = params["wq"].shape[-1]
    qp = T.matmul(q, params["wq"])
    kp = T.matmul(kv, params["wk"])
    vp = T.matmul(kv, params["wv"])
    logits = T.matmul(qp, T.swap_last(kp)) * (1.0 / math.sqrt(c))
    if key_mask is not None:
        bias = np.where(np.asarray(key_mask, dtype=bool), 0.0, -1e30)
        logits = logits + bias[..., None, :]
    return T.matmul(T.softmax(logits, axis=-1), vp)


def to_tokens(feat: Tensor) -> Tensor:
    """[..., C, H, W] -> [..., H*W, C]."""
    c, h, w = feat.shape[-3:]
    return T.swap_last(T.reshape(feat, feat.shape[:-2] + (h * w,)))


def from_tokens(tokens: Tensor, h: int, w: int) -> Tensor:
    """[..., H*W, C] -> [..., C, H, W]."""
    t = T.swap_last(tokens)
    return T.reshape(t, t.shape[:-1] + (h, w))


def scf(words, visual, params: dict, bandwidth: float = 0.25,
        key_mask: np.ndarray | None = None, enabled: bool = True) -> Tensor:
    """Fuse word features ``[..., Nw, C]`` into visual features ``[..., C, H, W]``.

    SA_post(SA_pre(F_v) * Att(SA_pre(F_v), F_w)) with the product taken per
    spatial token. ``enabled=False`` drops both augmentations.
    """
    visual = T.as_tensor(visual)
    h, w = visual.shape[-2:]
    pre = spectrum_augment(visual, bandwidth, params["pre"]) if enabled else visual
    tokens = to_tokens(pre)
    att = cross_attention(tokens, words, params["att"], key_mask)
    fused = from_tokens(tokens * att, h, w)
    return spectrum_augment(fused, bandwidth, params["post"]) if enabled else fused


def init_sa_params(rng: np.random.Generator, c: int, scale: float = 0.1) -> dict[str, np.ndarray]:
    return {
        "conv_w": rng.normal(0.0, scale / math.sqrt(2 * c), (2 * c, 2 * c)),
        "conv_b": np.zeros(2 * c),
        "scale_w": rng.normal(0.0, 1.0 / math.sqrt(c), (c, 1)),
        "scale_b": np.full(1, 0.5413),  # softplus(0.5413) ~= 1
    }


def init_attention_params(rng: np.random.Generator, c: int) -> dict[str, np.ndarray]:
    s = 1.0 / math.sqrt(c)
    return {k: rng.normal(0.0, s, (c, c)) for k in ("wq", "wk", "wv")}
