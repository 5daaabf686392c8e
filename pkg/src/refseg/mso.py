"""Two-stage residual refinement of patch masks with stride-8 and stride-4 visual features."""
from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .patch import ConfigError, flatten_patches
from .tensor import Tensor

STAGES = ("8", "4")


def mso_stage(mask, feat, params: dict) -> Tensor:
    """Upsample ``mask[..., N, p^2, h, w]`` by two and add a predicted residual.

    ``feat`` is ``[..., C_s, 2h, 2w]`` and is shared by every query. The
    projection of concat(mask, feat) is evaluated as two point-wise convs over
    the split weight so the visual half is computed once, not once per query.
    """
    mask, feat = T.as_tensor(mask), T.as_tensor(feat)
    p2, h, w = mask.shape[-3:]
    if feat.shape[-2:] != (2 * h, 2 * w):
        raise T.ShapeError(f"features {feat.shape[-2:]} do not match upsampled mask {(2 * h, 2 * w)}")
    proj_w = params["proj_w"]
    if proj_w.shape[-1] != p2 + feat.shape[-3]:
        raise T.ShapeError(f"projection expects {proj_w.shape[-1]} inputs, got {p2 + feat.shape[-3]}")
    up = T.resize_bilinear(mask, 2)
    vis = T.conv1x1(feat, proj_w[:, p2:], params["proj_b"], exact=False)
    vis = T.reshape(vis, vis.shape[:-3] + (1,) + vis.shape[-3:])
    bases = T.relu(T.conv1x1(up, proj_w[:, :p2], exact=False) + vis)
    return up + T.conv1x1(bases, params["res_w"], params["res_b"], exact=False)


def identity_refine(mask16) -> Tensor:
    """Both stages with zero residual weights: two bilinear x2 upsamples of the patch channels."""
    return T.resize_bilinear(T.resize_bilinear(mask16, 2), 2)


def optimize_masks(mask16, feat8, feat4, params: dict, patch: int = 4) -> Tensor:
    """Refine stride-16 patch masks twice and flatten to full resolution ``[..., N, H, W]``."""
    if patch != 4:
        raise ConfigError("the stride-16 -> stride-4 layout needs patch size 4")
    m = mso_stage(mask16, feat8, params["8"])
    m = mso_stage(m, feat4, params["4"])
    return flatten_patches(m)


def init_mso_params(rng: np.random.Generator, channels: int, patch: int = 4,
                    low_dim: int = 16, zero: bool = False) -> dict:
    p2 = patch * patch
    out = {}
    for s in STAGES:
        out[s] = {
            "proj_w": rng.normal(0.0, math.sqrt(2.0 / (p2 + channels)), (low_dim, p2 + channels)),
            "proj_b": np.zeros(low_dim),
            "res_w": (np.zeros((p2, low_dim)) if zero
                      else rng.normal(0.0, 0.1 / math.sqrt(low_dim), (p2, low_dim))),
            "res_b": np.zeros(p2),
        }
    return out
