"""Multi-expression fusion over shared visual features and per-expression decoupling."""
from __future__ import annotations

from typing import Sequence

from . import tensor as T
from .decoder import build_queries, decode_embeddings
from .spectral import (EmptyContextError, cross_attention, from_tokens, spectrum_augment,
                       to_tokens)
from .tensor import Tensor


def _canonical(words: Sequence[Tensor]) -> list[Tensor]:
    # float addition is not associative; summing in a content-defined order
    # makes the fused result independent of how expressions were listed
    return sorted(words, key=lambda w: (w.shape, w.data.tobytes()))


def semantic_fusion(words: Sequence, visual_tokens, params: dict) -> Tensor:
    """Sum over expressions of Att(visual tokens, F_w^e) with one shared attention.

    ``visual_tokens`` is ``[..., L, C]``; each entry of ``words`` is ``[Nw_e, C]``
    (or batched to broadcast against the visual leading axes).
    """
    words = [T.as_tensor(w) for w in words]
    if not words:
        raise EmptyContextError("semantic fusion needs at least one expression")
    terms = [cross_attention(visual_tokens, w, params) for w in _canonical(words)]
    out = terms[0]
    for t in terms[1:]:
        out = out + t
    return out


def multi_instance_fusion(words: Sequence, visual, params: dict, bandwidth: float = 0.25,
                          enabled: bool = True) -> Tensor:
    """SA_post(SA_pre(F_v) * SF(F_w, SA_pre(F_v))) shared by all expressions."""
    visual = T.as_tensor(visual)
    h, w = visual.shape[-2:]
    pre = spectrum_augment(visual, bandwidth, params["pre"]) if enabled else visual
    tokens = to_tokens(pre)
    fused = from_tokens(tokens * semantic_fusion(words, tokens, params["att"]), h, w)
    return spectrum_augment(fused, bandwidth, params["post"]) if enabled else fused


def decouple_tokens(shared_tokens, words, params: dict, key_mask=None) -> Tensor:
    """Instance-specific tokens: shared tokens gated by Att(tokens, F_w)."""
    shared_tokens = T.as_tensor(shared_tokens)
    return shared_tokens * cross_attention(shared_tokens, words, params, key_mask)


def decouple_instances(shared_tokens, words, sentence, learned_queries, params: dict,
                       key_mask=None) -> Tensor:
    """Decode embeddings ``[..., T, N, C]`` for one expression from shared encoded tokens.

    ``params`` holds ``gate`` (attention) and ``decoder`` (layer stack).
    """
    tokens = decouple_tokens(shared_tokens, words, params["gate"], key_mask)
    queries = build_queries(sentence, learned_queries)
    return decode_embeddings(queries, tokens, params["decoder"])
