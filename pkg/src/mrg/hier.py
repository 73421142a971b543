"""Word-level then utterance-level self attention, pooled to a dialog vector."""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .mcam import CrossAttention
from .module import Init, Module, Trace
from .tensor import Tensor


class HierarchicalAttention(Module):
    def __init__(self, init: Init, dim: int, heads: int, word_layers: int = 1):
        self.word = [CrossAttention(init, dim, heads) for _ in range(word_layers)]
        self.utterance = CrossAttention(init, dim, 1)

    def word_mam(self, m: Tensor, mask: np.ndarray, trace: Trace | None = None) -> Tensor:
        """Self attention inside each utterance; ``m[..., L, d]``."""
        x = m
        for layer in self.word:
            x = layer(x, x, mask, query_mask=mask, trace=trace, name="word_mam")
        return x

    def utterance_level(
        self,
        h_w: Tensor,
        token_mask: np.ndarray,
        utt_mask: np.ndarray,
        attend: bool = True,
        trace: Trace | None = None,
    ) -> tuple[Tensor, Tensor]:
        """Mean-pool words per utterance, attend across utterances, pool to h^d."""
        pooled = T.mean_pool(h_w, token_mask, axis=2, live=utt_mask)
        if attend:
            h_u = self.utterance(pooled, pooled, utt_mask, query_mask=utt_mask, trace=trace, name="utt_mam")
        else:
            h_u = pooled
        h_d = T.mean_pool(h_u, utt_mask, axis=1)
        return h_u, h_d

    def __call__(
        self,
        m: Tensor,
        token_mask: np.ndarray,
        utt_mask: np.ndarray,
        use_attention: bool = True,
        trace: Trace | None = None,
    ) -> tuple[Tensor, Tensor]:
        if use_attention:
            B, U, L, d = m.shape
            flat = self.word_mam(m.reshape(B * U, L, d), token_mask.reshape(B * U, L), trace)
            m = flat.reshape(B, U, L, d)
        return self.utterance_level(m, token_mask, utt_mask, use_attention, trace)
