"""Extractive answer selection over the flattened context grid."""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .module import Init, Module
from .tensor import Tensor


class AnswerSelector(Module):
    """MLP from ``[h^{u,1}; ...; h^{u,U}; h^q]`` to one logit per context slot.

    Dialogs shorter than ``max_utts`` contribute zero vectors for the missing
    utterances.  Output slot ``j * max_utt_len + i`` scores token ``i`` of
    utterance ``j``.
    """

    def __init__(self, init: Init, dim: int, max_utts: int, max_utt_len: int, hidden: int):
        self.max_utts = max_utts
        self.w_e = init.normal((max_utts + 1) * dim, hidden)
        self.b_e = init.const(0.0, hidden)
        self.w_f = init.normal(hidden, max_utts * max_utt_len)
        self.b_f = init.const(0.0, max_utts * max_utt_len)

    def __call__(self, h_u: Tensor, h_q_states: Tensor, q_mask: np.ndarray) -> Tensor:
        B, U, d = h_u.shape
        if U > self.max_utts:
            raise ValueError(f"{U} utterances exceed selector capacity {self.max_utts}")
        h_q = T.mean_pool(h_q_states, q_mask, axis=1)
        if U < self.max_utts:
            h_u = T.concat([h_u, T.zeros((B, self.max_utts - U, d), dtype=h_u.dtype)], axis=1)
        features = T.concat([h_u.reshape(B, self.max_utts * d), h_q], axis=-1)
        return T.tanh(features @ self.w_e + self.b_e) @ self.w_f + self.b_f


def answer_loss(logits: Tensor, gold: np.ndarray, mask: np.ndarray) -> Tensor:
    """Per-example mean BCE over real context slots, averaged over the batch."""
    per_slot = T.bce_with_logits(logits, gold)
    per_example = T.mean_pool(per_slot, mask, axis=1)
    return per_example.sum() * (1.0 / logits.shape[0])


def extract(logits: np.ndarray, mask: np.ndarray, threshold: float = 0.5) -> list[list[int]]:
    """Grid slots whose probability exceeds ``threshold``; padding never selected."""
    cut = np.log(threshold) - np.log1p(-threshold)
    chosen = (np.asarray(logits, dtype=np.float64) > cut) & (np.asarray(mask) > 0)
    return [np.flatnonzero(row).tolist() for row in chosen]
