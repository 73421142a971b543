"""Token embedding and bidirectional LSTM encoding of utterances and questions."""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .module import Init, Module
from .tensor import Tensor


class Embedding(Module):
    def __init__(self, init: Init, vocab_size: int, dim: int):
        self.weight = init.normal(vocab_size, dim)

    def __call__(self, ids) -> Tensor:
        return T.embedding(self.weight, ids)


class LSTM(Module):
    """Single-direction LSTM; gate layout input, forget, cell, output."""

    def __init__(self, init: Init, in_dim: int, hidden: int, forget_bias: float = 1.0):
        self.hidden = hidden
        self.w_input = init.normal(in_dim, 4 * hidden)
        self.w_hidden = init.normal(hidden, 4 * hidden)
        self.bias = init.const(0.0, 4 * hidden)
        self.bias.data[hidden : 2 * hidden] = forget_bias

    def project(self, x: Tensor) -> Tensor:
        """Input contribution to the gates, for every step at once."""
        return x @ self.w_input + self.bias

    def cell(self, x_proj: Tensor, h: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
        n = self.hidden
        gates = x_proj + h @ self.w_hidden
        i = T.sigmoid(gates[..., :n])
        f = T.sigmoid(gates[..., n : 2 * n])
        g = T.tanh(gates[..., 2 * n : 3 * n])
        o = T.sigmoid(gates[..., 3 * n :])
        c_new = f * c + i * g
        return o * T.tanh(c_new), c_new

    def __call__(self, x: Tensor, mask: np.ndarray, reverse: bool = False) -> Tensor:
        """Run over ``x[N, L, in]``; masked steps output zeros and keep the state.

        With ``reverse`` the sequence is read right to left, so the recurrence
        effectively starts at the last unmasked position.
        """
        N, L = x.shape[0], x.shape[1]
        if L == 0:
            raise ValueError("cannot encode a zero-length sequence")
        proj = self.project(x)
        h = T.zeros((N, self.hidden), dtype=x.dtype)
        c = T.zeros((N, self.hidden), dtype=x.dtype)
        outputs: list[Tensor | None] = [None] * L
        steps = range(L - 1, -1, -1) if reverse else range(L)
        for t in steps:
            m = mask[:, t]
            if not m.any():
                outputs[t] = T.zeros((N, self.hidden), dtype=x.dtype)
                continue
            h_new, c_new = self.cell(proj[:, t], h, c)
            if m.all():
                h, c = h_new, c_new
                outputs[t] = h_new
            else:
                keep = m[:, None].astype(x.dtype)
                h = h_new * keep + h * (1.0 - keep)
                c = c_new * keep + c * (1.0 - keep)
                outputs[t] = h_new * keep
        return T.stack(outputs, axis=1)


class BiLSTM(Module):
    """Forward and backward LSTMs concatenated per step (hidden // 2 each)."""

    def __init__(self, init: Init, in_dim: int, hidden: int):
        if hidden % 2:
            raise ValueError("Bi-LSTM hidden size must be even")
        self.forward = LSTM(init, in_dim, hidden // 2)
        self.backward = LSTM(init, in_dim, hidden // 2)

    def __call__(self, x: Tensor, mask: np.ndarray) -> Tensor:
        fwd = self.forward(x, mask)
        bwd = self.backward(x, mask, reverse=True)
        return T.concat([fwd, bwd], axis=-1)


def encode_utterances(encoder: BiLSTM, embed: Embedding, ids: np.ndarray, mask: np.ndarray) -> Tensor:
    """Encode ``ids[B, U, L]`` utterance by utterance with shared weights."""
    B, U, L = ids.shape
    flat = encoder(embed(ids.reshape(B * U, L)), mask.reshape(B * U, L))
    return flat.reshape(B, U, L, flat.shape[-1])
