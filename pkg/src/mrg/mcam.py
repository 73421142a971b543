"""Memory-augmented cross attention between dialog words and question words."""
from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .module import Init, Module, Trace
from .tensor import Tensor


def _check_keys(kv_mask: np.ndarray, query_mask: np.ndarray | None) -> None:
    lead = kv_mask.reshape(-1, kv_mask.shape[-1]).any(axis=-1)
    if query_mask is None:
        live = np.ones_like(lead)
    else:
        live = np.asarray(query_mask).reshape(lead.shape[0], -1).any(axis=-1)
    if np.any(live & ~lead):
        raise ValueError("attention with every key masked")


class CrossAttention(Module):
    """Multi-head scaled dot-product attention with residual + layer norm.

    Queries come from one sequence and keys/values from another; passing the
    same sequence twice gives self-attention.
    """

    def __init__(self, init: Init, dim: int, heads: int):
        if dim % heads:
            raise ValueError(f"model dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.w_query = init.normal(dim, dim)
        self.w_key = init.normal(dim, dim)
        self.w_value = init.normal(dim, dim)
        self.w_out = init.normal(dim, dim)
        self.ln_gain = init.const(1.0, dim)
        self.ln_bias = init.const(0.0, dim)

    def _split(self, x: Tensor) -> Tensor:
        *lead, n, d = x.shape
        h = self.heads
        x = x.reshape(*lead, n, h, d // h)
        k = len(lead)
        return T.transpose(x, (*range(k), k + 1, k, k + 2))

    def attend(self, query: Tensor, kv: Tensor, kv_mask) -> tuple[Tensor, Tensor]:
        """Attention output before the residual path, and the weights [.., H, nq, nk]."""
        *lead, nq, d = query.shape
        q = self._split(query @ self.w_query)
        k = self._split(kv @ self.w_key)
        v = self._split(kv @ self.w_value)
        k_t = T.transpose(k, (*range(k.ndim - 2), k.ndim - 1, k.ndim - 2))
        scores = (q @ k_t) * (1.0 / math.sqrt(d // self.heads))
        mask = np.asarray(kv_mask)[..., None, None, :]
        alpha = T.softmax(scores, axis=-1, mask=mask)
        heads = alpha @ v
        n = len(lead)
        merged = T.transpose(heads, (*range(n), n + 1, n, n + 2)).reshape(*lead, nq, d)
        return merged @ self.w_out, alpha

    def __call__(
        self,
        query: Tensor,
        kv: Tensor,
        kv_mask,
        query_mask=None,
        trace: Trace | None = None,
        name: str = "cam",
    ) -> Tensor:
        _check_keys(np.asarray(kv_mask), query_mask)
        mixed, alpha = self.attend(query, kv, kv_mask)
        out = T.layer_norm(query + mixed, self.ln_gain, self.ln_bias)
        if trace is not None:
            rows = None if query_mask is None else np.asarray(query_mask)
            trace.add(name, alpha, rows)
        if query_mask is not None:
            out = out * np.asarray(query_mask, dtype=out.dtype)[..., None]
        return out


class MemoryUpdater(Module):
    """Gated blend of the current representation with stored memory slots."""

    def __init__(self, init: Init, dim: int, heads: int):
        self.attention = CrossAttention(init, dim, heads)
        self.w_a = init.normal(dim, dim)
        self.w_b = init.normal(dim, dim)
        self.w_c = init.normal(dim, dim)
        self.w_d = init.normal(dim, dim)

    def __call__(self, m: Tensor, m_mask, memory: Tensor, memory_mask, trace: Trace | None = None) -> Tensor:
        kv = T.concat([memory, m], axis=-2)
        kv_mask = np.concatenate([np.asarray(memory_mask), np.asarray(m_mask)], axis=-1)
        s = self.attention(m, kv, kv_mask, query_mask=m_mask, trace=trace, name="memory_cam")
        c = T.tanh(m @ self.w_a + s @ self.w_b)
        z = T.sigmoid(m @ self.w_c + s @ self.w_d)
        n = (1.0 - z) * c + z * m
        if trace is not None:
            trace.add("gate_z", z, m_mask)
            trace.add("candidate_c", c, m_mask)
            trace.add("memory_m", m, m_mask)
            trace.add("updated_n", n, m_mask)
        return n


class MCAMLayer(Module):
    def __init__(self, init: Init, dim: int, heads: int):
        self.updater = MemoryUpdater(init, dim, heads)
        self.cross = CrossAttention(init, dim, heads)


class MCAMStack(Module):
    """L layers of memory update followed by question cross attention.

    Utterances are visited in dialog order.  Within layer ``l`` the memory
    holds the layer output for the previous live utterance; before the first
    utterance it is empty (zero slots, all masked) unless ``learned_memory``
    supplies ``slots`` trainable initial rows.
    """

    def __init__(self, init: Init, dim: int, heads: int, layers: int, learned_memory: int = 0):
        self.layers = [MCAMLayer(init, dim, heads) for _ in range(layers)]
        self.initial_memory = [init.normal(learned_memory, dim) for _ in range(layers)] if learned_memory else []

    def _initial(self, l: int, B: int, L: int, like: Tensor):
        if self.initial_memory:
            slots = self.initial_memory[l]
            mem = slots.reshape(1, *slots.shape) * np.ones((B, 1, 1), dtype=like.dtype)
            return mem, np.ones((B, slots.shape[0]))
        return T.zeros((B, L, like.shape[-1]), dtype=like.dtype), np.zeros((B, L))

    def __call__(
        self,
        h_x: Tensor,
        token_mask: np.ndarray,
        utt_mask: np.ndarray,
        h_q: Tensor,
        q_mask: np.ndarray,
        use_memory: bool = True,
        trace: Trace | None = None,
    ) -> Tensor:
        B, U, L, _ = h_x.shape
        if not np.all(utt_mask[:, 0]):
            raise ValueError("the first utterance of every dialog must be non-empty")
        current = [h_x[:, j] for j in range(U)]
        for l, layer in enumerate(self.layers):
            memory, memory_mask = self._initial(l, B, L, h_x)
            outputs = []
            for j in range(U):
                m, mask = current[j], token_mask[:, j]
                n = layer.updater(m, mask, memory, memory_mask, trace) if use_memory else m
                out = layer.cross(n, h_q, q_mask, query_mask=mask, trace=trace, name="cross_cam")
                outputs.append(out)
                live = utt_mask[:, j]
                if live.all():
                    memory, memory_mask = out, mask
                else:
                    keep = live[:, None, None].astype(out.dtype)
                    memory = out * keep + memory * (1.0 - keep)
                    memory_mask = np.where(live[:, None] > 0, mask, memory_mask)
            current = outputs
        return T.stack(current, axis=1)
