"""Attention LSTM response decoder with greedy and beam-search inference."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .encoder import LSTM, Embedding
from .module import Init, Module, Trace
from .tensor import Tensor


@dataclass
class DecoderContext:
    """Per-dialog inputs the decoder attends over."""

    h_u: Tensor  # [B, U, d]
    keys: Tensor  # [B, U, a], h_u projected once
    utt_mask: np.ndarray  # [B, U]

    def select(self, index) -> "DecoderContext":
        index = np.asarray(index)
        return DecoderContext(
            Tensor(self.h_u.data[index]), Tensor(self.keys.data[index]), self.utt_mask[index]
        )


@dataclass
class DecoderState:
    h: Tensor  # LSTM hidden, s_t
    c: Tensor  # LSTM cell
    f: Tensor  # context vector from attention over utterances
    t: int = 0

    def select(self, index) -> "DecoderState":
        index = np.asarray(index)
        return DecoderState(
            Tensor(self.h.data[index]), Tensor(self.c.data[index]), Tensor(self.f.data[index]), self.t
        )


class ResponseDecoder(Module):
    def __init__(self, init: Init, emb_dim: int, dim: int, vocab_size: int, attn_dim: int):
        self.w_g = init.normal(dim, dim)
        self.b_g = init.const(0.0, dim)
        self.lstm = LSTM(init, dim + emb_dim, dim)
        self.w_s = init.normal(dim, attn_dim)
        self.w_h = init.normal(dim, attn_dim)
        self.w_n = init.normal(attn_dim, 1)
        self.w_v = init.normal(2 * dim, vocab_size)
        self.b_v = init.const(0.0, vocab_size)

    def context(self, h_u: Tensor, utt_mask: np.ndarray) -> DecoderContext:
        return DecoderContext(h_u, h_u @ self.w_h, np.asarray(utt_mask))

    def attend(self, s: Tensor, ctx: DecoderContext, trace: Trace | None = None) -> tuple[Tensor, Tensor]:
        """Additive attention of state ``s[B, d]`` over utterance vectors."""
        if not np.all(ctx.utt_mask.any(axis=-1)):
            raise ValueError("decoder attention with every utterance masked")
        B, U, a = ctx.keys.shape
        query = (s @ self.w_s).reshape(B, 1, a)
        energy = (T.tanh(ctx.keys + query) @ self.w_n).reshape(B, U)
        gamma = T.softmax(energy, axis=-1, mask=ctx.utt_mask)
        f = (gamma.reshape(B, 1, U) @ ctx.h_u).reshape(B, ctx.h_u.shape[-1])
        if trace is not None:
            trace.add("decoder_gamma", gamma)
        return gamma, f

    def init_state(self, h_d: Tensor, ctx: DecoderContext, trace: Trace | None = None) -> DecoderState:
        h = h_d @ self.w_g + self.b_g
        c = T.zeros(h.shape, dtype=h.dtype)
        _, f = self.attend(h, ctx, trace)
        return DecoderState(h, c, f, 0)

    def _advance(self, state: DecoderState, emb: Tensor, ctx: DecoderContext, trace) -> DecoderState:
        x = T.concat([state.f, emb], axis=-1)
        h, c = self.lstm.cell(self.lstm.project(x), state.h, state.c)
        _, f = self.attend(h, ctx, trace)
        return DecoderState(h, c, f, state.t + 1)

    def _log_probs(self, h: Tensor, f: Tensor, trace: Trace | None) -> Tensor:
        logp = T.log_softmax(T.concat([h, f], axis=-1) @ self.w_v + self.b_v, axis=-1)
        if trace is not None:
            trace.add("p_vocab", np.exp(logp.data))
        return logp

    def step(
        self,
        state: DecoderState,
        prev_ids,
        embed: Embedding,
        ctx: DecoderContext,
        trace: Trace | None = None,
    ) -> tuple[Tensor, DecoderState]:
        """One decoding step: log P^v over the vocabulary and the new state."""
        new = self._advance(state, embed(np.asarray(prev_ids)), ctx, trace)
        return self._log_probs(new.h, new.f, trace), new

    def teacher_forced_nll(
        self,
        h_d: Tensor,
        ctx: DecoderContext,
        embed: Embedding,
        inputs: np.ndarray,
        targets: np.ndarray,
        mask: np.ndarray,
        trace: Trace | None = None,
    ) -> Tensor:
        """Summed negative log-likelihood of ``targets`` per example, shape [B]."""
        state = self.init_state(h_d, ctx, trace)
        emb = embed(inputs)
        hs, fs = [], []
        for t in range(inputs.shape[1]):
            state = self._advance(state, emb[:, t], ctx, trace)
            hs.append(state.h)
            fs.append(state.f)
        logp = self._log_probs(T.stack(hs, axis=1), T.stack(fs, axis=1), trace)
        picked = T.pick(logp, targets) * np.asarray(mask, dtype=logp.dtype)
        return -picked.sum(axis=1)


# ------------------------------------------------------------------ search


@dataclass(frozen=True)
class Hypothesis:
    tokens: tuple[int, ...]  # starts with sos
    log_prob: float
    step_log_probs: tuple[float, ...] = ()

    @property
    def score(self) -> float:
        """Average log-probability per generated token (eos included)."""
        return self.log_prob / max(1, len(self.step_log_probs))

    def response(self, eos_id: int) -> list[int]:
        toks = list(self.tokens[1:])
        if toks and toks[-1] == eos_id:
            toks.pop()
        return toks


StepFn = Callable[[object, np.ndarray], tuple[np.ndarray, object]]


def _constrain(logp: np.ndarray, t: int, min_len: int, max_len: int, eos_id: int, banned) -> np.ndarray:
    logp = np.array(logp, dtype=np.float64)
    if len(banned):
        logp[:, list(banned)] = -np.inf
    if t < min_len:
        logp[:, eos_id] = -np.inf
    if t >= max_len:
        keep = logp[:, eos_id].copy()
        logp[:] = -np.inf
        logp[:, eos_id] = keep
    return logp


def _select(state, index):
    return state.select(index)


def greedy_search(
    step: StepFn,
    state,
    *,
    min_len: int,
    max_len: int,
    sos_id: int,
    eos_id: int,
    banned: Sequence[int] = (),
) -> Hypothesis:
    tokens = [sos_id]
    steps: list[float] = []
    for t in range(max_len + 1):
        logp, state = step(state, np.array([tokens[-1]]))
        row = _constrain(logp, t, min_len, max_len, eos_id, banned)[0]
        v = int(np.argmax(row))
        steps.append(float(row[v]))
        tokens.append(v)
        if v == eos_id:
            break
    total = 0.0
    for lp in steps:
        total += lp
    return Hypothesis(tuple(tokens), total, tuple(steps))


def beam_search(
    step: StepFn,
    state,
    *,
    beam_size: int,
    min_len: int,
    max_len: int,
    sos_id: int,
    eos_id: int,
    banned: Sequence[int] = (),
    select: Callable = _select,
) -> list[Hypothesis]:
    """Length-bounded beam search; returns finished hypotheses best first.

    Each step keeps the best ``beam_size - finished`` expansions by summed
    log-probability; expansions ending in eos are finished.  eos is blocked
    until ``min_len`` tokens exist and forced once ``max_len`` exist.  Final
    ranking uses the average log-probability, ties going to the
    lexicographically smaller token sequence.
    """
    if beam_size < 1:
        raise ValueError("beam_size must be positive")
    live = [Hypothesis((sos_id,), 0.0, ())]
    finished: list[Hypothesis] = []
    for t in range(max_len + 1):
        logp, state = step(state, np.array([h.tokens[-1] for h in live]))
        logp = _constrain(logp, t, min_len, max_len, eos_id, banned)
        width = beam_size - len(finished)
        candidates = []
        for i, hyp in enumerate(live):
            row = logp[i]
            finite = np.flatnonzero(np.isfinite(row))
            if finite.size > width:
                cutoff = np.partition(row[finite], finite.size - width)[finite.size - width]
                finite = finite[row[finite] >= cutoff]
            for v in finite:
                candidates.append((-(hyp.log_prob + row[v]), hyp.tokens + (int(v),), i, float(row[v])))
        candidates.sort(key=lambda c: (c[0], c[1]))
        next_live, parents = [], []
        for neg_total, tokens, i, lp in candidates[:width]:
            parent = live[i]
            hyp = Hypothesis(tokens, parent.log_prob + lp, parent.step_log_probs + (lp,))
            if tokens[-1] == eos_id:
                finished.append(hyp)
            else:
                next_live.append(hyp)
                parents.append(i)
        if not next_live:
            break
        live = next_live
        state = select(state, np.array(parents))
    return sorted(finished, key=lambda h: (-h.score, h.tokens))
