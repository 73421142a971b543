"""The joint answer-selection / response-generation model."""
from __future__ import annotations

import fnmatch
from dataclasses import asdict, dataclass, fields
from typing import Sequence

import numpy as np

from . import tensor as T
from .answer import AnswerSelector, extract
from .data import EOS_ID, PAD_ID, SOS_ID, Batch, Limits, grid_to_packed
from .decoder import DecoderContext, ResponseDecoder, beam_search, greedy_search
from .encoder import BiLSTM, Embedding, encode_utterances
from .hier import HierarchicalAttention
from .mcam import MCAMStack
from .module import Init, Module, Trace
from .tensor import Tensor

# math symbol -> parameter name pattern ({l} = layer index)
SYMBOLS = {
    "e": "embedding.weight",
    "Bi-RNN_x": "utterance_encoder.*",
    "Bi-RNN_y": "question_encoder.*",
    "W^Q": "mcam.layers.{l}.cross.w_query",
    "W^K": "mcam.layers.{l}.cross.w_key",
    "W^V": "mcam.layers.{l}.cross.w_value",
    "W_a": "mcam.layers.{l}.updater.w_a",
    "W_b": "mcam.layers.{l}.updater.w_b",
    "W_c": "mcam.layers.{l}.updater.w_c",
    "W_d": "mcam.layers.{l}.updater.w_d",
    "W_e": "selector.w_e",
    "b^e": "selector.b_e",
    "W_f": "selector.w_f",
    "b^f": "selector.b_f",
    "W_g": "decoder.w_g",
    "b_g": "decoder.b_g",
    "W_s": "decoder.w_s",
    "W_h": "decoder.w_h",
    "W_n": "decoder.w_n",
    "W_v": "decoder.w_v",
    "b_v": "decoder.b_v",
}


@dataclass
class ModelConfig:
    vocab_size: int
    emb_dim: int = 128
    hidden: int = 256
    layers: int = 2
    heads: int = 4
    word_mam_layers: int = 1
    max_utts: int = 5
    max_utt_len: int = 20
    max_question_len: int = 20
    max_response_len: int = 20
    answer_hidden: int | None = None
    attn_dim: int | None = None
    use_mcam: bool = True
    use_mam: bool = True
    use_memupd: bool = True
    learned_memory: bool = False
    init_std: float = 0.1
    dtype: str = "float32"
    seed: int = 0

    @property
    def limits(self) -> Limits:
        return Limits(self.max_utts, self.max_utt_len, self.max_question_len, self.max_response_len)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class Encoding:
    h_x: Tensor
    m_L: Tensor
    h_u: Tensor
    h_d: Tensor
    h_q: Tensor
    utt_mask: np.ndarray
    q_mask: np.ndarray


class MRG(Module):
    def __init__(self, config: ModelConfig):
        self.config = config
        cfg = config
        init = Init(np.random.default_rng(cfg.seed), cfg.init_std, np.dtype(cfg.dtype))
        d = cfg.hidden
        self.embedding = Embedding(init, cfg.vocab_size, cfg.emb_dim)
        self.utterance_encoder = BiLSTM(init, cfg.emb_dim, d)
        self.question_encoder = BiLSTM(init, cfg.emb_dim, d)
        self.mcam = MCAMStack(
            init, d, cfg.heads, cfg.layers, learned_memory=cfg.max_utt_len if cfg.learned_memory else 0
        )
        self.hier = HierarchicalAttention(init, d, cfg.heads, cfg.word_mam_layers)
        self.selector = AnswerSelector(init, d, cfg.max_utts, cfg.max_utt_len, cfg.answer_hidden or d)
        self.decoder = ResponseDecoder(init, cfg.emb_dim, d, cfg.vocab_size, cfg.attn_dim or d)

    def encode(self, batch: Batch, trace: Trace | None = None) -> Encoding:
        cfg = self.config
        h_x = encode_utterances(self.utterance_encoder, self.embedding, batch.context, batch.context_mask)
        h_q = self.question_encoder(self.embedding(batch.question), batch.question_mask)
        if cfg.use_mcam:
            m_L = self.mcam(
                h_x, batch.context_mask, batch.utt_mask, h_q, batch.question_mask,
                use_memory=cfg.use_memupd, trace=trace,
            )
        else:
            m_L = h_x
        h_u, h_d = self.hier(m_L, batch.context_mask, batch.utt_mask, cfg.use_mam, trace)
        return Encoding(h_x, m_L, h_u, h_d, h_q, batch.utt_mask, batch.question_mask)

    def answer_logits(self, enc: Encoding) -> Tensor:
        return self.selector(enc.h_u, enc.h_q, enc.q_mask)

    def decoder_context(self, enc: Encoding) -> DecoderContext:
        return self.decoder.context(enc.h_u, enc.utt_mask)

    def response_nll(self, enc: Encoding, batch: Batch, trace: Trace | None = None) -> Tensor:
        return self.decoder.teacher_forced_nll(
            enc.h_d, self.decoder_context(enc), self.embedding,
            batch.decoder_input, batch.decoder_target, batch.target_mask, trace,
        )

    # ----------------------------------------------------------- inference

    def step_fn(self, ctx: DecoderContext):
        tiled: dict[int, DecoderContext] = {}

        def step(state, tokens):
            k = len(tokens)
            if k not in tiled:
                tiled[k] = ctx.select(np.zeros(k, dtype=np.int64))
            logp, new_state = self.decoder.step(state, tokens, self.embedding, tiled[k])
            return logp.data, new_state

        return step

    def decode(
        self,
        batch: Batch,
        beam_size: int = 4,
        min_len: int = 10,
        max_len: int = 20,
    ) -> list[list[int]]:
        """Generated response ids per example (beam 1 runs plain greedy search)."""
        with T.no_grad():
            enc = self.encode(batch)
            ctx = self.decoder_context(enc)
            out = []
            for b in range(batch.size):
                ctx_b = ctx.select([b])
                state = self.decoder.init_state(Tensor(enc.h_d.data[b : b + 1]), ctx_b)
                kwargs = dict(
                    min_len=min_len, max_len=max_len, sos_id=SOS_ID, eos_id=EOS_ID,
                    banned=(PAD_ID, SOS_ID),
                )
                if beam_size == 1:
                    hyp = greedy_search(self.step_fn(ctx_b), state, **kwargs)
                else:
                    hyp = beam_search(self.step_fn(ctx_b), state, beam_size=beam_size, **kwargs)[0]
                out.append(hyp.response(EOS_ID))
        return out

    def predict_answers(self, batch: Batch, threshold: float = 0.5) -> list[list[int]]:
        """Extracted answer slots on the context grid per example."""
        with T.no_grad():
            logits = self.answer_logits(self.encode(batch))
        return extract(logits.data, batch.answer_mask, threshold)

    # ------------------------------------------------------------- weights

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = set(params) - set(arrays)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for name, p in params.items():
            if arrays[name].shape != p.shape:
                raise ValueError(f"{name}: shape {arrays[name].shape} != {p.shape}")
            p.data = np.array(arrays[name], dtype=p.dtype)


def symbol_parameters(model: MRG, symbol: str) -> list[str]:
    """Parameter names realizing a math symbol, e.g. ``"W^Q"``."""
    pattern = SYMBOLS[symbol].replace("{l}", "*")
    return [n for n, _ in model.named_parameters() if fnmatch.fnmatch(n, pattern)]


def grid_answers_to_packed(batch_examples: Sequence, grid: Sequence[Sequence[int]], max_utt_len: int):
    return [grid_to_packed(ex, g, max_utt_len) for ex, g in zip(batch_examples, grid)]
