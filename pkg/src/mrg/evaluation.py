"""Decode a corpus with a trained model and score it."""
from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np

from .data import DialogExample, Vocabulary, make_batch
from .metrics import build_report, score_example
from .model import MRG


def model_embeddings(model: MRG, vocab: Vocabulary) -> dict[str, np.ndarray]:
    """Token vectors from the model's own embedding matrix (special tokens excluded)."""
    weight = model.embedding.weight.data
    return {tok: weight[vocab.stoi[tok]].astype(np.float64) for tok in vocab.regular_tokens}


def generate(
    model: MRG,
    examples: Sequence[DialogExample],
    beam_size: int = 4,
    min_len: int = 10,
    max_len: int = 20,
    batch_size: int = 16,
) -> tuple[list[list[int]], list[list[int]]]:
    """Response ids and predicted answer grid slots per example."""
    responses, answers = [], []
    for i in range(0, len(examples), batch_size):
        batch = make_batch(examples[i : i + batch_size], model.config.limits, trim=True)
        responses += model.decode(batch, beam_size, min_len, max_len)
        answers += model.predict_answers(batch)
    return responses, answers


def gold_grid(example: DialogExample, max_utt_len: int) -> list[int]:
    """Gold answer positions mapped onto the padded context grid."""
    slots, pos = [], 0
    for j, utt in enumerate(example.utterances):
        for i in range(len(utt)):
            if example.answer_mask[pos]:
                slots.append(j * max_utt_len + i)
            pos += 1
    return slots


def evaluate(
    model: MRG,
    vocab: Vocabulary,
    examples: Sequence[DialogExample],
    embeddings: Mapping[str, np.ndarray] | None = None,
    beam_size: int = 4,
    min_len: int = 10,
    max_len: int = 20,
    corpus_bleu: bool = False,
    score_answers: bool = True,
) -> dict:
    """Full metric report (JSON-ready) for ``examples``."""
    if embeddings is None:
        embeddings = model_embeddings(model, vocab)
    responses, answers = generate(model, examples, beam_size, min_len, max_len)
    L = model.config.max_utt_len
    rows = []
    for k, (ex, resp, ans) in enumerate(zip(examples, responses, answers)):
        rows.append(
            score_example(
                k,
                vocab.decode(resp),
                vocab.decode(ex.response),
                embeddings,
                ans if score_answers else None,
                gold_grid(ex, L) if score_answers else None,
            )
        )
    return build_report(rows, corpus_bleu)
