"""BLEU with smoothing 7, bag-of-words embedding similarity, answer EM/F1."""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

SMOOTH_K = 5  # length-scaled add-k constant of the method-4 step


def ngrams(tokens: Sequence, n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def clipped_counts(hyp: Sequence, ref: Sequence, n: int) -> tuple[int, int]:
    """(matches clipped by reference counts, number of hypothesis n-grams)."""
    h, r = ngrams(hyp, n), ngrams(ref, n)
    return sum(min(c, r[g]) for g, c in h.items()), max(0, len(hyp) - n + 1)


def smoothed_precisions(matches: Sequence[int], totals: Sequence[int], extra: float, hyp_len: int) -> list[float]:
    """Precisions p_1..p_N after smoothing 7, applied to zero-count orders.

    Zero-count orders first get the length-scaled value ``1 / (2^k * K / ln c)``
    over their n-gram count (k counts the zero orders seen so far), then are
    replaced by the average of the previous order's value, their own and the
    next order's. ``extra`` is the raw precision of order N+1, used as the
    right neighbour of order N.
    """
    raw = [m / max(1, t) for m, t in zip(matches, totals)]
    zero = [m == 0 for m in matches]
    p = list(raw)
    k = 1
    for i, z in enumerate(zero):
        if z and hyp_len > 1:
            p[i] = (1.0 / (2**k * SMOOTH_K / math.log(hyp_len))) / max(1, totals[i])
            k += 1
    right = p[1:] + [extra]
    prev = p[0] + 1.0
    out = []
    for i, z in enumerate(zero):
        value = (prev + p[i] + right[i]) / 3 if z else p[i]
        out.append(value)
        prev = value
    return out


def _combine(precisions: Sequence[float], hyp_len: int, ref_len: int) -> float:
    if min(precisions) <= 0:
        return 0.0
    log_mean = sum(math.log(p) for p in precisions) / len(precisions)
    bp = 1.0 if hyp_len > ref_len else math.exp(1 - ref_len / hyp_len)
    return bp * math.exp(log_mean)


@dataclass
class BleuResult:
    score: float
    empty_hypothesis: bool = False


def bleu(hyp: Sequence, ref: Sequence, max_n: int = 4) -> BleuResult:
    """Sentence BLEU-``max_n`` with uniform weights and smoothing 7."""
    if not ref:
        raise ValueError("reference must be non-empty")
    if not hyp:
        return BleuResult(0.0, True)
    counts = [clipped_counts(hyp, ref, n) for n in range(1, max_n + 2)]
    m_extra, t_extra = counts[-1]
    matches = [m for m, _ in counts[:-1]]
    totals = [t for _, t in counts[:-1]]
    p = smoothed_precisions(matches, totals, m_extra / max(1, t_extra), len(hyp))
    return BleuResult(_combine(p, len(hyp), len(ref)))


def corpus_bleu(hyps: Sequence[Sequence], refs: Sequence[Sequence], max_n: int = 4) -> float:
    """Corpus BLEU: counts and lengths pooled before smoothing and combination."""
    if len(hyps) != len(refs):
        raise ValueError("hypothesis and reference counts differ")
    matches = np.zeros(max_n + 1, dtype=np.int64)
    totals = np.zeros(max_n + 1, dtype=np.int64)
    hyp_len = ref_len = 0
    for h, r in zip(hyps, refs):
        if not r:
            raise ValueError("reference must be non-empty")
        hyp_len += len(h)
        ref_len += len(r)
        for n in range(1, max_n + 2):
            m, t = clipped_counts(h, r, n)
            matches[n - 1] += m
            totals[n - 1] += t
    if hyp_len == 0:
        return 0.0
    extra = matches[-1] / max(1, totals[-1])
    p = smoothed_precisions(matches[:-1].tolist(), totals[:-1].tolist(), float(extra), hyp_len)
    return _combine(p, hyp_len, ref_len)


# ------------------------------------------------------------ embeddings


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(a @ b / (na * nb))


def extrema(vectors: np.ndarray) -> np.ndarray:
    """Per dimension, the value of largest magnitude; positive wins ties."""
    hi, lo = vectors.max(axis=0), vectors.min(axis=0)
    return np.where(hi >= -lo, hi, lo)


def greedy_match(a: np.ndarray, b: np.ndarray) -> float:
    """Mean over rows of ``a`` of the best cosine against any row of ``b``."""
    return float(np.mean([max(cosine(x, y) for y in b) for x in a]))


@dataclass
class BowScores:
    average: float
    extrema: float
    greedy: float


def bow_metrics(hyp: Sequence[str], ref: Sequence[str], embeddings: Mapping[str, np.ndarray]) -> BowScores | None:
    """Embedding similarities; ``None`` when either side has no known token."""
    h = [np.asarray(embeddings[t], dtype=np.float64) for t in hyp if t in embeddings]
    r = [np.asarray(embeddings[t], dtype=np.float64) for t in ref if t in embeddings]
    if not h or not r:
        return None
    H, R = np.stack(h), np.stack(r)
    return BowScores(
        average=cosine(H.mean(axis=0), R.mean(axis=0)),
        extrema=cosine(extrema(H), extrema(R)),
        greedy=(greedy_match(R, H) + greedy_match(H, R)) / 2,
    )


def load_embeddings(path: str | Path) -> dict[str, np.ndarray]:
    """Text embedding file: token then whitespace-separated floats per line."""
    table: dict[str, np.ndarray] = {}
    dim = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            try:
                vec = np.array([float(x) for x in parts[1:]])
            except ValueError:
                raise ValueError(f"{path}:{lineno}: non-numeric value") from None
            if dim is None:
                dim = vec.size
            if vec.size != dim or dim == 0:
                raise ValueError(f"{path}:{lineno}: expected {dim} values, got {vec.size}")
            table[parts[0]] = vec
    return table


# --------------------------------------------------------------- answers


def answer_metrics(pred: Iterable[int], gold: Iterable[int]) -> tuple[float, float]:
    """(exact match, set F1); two empty sets count as a perfect match."""
    p, g = set(pred), set(gold)
    em = float(p == g)
    if not p and not g:
        return em, 1.0
    overlap = len(p & g)
    if overlap == 0:
        return em, 0.0
    precision, recall = overlap / len(p), overlap / len(g)
    return em, 2 * precision * recall / (precision + recall)


# ---------------------------------------------------------------- report

METRIC_NAMES = (
    "bleu1", "bleu2", "bleu3", "bleu4",
    "bow_average", "bow_extrema", "bow_greedy",
    "answer_exact_match", "answer_f1",
)

REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["metrics", "counts", "examples"],
    "properties": {
        "metrics": {
            "type": "object",
            "required": list(METRIC_NAMES),
            "additionalProperties": {"type": ["number", "null"]},
        },
        "corpus_bleu": {"type": "object", "additionalProperties": {"type": "number"}},
        "counts": {
            "type": "object",
            "required": ["examples", "bow_skipped", "empty_hypotheses"],
            "additionalProperties": {"type": "integer", "minimum": 0},
        },
        "examples": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["index", "hypothesis", "reference", *METRIC_NAMES],
                "properties": {
                    "index": {"type": "integer"},
                    "hypothesis": {"type": "array", "items": {"type": "string"}},
                    "reference": {"type": "array", "items": {"type": "string"}},
                },
                "additionalProperties": {"type": ["number", "null", "array", "string"]},
            },
        },
    },
}


@dataclass
class ExampleScores:
    index: int
    hypothesis: list[str]
    reference: list[str]
    bleu: list[float]
    bow: BowScores | None
    answer_em: float | None = None
    answer_f1: float | None = None
    predicted_answer: list[int] = field(default_factory=list)
    gold_answer: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = {"index": self.index, "hypothesis": self.hypothesis, "reference": self.reference}
        d.update({f"bleu{n + 1}": b for n, b in enumerate(self.bleu)})
        for name in ("average", "extrema", "greedy"):
            d[f"bow_{name}"] = None if self.bow is None else getattr(self.bow, name)
        d["answer_exact_match"] = self.answer_em
        d["answer_f1"] = self.answer_f1
        d["predicted_answer"] = self.predicted_answer
        d["gold_answer"] = self.gold_answer
        return d


def _mean(values) -> float | None:
    values = [v for v in values if v is not None]
    return float(np.mean(values)) if values else None


def build_report(examples: Sequence[ExampleScores], with_corpus_bleu: bool = False) -> dict:
    rows = [e.to_dict() for e in examples]
    metrics = {name: _mean(r[name] for r in rows) for name in METRIC_NAMES}
    report = {
        "metrics": metrics,
        "counts": {
            "examples": len(rows),
            "bow_skipped": sum(e.bow is None for e in examples),
            "empty_hypotheses": sum(not e.hypothesis for e in examples),
        },
        "examples": rows,
    }
    if with_corpus_bleu:
        hyps = [e.hypothesis for e in examples]
        refs = [e.reference for e in examples]
        report["corpus_bleu"] = {f"bleu{n}": corpus_bleu(hyps, refs, n) for n in range(1, 5)}
    return report


def score_example(
    index: int,
    hyp: list[str],
    ref: list[str],
    embeddings: Mapping[str, np.ndarray],
    pred_answer: Sequence[int] | None = None,
    gold_answer: Sequence[int] | None = None,
) -> ExampleScores:
    scores = [bleu(hyp, ref, n).score for n in range(1, 5)]
    ex = ExampleScores(index, list(hyp), list(ref), scores, bow_metrics(hyp, ref, embeddings))
    if pred_answer is not None and gold_answer is not None:
        ex.answer_em, ex.answer_f1 = answer_metrics(pred_answer, gold_answer)
        ex.predicted_answer, ex.gold_answer = list(pred_answer), list(gold_answer)
    return ex
