"""Dialog corpora: JSONL IO, vocabulary, truncation/padding, synthetic data."""
from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PAD, UNK, SOS, EOS = "<pad>", "<unk>", "<sos>", "<eos>"
PAD_ID, UNK_ID, SOS_ID, EOS_ID = 0, 1, 2, 3
RESERVED = (PAD, UNK, SOS, EOS)


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class Limits:
    max_utts: int = 5
    max_utt_len: int = 20
    max_question_len: int = 20
    max_response_len: int = 20


def tokenize(text: str, mode: str = "whitespace") -> list[str]:
    if mode == "whitespace":
        return text.split()
    if mode == "char":
        return [ch for ch in text if not ch.isspace()]
    raise ValueError(f"unknown tokenizer {mode!r}")


class Vocabulary:
    def __init__(self, tokens: Iterable[str] = ()):
        self.itos: list[str] = list(RESERVED)
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(self.itos)}
        for tok in tokens:
            if tok in self.stoi:
                raise ValueError(f"duplicate vocabulary token {tok!r}")
            self.stoi[tok] = len(self.itos)
            self.itos.append(tok)

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.itos == other.itos

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self.stoi.get(t, UNK_ID) for t in tokens]

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.itos[i] for i in ids]

    @property
    def regular_tokens(self) -> list[str]:
        return self.itos[len(RESERVED):]

    def save(self, path: str | Path) -> None:
        text = "".join(t + "\n" for t in self.regular_tokens)
        Path(path).write_text(text, encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return cls(lines)


def build_vocab(sentences: Iterable[Sequence[str]], max_size: int = 50_000) -> Vocabulary:
    """Frequency-ranked vocabulary, ties broken lexicographically.

    ``max_size`` counts the four reserved tokens.
    """
    counts = Counter()
    for sent in sentences:
        counts.update(t for t in sent if t not in RESERVED)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    keep = max(0, max_size - len(RESERVED))
    return Vocabulary(tok for tok, _ in ranked[:keep])


@dataclass
class RawDialog:
    """One tokenized, truncated record with string tokens."""

    utterances: list[list[str]]
    question: list[str]
    answer: list[int]  # indices into the flattened truncated context
    response: list[str]

    def sentences(self) -> list[list[str]]:
        return [*self.utterances, self.question, self.response]


@dataclass
class DialogExample:
    utterances: list[list[int]]
    question: list[int]
    answer_mask: list[int]  # one 0/1 entry per (truncated) context token
    response: list[int]
    raw_text: dict = field(default_factory=dict)

    @property
    def n_context(self) -> int:
        return sum(len(u) for u in self.utterances)

    def answer_indices(self) -> list[int]:
        return [i for i, a in enumerate(self.answer_mask) if a]


def truncate(utterances: list[list[str]], answer: Sequence[int], limits: Limits):
    """Keep the last ``max_utts`` utterances, each cut to ``max_utt_len`` tokens.

    ``answer`` indexes the flattened input context; indices of dropped tokens
    are discarded and the rest are re-based onto the truncated context.
    """
    offsets = np.cumsum([0] + [len(u) for u in utterances])
    first = max(0, len(utterances) - limits.max_utts)
    remap: dict[int, int] = {}
    out: list[list[str]] = []
    pos = 0
    for j in range(first, len(utterances)):
        kept = utterances[j][: limits.max_utt_len]
        for i in range(len(kept)):
            remap[int(offsets[j]) + i] = pos + i
        pos += len(kept)
        out.append(kept)
    new_answer = sorted(remap[a] for a in answer if a in remap)
    return out, new_answer


def parse_record(record: dict, tokenizer: str, limits: Limits) -> RawDialog:
    try:
        utts = [tokenize(u, tokenizer) for u in record["utterances"]]
        question = tokenize(record["question"], tokenizer)
        response = tokenize(record["response"], tokenizer)
        answer = [int(a) for a in record["answer_token_indices"]]
    except (KeyError, TypeError, AttributeError) as exc:
        raise CorpusError(f"missing or malformed field: {exc}") from None
    if not utts or any(len(u) == 0 for u in utts):
        raise CorpusError("every record needs at least one non-empty utterance")
    if not question:
        raise CorpusError("empty question")
    n_tokens = sum(len(u) for u in utts)
    bad = [a for a in answer if a < 0 or a >= n_tokens]
    if bad:
        raise CorpusError(f"answer index {bad[0]} outside context of {n_tokens} tokens")
    utts, answer = truncate(utts, answer, limits)
    return RawDialog(
        utterances=utts,
        question=question[: limits.max_question_len],
        answer=answer,
        response=response[: limits.max_response_len],
    )


def read_dialogs(
    path: str | Path, tokenizer: str = "whitespace", limits: Limits = Limits()
) -> list[RawDialog]:
    dialogs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                dialogs.append(parse_record(record, tokenizer, limits))
            except (json.JSONDecodeError, CorpusError) as exc:
                raise CorpusError(f"{path}:{lineno}: {exc}") from None
    return dialogs


def encode_dialog(dialog: RawDialog, vocab: Vocabulary) -> DialogExample:
    n = sum(len(u) for u in dialog.utterances)
    mask = [0] * n
    for a in dialog.answer:
        mask[a] = 1
    return DialogExample(
        utterances=[vocab.encode(u) for u in dialog.utterances],
        question=vocab.encode(dialog.question),
        answer_mask=mask,
        response=vocab.encode(dialog.response),
        raw_text={
            "utterances": [list(u) for u in dialog.utterances],
            "question": list(dialog.question),
            "response": list(dialog.response),
        },
    )


def load_corpus(
    path: str | Path,
    vocab: Vocabulary | None = None,
    tokenizer: str = "whitespace",
    limits: Limits = Limits(),
    max_vocab: int = 50_000,
) -> list[DialogExample]:
    """Read, truncate and encode a JSONL corpus.

    Without ``vocab`` one is built from the file itself.
    """
    dialogs = read_dialogs(path, tokenizer, limits)
    if vocab is None:
        vocab = build_vocab((s for d in dialogs for s in d.sentences()), max_vocab)
    return [encode_dialog(d, vocab) for d in dialogs]


def dialog_to_record(dialog: RawDialog) -> dict:
    return {
        "utterances": [" ".join(u) for u in dialog.utterances],
        "question": " ".join(dialog.question),
        "answer_token_indices": list(dialog.answer),
        "response": " ".join(dialog.response),
    }


def write_corpus(dialogs: Iterable[RawDialog], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for d in dialogs:
            fh.write(json.dumps(dialog_to_record(d), ensure_ascii=False, sort_keys=True) + "\n")


# ------------------------------------------------------------------ batching


@dataclass
class Batch:
    context: np.ndarray  # [B, U, T] token ids
    context_mask: np.ndarray  # [B, U, T]
    utt_mask: np.ndarray  # [B, U]
    question: np.ndarray  # [B, Tq]
    question_mask: np.ndarray  # [B, Tq]
    answer: np.ndarray  # [B, max_utts * max_utt_len] gold 0/1 on the padded grid
    answer_mask: np.ndarray  # [B, max_utts * max_utt_len] real context positions
    decoder_input: np.ndarray  # [B, Ty] sos + response
    decoder_target: np.ndarray  # [B, Ty] response + eos
    target_mask: np.ndarray  # [B, Ty]

    @property
    def size(self) -> int:
        return self.context.shape[0]


def make_batch(examples: Sequence[DialogExample], limits: Limits, trim: bool = False) -> Batch:
    """Pad a list of examples into arrays.

    The context is padded to ``max_utts x max_utt_len`` unless ``trim`` is set,
    in which case it is padded only to the longest dialog/utterance in the batch;
    the answer grid always spans the full ``max_utts x max_utt_len`` capacity,
    position ``j * max_utt_len + i`` holding token ``i`` of utterance ``j``.
    """
    if not examples:
        raise ValueError("empty batch")
    B = len(examples)
    U, T = limits.max_utts, limits.max_utt_len
    if trim:
        U = max(len(e.utterances) for e in examples)
        T = max(len(u) for e in examples for u in e.utterances)
    Tq = max(len(e.question) for e in examples) if trim else limits.max_question_len
    Ty = max(len(e.response) for e in examples) + 1
    grid = limits.max_utts * limits.max_utt_len

    context = np.zeros((B, U, T), dtype=np.int64)
    context_mask = np.zeros((B, U, T))
    question = np.zeros((B, Tq), dtype=np.int64)
    question_mask = np.zeros((B, Tq))
    answer = np.zeros((B, grid))
    answer_mask = np.zeros((B, grid))
    dec_in = np.zeros((B, Ty), dtype=np.int64)
    dec_out = np.zeros((B, Ty), dtype=np.int64)
    target_mask = np.zeros((B, Ty))
    for b, ex in enumerate(examples):
        if len(ex.utterances) > limits.max_utts or len(ex.question) > limits.max_question_len:
            raise ValueError("example exceeds configured limits; truncate first")
        flat = 0
        for j, utt in enumerate(ex.utterances):
            if len(utt) > limits.max_utt_len:
                raise ValueError("utterance exceeds configured limits; truncate first")
            context[b, j, : len(utt)] = utt
            context_mask[b, j, : len(utt)] = 1.0
            for i in range(len(utt)):
                g = j * limits.max_utt_len + i
                answer_mask[b, g] = 1.0
                answer[b, g] = ex.answer_mask[flat + i]
            flat += len(utt)
        question[b, : len(ex.question)] = ex.question
        question_mask[b, : len(ex.question)] = 1.0
        y = list(ex.response)
        dec_in[b, : len(y) + 1] = [SOS_ID] + y
        dec_out[b, : len(y) + 1] = y + [EOS_ID]
        target_mask[b, : len(y) + 1] = 1.0
    return Batch(
        context=context,
        context_mask=context_mask,
        utt_mask=(context_mask.sum(axis=2) > 0).astype(np.float64),
        question=question,
        question_mask=question_mask,
        answer=answer,
        answer_mask=answer_mask,
        decoder_input=dec_in,
        decoder_target=dec_out,
        target_mask=target_mask,
    )


def grid_to_packed(example: DialogExample, grid_positions: Iterable[int], max_utt_len: int) -> list[int]:
    """Map answer-grid positions back to flattened context indices."""
    offsets = np.cumsum([0] + [len(u) for u in example.utterances])
    packed = []
    for g in grid_positions:
        j, i = divmod(int(g), max_utt_len)
        if j < len(example.utterances) and i < len(example.utterances[j]):
            packed.append(int(offsets[j]) + i)
    return sorted(packed)


# ---------------------------------------------------------- synthetic corpus

ENTITY_POOL = (
    "rome", "lisbon", "madrid", "oslo", "cairo", "lima", "seoul",
    "vienna", "north pier", "opera", "dublin", "jazz", "sushi", "tennis", "paris",
    "the tower", "blue lake", "old town", "kite", "piano", "green tea", "hot pot",
    "violin", "river park", "night market", "moon cake", "red bean", "chess club",
    "city zoo", "snow hill", "jade bridge", "summer camp", "tokyo", "berlin",
    "noodles", "dumplings", "guitar", "yoga", "comics", "coffee",
)

# Each family: opener (mentions {E}), follow-ups, omitting final turn,
# question, response (reuses {E}).  The three families mimic paraphrase,
# lexical-match and pragmatic questions.
TEMPLATES = {
    "paraphrasing": {
        "opener": ["i love {E} a lot", "i like {E} a lot"],
        "followup": ["why do you like it", "what is so good"],
        "filler": ["it is so good", "yes it is fun"],
        "final": ["i will show it to you", "i can show you now"],
        "question": ["what will be shown", "what can you show"],
        "response": [
            "good i will like {E} too so show it to me now",
            "ok i will see {E} with you so show me",
        ],
    },
    "lexical": {
        "opener": ["do you know {E}", "{E} is so good"],
        "followup": ["no i do not", "i do not know it"],
        "filler": ["it is so good", "you will like it"],
        "final": ["yes i will mail it now", "ok i can mail it to you"],
        "question": ["what will you mail", "what can you mail"],
        "response": [
            "ok mail me {E} now and i will see it tonight",
            "good i will see {E} tonight so mail it to me",
        ],
    },
    "pragmatics": {
        "opener": ["we met at {E} tonight", "i was at {E} with you"],
        "followup": ["how was it", "was it fun"],
        "filler": ["it was fun", "so good"],
        "final": ["let us visit it again", "we can visit it now"],
        "question": ["where is there", "where can we go"],
        "response": [
            "yes let us go to {E} again and see it tonight",
            "ok we go to {E} now and it will be fun",
        ],
    },
}

DEFAULT_MIXTURE = (0.49, 0.285, 0.225)


@dataclass(frozen=True)
class SynthConfig:
    n_entities: int = 20
    min_utts: int = 3
    max_utts: int = 5
    mixture: tuple[float, float, float] = DEFAULT_MIXTURE

    def validate(self) -> None:
        if self.n_entities < 1 or self.n_entities > len(ENTITY_POOL):
            raise ValueError(
                f"n_entities={self.n_entities} but the entity pool holds {len(ENTITY_POOL)}"
            )
        if not 1 <= self.min_utts <= self.max_utts:
            raise ValueError("need 1 <= min_utts <= max_utts")
        if self.min_utts < 2:
            raise ValueError("min_utts must be at least 2 (entity turn + omitting turn)")
        w = np.asarray(self.mixture, dtype=float)
        if w.shape != (3,) or np.any(w < 0) or w.sum() <= 0:
            raise ValueError("mixture needs three non-negative weights")


def synth_generate(seed: int, n_examples: int, config: SynthConfig = SynthConfig()) -> list[RawDialog]:
    """Deterministic synthetic dialogs with an omitted-entity question.

    An early turn names an entity, the final turn refers to it only implicitly,
    the question asks for it (gold answer = the entity tokens) and the response
    mentions it again.
    """
    if n_examples < 1:
        raise ValueError("n_examples must be at least 1")
    config.validate()
    rng = np.random.default_rng(seed)
    families = list(TEMPLATES)
    weights = np.asarray(config.mixture, dtype=float)
    weights = weights / weights.sum()
    entities = ENTITY_POOL[: config.n_entities]
    dialogs = []
    for _ in range(n_examples):
        fam = TEMPLATES[families[rng.choice(3, p=weights)]]
        entity = entities[rng.integers(len(entities))]
        n_utts = int(rng.integers(config.min_utts, config.max_utts + 1))
        opener = fam["opener"][rng.integers(2)].split()
        ent_tokens = entity.split()
        slot = opener.index("{E}")
        opener = opener[:slot] + ent_tokens + opener[slot + 1:]
        turns = [opener]
        # an optional greeting pushes the entity turn later in the dialog
        lead = n_utts >= 4 and rng.random() < 0.5
        if lead:
            turns.insert(0, "hi there".split())
        while len(turns) < n_utts - 1:
            pool = fam["followup"] if len(turns) == (2 if lead else 1) else fam["filler"]
            turns.append(pool[rng.integers(2)].split())
        pick = rng.integers(2)
        turns.append(fam["final"][pick].split())
        start = sum(len(t) for t in turns[: 1 if lead else 0]) + slot
        answer = list(range(start, start + len(ent_tokens)))
        # question and response wording follow the final turn, so the response
        # is fully determined by the context
        response = fam["response"][pick].replace("{E}", entity).split()
        dialogs.append(
            RawDialog(
                utterances=turns,
                question=fam["question"][pick].split(),
                answer=answer,
                response=response,
            )
        )
    return dialogs


def split_corpus(dialogs: Sequence, fractions=(0.9, 0.05, 0.05)):
    """Contiguous train/val/test split (the generator already shuffles)."""
    n = len(dialogs)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    return dialogs[:n_train], dialogs[n_train : n_train + n_val], dialogs[n_train + n_val :]
