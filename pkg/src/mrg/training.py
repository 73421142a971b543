"""Joint objective, clipped Adagrad, checkpoints and the training loop."""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .answer import answer_loss
from .data import Batch, DialogExample, make_batch
from .model import MRG, ModelConfig
from .tensor import Tensor

log = logging.getLogger(__name__)

MODES = ("joint", "response_only", "answer_only")


@dataclass
class TrainConfig:
    batch_size: int = 16
    vocab_cap: int = 50_000
    lr: float = 0.1
    adagrad_init_acc: float = 0.1
    clip: float = 2.0
    answer_weight: float = 1.0
    mode: str = "joint"
    seed: int = 0
    steps: int = 1000
    eval_every: int = 100
    beam_size: int = 4
    min_decode_len: int = 10
    max_decode_len: int = 20

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        for name in ("batch_size", "vocab_cap", "lr", "clip", "eval_every", "beam_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.adagrad_init_acc < 0 or self.answer_weight < 0 or self.steps < 0:
            raise ValueError("adagrad_init_acc, answer_weight and steps must be non-negative")
        if not 0 <= self.min_decode_len <= self.max_decode_len:
            raise ValueError("need 0 <= min_decode_len <= max_decode_len")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class LossParts:
    total: Tensor
    response_nll: float  # summed over tokens and batch
    response_tokens: int
    answer_bce: float


def joint_loss(model: MRG, batch: Batch, mode: str = "joint", answer_weight: float = 1.0) -> LossParts:
    """``L_g + answer_weight * L_a``; single-task modes skip the other head entirely.

    ``L_g`` is the per-example summed token NLL averaged over the batch and
    ``L_a`` the masked mean binary cross-entropy of the answer logits.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    enc = model.encode(batch)
    B = batch.size
    total = None
    nll_sum, la = 0.0, 0.0
    if mode in ("joint", "response_only"):
        nll = model.response_nll(enc, batch)
        nll_sum = float(nll.data.sum())
        total = nll.sum() * (1.0 / B)
    if mode in ("joint", "answer_only"):
        a = answer_loss(model.answer_logits(enc), batch.answer, batch.answer_mask)
        la = float(a.data)
        weighted = a * answer_weight if mode == "joint" else a
        total = weighted if total is None else total + weighted
    return LossParts(total, nll_sum, int(batch.target_mask.sum()), la)


class Adagrad:
    """Adagrad with elementwise gradient value clipping."""

    def __init__(self, params: dict[str, Tensor], lr: float, init_acc: float, clip: float, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.clip = clip
        self.eps = eps
        self.acc = {n: np.full_like(p.data, init_acc) for n, p in params.items()}

    def step(self) -> None:
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient for parameter {name}")
            g = np.clip(g, -self.clip, self.clip).astype(p.dtype, copy=False)
            acc = self.acc[name]
            acc += g * g
            p.data -= self.lr * g / (np.sqrt(acc) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


# -------------------------------------------------------------- checkpoints

MAGIC = b"MRGCKPT\n"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    config: dict
    step: int = 0
    val_loss: float = float("nan")
    meta: dict = field(default_factory=dict)

    def model_arrays(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.tensors.items() if not k.startswith("adagrad/")}


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    """Write the archive: magic, version, header length, JSON header, raw payload.

    The header lists (name, dtype, shape, offset, nbytes) per tensor; offsets
    count from the start of the payload, values are little-endian.
    """
    entries, chunks, offset = [], [], 0
    for name in sorted(ckpt.tensors):
        arr = np.ascontiguousarray(ckpt.tensors[name])
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = arr.tobytes()
        entries.append(
            {"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
        )
        chunks.append(raw)
        offset += len(raw)
    header = {
        "format_version": FORMAT_VERSION,
        "step": ckpt.step,
        "val_loss": ckpt.val_loss,
        "config": ckpt.config,
        "meta": ckpt.meta,
        "tensors": entries,
    }
    blob = json.dumps(header, sort_keys=True, ensure_ascii=False).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(blob)))
        fh.write(blob)
        for raw in chunks:
            fh.write(raw)


def load_checkpoint(path: str | Path) -> Checkpoint:
    data = Path(path).read_bytes()
    if data[: len(MAGIC)] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack_from("<IQ", data, len(MAGIC))
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    start = len(MAGIC) + struct.calcsize("<IQ")
    header = json.loads(data[start : start + hlen].decode("utf-8"))
    payload = memoryview(data)[start + hlen :]
    tensors = {}
    for e in header["tensors"]:
        raw = payload[e["offset"] : e["offset"] + e["nbytes"]]
        tensors[e["name"]] = np.frombuffer(raw, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
    return Checkpoint(tensors, header["config"], header["step"], header["val_loss"], header.get("meta", {}))


def model_from_checkpoint(ckpt: Checkpoint) -> MRG:
    model = MRG(ModelConfig.from_dict(ckpt.config["model"]))
    model.load_arrays(ckpt.model_arrays())
    return model


# ------------------------------------------------------------------- loop


def batches(examples: Sequence[DialogExample], size: int, model_cfg: ModelConfig):
    for i in range(0, len(examples), size):
        yield make_batch(examples[i : i + size], model_cfg.limits, trim=True)


def evaluate_loss(model: MRG, examples: Sequence[DialogExample], cfg: TrainConfig) -> dict:
    """Loss on a corpus under ``cfg.mode``, weighted by example count."""
    total, nll, tokens, bce, n = 0.0, 0.0, 0, 0.0, 0
    with T.no_grad():
        for batch in batches(examples, cfg.batch_size, model.config):
            parts = joint_loss(model, batch, cfg.mode, cfg.answer_weight)
            total += float(parts.total.data) * batch.size
            nll += parts.response_nll
            tokens += parts.response_tokens
            bce += parts.answer_bce * batch.size
            n += batch.size
    return {
        "loss": total / n,
        "token_nll": nll / tokens if tokens else float("nan"),
        "answer_bce": bce / n,
    }


def snapshot(model: MRG, opt: Adagrad, model_cfg: ModelConfig, cfg: TrainConfig, step: int, val_loss: float, meta=None) -> Checkpoint:
    tensors = model.state_arrays()
    tensors.update({f"adagrad/{k}": v.copy() for k, v in opt.acc.items()})
    config = {"model": model_cfg.to_dict(), "train": cfg.to_dict()}
    return Checkpoint(tensors, config, step, float(val_loss), dict(meta or {}))


@dataclass
class TrainResult:
    best: Checkpoint
    model: MRG  # parameters after the last step (not necessarily the best)
    history: list[dict]


def train_loop(
    cfg: TrainConfig,
    model_cfg: ModelConfig,
    train: Sequence[DialogExample],
    val: Sequence[DialogExample],
    meta: dict | None = None,
) -> TrainResult:
    """Train for ``cfg.steps`` updates, keeping the lowest-validation-loss checkpoint.

    Data order and initialization derive from ``cfg.seed`` / ``model_cfg.seed``
    only, so identical inputs give bit-identical checkpoints.
    """
    cfg.validate()
    if not train or not val:
        raise ValueError("train and validation corpora must be non-empty")
    model = MRG(model_cfg)
    opt = Adagrad(model.parameters(), cfg.lr, cfg.adagrad_init_acc, cfg.clip)
    rng = np.random.default_rng(cfg.seed)
    history: list[dict] = []

    def validate_at(step: int):
        stats = evaluate_loss(model, val, cfg)
        history.append({"step": step, **{f"val_{k}": v for k, v in stats.items()}})
        return stats["loss"]

    best = snapshot(model, opt, model_cfg, cfg, 0, validate_at(0), meta)
    order: list[int] = []
    for step in range(1, cfg.steps + 1):
        if len(order) < cfg.batch_size:
            order.extend(rng.permutation(len(train)).tolist())
        idx, order = order[: cfg.batch_size], order[cfg.batch_size :]
        batch = make_batch([train[i] for i in idx], model_cfg.limits, trim=True)
        opt.zero_grad()
        parts = joint_loss(model, batch, cfg.mode, cfg.answer_weight)
        T.backward(parts.total)
        opt.step()
        if step % cfg.eval_every == 0 or step == cfg.steps:
            train_nll = parts.response_nll / max(parts.response_tokens, 1)
            val_loss = validate_at(step)
            history[-1].update(train_loss=float(parts.total.data), train_token_nll=train_nll)
            log.info("step %d train %.4f val %.4f", step, float(parts.total.data), val_loss)
            if val_loss < best.val_loss:
                best = snapshot(model, opt, model_cfg, cfg, step, val_loss, meta)
    return TrainResult(best, model, history)
