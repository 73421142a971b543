"""Finite-difference verification of every adjoint rule and of the full model."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .data import Limits, RawDialog, build_vocab, encode_dialog, make_batch
from .model import MRG, ModelConfig
from .tensor import Tensor

TOLERANCE = 1e-4
STEP = 1e-4
# five-point central stencil: truncation error O(h^4), so a wide step keeps
# roundoff small even for gradients near 1e-6 on losses of order 10
STENCIL = ((-2, 1 / 12), (-1, -8 / 12), (1, 8 / 12), (2, -1 / 12))


def rel_err(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), 1e-6)


def numeric_directional(f: Callable[[], float], params: list[Tensor], dirs: list[np.ndarray], h: float = STEP) -> float:
    """Central difference of ``f`` along the joint direction ``dirs``."""
    originals = [p.data.copy() for p in params]
    total = 0.0
    for k, w in STENCIL:
        for p, x0, d in zip(params, originals, dirs):
            p.data = x0 + k * h * d
        total += w * f()
    for p, x0 in zip(params, originals):
        p.data = x0
    return total / h


def numeric_element(f: Callable[[], float], p: Tensor, idx: tuple, h: float = STEP) -> float:
    d = np.zeros_like(p.data)
    d[idx] = 1.0
    return numeric_directional(f, [p], [d], h)


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    passed: bool


def check_function(
    name: str,
    build: Callable[[list[Tensor]], Tensor],
    inputs: list[np.ndarray],
    rng: np.random.Generator,
    n_elements: int = 6,
    tol: float = TOLERANCE,
) -> CheckResult:
    """Compare analytic and numeric gradients of ``sum(build(x) * w)``.

    ``w`` is a fixed random weighting, so every output element contributes
    with a distinct coefficient. Each input gets one random-direction check
    and up to ``n_elements`` single-coordinate checks.
    """
    xs = [Tensor(np.array(x, dtype=np.float64), requires_grad=True) for x in inputs]
    probe = build(xs)
    weight = rng.standard_normal(probe.shape)

    def value() -> float:
        with T.no_grad():
            return float(np.sum(build(xs).data * weight))

    loss = (build(xs) * weight).sum()
    T.backward(loss)
    worst = 0.0
    for x in xs:
        grad = x.grad if x.grad is not None else np.zeros_like(x.data)
        d = rng.standard_normal(x.shape)
        worst = max(worst, rel_err(float(np.sum(grad * d)), numeric_directional(value, [x], [d])))
        flat = rng.choice(x.data.size, size=min(n_elements, x.data.size), replace=False)
        for k in flat:
            idx = np.unravel_index(k, x.shape)
            worst = max(worst, rel_err(float(grad[idx]), numeric_element(value, x, idx)))
    return CheckResult(name, worst, worst <= tol)


def op_checks(rng: np.random.Generator) -> list[CheckResult]:
    """One check per differentiable op, named after its adjoint rule."""
    r = rng.standard_normal
    mask = np.array([[1, 1, 0, 1], [1, 0, 0, 0], [1, 1, 1, 1]], dtype=bool)
    targets = (rng.random((3, 4)) < 0.5).astype(float)
    cases = [
        ("add", lambda x: x[0] + x[1], [r((3, 4)), r(4)]),
        ("sub", lambda x: x[0] - x[1], [r((3, 4)), r((3, 1))]),
        ("mul", lambda x: x[0] * x[1], [r((3, 4)), r((1, 4))]),
        ("matmul", lambda x: x[0] @ x[1], [r((3, 4)), r((4, 2))]),
        ("matmul", lambda x: x[0] @ x[1], [r((2, 3, 4)), r((2, 4, 5))]),
        ("sum", lambda x: x[0].sum(axis=1), [r((3, 4))]),
        ("tanh", lambda x: T.tanh(x[0]), [r((3, 4))]),
        ("sigmoid", lambda x: T.sigmoid(x[0]), [r((3, 4))]),
        ("softmax", lambda x: T.softmax(x[0], axis=-1, mask=mask), [r((3, 4))]),
        ("log_softmax", lambda x: T.log_softmax(x[0], axis=-1), [r((3, 4))]),
        ("layer_norm", lambda x: T.layer_norm(x[0], x[1], x[2]), [r((3, 4)), r(4), r(4)]),
        ("bce_with_logits", lambda x: T.bce_with_logits(x[0], targets), [r((3, 4))]),
        ("mean_pool", lambda x: T.mean_pool(x[0], mask, axis=1), [r((3, 4, 2))]),
        ("concat", lambda x: T.concat([x[0], x[1]], axis=-1), [r((3, 2)), r((3, 3))]),
        ("stack", lambda x: T.stack([x[0], x[1]], axis=1), [r((3, 2)), r((3, 2))]),
        ("getitem", lambda x: x[0][:, 1:3], [r((3, 4))]),
        ("reshape", lambda x: x[0].reshape(4, 3), [r((3, 4))]),
        ("transpose", lambda x: T.transpose(x[0], (1, 0, 2)), [r((2, 3, 4))]),
        ("embedding", lambda x: T.embedding(x[0], np.array([[0, 2], [2, 1]])), [r((3, 4))]),
        ("pick", lambda x: T.pick(x[0], np.array([1, 3, 0])), [r((3, 4))]),
    ]
    return [check_function(f"op:{name}", fn, inputs, rng) for name, fn, inputs in cases]


def tiny_model_config(seed: int = 0) -> ModelConfig:
    return ModelConfig(
        vocab_size=16, emb_dim=8, hidden=16, layers=2, heads=2,
        max_utts=3, max_utt_len=5, max_question_len=4, max_response_len=6,
        dtype="float64", seed=seed,
    )


def tiny_batch(seed: int = 0, vocab_size: int = 16):
    """Two hand-shaped dialogs over a 12-token vocabulary, one with a padded utterance."""
    words = [f"w{i}" for i in range(vocab_size - 4)]
    vocab = build_vocab([words])
    rng = np.random.default_rng(seed)

    def sent(n):
        return [words[i] for i in rng.integers(len(words), size=n)]

    dialogs = [
        RawDialog([sent(5), sent(3), sent(4)], sent(4), [1, 2], sent(5)),
        RawDialog([sent(2), sent(5)], sent(3), [4], sent(3)),
    ]
    examples = [encode_dialog(d, vocab) for d in dialogs]
    return make_batch(examples, Limits(3, 5, 4, 6))


def model_checks(seed: int = 0, n_elements: int = 4, mode: str = "joint", tol: float = TOLERANCE) -> list[CheckResult]:
    """Per-parameter gradient checks of the joint loss on the tiny configuration."""
    from .training import joint_loss

    model = MRG(tiny_model_config(seed))
    batch = tiny_batch(seed)
    rng = np.random.default_rng(seed + 1)

    def value() -> float:
        with T.no_grad():
            return float(joint_loss(model, batch, mode).total.data)

    model.zero_grad()
    T.backward(joint_loss(model, batch, mode).total)
    results = []
    for name, p in model.named_parameters():
        grad = p.grad if p.grad is not None else np.zeros_like(p.data)
        d = rng.standard_normal(p.shape)
        worst = rel_err(float(np.sum(grad * d)), numeric_directional(value, [p], [d]))
        for k in rng.choice(p.data.size, size=min(n_elements, p.data.size), replace=False):
            idx = np.unravel_index(k, p.shape)
            worst = max(worst, rel_err(float(grad[idx]), numeric_element(value, p, idx)))
        results.append(CheckResult(f"param:{name}", worst, worst <= tol))
    return results


def run_suite(seed: int = 0) -> tuple[list[CheckResult], float]:
    start = time.perf_counter()
    results = op_checks(np.random.default_rng(seed))
    results += model_checks(seed)
    return results, time.perf_counter() - start
