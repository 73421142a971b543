"""Multi-task and component ablations: several arms x seeds, one comparison report."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import DialogExample, Vocabulary
from .evaluation import evaluate
from .metrics import METRIC_NAMES
from .model import ModelConfig
from .training import TrainConfig, model_from_checkpoint, train_loop

RESPONSE_METRICS = METRIC_NAMES[:7]
ANSWER_METRICS = METRIC_NAMES[7:]


@dataclass(frozen=True)
class Arm:
    name: str
    label: str
    mode: str = "joint"
    model_overrides: tuple = ()


ARMS = {
    arm.name: arm
    for arm in (
        Arm("joint", "MRG"),
        Arm("response_only", "MRG w/o MT (response only)", mode="response_only"),
        Arm("answer_only", "MRG w/o MT (answer only)", mode="answer_only"),
        Arm("no_mcam", "MRG w/o MCAM", model_overrides=(("use_mcam", False),)),
        Arm("no_mam", "MRG w/o MAM", model_overrides=(("use_mam", False),)),
        Arm("no_memupd", "MRG w/o MemUpd", model_overrides=(("use_memupd", False),)),
    )
}


def run_arm(
    arm: Arm,
    seed: int,
    base_train: TrainConfig,
    base_model: ModelConfig,
    train: Sequence[DialogExample],
    val: Sequence[DialogExample],
    test: Sequence[DialogExample],
    vocab: Vocabulary,
) -> dict:
    tcfg = dataclasses.replace(base_train, mode=arm.mode, seed=seed)
    mcfg = dataclasses.replace(base_model, seed=seed, **dict(arm.model_overrides))
    result = train_loop(tcfg, mcfg, train, val)
    model = model_from_checkpoint(result.best)
    report = evaluate(
        model, vocab, test,
        beam_size=tcfg.beam_size, min_len=tcfg.min_decode_len, max_len=tcfg.max_decode_len,
        score_answers=arm.mode != "response_only",
    )
    metrics = dict(report["metrics"])
    if arm.mode == "answer_only":
        # the response head is never trained in this arm
        metrics.update({k: None for k in RESPONSE_METRICS})
    return {
        "arm": arm.name,
        "seed": seed,
        "best_step": result.best.step,
        "best_val_loss": result.best.val_loss,
        "metrics": metrics,
    }


def summarize(runs: Sequence[dict], arms: Sequence[str]) -> dict:
    """Mean and sample std per arm and metric (None where the arm has no such head)."""
    out = {}
    for name in arms:
        rows = [r for r in runs if r["arm"] == name]
        stats = {}
        for metric in METRIC_NAMES:
            vals = [r["metrics"][metric] for r in rows if r["metrics"][metric] is not None]
            if vals:
                std = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
                stats[metric] = {"mean": float(np.mean(vals)), "std": std}
            else:
                stats[metric] = None
        out[name] = stats
    return out


def _cell(stat) -> str:
    if stat is None:
        return "n/a"
    return f"{100 * stat['mean']:.2f} ± {100 * stat['std']:.2f}"


def markdown_report(summary: dict, seeds: Sequence[int], meta: dict) -> str:
    """Two tables: response quality (BLEU, embedding metrics) and answer accuracy."""
    lines = [
        "# Ablation report",
        "",
        f"Seeds: {', '.join(map(str, seeds))}. Values are percentages, mean ± sample std over seeds.",
        "",
    ]
    for key in sorted(meta):
        lines.append(f"- {key}: {meta[key]}")
    lines += ["", "## Response generation", ""]
    head = ["Model", "BLEU1", "BLEU2", "BLEU3", "BLEU4", "Average", "Extrema", "Greedy"]
    lines.append("| " + " | ".join(head) + " |")
    lines.append("|" + "---|" * len(head))
    for name, stats in summary.items():
        cells = [_cell(stats[m]) for m in RESPONSE_METRICS]
        lines.append(f"| {ARMS[name].label} | " + " | ".join(cells) + " |")
    lines += ["", "## Answer selection", "", "| Model | Exact match | F1 |", "|---|---|---|"]
    for name, stats in summary.items():
        cells = [_cell(stats[m]) for m in ANSWER_METRICS]
        lines.append(f"| {ARMS[name].label} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def run_ablation(
    arms: Sequence[str],
    seeds: Sequence[int],
    base_train: TrainConfig,
    base_model: ModelConfig,
    train: Sequence[DialogExample],
    val: Sequence[DialogExample],
    test: Sequence[DialogExample],
    vocab: Vocabulary,
    log=None,
) -> dict:
    unknown = [a for a in arms if a not in ARMS]
    if unknown:
        raise ValueError(f"unknown ablation arms: {unknown}")
    runs = []
    for name in arms:
        for seed in seeds:
            runs.append(run_arm(ARMS[name], seed, base_train, base_model, train, val, test, vocab))
            if log:
                log(f"arm {name} seed {seed}: best step {runs[-1]['best_step']}")
    return {"arms": list(arms), "seeds": list(seeds), "runs": runs, "summary": summarize(runs, arms)}
