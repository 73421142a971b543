"""Command-line entry point: synth, train, eval, generate, gradcheck, ablate."""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
import time
import typing
from pathlib import Path

import numpy as np

from . import ablation
from .data import CorpusError, SynthConfig, Vocabulary, build_vocab, encode_dialog, read_dialogs
from .data import split_corpus, synth_generate, write_corpus
from .evaluation import evaluate, generate
from .metrics import load_embeddings
from .model import ModelConfig
from .training import TrainConfig, load_checkpoint, model_from_checkpoint, save_checkpoint, train_loop

log = logging.getLogger("mrg")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    """Bad flags, config values or input paths (exit code 2)."""


# ------------------------------------------------------------------ config

# model fields that are derived from data or shared with TrainConfig
_MODEL_SKIP = {"vocab_size", "seed"}
_DATA_KEYS = {"tokenizer": str}


def _field_types() -> dict[str, type]:
    types: dict[str, type] = dict(_DATA_KEYS)
    for cls, skip in ((TrainConfig, set()), (ModelConfig, _MODEL_SKIP)):
        hints = typing.get_type_hints(cls)
        for f in dataclasses.fields(cls):
            if f.name in skip:
                continue
            t = hints[f.name]
            if typing.get_origin(t) is typing.Union or type(t).__name__ == "UnionType":
                t = next(a for a in typing.get_args(t) if a is not type(None))
            types[f.name] = t
    return types


FIELD_TYPES = _field_types()


def parse_value(key: str, raw: str):
    t = FIELD_TYPES.get(key)
    if t is None:
        raise UsageError(f"unknown config key {key!r}")
    raw = raw.strip()
    if raw.lower() in ("none", "null") and key in ("answer_hidden", "attn_dim"):
        return None
    try:
        if t is bool:
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return t(raw)
    except ValueError:
        raise UsageError(f"config key {key!r}: cannot parse {raw!r} as {t.__name__}") from None


def read_config(path: str | Path) -> dict:
    """Flat ``key = value`` file; ``#`` starts a comment."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror}") from None
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = parse_value(key, value)
    return out


def add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value config file")
    g = p.add_argument_group("hyperparameters (override the config file)")
    for key in FIELD_TYPES:
        if key == "seed":  # every subcommand has its own --seed
            continue
        g.add_argument("--" + key.replace("_", "-"), dest="cfg_" + key, metavar="V", default=None)
    g.add_argument("--no-mcam", action="store_true", help="pass encoder states straight through")
    g.add_argument("--no-mam", action="store_true", help="pool encoder states without attention")
    g.add_argument("--no-memupd", action="store_true", help="cross attention without the memory updater")


def resolve_config(args) -> dict:
    values = read_config(args.config) if getattr(args, "config", None) else {}
    for key in FIELD_TYPES:
        raw = getattr(args, "cfg_" + key, None)
        if raw is not None:
            values[key] = parse_value(key, raw)
    if getattr(args, "no_mcam", False):
        values["use_mcam"] = False
    if getattr(args, "no_mam", False):
        values["use_mam"] = False
    if getattr(args, "no_memupd", False):
        values["use_memupd"] = False
    if args.seed is not None:
        values["seed"] = args.seed
    return values


def split_config(values: dict, vocab_size: int) -> tuple[TrainConfig, ModelConfig]:
    tnames = {f.name for f in dataclasses.fields(TrainConfig)}
    mnames = {f.name for f in dataclasses.fields(ModelConfig)} - _MODEL_SKIP
    tcfg = TrainConfig(**{k: v for k, v in values.items() if k in tnames})
    mcfg = ModelConfig(
        vocab_size=vocab_size, seed=tcfg.seed, **{k: v for k, v in values.items() if k in mnames}
    )
    try:
        tcfg.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if min(mcfg.emb_dim, mcfg.hidden, mcfg.layers, mcfg.heads) <= 0 or mcfg.hidden % mcfg.heads:
        raise UsageError("emb_dim, hidden, layers, heads must be positive and heads must divide hidden")
    if mcfg.hidden % 2:
        raise UsageError("hidden must be even (two encoder directions)")
    return tcfg, mcfg


# --------------------------------------------------------------- manifests


def blob_sha1(path: str | Path) -> str:
    """Content hash in the same form git uses for blobs."""
    data = Path(path).read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def write_manifest(out_dir: Path, command: str, config: dict, seed, inputs: dict, outputs: dict,
                   started: float, checkpoint: Path | None = None) -> Path:
    manifest = {
        "command": command,
        "argv": sys.argv[1:],
        "config": config,
        "seed": seed,
        "inputs": {k: str(v) for k, v in inputs.items()},
        "outputs": {k: str(v) for k, v in outputs.items()},
        "checkpoint_sha1": blob_sha1(checkpoint) if checkpoint else None,
        "wall_clock_seconds": round(time.perf_counter() - started, 3),
    }
    path = out_dir / f"{command}.manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require_file(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} not found: {path}")
    return p


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8")


# ----------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    started = time.perf_counter()
    if args.n <= 0:
        raise UsageError("--n must be positive")
    cfg = SynthConfig(n_entities=args.n_entities, min_utts=args.min_utts, max_utts=args.max_utts)
    try:
        cfg.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    seed = 0 if args.seed is None else args.seed
    dialogs = synth_generate(seed, args.n, cfg)
    out = _out_dir(args.out)
    outputs = {}
    if args.no_split:
        outputs["all"] = out / "all.jsonl"
        write_corpus(dialogs, outputs["all"])
    else:
        for name, part in zip(("train", "val", "test"), split_corpus(dialogs)):
            outputs[name] = out / f"{name}.jsonl"
            write_corpus(part, outputs[name])
    write_manifest(out, "synth", dataclasses.asdict(cfg) | {"n": args.n}, seed, {}, outputs, started)
    print(f"wrote {args.n} dialogs to {out}")
    return EXIT_OK


def _load_split(path, vocab, tokenizer, limits):
    return [encode_dialog(d, vocab) for d in read_dialogs(_require_file(path, "corpus"), tokenizer, limits)]


def _prepare(values: dict, train_path, val_path):
    """Build the vocabulary from the training corpus and encode both splits."""
    tokenizer = values.get("tokenizer", "whitespace")
    probe_t, probe_m = split_config(values, vocab_size=1)
    limits = probe_m.limits
    train_dialogs = read_dialogs(_require_file(train_path, "training corpus"), tokenizer, limits)
    vocab = build_vocab((s for d in train_dialogs for s in d.sentences()), probe_t.vocab_cap)
    tcfg, mcfg = split_config(values, len(vocab))
    train = [encode_dialog(d, vocab) for d in train_dialogs]
    val = _load_split(val_path, vocab, tokenizer, limits)
    return tcfg, mcfg, vocab, train, val, tokenizer


def cmd_train(args) -> int:
    started = time.perf_counter()
    values = resolve_config(args)
    tcfg, mcfg, vocab, train, val, tokenizer = _prepare(values, args.train, args.val)
    out = _out_dir(args.out)
    meta = {"vocab": vocab.regular_tokens, "tokenizer": tokenizer}
    result = train_loop(tcfg, mcfg, train, val, meta=meta)
    ckpt_path = out / "model.ckpt"
    save_checkpoint(result.best, ckpt_path)
    vocab.save(out / "vocab.txt")
    _dump(out / "history.json", result.history)
    config = {"train": tcfg.to_dict(), "model": mcfg.to_dict(), "tokenizer": tokenizer}
    write_manifest(
        out, "train", config, tcfg.seed, {"train": args.train, "val": args.val},
        {"checkpoint": ckpt_path, "vocab": out / "vocab.txt", "history": out / "history.json"},
        started, ckpt_path,
    )
    print(f"best step {result.best.step} val loss {result.best.val_loss:.6f} -> {ckpt_path}")
    return EXIT_OK


def _load_model(path):
    ckpt = load_checkpoint(_require_file(path, "checkpoint"))
    vocab = Vocabulary(ckpt.meta["vocab"])
    return ckpt, model_from_checkpoint(ckpt), vocab, ckpt.meta.get("tokenizer", "whitespace")


def _decode_settings(args, ckpt):
    train = ckpt.config["train"]
    pick = lambda flag, key: train[key] if getattr(args, flag) is None else getattr(args, flag)  # noqa: E731
    return pick("beam_size", "beam_size"), pick("min_len", "min_decode_len"), pick("max_len", "max_decode_len")


def cmd_eval(args) -> int:
    started = time.perf_counter()
    ckpt, model, vocab, tokenizer = _load_model(args.checkpoint)
    examples = _load_split(args.test, vocab, tokenizer, model.config.limits)
    if args.limit:
        examples = examples[: args.limit]
    embeddings = load_embeddings(_require_file(args.embeddings, "embedding file")) if args.embeddings else None
    beam, lo, hi = _decode_settings(args, ckpt)
    report = evaluate(model, vocab, examples, embeddings, beam, lo, hi, corpus_bleu=args.corpus_bleu)
    out = _out_dir(args.out)
    _dump(out / "report.json", report)
    write_manifest(
        out, "eval", {"beam_size": beam, "min_len": lo, "max_len": hi, "corpus_bleu": args.corpus_bleu},
        args.seed, {"checkpoint": args.checkpoint, "test": args.test}, {"report": out / "report.json"},
        started, Path(args.checkpoint),
    )
    for key, value in report["metrics"].items():
        print(f"{key}: {'n/a' if value is None else f'{value:.4f}'}")
    return EXIT_OK


def cmd_generate(args) -> int:
    started = time.perf_counter()
    ckpt, model, vocab, tokenizer = _load_model(args.checkpoint)
    examples = _load_split(args.input, vocab, tokenizer, model.config.limits)
    beam, lo, hi = _decode_settings(args, ckpt)
    responses, answers = generate(model, examples, beam, lo, hi)
    out = _out_dir(args.out)
    path = out / "generations.jsonl"
    L = model.config.max_utt_len
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for k, (ex, resp, grid) in enumerate(zip(examples, responses, answers)):
            flat_offsets = np.cumsum([0] + [len(u) for u in ex.utterances])
            packed = [int(flat_offsets[g // L] + g % L) for g in grid]
            tokens = [t for u in ex.raw_text["utterances"] for t in u]
            record = {
                "index": k,
                "response": " ".join(vocab.decode(resp)),
                "answer_token_indices": packed,
                "answer": " ".join(tokens[i] for i in packed),
            }
            fh.write(json.dumps(record, ensure_ascii=False, sort_keys=True) + "\n")
    write_manifest(
        out, "generate", {"beam_size": beam, "min_len": lo, "max_len": hi}, args.seed,
        {"checkpoint": args.checkpoint, "input": args.input}, {"generations": path}, started,
        Path(args.checkpoint),
    )
    print(f"wrote {len(examples)} generations to {path}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import TOLERANCE, run_suite

    started = time.perf_counter()
    seed = 0 if args.seed is None else args.seed
    results, elapsed = run_suite(seed)
    failed = [r for r in results if not r.passed]
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name} max_rel_err={r.max_rel_err:.2e}")
    print(f"{len(results) - len(failed)}/{len(results)} checks within {TOLERANCE:g} in {elapsed:.1f}s")
    if args.out:
        out = _out_dir(args.out)
        rows = [dataclasses.asdict(r) for r in results]
        _dump(out / "gradcheck.json", {"tolerance": TOLERANCE, "checks": rows})
        write_manifest(out, "gradcheck", {"tolerance": TOLERANCE}, seed, {},
                       {"report": out / "gradcheck.json"}, started)
    if failed:
        print("failing: " + ", ".join(r.name for r in failed), file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def cmd_ablate(args) -> int:
    started = time.perf_counter()
    values = resolve_config(args)
    data = Path(args.data)
    tcfg, mcfg, vocab, train, val, tokenizer = _prepare(values, data / "train.jsonl", data / "val.jsonl")
    test = _load_split(data / "test.jsonl", vocab, tokenizer, mcfg.limits)
    if args.limit:
        test = test[: args.limit]
    try:
        seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"--seeds expects comma-separated integers, got {args.seeds!r}") from None
    arms = [a.strip() for a in args.arms.split(",") if a.strip()]
    if not seeds or any(a not in ablation.ARMS for a in arms):
        raise UsageError(f"need at least one seed and arms from {sorted(ablation.ARMS)}")
    result = ablation.run_ablation(arms, seeds, tcfg, mcfg, train, val, test, vocab, log=log.info)
    meta = {
        "train examples": len(train), "validation examples": len(val), "test examples": len(test),
        "steps": tcfg.steps, "emb_dim": mcfg.emb_dim, "hidden": mcfg.hidden, "lr": tcfg.lr,
    }
    result["meta"] = meta
    out = _out_dir(args.out)
    _dump(out / "ablation.json", result)
    (out / "ablation.md").write_text(ablation.markdown_report(result["summary"], seeds, meta), encoding="utf-8")
    config = {"train": tcfg.to_dict(), "model": mcfg.to_dict(), "arms": arms, "seeds": seeds}
    write_manifest(out, "ablate", config, seeds, {"data": data},
                   {"json": out / "ablation.json", "markdown": out / "ablation.md"}, started)
    print((out / "ablation.md").read_text(encoding="utf-8"))
    return EXIT_OK


# ------------------------------------------------------------------ parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mrg", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write a synthetic corpus (train/val/test JSONL)")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n-entities", type=int, default=SynthConfig.n_entities)
    p.add_argument("--min-utts", type=int, default=SynthConfig.min_utts)
    p.add_argument("--max-utts", type=int, default=SynthConfig.max_utts)
    p.add_argument("--no-split", action="store_true", help="write a single all.jsonl")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train and keep the best-validation checkpoint")
    p.add_argument("--train", required=True)
    p.add_argument("--val", required=True)
    p.add_argument("--out", required=True)
    add_config_flags(p)
    p.set_defaults(func=cmd_train)

    for name, func, inp in (("eval", cmd_eval, "--test"), ("generate", cmd_generate, "--input")):
        p = sub.add_parser(name, help="score a checkpoint" if name == "eval" else "batch decode to JSONL")
        p.add_argument("--checkpoint", required=True)
        p.add_argument(inp, required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--beam-size", type=int)
        p.add_argument("--min-len", type=int)
        p.add_argument("--max-len", type=int)
        if name == "eval":
            p.add_argument("--embeddings", help="external embedding text file for the BOW metrics")
            p.add_argument("--corpus-bleu", action="store_true")
            p.add_argument("--limit", type=int, default=0, help="score only the first N examples")
        p.set_defaults(func=func)

    p = sub.add_parser("gradcheck", help="finite-difference check of all adjoints and parameters")
    p.add_argument("--out")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="train and score each ablation arm over several seeds")
    p.add_argument("--data", required=True, help="directory with train/val/test.jsonl")
    p.add_argument("--out", required=True)
    p.add_argument("--arms", default=",".join(ablation.ARMS))
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--limit", type=int, default=0, help="score only the first N test examples")
    add_config_flags(p)
    p.set_defaults(func=cmd_ablate)

    for sp in sub.choices.values():
        sp.add_argument("--seed", type=int, default=None)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"mrg: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (UsageError, CorpusError) as exc:
        print(f"mrg: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FloatingPointError as exc:
        print(f"mrg: training aborted: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
