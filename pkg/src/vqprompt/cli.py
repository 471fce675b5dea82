"""Command-line entry point: ``vqprompt <command> [options]``.

Settings come from three layers, later ones winning: built-in defaults, an
optional ``--config`` file, then command-line flags. The config file is flat
``key = value`` text; ``#`` starts a comment, blank lines are ignored and
tuples are comma separated. Unknown keys are rejected. Every artifact written
by a command records the seed and the effective config, and
``write_config``/``read_config`` round-trip exactly.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

from . import checkpoint as ck
from . import numerics as nx
from .corpus import Corpus, default_corpus, load_clusters, rule_counts, save_clusters, split
from .metrics import MetricConfig, cluster_purity, contingency
from .model import DecodingConfig
from .trainer import (
    VARIANTS,
    Experiment,
    TrainingConfig,
    TrainingDiverged,
    Trainer,
    best_model,
    build_model,
    evaluate_model,
    paraphrase,
    prepare,
    pretrained_lm_state,
    prompt_assignments,
    run_ablation,
    summarize_ablation,
)
from .vq import usage_report

log = logging.getLogger("vqprompt")

COMMANDS = ("generate-corpus", "pretrain-lm", "train", "paraphrase", "evaluate", "inspect-codebook", "ablate")


class UsageError(Exception):
    pass


# --- flat key = value config -------------------------------------------------


def _field_types() -> dict[str, type]:
    return {f.name: type(f.default) for f in fields(TrainingConfig)}


def _coerce(key: str, raw: str):
    kind = _field_types()[key]
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is tuple:
            return tuple(float(x) for x in raw.split(",") if x.strip())
    except ValueError:
        raise UsageError(f"bad value for {key}: {raw!r}") from None
    return raw


def read_config(path) -> dict:
    out = {}
    known = _field_types()
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in known:
            raise UsageError(f"{path}:{lineno}: unknown config key {key!r}")
        out[key] = _coerce(key, value)
    return out


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ", ".join(repr(float(v)) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_config(cfg: TrainingConfig, path) -> None:
    lines = [f"{k} = {_format(v)}" for k, v in cfg.to_dict().items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def effective_config(args, command_defaults: dict | None = None) -> TrainingConfig:
    values = dict(command_defaults or {})
    if getattr(args, "config", None):
        values.update(read_config(args.config))
    for key in _field_types():
        flag = getattr(args, f"cfg_{key}", None)
        if flag is not None:
            values[key] = _coerce(key, flag)
    try:
        return TrainingConfig(**values)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None


# --- artifact helpers --------------------------------------------------------


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _meta(cfg: TrainingConfig, **extra) -> dict:
    return {"seed": cfg.seed, "config": cfg.to_dict(), **extra}


def _load_splits(data_dir) -> tuple[Corpus, Corpus, Corpus]:
    d = Path(data_dir)
    missing = [n for n in ("train", "val", "test") if not (d / f"{n}.jsonl").exists()]
    if missing:
        raise UsageError(f"{d}: missing {', '.join(m + '.jsonl' for m in missing)}")
    return tuple(load_clusters(d / f"{n}.jsonl") for n in ("train", "val", "test"))


def _experiment(cfg: TrainingConfig, data_dir) -> Experiment:
    if data_dir:
        return prepare(cfg, splits=_load_splits(data_dir))
    return prepare(cfg)


def _lm_state_from(path, exp: Experiment) -> dict:
    lm = ck.load(path)
    if lm.vocab.digest() != exp.vocab.digest():
        raise UsageError(f"{path}: vocabulary does not match the training data")
    return lm.model.lm_state()


def _metric_config(cfg: dict) -> MetricConfig:
    return MetricConfig(alpha=cfg.get("alpha", 0.8))


# --- commands ----------------------------------------------------------------


def cmd_generate_corpus(args) -> int:
    cfg = effective_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    corpus = default_corpus(cfg.n_per_rule, cfg.seed)
    parts = dict(zip(("train", "val", "test"), split(corpus, cfg.split_ratios, cfg.seed)))
    parts["all"] = corpus
    for name, part in parts.items():
        path = out / f"{name}.jsonl"
        save_clusters(part, path)
        _write_json(
            out / f"{name}.meta.json",
            _meta(cfg, split=name, clusters=len(part), digest=part.digest(), rule_counts=rule_counts(part)),
        )
    write_config(cfg, out / "corpus.cfg")
    print(json.dumps({name: len(part) for name, part in parts.items()}))
    return 0


def cmd_pretrain_lm(args) -> int:
    cfg = effective_config(args, {"variant": "lm_only"})
    exp = _experiment(cfg, args.data)
    with nx.precision(cfg.np_dtype):
        pretrained_lm_state(exp)
        model = build_model(cfg, exp.vocab, exp.lm_state)
    extra = {"kind": "pretrained_lm", "seed": cfg.seed, "pretrain_history": exp.pretrain_history}
    ck.save(ck.Checkpoint(model, exp.vocab, 0, cfg.to_dict(), None, extra), args.out)
    print(json.dumps({"checkpoint": str(args.out), "final_loss": exp.pretrain_history[-1]["loss"]
                      if exp.pretrain_history else None}))
    return 0


def cmd_train(args) -> int:
    from .plots import training_curves

    cfg = effective_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_config(cfg, out / "effective.cfg")
    exp = _experiment(cfg, args.data)
    if args.lm:
        exp.lm_state = _lm_state_from(args.lm, exp)
    else:
        pretrained_lm_state(exp)

    log_path = out / "train_log.jsonl"
    with open(log_path, "w", encoding="utf-8") as log_fh, nx.precision(cfg.np_dtype):
        trainer = Trainer(cfg, exp, log_fn=lambda rec: log_fh.write(json.dumps(rec, sort_keys=True) + "\n"))
        result = trainer.run(args.max_steps)

    history = [h.to_json() for h in result.history]
    _write_json(
        out / "metrics.json",
        _meta(cfg, history=history, validation=result.val_history, revivals=result.revivals,
              best_epoch=result.best_epoch, final_active_fraction=result.final_active_fraction),
    )
    extra = {"kind": "paraphraser", "seed": cfg.seed, "best_epoch": result.best_epoch}
    ck.save(ck.Checkpoint(result.model, exp.vocab, result.step, cfg.to_dict(), result.optimizer, extra),
            out / "final.ckpt")
    best = best_model(result)
    ck.save(ck.Checkpoint(best, exp.vocab, result.step, cfg.to_dict(), None, extra), out / "best.ckpt")
    if history:
        training_curves(history, result.val_history, out / "training_curves.png")
    summary = {"steps": result.step, "best_epoch": result.best_epoch,
               "final_active_fraction": result.final_active_fraction}
    if result.val_history:
        summary["best_val"] = max(result.val_history, key=lambda r: r["ibleu"])
    print(json.dumps(summary, sort_keys=True))
    return 0


def _read_lines(path) -> list[str]:
    text = sys.stdin.read() if path in (None, "-") else Path(path).read_text(encoding="utf-8")
    return [line.strip() for line in text.splitlines() if line.strip()]


def cmd_paraphrase(args) -> int:
    c = ck.load(args.checkpoint)
    sentences = _read_lines(args.input)
    max_len = c.config.get("max_len", 32)
    decoding = DecodingConfig(
        mode="beam" if args.beam_width > 1 else "greedy",
        beam_width=args.beam_width,
        max_output_length=c.config.get("max_output_length", max_len),
    )
    outputs = paraphrase(c.model, sentences, c.vocab, max_len, decoding) if sentences else []
    text = "".join(o + "\n" for o in outputs)
    if args.output:
        Path(args.output).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


def cmd_evaluate(args) -> int:
    c = ck.load(args.checkpoint)
    corpus = load_clusters(args.data)
    if len(corpus) == 0:
        raise UsageError(f"{args.data}: no clusters")
    rep = evaluate_model(c.model, corpus, c.vocab, _metric_config(c.config), c.config.get("max_len", 32), args.limit)
    report = {**rep.summary(), "seed": c.extra.get("seed"), "config": c.config, "data": str(args.data)}
    if args.records:
        report["records"] = rep.records
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    print(text)
    return 0


def inspect_codebook(c: ck.Checkpoint, corpus: Corpus | None = None) -> dict:
    """Usage per code, active fraction and, with rule-labelled data, code-tuple/rule alignment."""
    model = c.model
    if model.codebook is None:
        raise UsageError("checkpoint has no codebook (lm_only model)")
    window = c.config.get("util_window", 200)
    report = {"seed": c.extra.get("seed"), "config": c.config, **usage_report(model.codebook, window)}
    if corpus is not None and len(corpus):
        tuples = prompt_assignments(model, corpus, c.vocab, c.config.get("max_len", 32))
        labels = [cl.rule_id for cl in corpus.clusters]
        report["distinct_tuples"] = len({tuple(t) for t in tuples.tolist()})
        if all(label is not None for label in labels):
            report["contingency"] = contingency(tuples, labels)
            report["purity"] = cluster_purity(tuples, labels)
            report["rule_counts"] = rule_counts(corpus)
    return report


def cmd_inspect_codebook(args) -> int:
    c = ck.load(args.checkpoint)
    corpus = load_clusters(args.data) if args.data else None
    report = inspect_codebook(c, corpus)
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "codebook.json").write_text(text + "\n", encoding="utf-8")
        from .plots import code_usage

        code_usage([row["select_count"] for row in report["codes"]], out / "code_usage.png")
    print(text)
    return 0


ABLATION_COLUMNS = ("variant", "seed", "bleu", "self_bleu", "ibleu", "active_fraction")


def cmd_ablate(args) -> int:
    from .plots import ablation_bars

    cfg = effective_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_config(cfg, out / "effective.cfg")
    seeds = [int(s) for s in args.seeds.split(",")]
    variants = args.variants.split(",")
    bad = [v for v in variants if v not in VARIANTS]
    if bad:
        raise UsageError(f"unknown variant(s): {', '.join(bad)}")
    corpus = None
    if args.data:
        corpus = load_clusters(Path(args.data) / "all.jsonl")

    def fmt(v):
        return "n/a" if v is None else (f"{v:.4f}" if isinstance(v, float) else str(v))

    rows = run_ablation(cfg, seeds, variants, corpus)
    with open(out / "ablation.tsv", "w", encoding="utf-8") as fh:
        fh.write("\t".join(ABLATION_COLUMNS) + "\n")
        for r in rows:
            fh.write("\t".join(fmt(getattr(r, k)) for k in ABLATION_COLUMNS) + "\n")
    summary = summarize_ablation(rows)
    _write_json(out / "ablation.json", _meta(cfg, seeds=seeds, rows=[r.to_json() for r in rows], summary=summary))
    ablation_bars(summary, out / "ablation.png")
    sys.stdout.write((out / "ablation.tsv").read_text(encoding="utf-8"))
    return 0


# --- argument parsing --------------------------------------------------------


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat 'key = value' settings file")
    for key in _field_types():
        p.add_argument(f"--{key.replace('_', '-')}", dest=f"cfg_{key}", metavar="V")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vqprompt", description="Paraphrase generation with quantized prompts.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("generate-corpus", help="write the synthetic corpus and its splits")
    p.add_argument("--out", required=True)
    _add_config_flags(p)

    p = sub.add_parser("pretrain-lm", help="denoising pretraining of the generative LM")
    p.add_argument("--out", required=True)
    p.add_argument("--data", help="directory with train/val/test.jsonl (default: generate)")
    _add_config_flags(p)

    p = sub.add_parser("train", help="train one variant")
    p.add_argument("--out", required=True)
    p.add_argument("--data")
    p.add_argument("--lm", help="pretrained LM checkpoint (default: pretrain in-process)")
    p.add_argument("--max-steps", type=int)
    _add_config_flags(p)

    p = sub.add_parser("paraphrase", help="paraphrase sentences, one per line")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", help="input file (default: standard input)")
    p.add_argument("--output")
    p.add_argument("--beam-width", type=int, default=1)

    p = sub.add_parser("evaluate", help="BLEU / self-BLEU / iBLEU report")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.add_argument("--limit", type=int, default=0)
    p.add_argument("--records", action="store_true", help="include per-sentence records")

    p = sub.add_parser("inspect-codebook", help="code usage, active fraction and rule alignment")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.add_argument("--out", help="directory for codebook.json and code_usage.png")

    p = sub.add_parser("ablate", help="train every variant over several seeds")
    p.add_argument("--out", required=True)
    p.add_argument("--data", help="directory holding all.jsonl")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--variants", default=",".join(VARIANTS))
    _add_config_flags(p)
    return parser


HANDLERS = {
    "generate-corpus": cmd_generate_corpus,
    "pretrain-lm": cmd_pretrain_lm,
    "train": cmd_train,
    "paraphrase": cmd_paraphrase,
    "evaluate": cmd_evaluate,
    "inspect-codebook": cmd_inspect_codebook,
    "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed usage
        return int(exc.code or 0) if exc.code in (0, None) else 2
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return HANDLERS[args.command](args)
    except UsageError as exc:
        print(f"vqprompt {args.command}: {exc}", file=sys.stderr)
        return 2
    except (ck.CheckpointError, ValueError, OSError, nx.NonFiniteError, TrainingDiverged) as exc:
        print(f"vqprompt {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
