"""``mixbound`` command line: synth, stats, train, pretrain1, pretrain2, predict, ensemble, eval.

Every failure prints one line ``mixbound-error: <Kind>: <message>`` to stderr
and exits with status 1.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import data as D
from .checkpoint import Checkpoint
from .config import ExperimentConfig, load_config
from .decode import STRATEGIES, EnsembleError, read_predictions, write_predictions
from .train import (
    TrainResult,
    evaluate_mae,
    from_checkpoint,
    predict_ensemble,
    pretrain1_then_finetune,
    pretrain2_then_finetune,
    tokenize_for,
    train,
)

log = logging.getLogger("mixbound")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        print(f"mixbound-error: UsageError: {self.prog}: {message}", file=sys.stderr)
        sys.exit(2)


def _on_off(value: str) -> bool:
    if value not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return value == "on"


def _load_cfg(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "strategy", None) is not None:
        cfg.strategy = args.strategy
    if getattr(args, "strict", None) is not None:
        cfg.strict = args.strict
    return cfg


def _out_dir(args, cfg: ExperimentConfig | None = None) -> Path:
    if args.out:
        out = Path(args.out)
    elif cfg is not None:
        out = cfg.path(cfg.out, "out", must_exist=False)
    else:
        raise ValueError("--out is required")
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_synth(args) -> int:
    cfg = _load_cfg(args)
    sc = cfg.synth.synth_config(cfg.seed)
    out = _out_dir(args, cfg)
    train_c = D.synth_generate(sc, cfg.synth.n_train, stream=1, prefix="train-")
    dev_c = D.synth_generate(sc, cfg.synth.n_dev, stream=2, prefix="dev-")
    docs = D.synth_documents(sc, cfg.synth.n_docs, stream=3, prefix="doc-")
    human, machine = D.author_pools(docs)
    pre = D.build_pretrain1(human, machine, cfg.seed, prefix="pre-")
    D.save_jsonl(train_c, out / "train.jsonl")
    D.save_jsonl(dev_c, out / "dev.jsonl")
    D.save_jsonl(docs, out / "docs.jsonl")
    D.save_jsonl(pre, out / "pretrain1.jsonl")
    print(f"wrote {len(train_c)} train, {len(dev_c)} dev, {len(docs)} docs, {len(pre)} pretrain1 records to {out}")
    return 0


def cmd_stats(args) -> int:
    corpus = D.load_jsonl(args.data, strict=args.strict, label_offset=args.label_offset)
    if not corpus:
        raise ValueError(f"{args.data}: empty corpus")
    print(D.stats(corpus).table())
    return 0


def _corpora(cfg: ExperimentConfig):
    off = cfg.data.label_offset
    tr = D.load_jsonl(cfg.path(cfg.data.train, "train"), strict=cfg.strict, label_offset=off)
    dev = D.load_jsonl(cfg.path(cfg.data.dev, "dev"), strict=cfg.strict, label_offset=off) if cfg.data.dev else None
    return tr, dev


def _write_run(result: TrainResult, out: Path) -> None:
    result.checkpoint.save(out / "model.mtbd")
    (out / "history.csv").write_text(result.history_csv(), encoding="utf-8")
    print(f"best epoch {result.best_epoch}; checkpoint {out / 'model.mtbd'}")


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    tr, dev = _corpora(cfg)
    result = train(tr, dev, cfg.train_config())
    _write_run(result, _out_dir(args, cfg))
    return 0


def cmd_pretrain1(args) -> int:
    cfg = _load_cfg(args)
    tr, dev = _corpora(cfg)
    if cfg.data.pretrain:
        pre = D.load_jsonl(cfg.path(cfg.data.pretrain, "pretrain"), strict=False)
    else:
        human, machine = D.author_pools(D.load_docs_jsonl(cfg.path(cfg.data.docs, "docs")))
        pre = D.build_pretrain1(human, machine, cfg.seed)
    result = pretrain1_then_finetune(pre, tr, dev, cfg.train_config())
    _write_run(result, _out_dir(args, cfg))
    return 0


def cmd_pretrain2(args) -> int:
    cfg = _load_cfg(args)
    tr, dev = _corpora(cfg)
    docs = D.load_docs_jsonl(cfg.path(cfg.data.docs, "docs"))
    result = pretrain2_then_finetune(docs, tr, dev, cfg.train_config())
    _write_run(result, _out_dir(args, cfg))
    return 0


def _predict(checkpoints: list[str], args) -> int:
    loaded = [from_checkpoint(Checkpoint.load(p)) for p in checkpoints]
    vocab = loaded[0][1]
    for j, (_, v) in enumerate(loaded[1:], 1):
        if v != vocab:
            raise EnsembleError(f"member {j} ({checkpoints[j]}) has a different vocabulary")
    examples = tokenize_for(vocab, D.load_texts_jsonl(args.data))
    preds = predict_ensemble([m for m, _ in loaded], examples, args.strategy, args.strict, args.average)
    meta = {
        "strategy": args.strategy,
        "strict": args.strict,
        "average": args.average,
        "checkpoints": [str(p) for p in checkpoints],
        "data": str(args.data),
    }
    write_predictions(preds, args.out, meta)
    print(f"wrote {len(preds)} predictions to {args.out}")
    return 0


def cmd_predict(args) -> int:
    return _predict([args.checkpoint], args)


def cmd_ensemble(args) -> int:
    return _predict(list(args.checkpoints), args)


def cmd_eval(args) -> int:
    preds = read_predictions(args.predictions)
    gold = D.load_jsonl(args.gold, strict=args.strict, label_offset=args.label_offset)
    report = evaluate_mae(preds, gold)
    print(report.summary())
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            json.dump({"mae": report.mae, "count": report.count, "errors": report.errors}, f, sort_keys=True, indent=2)
            f.write("\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="mixbound", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def add_common(p, config=True, seed=True):
        if config:
            p.add_argument("--config", required=True)
        if seed:
            p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None)

    p = sub.add_parser("synth", help="generate a synthetic benchmark")
    add_common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("stats", help="corpus statistics")
    p.add_argument("data")
    p.add_argument("--strict", type=_on_off, default=True)
    p.add_argument("--label-offset", type=int, default=0)
    p.set_defaults(func=cmd_stats)

    for name, fn in (("train", cmd_train), ("pretrain1", cmd_pretrain1), ("pretrain2", cmd_pretrain2)):
        p = sub.add_parser(name)
        add_common(p)
        p.add_argument("--strategy", choices=STRATEGIES, default=None)
        p.add_argument("--strict", type=_on_off, default=None)
        p.set_defaults(func=fn)

    for name, fn in (("predict", cmd_predict), ("ensemble", cmd_ensemble)):
        p = sub.add_parser(name)
        if name == "predict":
            p.add_argument("checkpoint")
        else:
            p.add_argument("checkpoints", nargs="+")
        p.add_argument("--data", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--strategy", choices=STRATEGIES, default="map")
        p.add_argument("--strict", type=_on_off, default=True)
        p.add_argument("--average", choices=("logits", "probs"), default="logits")
        p.set_defaults(func=fn)

    p = sub.add_parser("eval", help="MAE of predictions against gold")
    p.add_argument("predictions")
    p.add_argument("gold")
    p.add_argument("--out", default=None)
    p.add_argument("--strict", type=_on_off, default=True)
    p.add_argument("--label-offset", type=int, default=0)
    p.set_defaults(func=cmd_eval)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        # overflow surfaces as a divergence error, not as warnings
        with np.errstate(over="ignore", invalid="ignore"):
            return args.func(args)
    except (ValueError, RuntimeError, OSError, KeyError, TypeError) as e:
        msg = str(e).replace("\n", " ")
        print(f"mixbound-error: {type(e).__name__}: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
