"""Loss x head x pretraining sweep on a reduced synthetic benchmark.

    python3 scripts/ablation_sweep.py --n-train 400 --epochs 4 --out runs/ablation.csv

Each cell trains from scratch with the same data and seed; rows are appended
to a CSV as they finish so a long sweep can be inspected midway.
"""

import argparse
import csv
import itertools
import time
from pathlib import Path

from mixbound import data as D
from mixbound import train as TR
from mixbound.losses import VARIANTS, LossConfig
from mixbound.models import HEADS

SCHEMES = ("none", "pretrain1", "pretrain2")


def run_cell(scheme, head, loss, corpora, args):
    tr, dev, docs = corpora
    cfg = TR.TrainConfig(
        seed=args.seed, epochs=args.epochs, head=head, loss=LossConfig(loss),
        pretrain_epochs=args.pretrain_epochs, lstm_dim=args.lstm_dim,
    )
    if scheme == "pretrain1":
        return TR.pretrain1_then_finetune(TR.pretrain1_corpus_from_docs(docs, args.seed), tr, dev, cfg)
    if scheme == "pretrain2":
        return TR.pretrain2_then_finetune(docs, tr, dev, cfg)
    return TR.train(tr, dev, cfg)


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--n-train", type=int, default=400)
    ap.add_argument("--n-dev", type=int, default=100)
    ap.add_argument("--n-docs", type=int, default=200)
    ap.add_argument("--epochs", type=int, default=4)
    ap.add_argument("--pretrain-epochs", type=int, default=2)
    ap.add_argument("--lstm-dim", type=int, default=32)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--losses", nargs="+", default=list(VARIANTS))
    ap.add_argument("--heads", nargs="+", default=list(HEADS))
    ap.add_argument("--schemes", nargs="+", default=list(SCHEMES))
    ap.add_argument("--out", default="runs/ablation.csv")
    args = ap.parse_args()

    synth = D.SynthConfig(seed=args.seed)
    corpora = (
        D.synth_generate(synth, args.n_train, stream=1),
        D.synth_generate(synth, args.n_dev, stream=2),
        D.synth_documents(synth, args.n_docs),
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["scheme", "head", "loss", "best_dev_mae", "best_epoch", "seconds"])
        for scheme, head, loss in itertools.product(args.schemes, args.heads, args.losses):
            if head == "crf" and loss != args.losses[0]:
                continue  # crf trains on its own likelihood
            t0 = time.perf_counter()
            res = run_cell(scheme, head, loss, corpora, args)
            best = min(h["dev_mae"] for h in res.history if h["dev_mae"] is not None)
            row = [scheme, head, "nll" if head == "crf" else loss, best, res.best_epoch, round(time.perf_counter() - t0, 1)]
            w.writerow(row)
            f.flush()
            print(*row, sep="\t")


if __name__ == "__main__":
    main()
