"""Train the default model on the synthetic benchmark and report dev MAE.

    python3 scripts/run_benchmark.py [--seed 0] [--out runs/benchmark_script]

Writes model.mtbd, history.csv and result.json to --out.
"""

import argparse
import json
import time
from pathlib import Path

from mixbound import data as D
from mixbound.train import TrainConfig, train


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--data-seed", type=int, default=0)
    ap.add_argument("--overlap", type=float, default=0.5)
    ap.add_argument("--epochs", type=int, default=10)
    ap.add_argument("--out", default="runs/benchmark_script")
    args = ap.parse_args()

    synth = D.SynthConfig(overlap=args.overlap, seed=args.data_seed)
    tr = D.synth_generate(synth, 2000, stream=1, prefix="train-")
    dev = D.synth_generate(synth, 500, stream=2, prefix="dev-")
    t0 = time.perf_counter()
    res = train(tr, dev, TrainConfig(seed=args.seed, epochs=args.epochs))
    secs = time.perf_counter() - t0

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    res.checkpoint.save(out / "model.mtbd")
    (out / "history.csv").write_text(res.history_csv())
    best = min(h["dev_mae"] for h in res.history)
    summary = {"best_dev_mae": best, "best_epoch": res.best_epoch, "seconds": round(secs, 1), "seed": args.seed}
    (out / "result.json").write_text(json.dumps(summary, indent=2) + "\n")
    for h in res.history:
        print(f"epoch {h['epoch']:2d}  loss {h['train_loss']:.4f}  dev MAE {h['dev_mae']:.3f}")
    print(f"best dev MAE {best:.3f} at epoch {res.best_epoch} in {secs:.0f}s")


if __name__ == "__main__":
    main()
