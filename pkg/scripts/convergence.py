"""Desk-scale convergence run: 300/60 synthetic images at 160 px, toy model, 60 epochs."""
import argparse
import json

from hmpnet.pipeline.desk import run_convergence


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--work", default="runs/convergence")
    ap.add_argument("--epochs", type=int, default=60)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--lr0", type=float, default=None)
    ap.add_argument("--warmup", type=int, default=None)
    args = ap.parse_args()
    changes = {"epochs": args.epochs}
    if args.lr0 is not None:
        changes["lr0"] = args.lr0
    if args.warmup is not None:
        changes["warmup_epochs"] = args.warmup
    summary = run_convergence(args.work, seed=args.seed, verbose=True, **changes)
    print(json.dumps({k: summary[k] for k in ("best_map50", "minutes")}))


if __name__ == "__main__":
    main()
