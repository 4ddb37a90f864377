"""Fit one fixed batch of desk images and report how fast the loss collapses."""
import argparse

from hmpnet.pipeline.data import Dataset
from hmpnet.pipeline.desk import desk_dataset, overfit


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--data", default="runs/convergence/data")
    ap.add_argument("--images", type=int, default=8)
    ap.add_argument("--steps", type=int, default=500)
    args = ap.parse_args()
    ds = Dataset(desk_dataset(args.data), "train")
    losses = overfit(ds, args.images, args.steps)
    for i in range(0, len(losses), 25):
        print(f"step {i:4d} loss {losses[i]:.4f}")
    print(f"final step {len(losses) - 1} loss {losses[-1]:.4f}")


if __name__ == "__main__":
    main()
