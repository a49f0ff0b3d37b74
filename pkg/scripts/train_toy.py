#!/usr/bin/env python3
"""Train the default toy model on the synthetic shape corpus.

Reproduces the standard run used by the acceptance tests (64 recipes,
2000 steps) unless told otherwise, then writes the checkpoint and the
loss curve next to it.

    python3 scripts/train_toy.py --out runs/toy.npz
"""

import argparse
import json
import time
from pathlib import Path

from stepflow.engine import ModelConfig, save_checkpoint, train
from stepflow.synthetic import make_synthetic_dataset


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/toy.npz", help="checkpoint path")
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--count", type=int, default=64, help="corpus size")
    ap.add_argument("--max-steps", type=int, default=5,
                    help="max recipe length in the corpus")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--lr", type=float, default=1e-3)
    ap.add_argument("--log-every", type=int, default=50)
    args = ap.parse_args()

    cfg = ModelConfig(seed=args.seed)
    dataset = make_synthetic_dataset(seed=args.seed, count=args.count,
                                     max_steps=args.max_steps)
    lengths = sorted({item.recipe.n_steps for item in dataset})
    print(f"corpus: {len(dataset)} recipes, step counts {lengths}")

    t0 = time.time()
    params, curve = train(dataset, cfg, steps=args.steps, lr=args.lr,
                          log_every=args.log_every)
    elapsed = time.time() - t0

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out, params, cfg)
    curve_path = out.with_suffix(".curve.json")
    curve_path.write_text(json.dumps(
        [{"step": s, "loss": l, "grad_norm": g} for s, l, g in curve],
        indent=2) + "\n")

    for s, l, g in curve[:: max(1, len(curve) // 12)]:
        print(f"  step {s:5d}  loss {l:.4f}  |grad| {g:.3f}")
    print(f"final loss {curve[-1][1]:.4f} after {args.steps} steps "
          f"({elapsed:.0f}s); wrote {out} and {curve_path}")


if __name__ == "__main__":
    main()
