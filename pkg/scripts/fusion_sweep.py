#!/usr/bin/env python3
"""Sweep the two soft coherence channels and score the results.

Samples a handful of held-out synthetic recipes over a grid of alpha
(global-pass weight) and lambda (context fusion weight), scoring each
cell with the builtin embedding metrics against the ground-truth
renders. The builtin embedder is a random projection, so treat the
absolute numbers as wiring diagnostics, not perceptual quality.

    python3 scripts/fusion_sweep.py runs/toy.npz
"""

import argparse
import dataclasses

import numpy as np

from stepflow.engine import load_checkpoint, sample
from stepflow.metrics import Embedder, cross_step_consistency, goal_faithfulness
from stepflow.synthetic import make_synthetic_dataset


def score_cell(cfg, params, corpus, emb, seed):
    csc, goal = [], []
    for i, item in enumerate(corpus):
        res = sample(item.recipe, cfg, params, seed=seed + i)
        gen = [img.astype(np.float64) / 255.0 for img in res.images]
        ref = list(item.images)
        csc.append(cross_step_consistency(gen, ref, emb).csc_value)
        goal.append(goal_faithfulness(gen[-1], item.recipe.steps[-1], emb))
    return float(np.mean(csc)), float(np.mean(goal))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("checkpoint", help="trained .npz checkpoint")
    ap.add_argument("--count", type=int, default=6, help="held-out recipes")
    ap.add_argument("--seed", type=int, default=31337, help="corpus seed")
    ap.add_argument("--sampler-steps", type=int, default=8)
    ap.add_argument("--alphas", default="0.0,0.1,0.3")
    ap.add_argument("--lambdas", default="0.0,0.2")
    args = ap.parse_args()

    params, base_cfg = load_checkpoint(args.checkpoint)
    corpus = make_synthetic_dataset(seed=args.seed, count=args.count,
                                    max_steps=4)
    emb = Embedder()
    alphas = [float(x) for x in args.alphas.split(",")]
    lambdas = [float(x) for x in args.lambdas.split(",")]

    print(f"{'alpha':>6} {'lambda':>7} {'CSC':>8} {'goal':>8}")
    for lam in lambdas:
        for alpha in alphas:
            cfg = dataclasses.replace(base_cfg, alpha=alpha, lam=lam,
                                      sampler_steps=args.sampler_steps)
            csc, goal = score_cell(cfg, params, corpus, emb, 9000)
            print(f"{alpha:6.2f} {lam:7.2f} {csc:8.3f} {goal:8.2f}")


if __name__ == "__main__":
    main()
