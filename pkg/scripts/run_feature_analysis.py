#!/usr/bin/env python3
"""Clean-vs-adversarial feature distribution comparison at desk scale.

Trains an undefended and an adversarially trained model on the synthetic
dataset, harvests channel vectors at every stage output, embeds them with
PCA + exact t-SNE, and prints the per-segment Jensen-Shannon divergence
between the clean and adversarial density grids. Roughly 30-40 minutes on
one CPU core.
"""

import argparse
import os
import sys

from lprobe.analysis import AnalysisConfig, feature_divergence
from lprobe.attacks import PREDICTION, AttackConfig
from lprobe.data import make_synthetic
from lprobe.models import build_mini_resnet
from lprobe.reports import save_coords, save_grids, write_divergence_summary
from lprobe.rng import derive_seed
from lprobe.training import (ADVERSARIAL, CONVENTIONAL, AdamConfig,
                             CosineSchedule, TrainConfig, train)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="runs/feature_analysis")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)

    train_ds = make_synthetic(10, 200, 32, seed=100, split="train")
    test_ds = make_synthetic(10, 40, 32, seed=200, split="test")
    attack = AttackConfig(epsilon=8 / 255, step_size=2 / 255, iterations=7,
                          random_start=True, target_mode=PREDICTION)
    eval_attack = AttackConfig(epsilon=8 / 255, step_size=2 / 255, iterations=20)

    models = {}
    for mode in (CONVENTIONAL, ADVERSARIAL):
        print(f"training {mode} model...")
        cfg = TrainConfig(mode=mode, optimizer=AdamConfig(0.001),
                          epochs=14 if mode == CONVENTIONAL else 16,
                          batch_size=128, weight_decay=1e-4,
                          schedule=CosineSchedule(), clean_mix_ratio=0.5,
                          attack=attack if mode == ADVERSARIAL else None,
                          seed=derive_seed(args.seed, mode))
        model = build_mini_resnet((3, 32, 32), 10, 2, 0.5,
                                  seed=derive_seed(args.seed, "build", mode))
        train(model, train_ds, cfg)
        models[mode] = model

    acfg = AnalysisConfig(seed=args.seed)
    os.makedirs(args.out, exist_ok=True)
    for mode, model in models.items():
        print(f"analyzing {mode} model...")
        results = feature_divergence(model, test_ds, eval_attack, acfg)
        for seg, result in results.items():
            save_coords(result, os.path.join(args.out, f"{mode}_coords_{seg}.tsv"))
            save_grids(result, os.path.join(args.out, f"{mode}_grids_{seg}.npz"))
            print(f"  {seg}: JS divergence {result.divergence:.4f}")
        write_divergence_summary(
            results, os.path.join(args.out, f"{mode}_divergence_summary.tsv"))
    print(f"wrote {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
