#!/usr/bin/env python3
"""Desk-scale cut-off retraining experiment on the synthetic dataset.

Pretrains a small residual net conventionally and adversarially, then runs
the four cut-off settings (adversarial/conventional retraining, up to / after
the cut) for every segment boundary and writes one report row per run.

Expect roughly 1.5-2 hours on a single CPU core for the full sweep; pass
--quick for a coarse version (two boundaries) in about 20 minutes.
"""

import argparse
import os
import sys
import time

from lprobe.attacks import PREDICTION, AttackConfig, evaluate
from lprobe.data import make_synthetic
from lprobe.models import build_mini_resnet
from lprobe.protocol import AFTER, UPTO, run_cutoff
from lprobe.reports import write_report_document, write_report_table
from lprobe.rng import derive_seed
from lprobe.training import (ADVERSARIAL, CONVENTIONAL, AdamConfig,
                             CosineSchedule, TrainConfig, train)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="runs/cutoff_experiment")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--quick", action="store_true",
                        help="only m_1 and m_4 boundaries")
    args = parser.parse_args(argv)

    train_ds = make_synthetic(10, 200, 32, seed=100, split="train")
    test_ds = make_synthetic(10, 40, 32, seed=200, split="test")
    eval_cfg = AttackConfig(epsilon=8 / 255, step_size=2 / 255, iterations=20)
    attack = AttackConfig(epsilon=8 / 255, step_size=2 / 255, iterations=7,
                          random_start=True, target_mode=PREDICTION)
    conv_cfg = TrainConfig(mode=CONVENTIONAL, optimizer=AdamConfig(0.001), epochs=14,
                           batch_size=128, weight_decay=1e-4,
                           schedule=CosineSchedule(), seed=derive_seed(args.seed, "conv"))
    adv_cfg = TrainConfig(mode=ADVERSARIAL, optimizer=AdamConfig(0.001), epochs=16,
                          batch_size=128, weight_decay=1e-4, schedule=CosineSchedule(),
                          clean_mix_ratio=0.5, attack=attack,
                          seed=derive_seed(args.seed, "adv"))

    print("pretraining (conventional, then adversarial)...")
    conv_pre = build_mini_resnet((3, 32, 32), 10, 2, 0.5,
                                 seed=derive_seed(args.seed, "build-conv"))
    train(conv_pre, train_ds, conv_cfg)
    adv_pre = build_mini_resnet((3, 32, 32), 10, 2, 0.5,
                                seed=derive_seed(args.seed, "build-adv"))
    train(adv_pre, train_ds, adv_cfg)
    for name, model in (("conventional", conv_pre), ("adversarial", adv_pre)):
        rep = evaluate(model, test_ds, eval_cfg, seed=args.seed)
        print(f"  {name} pretrain: clean={rep.clean_acc:.3f} robust={rep.robust_acc:.3f}")

    boundaries = ["m_1", "m_4"] if args.quick else conv_pre.segmentation.names
    settings = [
        ("adv retrain", conv_pre, ADVERSARIAL, adv_cfg, CONVENTIONAL),
        ("conv retrain", adv_pre, CONVENTIONAL, conv_cfg, ADVERSARIAL),
    ]
    rows = []
    for label, pre, mode, cfg, pre_mode in settings:
        for direction in (UPTO, AFTER):
            for cutoff in boundaries:
                t0 = time.monotonic()
                report = run_cutoff(pre, cutoff, direction, mode, cfg, train_ds,
                                    test_ds, eval_cfg, pretrain_mode=pre_mode,
                                    eval_seed=args.seed)
                rows.append(report)
                print(f"  {label} {direction:>5} {cutoff}: "
                      f"clean={report.clean_acc:.3f} robust={report.robust_acc:.3f} "
                      f"({time.monotonic() - t0:.0f}s)")

    os.makedirs(args.out, exist_ok=True)
    write_report_table(rows, os.path.join(args.out, "cutoff_reports.tsv"))
    write_report_document(rows, os.path.join(args.out, "cutoff_reports.txt"))
    print(f"wrote {args.out}/cutoff_reports.tsv")
    return 0


if __name__ == "__main__":
    sys.exit(main())
