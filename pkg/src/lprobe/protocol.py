"""Experiment drivers: cut-off retraining, subset sweeps, reinit robustness.

A cut-off splits the segment list at a boundary: UpTo retrains m_0 through
the cut-off inclusive, After retrains everything strictly past it, so the two
trainable sets partition the segments. Retrained segments are always
reinitialized first (fresh draw, never warm-started); everything else stays
frozen and is expected to hash-match the pretrained checkpoint afterwards.

The degenerate endpoints follow the figure conventions: UpTo m_fc is full
retraining, After m_fc is the untouched pretrained model.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .attacks import AttackConfig, evaluate
from .models import (ModelGraph, freeze_except, freeze_except_layers,
                     reinit_layers, reinit_segments)
from .rng import derive_seed
from .training import TrainConfig, train

UPTO = "upto"
AFTER = "after"


@dataclass
class RetrainPlan:
    pretrained_checkpoint_id: str
    pretrain_mode: str
    retrain_segments: tuple
    retrain_mode: str
    train_cfg: TrainConfig


@dataclass
class ExperimentReport:
    plan: str
    pretrain_mode: str
    retrain_mode: str
    trainable_segments: dict
    clean_acc: float
    robust_acc: float
    eval_epsilon: float
    eval_iterations: int
    seed: int
    wall_time: float
    per_class_robust: np.ndarray = field(default=None, repr=False)
    segment_hashes: dict = field(default=None, repr=False)

    def __post_init__(self):
        if not (0.0 <= self.clean_acc <= 1.0 and 0.0 <= self.robust_acc <= 1.0):
            raise ValueError("accuracies must lie in [0, 1]")


def cutoff_segments(segment_names, cutoff: str, direction: str) -> tuple:
    """Trainable segment set for a cut-off; UpTo inclusive, After exclusive."""
    names = list(segment_names)
    if cutoff not in names:
        raise KeyError(f"unknown segment {cutoff!r}; valid segments: {names}")
    idx = names.index(cutoff)
    if direction == UPTO:
        return tuple(names[: idx + 1])
    if direction == AFTER:
        return tuple(names[idx + 1 :])
    raise ValueError(f"direction must be '{UPTO}' or '{AFTER}', got {direction!r}")


def run_plan(pretrained: ModelGraph, segments, retrain_mode: str, train_cfg: TrainConfig,
             train_ds, test_ds, eval_cfg: AttackConfig, plan_name: str,
             pretrain_mode: str = "", eval_seed: int = 0) -> ExperimentReport:
    """Reinitialize + retrain the given segments, freeze the rest, evaluate.

    An empty segment set is a pure baseline evaluation of the pretrained
    model. Every plan derives its reinit stream from (train seed, "reinit"),
    so identical plans reproduce exactly and the all-segments subset equals
    full retraining.
    """
    segments = tuple(segments)
    cfg = replace(train_cfg, mode=retrain_mode)
    start = time.perf_counter()
    if segments:
        model = reinit_segments(pretrained, segments, seed=derive_seed(cfg.seed, "reinit"))
        mask = freeze_except(model, segments)
        train(model, train_ds, cfg, mask)
    else:
        model = pretrained.copy()
    report = evaluate(model, test_ds, eval_cfg, seed=eval_seed)
    names = pretrained.segmentation.names
    return ExperimentReport(
        plan=plan_name,
        pretrain_mode=pretrain_mode,
        retrain_mode=retrain_mode if segments else "none",
        trainable_segments={name: name in segments for name in names},
        clean_acc=report.clean_acc,
        robust_acc=report.robust_acc,
        eval_epsilon=eval_cfg.epsilon if eval_cfg else 0.0,
        eval_iterations=eval_cfg.iterations if eval_cfg else 0,
        seed=cfg.seed,
        wall_time=time.perf_counter() - start,
        per_class_robust=report.per_class_acc,
        segment_hashes={name: model.segment_state_hash(name) for name in names},
    )


def run_cutoff(pretrained: ModelGraph, cutoff: str, direction: str, retrain_mode: str,
               train_cfg: TrainConfig, train_ds, test_ds, eval_cfg: AttackConfig,
               pretrain_mode: str = "", eval_seed: int = 0) -> ExperimentReport:
    segments = cutoff_segments(pretrained.segmentation.names, cutoff, direction)
    return run_plan(
        pretrained, segments, retrain_mode, train_cfg, train_ds, test_ds, eval_cfg,
        plan_name=f"cutoff:{direction}:{cutoff}:{retrain_mode}",
        pretrain_mode=pretrain_mode, eval_seed=eval_seed,
    )


def run_combination_sweep(pretrained: ModelGraph, retrain_mode: str, train_cfg: TrainConfig,
                          train_ds, test_ds, eval_cfg: AttackConfig,
                          pretrain_mode: str = "", eval_seed: int = 0,
                          progress=None) -> list:
    """One retrain-and-evaluate per non-empty segment subset.

    Subsets enumerate in binary counting order (bit i selects segment i); the
    segment count is capped at 8 to bound the 2^n budget.
    """
    names = pretrained.segmentation.names
    n = len(names)
    if n > 8:
        raise ValueError(
            f"combination sweep over {n} segments would need {2 ** n - 1} runs; "
            f"the budget guard allows at most 8 segments (255 runs)"
        )
    reports = []
    for code in range(1, 2 ** n):
        segments = tuple(names[i] for i in range(n) if code >> i & 1)
        report = run_plan(
            pretrained, segments, retrain_mode, train_cfg, train_ds, test_ds, eval_cfg,
            plan_name=f"subset:{'+'.join(segments)}:{retrain_mode}",
            pretrain_mode=pretrain_mode, eval_seed=eval_seed,
        )
        reports.append(report)
        if progress is not None:
            progress(code, 2 ** n - 1, report)
    return reports


def aggregate_median(reports, segment: str) -> dict:
    """Median accuracies over subsets containing vs excluding a segment."""
    with_seg = [r for r in reports if r.trainable_segments.get(segment, False)]
    without = [r for r in reports if not r.trainable_segments.get(segment, False)]
    if not with_seg or not without:
        raise ValueError(
            f"cannot aggregate {segment!r}: {len(with_seg)} reports with, "
            f"{len(without)} without"
        )
    return {
        "segment": segment,
        "clean_with": float(np.median([r.clean_acc for r in with_seg])),
        "clean_without": float(np.median([r.clean_acc for r in without])),
        "robust_with": float(np.median([r.robust_acc for r in with_seg])),
        "robust_without": float(np.median([r.robust_acc for r in without])),
        "n_with": len(with_seg),
        "n_without": len(without),
    }


def layer_cutoff_paths(model: ModelGraph, layer_index: int, direction: str) -> list:
    """Parameterized layer paths trainable under a layer-granularity cut-off."""
    flat = model.flat_layers()
    if not 0 <= layer_index < len(flat):
        raise IndexError(f"layer index {layer_index} outside [0, {len(flat)})")
    path, layer = flat[layer_index]
    if not layer.params():
        raise ValueError(f"layer {layer_index} ({path}) has no parameters")
    if direction == UPTO:
        chosen = flat[: layer_index + 1]
    elif direction == AFTER:
        chosen = flat[layer_index + 1 :]
    else:
        raise ValueError(f"direction must be '{UPTO}' or '{AFTER}', got {direction!r}")
    return [p for p, l in chosen if l.params()]


def run_layer_cutoff(pretrained: ModelGraph, layer_index: int, direction: str,
                     retrain_mode: str, train_cfg: TrainConfig, train_ds, test_ds,
                     eval_cfg: AttackConfig, pretrain_mode: str = "",
                     eval_seed: int = 0) -> ExperimentReport:
    """Cut-off semantics at individual parameterized-layer granularity."""
    paths = layer_cutoff_paths(pretrained, layer_index, direction)
    cfg = replace(train_cfg, mode=retrain_mode)
    start = time.perf_counter()
    if paths:
        model = reinit_layers(pretrained, paths, seed=derive_seed(cfg.seed, "reinit"))
        mask = freeze_except_layers(model, paths)
        train(model, train_ds, cfg, mask)
    else:
        model = pretrained.copy()
    report = evaluate(model, test_ds, eval_cfg, seed=eval_seed)
    names = pretrained.segmentation.names
    trainable = {name: False for name in names}
    for p in paths:
        trainable[pretrained.segment_of(p)] = True
    return ExperimentReport(
        plan=f"layer_cutoff:{direction}:{layer_index}:{retrain_mode}",
        pretrain_mode=pretrain_mode,
        retrain_mode=retrain_mode if paths else "none",
        trainable_segments=trainable,
        clean_acc=report.clean_acc,
        robust_acc=report.robust_acc,
        eval_epsilon=eval_cfg.epsilon if eval_cfg else 0.0,
        eval_iterations=eval_cfg.iterations if eval_cfg else 0,
        seed=cfg.seed,
        wall_time=time.perf_counter() - start,
        per_class_robust=report.per_class_acc,
        segment_hashes={name: model.segment_state_hash(name) for name in names},
    )


def reinit_robustness_sweep(model: ModelGraph, eval_cfg: AttackConfig, test_ds,
                            seed: int = 0, eval_seed: int = 0) -> list:
    """Per-layer accuracy after reinitializing that single layer, no retraining.

    The first entry, "none", is the unmodified baseline. Each probe works on
    a copy, so the input model is untouched.
    """
    baseline = evaluate(model, test_ds, eval_cfg, seed=eval_seed)
    entries = [{"layer": "none", "clean_acc": baseline.clean_acc,
                "robust_acc": baseline.robust_acc}]
    for path, _ in model.param_layers():
        probe = reinit_layers(model, [path], seed=derive_seed(seed, "reinit", path))
        rep = evaluate(probe, test_ds, eval_cfg, seed=eval_seed)
        entries.append({"layer": path, "clean_acc": rep.clean_acc,
                        "robust_acc": rep.robust_acc})
    return entries
