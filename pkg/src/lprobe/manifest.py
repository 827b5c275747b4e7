"""Experiment manifests: JSON configuration, schema-validated before compute.

Unknown keys are rejected and every violation carries a path-qualified
message (e.g. "pretrain.optimizer.lr: expected number"). Parsed manifests
hand out typed configs for the training, attack and analysis modules.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

from .analysis import AnalysisConfig
from .attacks import PREDICTION, TRUE_LABEL, AttackConfig
from .training import (AdamConfig, ConstantSchedule, CosineSchedule,
                       SgdMomentumConfig, StepDecaySchedule, TrainConfig)


class ManifestError(ValueError):
    """Schema violation; message carries the offending path."""


_NUMBER = (int, float)


def _require(cond: bool, path: str, message: str):
    if not cond:
        raise ManifestError(f"{path}: {message}")


def _check_keys(obj: dict, path: str, required: tuple, optional: tuple = ()):
    _require(isinstance(obj, dict), path, "expected an object")
    for key in required:
        _require(key in obj, f"{path}.{key}", "required field missing")
    unknown = set(obj) - set(required) - set(optional)
    _require(not unknown, path, f"unknown key(s): {sorted(unknown)}")


def _number(obj, path, lo=None, hi=None) -> float:
    _require(isinstance(obj, _NUMBER) and not isinstance(obj, bool), path, "expected number")
    v = float(obj)
    _require(math.isfinite(v), path, "expected a finite number")
    if lo is not None:
        _require(v >= lo, path, f"must be >= {lo}")
    if hi is not None:
        _require(v <= hi, path, f"must be <= {hi}")
    return v


def _integer(obj, path, lo=None) -> int:
    _require(isinstance(obj, int) and not isinstance(obj, bool), path, "expected integer")
    if lo is not None:
        _require(obj >= lo, path, f"must be >= {lo}")
    return obj


def _string(obj, path, choices=None) -> str:
    _require(isinstance(obj, str), path, "expected string")
    if choices is not None:
        _require(obj in choices, path, f"must be one of {sorted(choices)}")
    return obj


def _boolean(obj, path) -> bool:
    _require(isinstance(obj, bool), path, "expected boolean")
    return obj


def parse_attack(obj: dict, path: str, target_mode: str) -> AttackConfig:
    _check_keys(obj, path, required=("epsilon", "step_size", "iterations"),
                optional=("random_start", "restarts"))
    cfg = AttackConfig(
        epsilon=_number(obj["epsilon"], f"{path}.epsilon", lo=0.0, hi=1.0),
        step_size=_number(obj["step_size"], f"{path}.step_size", lo=0.0),
        iterations=_integer(obj["iterations"], f"{path}.iterations", lo=1),
        random_start=_boolean(obj.get("random_start", True), f"{path}.random_start"),
        target_mode=target_mode,
        restarts=_integer(obj.get("restarts", 1), f"{path}.restarts", lo=1),
    )
    try:
        cfg.validate()
    except ValueError as e:
        raise ManifestError(f"{path}: {e}") from e
    return cfg


def _parse_optimizer(obj: dict, path: str):
    _check_keys(obj, path, required=("kind",), optional=("lr", "momentum"))
    kind = _string(obj["kind"], f"{path}.kind", choices={"adam", "sgd_momentum"})
    if kind == "adam":
        return AdamConfig(lr=_number(obj.get("lr", 0.001), f"{path}.lr", lo=0.0))
    _require("lr" in obj and "momentum" in obj, path, "sgd_momentum requires lr and momentum")
    return SgdMomentumConfig(lr=_number(obj["lr"], f"{path}.lr", lo=0.0),
                             momentum=_number(obj["momentum"], f"{path}.momentum", lo=0.0, hi=1.0))


def _parse_schedule(obj: dict, path: str):
    _check_keys(obj, path, required=("kind",), optional=("milestones", "factor"))
    kind = _string(obj["kind"], f"{path}.kind", choices={"cosine", "step_decay", "constant"})
    if kind == "cosine":
        return CosineSchedule()
    if kind == "constant":
        return ConstantSchedule()
    _require("milestones" in obj, f"{path}.milestones", "required field missing")
    milestones = obj["milestones"]
    _require(isinstance(milestones, list) and all(isinstance(m, int) for m in milestones),
             f"{path}.milestones", "expected list of integers")
    return StepDecaySchedule(milestones=tuple(milestones),
                             factor=_number(obj.get("factor", 0.1), f"{path}.factor", lo=0.0))


def parse_train(obj: dict, path: str, seed: int) -> TrainConfig:
    _check_keys(
        obj, path,
        required=("mode", "optimizer", "epochs"),
        optional=("batch_size", "weight_decay", "schedule", "clean_mix_ratio",
                  "attack", "augment", "joint_batch_norm", "decoupled_weight_decay"),
    )
    mode = _string(obj["mode"], f"{path}.mode",
                   choices={"conventional", "adversarial", "fast_adversarial"})
    attack = None
    if obj.get("attack") is not None:
        attack = parse_attack(obj["attack"], f"{path}.attack", target_mode=PREDICTION)
    cfg = TrainConfig(
        mode=mode,
        optimizer=_parse_optimizer(obj["optimizer"], f"{path}.optimizer"),
        epochs=_integer(obj["epochs"], f"{path}.epochs", lo=0),
        batch_size=_integer(obj.get("batch_size", 128), f"{path}.batch_size", lo=2),
        weight_decay=_number(obj.get("weight_decay", 0.0), f"{path}.weight_decay", lo=0.0),
        schedule=_parse_schedule(obj.get("schedule", {"kind": "cosine"}), f"{path}.schedule"),
        clean_mix_ratio=_number(obj.get("clean_mix_ratio", 0.5),
                                f"{path}.clean_mix_ratio", lo=0.0, hi=1.0),
        attack=attack,
        seed=seed,
        augment=_boolean(obj.get("augment", False), f"{path}.augment"),
        joint_batch_norm=_boolean(obj.get("joint_batch_norm", True), f"{path}.joint_batch_norm"),
        decoupled_weight_decay=_boolean(obj.get("decoupled_weight_decay", False),
                                        f"{path}.decoupled_weight_decay"),
    )
    try:
        cfg.validate()
    except ValueError as e:
        raise ManifestError(f"{path}: {e}") from e
    return cfg


def parse_analysis(obj: dict, path: str, seed: int) -> AnalysisConfig:
    _check_keys(obj, path, required=(),
                optional=("segments", "positions_per_image", "n_images", "pca_dims",
                          "perplexity", "tsne_iterations", "kde_resolution",
                          "embed_cap_per_group", "standardize"))
    segments = obj.get("segments", ["m_1", "m_2", "m_3", "m_4"])
    _require(isinstance(segments, list) and all(isinstance(s, str) for s in segments),
             f"{path}.segments", "expected list of segment names")
    return AnalysisConfig(
        segments=tuple(segments),
        positions_per_image=_integer(obj.get("positions_per_image", 20),
                                     f"{path}.positions_per_image", lo=1),
        n_images=_integer(obj.get("n_images", 200), f"{path}.n_images", lo=1),
        pca_dims=_integer(obj.get("pca_dims", 50), f"{path}.pca_dims", lo=2),
        perplexity=_number(obj.get("perplexity", 30.0), f"{path}.perplexity", lo=2.0),
        tsne_iterations=_integer(obj.get("tsne_iterations", 1000),
                                 f"{path}.tsne_iterations", lo=1),
        kde_resolution=_integer(obj.get("kde_resolution", 200),
                                f"{path}.kde_resolution", lo=10),
        embed_cap_per_group=_integer(obj.get("embed_cap_per_group", 700),
                                     f"{path}.embed_cap_per_group", lo=10),
        standardize=_boolean(obj.get("standardize", True), f"{path}.standardize"),
        seed=seed,
    )


@dataclass
class ExperimentManifest:
    dataset: dict
    model: dict
    output_dir: str
    root_seed: int
    pretrain: dict | None = None
    retrain: dict | None = None
    attack_eval: dict | None = None
    analysis: dict | None = None
    checkpoint: str | None = None

    @staticmethod
    def from_dict(obj: dict) -> "ExperimentManifest":
        _check_keys(obj, "manifest",
                    required=("dataset", "model", "output_dir", "root_seed"),
                    optional=("pretrain", "retrain", "attack_eval", "analysis", "checkpoint"))
        ds = obj["dataset"]
        _check_keys(ds, "dataset", required=("kind",),
                    optional=("classes", "train_per_class", "test_per_class", "image_size",
                              "seed_train", "seed_test", "path", "train_subset", "test_subset",
                              "pad_to", "noise", "fragile_amplitude"))
        _string(ds["kind"], "dataset.kind", choices={"synthetic", "cifar10", "mnist"})
        if ds["kind"] in ("cifar10", "mnist"):
            _require("path" in ds, "dataset.path", "required field missing")

        mdl = obj["model"]
        _check_keys(mdl, "model", required=("arch", "classes"),
                    optional=("width_multiplier", "blocks_per_stage", "input"))
        _string(mdl["arch"], "model.arch", choices={"mini_vgg", "mini_resnet"})
        _integer(mdl["classes"], "model.classes", lo=2)

        manifest = ExperimentManifest(
            dataset=ds,
            model=mdl,
            output_dir=_string(obj["output_dir"], "output_dir"),
            root_seed=_integer(obj["root_seed"], "root_seed", lo=0),
            pretrain=obj.get("pretrain"),
            retrain=obj.get("retrain"),
            attack_eval=obj.get("attack_eval"),
            analysis=obj.get("analysis"),
            checkpoint=obj.get("checkpoint"),
        )
        # Validate optional sections eagerly so errors surface before compute.
        if manifest.pretrain is not None:
            parse_train(manifest.pretrain, "pretrain", seed=0)
        if manifest.retrain is not None:
            parse_train(manifest.retrain, "retrain", seed=0)
        if manifest.attack_eval is not None:
            parse_attack(manifest.attack_eval, "attack_eval", target_mode=TRUE_LABEL)
        if manifest.analysis is not None:
            parse_analysis(manifest.analysis, "analysis", seed=0)
        if manifest.checkpoint is not None:
            _string(manifest.checkpoint, "checkpoint")
        return manifest

    @staticmethod
    def load(path: str) -> "ExperimentManifest":
        if not os.path.exists(path):
            raise ManifestError(f"manifest: file not found: {path}")
        with open(path) as f:
            try:
                obj = json.load(f)
            except json.JSONDecodeError as e:
                raise ManifestError(f"manifest: invalid JSON: {e}") from e
        return ExperimentManifest.from_dict(obj)
