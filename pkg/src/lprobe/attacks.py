"""L-infinity attacks (FGSM, PGD-k) and robust-accuracy evaluation.

Attack gradients are computed in eval mode (batchnorm running stats) with
parameter gradients disabled, so a backward pass only propagates to the
input. PGD keeps the best-loss iterate per sample, across iterations (the
start point excluded) and across restarts: this makes attack strength
monotone in the iteration count and leaves PGD-1 without random start and
step_size == epsilon bit-identical to FGSM.

Pixel domain is [0, 1]; every output satisfies ||x_adv - x||_inf <= epsilon.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .ops import softmax_cross_entropy
from .rng import derive_rng
from .tensor import Tape, Tensor, no_grad_params

TRUE_LABEL = "true_label"
PREDICTION = "prediction"


@dataclass
class AttackConfig:
    """L-infinity attack recipe in normalized pixel units."""

    epsilon: float
    step_size: float
    iterations: int
    random_start: bool = True
    target_mode: str = TRUE_LABEL
    restarts: int = 1

    def validate(self) -> None:
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError(f"epsilon must lie in [0, 1], got {self.epsilon}")
        if self.iterations < 1:
            raise ValueError(f"iterations must be positive, got {self.iterations}")
        if self.step_size <= 0.0:
            raise ValueError(f"step_size must be positive, got {self.step_size}")
        if self.restarts < 1:
            raise ValueError(f"restarts must be positive, got {self.restarts}")
        if self.target_mode not in (TRUE_LABEL, PREDICTION):
            raise ValueError(f"unknown target_mode {self.target_mode!r}")


@dataclass
class RobustnessReport:
    clean_acc: float
    robust_acc: float
    per_class_acc: np.ndarray  # robust accuracy per class
    per_class_clean: np.ndarray = field(default=None)
    n_samples: int = 0


def _attack_targets(model, x: np.ndarray, y: np.ndarray, target_mode: str) -> np.ndarray:
    if target_mode == TRUE_LABEL:
        return np.asarray(y)
    if target_mode == PREDICTION:
        # Attack the model's own prediction on the clean input (label-leaking
        # avoidance during training); computed once, before any perturbation.
        return model.predict(x)
    raise ValueError(f"unknown target_mode {target_mode!r}")


def _loss_and_input_grad(model, x_data: np.ndarray, targets: np.ndarray):
    params = [t for _, t in model.parameters()]
    with no_grad_params(params):
        x_t = Tensor(x_data, requires_grad=True)
        with Tape() as tape:
            logits = model.forward(x_t, train=False)
            per_sample = _per_sample_loss(logits.data, targets)
            loss = softmax_cross_entropy(logits, targets)
        tape.backward(loss)
    return per_sample, x_t.grad


def _per_sample_loss(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1))
    return log_norm - z[np.arange(len(labels)), labels]


def fgsm(model, x: np.ndarray, y: np.ndarray, epsilon: float,
         target_mode: str = TRUE_LABEL) -> np.ndarray:
    """Single signed-gradient step of size epsilon, clamped to [0, 1]."""
    if epsilon < 0:
        raise ValueError(f"epsilon must be non-negative, got {epsilon}")
    x = np.asarray(x, dtype=np.float64)
    targets = _attack_targets(model, x, y, target_mode)
    _, grad = _loss_and_input_grad(model, x, targets)
    return np.clip(x + epsilon * np.sign(grad), 0.0, 1.0)


def pgd(model, x: np.ndarray, y: np.ndarray, cfg: AttackConfig, seed: int = 0) -> np.ndarray:
    """Iterated signed-gradient ascent with per-step L-inf projection.

    Deterministic for a fixed seed; the random start for restart r draws from
    the (seed, "pgd", r) stream.
    """
    cfg.validate()
    x = np.asarray(x, dtype=np.float64)
    targets = _attack_targets(model, x, y, cfg.target_mode)
    lo = np.maximum(x - cfg.epsilon, 0.0)
    hi = np.minimum(x + cfg.epsilon, 1.0)

    best = None
    best_loss = np.full(x.shape[0], -np.inf)

    def consider(candidate, losses):
        nonlocal best, best_loss
        if best is None:
            best = candidate.copy()
            best_loss = losses.copy()
            return
        improved = losses > best_loss
        if improved.any():
            best[improved] = candidate[improved]
            best_loss[improved] = losses[improved]

    for restart in range(cfg.restarts):
        if cfg.random_start:
            rng = derive_rng(seed, "pgd", restart)
            x_adv = np.clip(x + rng.uniform(-cfg.epsilon, cfg.epsilon, x.shape), lo, hi)
        else:
            x_adv = x.copy()
        for it in range(cfg.iterations):
            # The gradient pass also yields the current iterate's loss, which
            # credits the previous step's candidate; the start point is never
            # a candidate.
            losses, grad = _loss_and_input_grad(model, x_adv, targets)
            if it > 0:
                consider(x_adv, losses)
            x_adv = np.clip(x_adv + cfg.step_size * np.sign(grad), lo, hi)
        final_losses = _per_sample_loss(model.forward(Tensor(x_adv), train=False).data, targets)
        consider(x_adv, final_losses)
    return best


def evaluate(model, dataset, cfg: AttackConfig | None, batch_size: int = 128,
             seed: int = 0) -> RobustnessReport:
    """Clean and attacked accuracy over a dataset.

    Evaluation always attacks the true label (target_mode is forced), so
    robust accuracy cannot inflate through the label-leaking effect.
    """
    if len(dataset.labels) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    if cfg is not None:
        cfg = replace(cfg, target_mode=TRUE_LABEL)
        cfg.validate()

    classes = int(dataset.labels.max()) + 1
    clean_ok = np.zeros(len(dataset.labels), dtype=bool)
    robust_ok = np.zeros(len(dataset.labels), dtype=bool)
    for start in range(0, len(dataset.labels), batch_size):
        sl = slice(start, start + batch_size)
        x, y = dataset.images[sl], dataset.labels[sl]
        clean_ok[sl] = model.predict(x) == y
        if cfg is None:
            robust_ok[sl] = clean_ok[sl]
        else:
            x_adv = pgd(model, x, y, cfg, seed=seed + start)
            robust_ok[sl] = model.predict(x_adv) == y

    per_class_robust = np.array([robust_ok[dataset.labels == c].mean() if (dataset.labels == c).any() else 0.0
                                 for c in range(classes)])
    per_class_clean = np.array([clean_ok[dataset.labels == c].mean() if (dataset.labels == c).any() else 0.0
                                for c in range(classes)])
    return RobustnessReport(
        clean_acc=float(clean_ok.mean()),
        robust_acc=float(robust_ok.mean()),
        per_class_acc=per_class_robust,
        per_class_clean=per_class_clean,
        n_samples=len(dataset.labels),
    )
