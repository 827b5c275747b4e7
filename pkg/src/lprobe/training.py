"""Training loops: conventional, adversarial (PGD), fast-adversarial, mixed batches.

Adversarial batches regenerate their perturbed portion fresh from the current
weights every step, targeting the model's own prediction (label-leaking
avoidance); evaluation-style attacks are never used here. Frozen parameters
are dropped from both the optimizer and the backward pass, so freezing late
segments also skips gradient work for everything upstream of them.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, is_dataclass, asdict

import numpy as np

from .attacks import PREDICTION, AttackConfig, pgd
from .models import FreezeMask, ModelGraph
from .ops import softmax_cross_entropy
from .rng import derive_rng, derive_seed
from .tensor import Tape, Tensor

CONVENTIONAL = "conventional"
ADVERSARIAL = "adversarial"
FAST_ADVERSARIAL = "fast_adversarial"


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite; carries epoch, batch and learning rate."""

    def __init__(self, epoch: int, batch: int, lr: float):
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch}, lr {lr:g}")
        self.epoch, self.batch, self.lr = epoch, batch, lr


@dataclass
class AdamConfig:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class SgdMomentumConfig:
    lr: float
    momentum: float


@dataclass
class CosineSchedule:
    pass


@dataclass
class StepDecaySchedule:
    milestones: tuple
    factor: float = 0.1


@dataclass
class ConstantSchedule:
    pass


def schedule_lr(schedule, epoch: int, total_epochs: int, base_lr: float) -> float:
    """Learning rate at a given epoch under the schedule's closed form."""
    if not 0 <= epoch < total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {total_epochs})")
    if isinstance(schedule, CosineSchedule):
        return base_lr * 0.5 * (1.0 + math.cos(math.pi * epoch / total_epochs))
    if isinstance(schedule, StepDecaySchedule):
        passed = sum(1 for m in schedule.milestones if epoch >= m)
        return base_lr * schedule.factor ** passed
    if isinstance(schedule, ConstantSchedule):
        return base_lr
    raise TypeError(f"unknown schedule {schedule!r}")


@dataclass
class TrainConfig:
    mode: str
    optimizer: AdamConfig | SgdMomentumConfig
    epochs: int
    batch_size: int = 128
    weight_decay: float = 0.0
    schedule: object = field(default_factory=CosineSchedule)
    clean_mix_ratio: float = 0.5
    attack: AttackConfig | None = None
    seed: int = 0
    augment: bool = False
    # Mixed batches are normalized jointly by default; False runs the clean
    # and adversarial portions through separate forwards (separate batch
    # statistics), with the loss weighted by portion size.
    joint_batch_norm: bool = True
    # Coupled decay adds weight_decay * param to the gradient (classical
    # framework default); decoupled applies it directly to the parameter.
    decoupled_weight_decay: bool = False

    def validate(self) -> None:
        if self.mode not in (CONVENTIONAL, ADVERSARIAL, FAST_ADVERSARIAL):
            raise ValueError(f"unknown training mode {self.mode!r}")
        if self.epochs < 0 or self.batch_size < 2:
            raise ValueError("epochs must be >= 0 and batch_size >= 2")
        if not 0.0 <= self.clean_mix_ratio <= 1.0:
            raise ValueError(f"clean_mix_ratio must lie in [0,1], got {self.clean_mix_ratio}")
        if self.mode in (ADVERSARIAL, FAST_ADVERSARIAL):
            if self.attack is None:
                raise ValueError(f"{self.mode} training requires an attack config")
            self.attack.validate()
        if self.mode == FAST_ADVERSARIAL:
            if self.attack.iterations != 1 or not self.attack.random_start:
                raise ValueError(
                    "fast_adversarial requires attack.iterations == 1 and random_start"
                )

    def digest(self) -> str:
        def canon(obj):
            if is_dataclass(obj):
                return (type(obj).__name__, tuple(sorted(asdict(obj).items())))
            return obj

        text = repr((canon(self.optimizer), canon(self.schedule),
                     canon(self.attack) if self.attack else None,
                     self.mode, self.epochs, self.batch_size, self.weight_decay,
                     self.clean_mix_ratio, self.seed, self.augment,
                     self.joint_batch_norm, self.decoupled_weight_decay))
        return hashlib.sha256(text.encode()).hexdigest()[:16]


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    clean_acc: float
    lr: float
    robust_acc: float | None = None


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0

    @staticmethod
    def for_params(params) -> "AdamState":
        return AdamState(m=[np.zeros_like(p) for p in params],
                         v=[np.zeros_like(p) for p in params])


def adam_step(params, grads, state: AdamState, lr: float, weight_decay: float = 0.0,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
              decoupled: bool = False) -> None:
    """One Adam update, in place, over parallel lists of arrays."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and state must have matching lengths")
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if not decoupled and weight_decay:
            g = g + weight_decay * p
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        if decoupled and weight_decay:
            p -= lr * weight_decay * p


def sgd_momentum_step(params, grads, velocity, lr: float, momentum: float,
                      weight_decay: float = 0.0, decoupled: bool = False) -> None:
    """v <- momentum*v + (grad + wd*param); param <- param - lr*v."""
    if len(params) != len(grads) or len(params) != len(velocity):
        raise ValueError("params, grads and velocity must have matching lengths")
    for p, g, v in zip(params, grads, velocity):
        if not decoupled and weight_decay:
            g = g + weight_decay * p
        v *= momentum
        v += g
        p -= lr * v
        if decoupled and weight_decay:
            p -= lr * weight_decay * p


def augment_batch(x: np.ndarray, rng: np.random.Generator, pad: int = 4) -> np.ndarray:
    """Random horizontal flip plus random crop from a zero-padded canvas."""
    n, c, h, w = x.shape
    out = x.copy()
    flips = rng.random(n) < 0.5
    out[flips] = out[flips, :, :, ::-1]
    canvas = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
    canvas[:, :, pad : pad + h, pad : pad + w] = out
    offsets = rng.integers(0, 2 * pad + 1, size=(n, 2))
    for i, (dy, dx) in enumerate(offsets):
        out[i] = canvas[i, :, dy : dy + h, dx : dx + w]
    return out


def build_mixed_batch(x: np.ndarray, y: np.ndarray, model: ModelGraph,
                      attack_cfg: AttackConfig, clean_mix_ratio: float, seed: int):
    """Keep floor(ratio*B) samples clean, attack the rest; labels unchanged.

    Returns (batch, is_adversarial mask). Training attacks must target the
    model's own prediction, never the true label.
    """
    if not 0.0 <= clean_mix_ratio <= 1.0:
        raise ValueError(f"clean_mix_ratio must lie in [0,1], got {clean_mix_ratio}")
    assert attack_cfg.target_mode == PREDICTION, "training attacks must target the prediction"
    n = x.shape[0]
    n_clean = int(math.floor(clean_mix_ratio * n))
    out = np.array(x, dtype=np.float64)
    is_adv = np.zeros(n, dtype=bool)
    if n_clean < n:
        out[n_clean:] = pgd(model, x[n_clean:], y[n_clean:], attack_cfg, seed=seed)
        is_adv[n_clean:] = True
    return out, is_adv


def _batch_loss(model, x_np, y, train_cfg, clean_slice=None, adv_slice=None):
    """Forward + loss; optionally split batch-norm statistics per portion."""
    if train_cfg.joint_batch_norm or clean_slice is None or adv_slice is None \
            or clean_slice.stop == 0 or adv_slice.start >= x_np.shape[0]:
        with Tape() as tape:
            logits = model.forward(Tensor(x_np), train=True)
            loss = softmax_cross_entropy(logits, y)
        return tape, loss, logits
    n = x_np.shape[0]
    n_clean = clean_slice.stop
    with Tape() as tape:
        logits_c = model.forward(Tensor(x_np[clean_slice]), train=True)
        loss_c = softmax_cross_entropy(logits_c, y[clean_slice])
        logits_a = model.forward(Tensor(x_np[adv_slice]), train=True)
        loss_a = softmax_cross_entropy(logits_a, y[adv_slice])
        loss = loss_c * (n_clean / n) + loss_a * ((n - n_clean) / n)
    return tape, loss, None


def train(model: ModelGraph, dataset, cfg: TrainConfig,
          mask: FreezeMask | None = None) -> TrainHistory:
    """Train in place per the config, honoring the freeze mask exactly.

    Zero epochs leaves the model bit-identical and the history empty.
    """
    cfg.validate()
    if mask is None:
        mask = FreezeMask.all_trainable(model)
    mask.apply_to(model)

    named_params = model.parameters()
    trainable = [(path, t) for path, t in named_params if mask.is_trainable(path)]
    frozen = [t for path, t in named_params if not mask.is_trainable(path)]
    saved_flags = [t.requires_grad for t in frozen]
    for t in frozen:
        t.requires_grad = False

    arrays = [t.data for _, t in trainable]
    opt = cfg.optimizer
    if isinstance(opt, AdamConfig):
        adam_state = AdamState.for_params(arrays)
    else:
        velocity = [np.zeros_like(p) for p in arrays]

    images, labels = dataset.images, dataset.labels
    n = len(labels)
    history = TrainHistory()
    try:
        for epoch in range(cfg.epochs):
            lr = schedule_lr(cfg.schedule, epoch, cfg.epochs, opt.lr)
            perm = derive_rng(cfg.seed, "shuffle", epoch).permutation(n)
            loss_sum, clean_correct, seen = 0.0, 0, 0
            for batch_i, start in enumerate(range(0, n, cfg.batch_size)):
                idx = perm[start : start + cfg.batch_size]
                if len(idx) < 2:
                    continue  # batch statistics are undefined on one sample
                x, y = images[idx], labels[idx]
                if cfg.augment:
                    x = augment_batch(x, derive_rng(cfg.seed, "augment", epoch, batch_i))

                clean_slice = adv_slice = None
                if cfg.mode == CONVENTIONAL:
                    x_train = x
                else:
                    x_train, is_adv = build_mixed_batch(
                        x, y, model, cfg.attack, cfg.clean_mix_ratio,
                        seed=derive_seed(cfg.seed, "attack", epoch, batch_i),
                    )
                    n_clean = int((~is_adv).sum())
                    clean_slice, adv_slice = slice(0, n_clean), slice(n_clean, len(idx))

                tape, loss, logits = _batch_loss(model, x_train, y, cfg, clean_slice, adv_slice)
                if not np.isfinite(loss.data):
                    raise TrainingDivergedError(epoch, batch_i, lr)
                tape.backward(loss)

                if cfg.mode == CONVENTIONAL and logits is not None:
                    clean_correct += int((np.argmax(logits.data, axis=1) == y).sum())
                else:
                    clean_correct += int((model.predict(x) == y).sum())
                seen += len(idx)
                loss_sum += float(loss.data) * len(idx)

                grads = [t.grad if t.grad is not None else np.zeros_like(t.data)
                         for _, t in trainable]
                if isinstance(opt, AdamConfig):
                    adam_step(arrays, grads, adam_state, lr, cfg.weight_decay,
                              opt.beta1, opt.beta2, opt.eps,
                              decoupled=cfg.decoupled_weight_decay)
                else:
                    sgd_momentum_step(arrays, grads, velocity, lr, opt.momentum,
                                      cfg.weight_decay, decoupled=cfg.decoupled_weight_decay)
                for _, t in trainable:
                    t.zero_grad()

            history.records.append(EpochRecord(
                epoch=epoch,
                train_loss=loss_sum / max(seen, 1),
                clean_acc=clean_correct / max(seen, 1),
                lr=lr,
            ))
    finally:
        for t, flag in zip(frozen, saved_flags):
            t.requires_grad = flag
    return history


# Reference recipes. The CIFAR-scale recipe is the one shipped in
# manifests/cifar10_reference.json; the ImageNet-style recipe is recorded for
# documentation (fast single-step training, no clean mixing).
CIFAR10_REFERENCE = TrainConfig(
    mode=ADVERSARIAL,
    optimizer=AdamConfig(lr=0.001),
    epochs=300,
    batch_size=128,
    weight_decay=1e-4,
    schedule=CosineSchedule(),
    clean_mix_ratio=0.5,
    attack=AttackConfig(epsilon=8 / 255, step_size=2 / 255, iterations=7,
                        random_start=True, target_mode=PREDICTION),
    augment=True,
)

IMAGENET_STYLE_REFERENCE = TrainConfig(
    mode=FAST_ADVERSARIAL,
    optimizer=SgdMomentumConfig(lr=0.256, momentum=0.875),
    epochs=100,
    batch_size=256,
    weight_decay=1e-4,
    schedule=StepDecaySchedule(milestones=(30, 60, 90), factor=0.1),
    clean_mix_ratio=0.0,
    attack=AttackConfig(epsilon=4 / 255, step_size=4 / 255, iterations=1,
                        random_start=True, target_mode=PREDICTION),
)

PGD200_EVAL = AttackConfig(epsilon=8 / 255, step_size=2 / 255, iterations=200,
                           random_start=True, target_mode="true_label", restarts=1)

# Desk-scale evaluation default; the reference 200-iteration attack remains
# available through configuration.
DESK_EVAL = AttackConfig(epsilon=8 / 255, step_size=2 / 255, iterations=50,
                         random_start=True, target_mode="true_label", restarts=1)
