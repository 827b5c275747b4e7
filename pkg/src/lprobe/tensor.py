"""Reverse-mode autodiff over float64 numpy arrays.

Define-by-run: while a Tape is active, every differentiable operation appends
one record (output, backward rule) in execution order. ``backward`` replays
the records once, in reverse, accumulating gradients additively into
``Tensor.grad``. With no tape active, operations run in plain inference mode
and record nothing.

Tensors are treated as immutable after construction; the optimizer step and
gradient accumulation are the designated mutation points. A tape is private
to one forward pass and never shared between concurrent evaluations.
"""

from __future__ import annotations

import threading

import numpy as np


class DimensionError(ValueError):
    """Shape or dimension mismatch between operands."""


_state = threading.local()

# Explicit checkable mode: validate that tensor contents stay finite.
_finite_checks = False


def set_finite_checks(enabled: bool) -> None:
    global _finite_checks
    _finite_checks = bool(enabled)


def finite_checks_enabled() -> bool:
    return _finite_checks


def _tape_stack():
    if not hasattr(_state, "tapes"):
        _state.tapes = []
    return _state.tapes


def active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """N-dimensional float64 array with an optional same-shape gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_needs", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        if _finite_checks and not np.all(np.isfinite(self.data)):
            raise FloatingPointError("non-finite values in tensor data")
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._needs = None  # None on leaves: resolved from requires_grad
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def needs_grad(self) -> bool:
        if self._needs is None:
            return self.requires_grad
        return self._needs

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g) -> None:
        g = np.asarray(g, dtype=np.float64)
        if g.shape != self.data.shape:
            raise DimensionError(
                f"gradient shape {g.shape} does not match tensor shape {self.data.shape}"
            )
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def _accumulate_owned(self, g: np.ndarray) -> None:
        # Ownership fast path for backward rules handing over fresh arrays.
        if g.shape != self.data.shape:
            raise DimensionError(
                f"gradient shape {g.shape} does not match tensor shape {self.data.shape}"
            )
        if self.grad is None:
            self.grad = g
        else:
            self.grad += g

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __neg__(self):
        return mul(self, -1.0)

    def sum(self):
        return tensor_sum(self)

    def mean(self):
        return mul(tensor_sum(self), 1.0 / self.data.size)

    def backward(self):
        backward(self)


class Tape:
    """Ordered record of the operations from one forward pass.

    Records are appended in execution order, so every operation's inputs
    precede it (topological by construction). ``backward`` walks the list
    exactly once, in reverse.
    """

    def __init__(self):
        self.records = []  # (output Tensor, backward rule)

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack().pop()
        assert popped is self, "tape stack corrupted"
        return False

    def __len__(self):
        return len(self.records)

    def record(self, out: Tensor, rule) -> None:
        out._tape = self
        self.records.append((out, rule))

    def backward(self, loss: Tensor) -> None:
        """Replay the records once, in reverse; the tape is consumed by this.

        Clearing the records afterwards drops the tape->tensor references, so
        a finished pass frees its activations by plain refcounting instead of
        waiting for the cycle collector.
        """
        if loss.data.size != 1:
            raise DimensionError(f"backward requires a scalar loss, got shape {loss.data.shape}")
        if loss._tape is not self:
            raise ValueError("loss is not on this tape")
        loss.grad = np.ones_like(loss.data)
        for out, rule in reversed(self.records):
            if out.grad is not None:
                rule(out.grad)
        self.records.clear()


def backward(loss: Tensor) -> None:
    """Populate grads of every needs-grad tensor reachable from the scalar loss."""
    if loss._tape is None:
        raise ValueError("loss is not on a tape; run the forward pass inside `with Tape():`")
    loss._tape.backward(loss)


def record_op(out_data, inputs, rule) -> Tensor:
    """Wrap an op output, recording the backward rule if a tape is active.

    ``rule(out_grad)`` must route gradient to each input that needs it via
    ``accumulate_grad``; it is invoked only if the output received gradient.
    """
    out = Tensor(out_data)
    tape = active_tape()
    out._needs = any(t.needs_grad for t in inputs)
    if tape is not None and out._needs:
        tape.record(out, rule)
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _reduce_to(g: np.ndarray, shape) -> np.ndarray:
    # Only scalar <-> array mixing is permitted; everything else is exact-shape.
    if g.shape == tuple(shape):
        return g
    return np.asarray(g.sum(), dtype=np.float64).reshape(shape)


def _check_elementwise(name, a, b):
    if a.data.shape != b.data.shape and a.data.ndim > 0 and b.data.ndim > 0:
        raise DimensionError(
            f"{name} requires identical shapes (or a scalar operand), "
            f"got {a.data.shape} and {b.data.shape}"
        )


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_elementwise("add", a, b)
    out_data = a.data + b.data

    def rule(out_grad):
        if a.needs_grad:
            a.accumulate_grad(_reduce_to(out_grad, a.data.shape))
        if b.needs_grad:
            b.accumulate_grad(_reduce_to(out_grad, b.data.shape))

    return record_op(out_data, (a, b), rule)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_elementwise("mul", a, b)
    out_data = a.data * b.data

    def rule(out_grad):
        if a.needs_grad:
            a.accumulate_grad(_reduce_to(out_grad * b.data, a.data.shape))
        if b.needs_grad:
            b.accumulate_grad(_reduce_to(out_grad * a.data, b.data.shape))

    return record_op(out_data, (a, b), rule)


def tensor_sum(a) -> Tensor:
    a = _as_tensor(a)
    out_data = np.asarray(a.data.sum())

    def rule(out_grad):
        if a.needs_grad:
            a.accumulate_grad(np.full_like(a.data, float(out_grad)))

    return record_op(out_data, (a,), rule)


class no_grad_params:
    """Temporarily drop requires_grad on the given tensors.

    Attack loops wrap model parameters in this so backward only propagates to
    the input, skipping the (equally expensive) weight-gradient computation.
    """

    def __init__(self, tensors):
        self.tensors = list(tensors)
        self._saved = None

    def __enter__(self):
        self._saved = [t.requires_grad for t in self.tensors]
        for t in self.tensors:
            t.requires_grad = False
        return self

    def __exit__(self, exc_type, exc, tb):
        for t, flag in zip(self.tensors, self._saved):
            t.requires_grad = flag
        return False
