"""ADAM and the loss functions used by the training loops."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .layers import sigmoid, softmax
from .tensor import DimensionError, NonFiniteError

PROB_FLOOR = 1e-12


class Adam:
    """ADAM with bias correction and a per-update learning-rate decay.

    ``decay_mode="lr"`` uses ``lr_t = lr / (1 + decay * t)``.
    ``decay_mode="weight"`` keeps ``lr`` fixed and adds ``decay * theta`` to
    every gradient (L2 weight decay) instead.
    """

    def __init__(self, lr: float = 1e-3, decay: float = 1e-5, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, decay_mode: str = "lr"):
        if decay_mode not in ("lr", "weight"):
            raise ValueError(f"decay_mode must be 'lr' or 'weight', got {decay_mode!r}")
        if lr <= 0 or decay < 0:
            raise ValueError("lr must be positive and decay non-negative")
        self.lr = lr
        self.decay = decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.decay_mode = decay_mode
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def current_lr(self) -> float:
        if self.decay_mode == "lr":
            return self.lr / (1.0 + self.decay * self.t)
        return self.lr

    def step(self, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> None:
        """Update ``params`` in place; keys missing from ``grads`` are skipped."""
        self.t += 1
        lr_t = self.current_lr()
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for key in sorted(grads):
            p, g = params[key], grads[key]
            if p.shape != g.shape:
                raise DimensionError(f"adam: parameter {key} has shape {p.shape}, gradient {g.shape}")
            if self.decay_mode == "weight" and self.decay:
                g = g + self.decay * p
            if key not in self.m:
                self.m[key] = np.zeros_like(p)
                self.v[key] = np.zeros_like(p)
            m, v = self.m[key], self.v[key]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= (lr_t * (m / bc1) / (np.sqrt(v / bc2) + self.eps)).astype(p.dtype)


def adam_step(params, grads, state: Adam):
    state.step(params, grads)
    return params


def cross_entropy(probs: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean categorical cross-entropy over a batch.

    ``target`` is either one-hot with the shape of ``probs`` or an integer
    label array of shape (N,).  Returns the loss and the gradient w.r.t. the
    *logits* behind ``probs`` (softmax and cross-entropy combined), which is
    ``(probs - one_hot) / N``.
    """
    probs = np.atleast_2d(probs)
    target = np.asarray(target)
    if np.issubdtype(target.dtype, np.integer) and target.ndim == 1 and target.shape[0] == probs.shape[0]:
        onehot = _one_hot(target, probs.shape[-1]).astype(probs.dtype)
    else:
        onehot = np.atleast_2d(target).astype(probs.dtype)
    if onehot.shape != probs.shape:
        raise DimensionError(f"cross_entropy: probs {probs.shape} vs target {onehot.shape}")
    n = probs.shape[0]
    p_target = np.maximum((probs * onehot).sum(axis=-1), PROB_FLOOR)
    loss = float(-np.log(p_target).sum() / n)
    return loss, (probs - onehot) / n


def _one_hot(labels, k: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=int)
    out = np.zeros((labels.shape[0], k))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    return cross_entropy(softmax(logits), np.asarray(labels, dtype=int))


@dataclass(frozen=True)
class LossSpec:
    """``kind`` is ``cross_entropy``, ``sparse_au`` or ``mse``.

    ``sparse_au`` adds ``lambda1 * sum|y| + lambda2 * sum y^2`` to the base
    loss of the head (binary cross-entropy for sigmoid heads, MSE for linear
    heads).
    """

    kind: str = "cross_entropy"
    lambda1: float = 1e-4
    lambda2: float = 1e-4

    def __post_init__(self):
        if self.kind not in ("cross_entropy", "sparse_au", "mse"):
            raise ValueError(f"unknown loss kind {self.kind!r}")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("sparsity weights must be non-negative")


def binary_cross_entropy(output: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Per-unit BCE, mean over units, mean over batch.  Gradient w.r.t. ``output``."""
    output = np.atleast_2d(output)
    target = np.atleast_2d(target).astype(output.dtype)
    n, k = output.shape
    p = np.clip(output, PROB_FLOOR, 1.0 - PROB_FLOOR)
    loss = -(target * np.log(p) + (1.0 - target) * np.log(1.0 - p)).sum() / (n * k)
    grad = (p - target) / (p * (1.0 - p)) / (n * k)
    return float(loss), grad


def mse(output: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error over units and batch.  Gradient w.r.t. ``output``."""
    output = np.atleast_2d(output)
    target = np.atleast_2d(target).astype(output.dtype)
    if output.shape != target.shape:
        raise DimensionError(f"mse: output {output.shape} vs target {target.shape}")
    diff = output - target
    return float((diff * diff).mean()), 2.0 * diff / diff.size


def sparse_au_loss(output: np.ndarray, target: np.ndarray, lambda1: float, lambda2: float,
                   base: str = "bce") -> tuple[float, np.ndarray]:
    """Base loss plus L1 and L2 penalties on the head output.

    Penalties are summed over units and averaged over the batch.  The L1
    subgradient at exactly zero is taken as zero.
    """
    if lambda1 < 0 or lambda2 < 0:
        raise ValueError(f"sparsity weights must be non-negative, got {lambda1}, {lambda2}")
    output = np.atleast_2d(output)
    if base == "bce":
        loss, grad = binary_cross_entropy(output, target)
    elif base == "mse":
        loss, grad = mse(output, target)
    else:
        raise ValueError(f"unknown base loss {base!r}")
    n = output.shape[0]
    loss += (lambda1 * np.abs(output).sum() + lambda2 * (output * output).sum()) / n
    grad = grad + (lambda1 * np.sign(output) + 2.0 * lambda2 * output) / n
    return float(loss), grad


def head_loss(logits: np.ndarray, target: np.ndarray, activation: str, loss: LossSpec) -> tuple[float, np.ndarray]:
    """Loss and gradient w.r.t. the head's pre-activation values."""
    if activation == "softmax":
        value, grad = softmax_cross_entropy(logits, target)
    elif activation == "sigmoid":
        p = sigmoid(logits)
        lam1, lam2 = (loss.lambda1, loss.lambda2) if loss.kind == "sparse_au" else (0.0, 0.0)
        target = np.asarray(target, dtype=logits.dtype)
        n, k = p.shape
        pc = np.clip(p, PROB_FLOOR, 1.0 - PROB_FLOOR)
        value = float(-(target * np.log(pc) + (1.0 - target) * np.log(1.0 - pc)).sum() / (n * k))
        value += float((lam1 * np.abs(p).sum() + lam2 * (p * p).sum()) / n)
        # BCE through the sigmoid collapses to (p - y); penalties chain through p(1-p)
        grad = (p - target) / (n * k) + (lam1 * np.sign(p) + 2.0 * lam2 * p) * p * (1.0 - p) / n
    elif activation == "linear":
        if loss.kind == "sparse_au":
            value, grad = sparse_au_loss(logits, target, loss.lambda1, loss.lambda2, base="mse")
        else:
            value, grad = mse(logits, target)
    else:
        raise ValueError(f"unknown head activation {activation!r}")
    if not np.isfinite(value):
        raise NonFiniteError(f"loss is {value}")
    return value, grad
