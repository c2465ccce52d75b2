"""Softmax, class-weighted cross-entropy and the Adam optimizer."""

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, LabelError, ShapeError

LOG_CLAMP = 1e-12


def softmax(logits):
    z = np.asarray(logits, dtype=np.float64)
    e = np.exp(z - z.max())
    return e / e.sum()


def _check_label(label, n):
    if int(label) != label or not 0 <= label < n:
        raise LabelError(f"label {label!r} is not a class index in [0, {n})")
    return int(label)


def weighted_cce(probs, label, weights):
    """``-weights[label] * log(probs[label])`` with the log argument clamped at 1e-12."""
    label = _check_label(label, len(probs))
    w = float(weights[label])
    if w == 0.0:
        return 0.0
    return -w * float(np.log(max(probs[label], LOG_CLAMP)))


def cce_grad_logits(probs, label, weights):
    """Gradient of ``weighted_cce(softmax(z))`` with respect to the logits ``z``."""
    label = _check_label(label, len(probs))
    g = np.array(probs, dtype=np.float64)
    g[label] -= 1.0
    return float(weights[label]) * g


def class_weights_from_counts(counts):
    """Balanced weights ``N / (K * n_c)``.

    Classes with no samples get weight 0 and do not count towards ``K``, so
    the weights stay balanced over the classes actually trained on.
    """
    counts = np.asarray(counts, dtype=np.float64)
    if counts.ndim != 1 or np.any(counts < 0) or not np.all(np.isfinite(counts)):
        raise ConfigError(f"class counts must be a non-negative vector, got {counts}")
    if counts.sum() == 0:
        raise ConfigError("cannot derive class weights: every class count is zero")
    present = counts > 0
    w = np.zeros(counts.shape[0])
    w[present] = counts.sum() / (present.sum() * counts[present])
    return w


@dataclass
class AdamState:
    """Moment estimates for :func:`adam_step`.

    ``t`` counts completed steps. Build a fresh state with ``AdamState.zeros(n, lr)``.
    """

    m: np.ndarray
    v: np.ndarray
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = field(default=0)

    @classmethod
    def zeros(cls, n, lr=1e-4, **kw):
        if lr < 0:
            raise ConfigError(f"learning rate must be non-negative, got {lr}")
        return cls(np.zeros(n), np.zeros(n), lr=lr, **kw)


def adam_step(params, grads, state):
    """Apply one bias-corrected Adam update to ``params`` in place.

    Returns ``params`` for convenience; ``state`` is advanced in place too.
    """
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise ShapeError(
            f"length mismatch: params {params.shape}, grads {grads.shape}, state {state.m.shape}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    state.m *= b1
    state.m += (1 - b1) * grads
    state.v *= b2
    state.v += (1 - b2) * grads * grads
    m_hat = state.m / (1 - b1 ** state.t)
    v_hat = state.v / (1 - b2 ** state.t)
    params -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params
