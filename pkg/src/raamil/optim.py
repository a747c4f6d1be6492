"""AdamW updates, reduce-on-plateau scheduling, and early stopping.

All three track a training run's slow state between steps or epochs.  The
schedulers maximize validation weighted F1 and treat equality as no
improvement (strict >), so their counters have exact, testable semantics:
a reduction or stop fires on the first epoch where the run of
non-improving epochs exceeds the patience.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from raamil.autodiff import NonFiniteError


@dataclass
class AdamWState:
    """Moment estimates and hyperparameters; step count t starts at 0."""

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-2
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError(f"betas must lie in [0, 1), got {self.beta1}, {self.beta2}")
        if self.lr <= 0 or self.eps <= 0 or self.weight_decay < 0:
            raise ValueError("lr and eps must be positive, weight decay nonnegative")


def init_adamw(params: dict[str, np.ndarray], lr: float = 1e-4, beta1: float = 0.9,
               beta2: float = 0.999, eps: float = 1e-8,
               weight_decay: float = 1e-2) -> AdamWState:
    state = AdamWState(lr=lr, beta1=beta1, beta2=beta2, eps=eps, weight_decay=weight_decay)
    for name, value in params.items():
        state.m[name] = np.zeros_like(value)
        state.v[name] = np.zeros_like(value)
    return state


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
               state: AdamWState) -> None:
    """One in-place update of every parameter.

    Weight decay is decoupled: theta -= lr * wd * theta happens before and
    independently of the adaptive step, so zero-gradient parameters still
    shrink by exactly (1 - lr * wd).  A non-finite gradient aborts the step
    before any parameter is touched.
    """
    missing = set(params) - set(grads)
    if missing:
        raise KeyError(f"missing gradients for {sorted(missing)}")
    for name in params:
        bad = ~np.isfinite(grads[name])
        if bad.any():
            idx = tuple(map(int, np.unravel_index(int(np.argmax(bad)), grads[name].shape)))
            raise NonFiniteError(f"non-finite gradient for {name!r} at index {idx}")

    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for name, theta in params.items():
        g = grads[name]
        if state.weight_decay:
            theta -= state.lr * state.weight_decay * theta
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        theta -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients by min(1, max_norm / global_l2_norm); returns the
    pre-clip norm."""
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total > max_norm > 0:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return total


@dataclass
class PlateauState:
    """Halve (by `factor`) the lr once the metric stalls past `patience`."""

    lr: float = 1e-4
    factor: float = 0.5
    patience: int = 5
    threshold: float = 1e-4
    min_lr: float = 1e-6
    best: float = -np.inf
    bad_epochs: int = 0

    def __post_init__(self):
        if not 0 < self.factor < 1:
            raise ValueError(f"factor must lie in (0, 1), got {self.factor}")
        if self.patience < 1:
            raise ValueError(f"patience must be >= 1, got {self.patience}")


def plateau_update(state: PlateauState, metric: float) -> float:
    """Record one epoch's validation metric (maximized); returns the lr to
    use from now on.  Improvement must exceed `threshold` strictly."""
    if not np.isfinite(metric):
        raise ValueError(f"plateau metric must be finite, got {metric}")
    if metric > state.best + state.threshold:
        state.best = metric
        state.bad_epochs = 0
    else:
        state.bad_epochs += 1
        if state.bad_epochs > state.patience:
            # min() keeps the sequence non-increasing even if lr started
            # below the floor
            state.lr = min(state.lr, max(state.lr * state.factor, state.min_lr))
            state.bad_epochs = 0
    return state.lr


@dataclass
class EarlyStopState:
    """Stop once the metric fails to improve for more than `patience`
    epochs; `best_epoch` always points at the argmax epoch (first maximizer)."""

    patience: int = 15
    best: float = -np.inf
    bad_epochs: int = 0
    best_epoch: int = -1

    def __post_init__(self):
        if self.patience < 1:
            raise ValueError(f"patience must be >= 1, got {self.patience}")


def early_stop_update(state: EarlyStopState, metric: float, epoch: int) -> tuple[bool, bool]:
    """Returns (improved, stop).  Equality with the best is no improvement."""
    if not np.isfinite(metric):
        raise ValueError(f"early-stop metric must be finite, got {metric}")
    if metric > state.best:
        state.best = metric
        state.best_epoch = epoch
        state.bad_epochs = 0
        return True, False
    state.bad_epochs += 1
    return False, state.bad_epochs > state.patience
