"""Class-weighted focal loss with label smoothing.

The smoothed target for class c is t_c = (1 - eps) * [c == label] + eps / 4,
and the loss is

    sum_c  weight_c * t_c * (1 - p_c)^gamma_f * (-log p_c)

with p = softmax(logits).  Setting gamma_f = 0, eps = 0 and unit weights
recovers plain softmax cross-entropy; the focusing exponent down-weights
confidently-correct classes and the per-class weights counter imbalance.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from raamil.autodiff import Graph, Node, forward
from raamil.bags import NUM_CLASSES


@dataclass
class LossConfig:
    gamma_f: float = 2.0
    epsilon: float = 0.05
    class_weights: np.ndarray = field(default_factory=lambda: np.ones(NUM_CLASSES))

    def __post_init__(self):
        self.class_weights = np.asarray(self.class_weights, dtype=np.float64)
        if self.gamma_f < 0:
            raise ValueError(f"focusing exponent must be >= 0, got {self.gamma_f}")
        if not 0 <= self.epsilon < 1:
            raise ValueError(f"label smoothing must lie in [0, 1), got {self.epsilon}")
        if self.class_weights.shape != (NUM_CLASSES,) or np.any(self.class_weights <= 0):
            raise ValueError("class weights must be 4 positive floats")


def smoothed_target(label: int, epsilon: float) -> np.ndarray:
    """Uniform-mixture smoothed one-hot target; always sums to 1."""
    if not 0 <= label < NUM_CLASSES:
        raise ValueError(f"label {label} outside 0..{NUM_CLASSES - 1}")
    target = np.full(NUM_CLASSES, epsilon / NUM_CLASSES)
    target[label] += 1.0 - epsilon
    return target


def build_focal_loss(g: Graph, logits: Node, class_weights: np.ndarray,
                     gamma_f: float, target: Node | None = None) -> Node:
    """Append the loss subgraph to `g`; `logits` must be shape (4,).

    The smoothed target enters as the input node "target" (unless one is
    supplied), so a built graph serves any label.
    """
    if logits.shape != (NUM_CLASSES,):
        raise ValueError(f"loss expects logits of shape ({NUM_CLASSES},), got {logits.shape}")
    if target is None:
        target = g.input("target", (NUM_CLASSES,))
    probs = g.softmax(logits, axis=-1)
    neg_log_p = g.smul(g.log(probs), -1.0)
    focus = g.powc(g.sub(g.constant(np.ones(NUM_CLASSES)), probs), gamma_f)
    weighted = g.mul(g.constant(np.asarray(class_weights, dtype=np.float64)), target)
    return g.sum(g.mul(weighted, g.mul(focus, neg_log_p)))


def focal_loss(logits: np.ndarray, label: int, cfg: LossConfig) -> float:
    """Scalar loss for one bag's logits; loss >= 0, zero only in the limit
    p_label -> 1 with eps = 0."""
    logits = np.asarray(logits, dtype=np.float64).reshape(NUM_CLASSES)
    g = Graph()
    node = g.input("logits", (NUM_CLASSES,))
    g.output("loss", build_focal_loss(g, node, cfg.class_weights, cfg.gamma_f))
    out = forward(g, {"logits": logits, "target": smoothed_target(label, cfg.epsilon)})
    return float(out["loss"])


def class_weights_from_counts(counts) -> np.ndarray:
    """Inverse-frequency weights total/(4*count), clipped to [0.1, 10].

    Classes absent from the data get weight 1: they contribute no training
    signal, so only the smoothing term ever sees the weight.
    """
    counts = np.asarray(counts, dtype=np.int64)
    if counts.shape != (NUM_CLASSES,) or np.any(counts < 0):
        raise ValueError(f"need {NUM_CLASSES} nonnegative counts, got {counts!r}")
    total = int(counts.sum())
    if total == 0:
        raise ValueError("all class counts are zero")
    weights = np.ones(NUM_CLASSES)
    present = counts > 0
    weights[present] = np.clip(total / (NUM_CLASSES * counts[present]), 0.1, 10.0)
    return weights
