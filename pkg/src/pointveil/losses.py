"""Scalar loss functions and the gated composite objective.

The de-identification term is kept as a positive NLL internally: the
stabilized form delta - log(1 + nll) is strictly decreasing in the NLL,
so minimizing it pushes the frozen identity classifier's true-class
probability down while the log damps the gradient for large NLL. The
offset delta shifts the value only and never the gradient.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np
from scipy.spatial import cKDTree

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class LossWeights:
    """Scaling factors of the composite objective.

    tau left as None means "twice chance": it resolves to 2/num_subjects
    via resolve_tau before the gate is ever evaluated.
    """

    alpha: float = 1.0
    beta: float = 2.0
    gamma: float = 1.0
    delta: float = 2.0
    tau: float | None = None

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.tau is not None and not 0.0 <= self.tau <= 1.0:
            raise ValueError("tau must lie in [0, 1]")

    def resolve_tau(self, num_subjects: int) -> "LossWeights":
        if self.tau is not None:
            return self
        return replace(self, tau=min(1.0, 2.0 / num_subjects))


def chamfer(p: np.ndarray, q: np.ndarray) -> float:
    """Symmetric sum of squared nearest-neighbor distances between clouds."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    for name, arr in (("p", p), ("q", q)):
        if arr.ndim != 2 or arr.shape[1] != 3:
            raise ValueError(f"{name} must be an (N, 3) array")
        if arr.shape[0] == 0:
            raise ValueError(f"{name} is empty; Chamfer distance is undefined")
    _, j = cKDTree(q).query(p)
    d_pq = np.sum((p - q[j]) ** 2)
    _, j = cKDTree(p).query(q)
    d_qp = np.sum((q - p[j]) ** 2)
    return float(d_pq + d_qp)


def _true_class_nll(probs: np.ndarray, labels: np.ndarray, what: str) -> float:
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if probs.ndim != 2 or probs.shape[0] == 0:
        raise ValueError("probs must be a non-empty (batch, classes) array")
    if labels.shape != (probs.shape[0],):
        raise ValueError("labels must align with the probability rows")
    row_sums = probs.sum(axis=1)
    if np.any(np.abs(row_sums - 1.0) > 1e-5):
        raise ValueError("probability rows must sum to 1")
    p_true = probs[np.arange(len(labels)), labels]
    if np.any(p_true < PROB_FLOOR):
        warnings.warn(
            f"{what}: clamping {int(np.sum(p_true < PROB_FLOOR))} true-class "
            f"probabilities below {PROB_FLOOR:g}", stacklevel=3)
        p_true = np.maximum(p_true, PROB_FLOOR)
    return float(-np.mean(np.log(p_true)))


def gesture_loss(probs: np.ndarray, labels: np.ndarray) -> float:
    """Mean NLL of the true gesture class under the frozen classifier."""
    return _true_class_nll(probs, labels, "gesture_loss")


def deid_nll(probs: np.ndarray, labels: np.ndarray) -> float:
    """Positive NLL of the true identity; larger means better obfuscation."""
    return _true_class_nll(probs, labels, "deid_nll")


def deid_stabilized(nll: float, delta: float) -> float:
    """Damped, bounded-above form of the de-identification objective."""
    if nll < 0:
        raise ValueError("identity NLL must be nonnegative")
    return float(delta - np.log1p(nll))


def heaviside(x: float) -> float:
    return 1.0 if x >= 0 else 0.0


def combined_loss(l_point: float, l_ges: float, l_id_stab: float | None,
                  weights: LossWeights, a_id: float) -> float:
    """Gated composite objective.

    With the gate closed (a_id < tau) the identity term is skipped
    entirely, so the result is bit-identical to a gamma = 0 evaluation
    and l_id_stab may be omitted.
    """
    if weights.tau is None:
        raise ValueError("tau is unresolved; call weights.resolve_tau first")
    for name, v in (("l_point", l_point), ("l_ges", l_ges)):
        if not np.isfinite(v):
            raise ValueError(f"{name} must be finite")
    gate = heaviside(a_id - weights.tau)
    total = weights.alpha * l_point + weights.beta * l_ges
    if gate > 0 and weights.gamma != 0:
        if l_id_stab is None:
            raise ValueError("gate is open but l_id_stab was not evaluated")
        if not np.isfinite(l_id_stab):
            raise ValueError("l_id_stab must be finite")
        total = total + weights.gamma * gate * l_id_stab
    return float(total)
