"""Scalar objectives: tempered softmax, the two KL transfers, cross-entropy,
and the weighted total.

Conventions baked in here:
  * every probability is floored at 1e-12 before a log;
  * soft-label losses are scaled by tau^2 so their gradients stay comparable
    to the hard loss across temperatures;
  * kd_loss defaults to the "as_written" direction KL(fused || teacher), with
    a "standard" switch for the classical KL(teacher || fused);
  * self_distill_loss is the proper KL(target || fused) with the fused side
    stopped, which is the minimisable form of the transfer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor_core as tc
from .tensor_core import Tensor

PROB_FLOOR = 1e-12

KD_DIRECTIONS = ("as_written", "standard")


@dataclass
class ProbVector:
    """Row-normalised probabilities plus the temperature they came from."""

    probs: Tensor
    tau: float

    @property
    def shape(self):
        return self.probs.shape


@dataclass
class LossBundle:
    """The four logged scalar terms and their weights (all 1 by default)."""

    l_kd_a: float
    l_kd_s: float
    l_ad: float
    l_ce: float
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 1.0
    lambda4: float = 1.0


def tempered_softmax(logits: Tensor, tau: float) -> ProbVector:
    """Softmax of logits / tau along the class axis."""
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    scaled = logits * (1.0 / tau)
    return ProbVector(scaled.softmax(axis=-1), tau=tau)


def _plog(p: Tensor) -> Tensor:
    return p.clip_min(PROB_FLOOR).log()


def _batch_kl(p: Tensor, q: Tensor) -> Tensor:
    """Mean over rows of sum_c p * log(p/q); p carries the gradient."""
    if p.shape != q.shape:
        raise ValueError(f"distribution shapes differ: {p.shape} vs {q.shape}")
    per_row = (p * (_plog(p) - _plog(q))).sum(axis=-1)
    return per_row.mean() if per_row.ndim else per_row


def kd_loss(p_a: ProbVector, p_t: ProbVector, direction: str = "as_written") -> Tensor:
    """Teacher-to-auxiliaries transfer. The teacher side never gets a gradient."""
    if direction not in KD_DIRECTIONS:
        raise ValueError(f"direction must be one of {KD_DIRECTIONS}")
    if p_a.tau != p_t.tau:
        raise ValueError(f"temperature mismatch: {p_a.tau} vs {p_t.tau}")
    teacher = p_t.probs.detach()
    if direction == "as_written":
        kl = _batch_kl(p_a.probs, teacher)
    else:
        kl = _batch_kl(teacher, p_a.probs)
    return kl * (p_a.tau ** 2)


def self_distill_loss(p_s: ProbVector, p_a: ProbVector) -> Tensor:
    """Auxiliaries-to-target transfer: KL(target || fused), fused stopped."""
    if p_s.tau != p_a.tau:
        raise ValueError(f"temperature mismatch: {p_s.tau} vs {p_a.tau}")
    return _batch_kl(p_s.probs, p_a.probs.detach()) * (p_s.tau ** 2)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """-log softmax(logits)[label], averaged over the batch."""
    if logits.ndim == 1:
        logits = logits.reshape(1, -1)
        labels = np.atleast_1d(labels)
    labels = np.asarray(labels)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {labels.shape}")
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"label out of range [0, {c})")
    onehot = np.zeros((n, c), dtype=logits.data.dtype)
    onehot[np.arange(n), labels] = 1.0
    logp = _plog(logits.softmax(axis=-1))
    return -(Tensor(onehot) * logp).sum() * (1.0 / n)


def total_loss(bundle: LossBundle) -> float:
    """The weighted objective; every lambda defaults to 1."""
    for lam in (bundle.lambda1, bundle.lambda2, bundle.lambda3, bundle.lambda4):
        if lam < 0:
            raise ValueError("loss weights must be nonnegative")
    return (bundle.lambda1 * bundle.l_kd_a
            + bundle.lambda2 * bundle.l_kd_s
            + bundle.lambda3 * bundle.l_ad
            + bundle.lambda4 * bundle.l_ce)
