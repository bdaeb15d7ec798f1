"""Adversarial collaborative module: attention fusion and discriminators.

Attention path: the branch feature maps are channel-concatenated, reduced to
a fixed-size vector (global average pool by default, full spatial flatten as
the alternative input mode), scored by a two-layer perceptron with one output
per learner, and softmaxed. The fused logit is the attention-weighted sum of
the branch logits, so it always lies in their coordinate-wise convex hull.

Adversarial path: each learner gets a discriminator (a stack of 1x1 convs
with relu, global pool, sigmoid) trained to answer "is this feature mine?".
The discriminator objective for learner i averages log D_i(own) +
log(1 - D_i(other)) over the other learners. The learner-side term comes in
two modes: "fool" (non-saturating generator loss pushing features toward
indistinguishability, the game as stated) and "diversify" (learners cooperate
with the discriminators, directly rewarding separable features).
"""

from __future__ import annotations

import numpy as np

from . import tensor_core as tc
from .distill_losses import PROB_FLOOR
from .tensor_core import Tensor

ATTENTION_INPUT_MODES = ("pooled", "flattened")
ADVERSARIAL_MODES = ("fool", "diversify")


def attention_input_dim(channels: list[int], extent: int, mode: str = "pooled") -> int:
    """MLP input width for branches with the given feature channels/extent."""
    if mode == "pooled":
        return sum(channels)
    if mode == "flattened":
        return sum(channels) * extent * extent
    raise ValueError(f"attention input mode must be one of {ATTENTION_INPUT_MODES}")


class AttentionHead:
    """Two-layer perceptron scoring the fused feature vector, one score per
    learner; hidden width defaults to max(16, in_dim // 4)."""

    def __init__(self, rng, in_dim: int, n_learners: int,
                 hidden_width: int | None = None, input_mode: str = "pooled",
                 dtype=tc.DEFAULT_DTYPE):
        if n_learners < 1:
            raise ValueError("attention head needs at least one learner")
        if input_mode not in ATTENTION_INPUT_MODES:
            raise ValueError(f"attention input mode must be one of {ATTENTION_INPUT_MODES}")
        self.input_mode = input_mode
        self.n_learners = n_learners
        self.hidden_width = hidden_width or max(16, in_dim // 4)
        self.w1 = tc.he_init(rng, (in_dim, self.hidden_width), fan_in=in_dim, dtype=dtype)
        self.b1 = tc.zeros((self.hidden_width,), dtype=dtype)
        self.w2 = tc.he_init(rng, (self.hidden_width, n_learners),
                             fan_in=self.hidden_width, dtype=dtype)
        self.b2 = tc.zeros((n_learners,), dtype=dtype)
        for p in (self.w1, self.b1, self.w2, self.b2):
            p.requires_grad = True

    def scores(self, x: Tensor) -> Tensor:
        return (x @ self.w1 + self.b1).relu() @ self.w2 + self.b2

    def params(self):
        yield "attn.w1", self.w1
        yield "attn.b1", self.b1
        yield "attn.w2", self.w2
        yield "attn.b2", self.b2


def attention_fuse(features: list[Tensor], logits: list[Tensor],
                   head: AttentionHead) -> tuple[Tensor, Tensor]:
    """Returns (weights [B, M], fused logits [B, C])."""
    m = len(features)
    if m == 0:
        raise ValueError("attention fusion needs at least one learner")
    if len(logits) != m or head.n_learners != m:
        raise ValueError("features, logits, and head disagree on learner count")
    c = logits[0].shape[-1]
    for z in logits:
        if z.shape[-1] != c:
            raise ValueError("branch logits disagree on class count")
    fused_feature = tc.concat(features, axis=1)
    if head.input_mode == "pooled":
        x = fused_feature.global_avg_pool()
    else:
        x = fused_feature.flatten_spatial()
    weights = head.scores(x).softmax(axis=1)
    fused = weights.narrow(1, 0, 1) * logits[0]
    for k in range(1, m):
        fused = fused + weights.narrow(1, k, 1) * logits[k]
    return weights, fused


def uniform_fuse(logits: list[Tensor]) -> tuple[np.ndarray, Tensor]:
    """Attention ablation: plain 1/M averaging of the branch logits."""
    m = len(logits)
    if m == 0:
        raise ValueError("fusion needs at least one learner")
    fused = logits[0]
    for z in logits[1:]:
        fused = fused + z
    fused = fused * (1.0 / m)
    b = logits[0].shape[0] if logits[0].ndim == 2 else 1
    return np.full((b, m), 1.0 / m, dtype=logits[0].data.dtype), fused


class Discriminator:
    """Per-learner feature-source classifier: 1x1 convs with relu, widths
    C -> C/2 -> C/4 -> 1, global average pool, sigmoid."""

    def __init__(self, rng, channels: int, index: int, dtype=tc.DEFAULT_DTYPE):
        self.index = index
        self.channels = channels
        c2 = max(1, channels // 2)
        c4 = max(1, channels // 4)
        name = f"disc{index}"
        from .nn_blocks import Conv2d  # local import to avoid a module cycle
        self.c1 = Conv2d(rng, f"{name}.c1", channels, c2, 1, bias=True, dtype=dtype)
        self.c2 = Conv2d(rng, f"{name}.c2", c2, c4, 1, bias=True, dtype=dtype)
        self.c3 = Conv2d(rng, f"{name}.c3", c4, 1, 1, bias=True, dtype=dtype)

    def __call__(self, feature: Tensor) -> Tensor:
        h = self.c1(feature).relu()
        h = self.c2(h).relu()
        h = self.c3(h)
        return h.global_avg_pool().sigmoid()  # [B, 1]

    def zero_final_layer(self) -> None:
        self.c3.w.data = np.zeros_like(self.c3.w.data)
        self.c3.b.data = np.zeros_like(self.c3.b.data)

    def params(self):
        for layer in (self.c1, self.c2, self.c3):
            yield from layer.params()


def discriminator_forward(disc: Discriminator, feature: Tensor) -> Tensor:
    return disc(feature)


def _log_prob(p: Tensor) -> Tensor:
    return p.clip_min(PROB_FLOOR).log()


def _log_one_minus(p: Tensor) -> Tensor:
    return (1.0 - p).clip_min(PROB_FLOOR).log()


def adversarial_loss_i(i: int, probs_own: Tensor,
                       probs_other: list[Tensor]) -> Tensor:
    """mean over j != i of [E log D_i(own) + E log(1 - D_i(other_j))].

    The own-feature expectation does not depend on j, so it is computed once;
    the value is <= 0 with maximum 0 at a perfect discriminator.
    """
    if not probs_other:
        raise ValueError(f"discriminator {i} needs at least one other learner")
    own = _log_prob(probs_own).mean()
    other = _log_one_minus(probs_other[0]).mean()
    for p in probs_other[1:]:
        other = other + _log_one_minus(p).mean()
    return own + other * (1.0 / len(probs_other))


def adversarial_loss(per_learner: list[Tensor | float]) -> Tensor:
    """Arithmetic mean of the per-learner adversarial terms."""
    if not per_learner:
        raise ValueError("adversarial loss of an empty learner list")
    terms = [t if isinstance(t, Tensor) else tc.Tensor(float(t)) for t in per_learner]
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total * (1.0 / len(terms))


def generator_adversarial_loss(prob_table: list[list[Tensor]], mode: str = "fool") -> Tensor:
    """Learner-side adversarial term over D_i(h_j) outputs that keep their
    gradient path into the features.

    prob_table[i][j] = D_i applied to learner j's features. "fool": each
    learner minimises its own discriminability with the non-saturating form.
    "diversify": learners cooperate with the discriminators (negated loss).
    """
    if mode not in ADVERSARIAL_MODES:
        raise ValueError(f"adversarial mode must be one of {ADVERSARIAL_MODES}")
    m = len(prob_table)
    if m < 2:
        raise ValueError("adversarial training needs at least two learners")
    if mode == "diversify":
        terms = [
            adversarial_loss_i(i, prob_table[i][i],
                               [prob_table[i][j] for j in range(m) if j != i])
            for i in range(m)
        ]
        return -adversarial_loss(terms)
    total = None
    for i in range(m):
        own = -_log_one_minus(prob_table[i][i]).mean()
        others = [prob_table[i][j] for j in range(m) if j != i]
        other = -_log_prob(others[0]).mean()
        for p in others[1:]:
            other = other + (-_log_prob(p).mean())
        term = own + other * (1.0 / len(others))
        total = term if total is None else total + term
    return total * (1.0 / m)
