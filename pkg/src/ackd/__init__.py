"""Adversarial collaborative knowledge distillation, desk scale.

Train a branched student against a frozen teacher: auxiliary learners
attached to the backbone's down-sampling layers collaborate through
attention-fused logits, diverge through per-learner feature discriminators,
and hand their knowledge to the target learner by self-distillation. At
inference the branches are stripped, leaving the bare backbone.
"""

from ._kernels import BACKEND as KERNEL_BACKEND

__version__ = "0.1.0"

__all__ = ["KERNEL_BACKEND", "__version__"]
