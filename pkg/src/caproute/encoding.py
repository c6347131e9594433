"""Feature encoding: visual projection, question regulation, knowledge projection.

The raw synthetic features of an instance are projected into the shared
capsule dimension d by three learnable maps. Question columns are scaled
by a softmax attention over words so that informative words dominate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass
class EncoderParams:
    W_proj: Tensor  # d x d_v
    W_Qhat: Tensor  # 1 x d
    W_k: Tensor  # d x d_k


@dataclass
class EncodedInstance:
    """Projected per-instance inputs consumed by the routing network."""

    V: Tensor  # d x N visual capsules
    Q: Tensor  # d x L regulated question words
    K: Tensor  # d x K projected knowledge facts
    labels: np.ndarray  # soft answer targets, length A
    rule: str
    seed: int


def project_features(F: Tensor, W_proj: Tensor) -> Tensor:
    """V = W_proj @ F, mapping raw d_v-dim region features to d-dim capsules."""
    return ad.matmul(W_proj, F)


def regulate_question(Qhat: Tensor, W_Qhat: Tensor) -> Tensor:
    """Scale each word column by its softmax attention weight.

    Q = Qhat @ diag(softmax(W_Qhat @ Qhat)), with the softmax running over
    the L word logits.
    """
    logits = ad.vec(ad.matmul(W_Qhat, Qhat))
    attention = ad.softmax(logits, axis=0)
    return ad.diag_scale_cols(Qhat, attention)


def project_knowledge(K_raw: Tensor, W_k: Tensor) -> Tensor:
    """K = W_k @ K_raw, bridging d_k-dim fact vectors into capsule space."""
    return ad.matmul(W_k, K_raw)


def encode_instance(instance, enc: EncoderParams, dtype=np.float32) -> EncodedInstance:
    """Project one raw instance with the current encoder parameters."""
    F = Tensor(np.asarray(instance.F, dtype=dtype))
    Qhat = Tensor(np.asarray(instance.Qhat, dtype=dtype))
    Kraw = Tensor(np.asarray(instance.Kraw, dtype=dtype))
    return EncodedInstance(
        V=project_features(F, enc.W_proj),
        Q=regulate_question(Qhat, enc.W_Qhat),
        K=project_knowledge(Kraw, enc.W_k),
        labels=np.asarray(instance.labels, dtype=dtype),
        rule=instance.rule,
        seed=instance.seed,
    )
