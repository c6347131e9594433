"""The five specialized capsule modulators and their dispatch.

Every module maps the d x N capsule matrix to a d x N matrix and is
column-permutation equivariant: reordering capsules reorders outputs.
Auxiliary inputs differ per module (none / question words / knowledge).
"""

from __future__ import annotations

from dataclasses import dataclass

from . import autodiff as ad
from .autodiff import Tensor


@dataclass
class FocalParams:
    W_1: Tensor  # d x d
    W_2: Tensor  # d x d
    W_3: Tensor  # N x N, applied through its exchangeable component


@dataclass
class GlobalModParams:
    W_a: Tensor  # d x d
    W_eta: Tensor  # d x d
    b_a: Tensor  # d
    b_eta: Tensor  # d


@dataclass
class LocalModParams:
    W_4: Tensor  # d x d
    W_5: Tensor  # d x d
    W_a_p: Tensor  # d x d
    W_eta_p: Tensor  # d x d
    b_a_p: Tensor  # d
    b_eta_p: Tensor  # d


@dataclass
class KnowledgeModParams:
    W_6: Tensor
    W_7: Tensor
    W_8: Tensor
    W_9: Tensor


@dataclass
class ModuleParams:
    R1: FocalParams
    R3: GlobalModParams
    R4: LocalModParams
    R5: KnowledgeModParams | None  # absent when knowledge mode is off


def focal_context(V: Tensor, p: FocalParams) -> Tensor:
    """Context-aware enhancement from pairwise capsule comparability.

    D = (W1 V)^T (W2 V) scores capsule relevance; each capsule aggregates
    the gate-scaled capsules weighted by its softmax relevance row:
    out = (V diag(g)) A^T with A = row-softmax(D) and
    g = sigmoid applied to the exchangeable action of W3 on D's column sums.
    """
    comparability = ad.matmul(ad.transpose(ad.matmul(p.W_1, V)), ad.matmul(p.W_2, V))
    attention = ad.softmax(comparability, axis=1)
    gates = ad.sigmoid(ad.exchangeable_matvec(p.W_3, ad.col_sum(comparability)))
    return ad.matmul(ad.diag_scale_cols(V, gates), ad.transpose(attention))


def identity_retain(V: Tensor) -> Tensor:
    """Pass-through branch keeping a short gradient path."""
    return V


def _modulate(V: Tensor, scale: Tensor, shift: Tensor) -> Tensor:
    mu, sigma = ad.column_stats(V)
    normalized = ad.div_cols(ad.sub_cols(V, mu), sigma)
    return ad.add(ad.mul(scale, normalized), shift)


def global_reduction(V: Tensor, Q: Tensor, p: GlobalModParams) -> Tensor:
    """Normalize each capsule and modulate by the pooled question feature."""
    n = V.shape[1]
    pooled = ad.broadcast_cols(ad.avg_pool_cols(Q), n)
    scale = ad.sigmoid(ad.add(ad.matmul(p.W_a, pooled), ad.broadcast_cols(p.b_a, n)))
    shift = ad.sigmoid(ad.add(ad.matmul(p.W_eta, pooled), ad.broadcast_cols(p.b_eta, n)))
    return _modulate(V, scale, shift)


def local_semantic(V: Tensor, Q: Tensor, p: LocalModParams) -> Tensor:
    """Per-capsule modulation from capsule-specific question context.

    Word attention per capsule: softmax over words of (W4 Q)^T (W5 V);
    the attended question context drives the scale/shift signals.
    """
    n = V.shape[1]
    scores = ad.matmul(ad.transpose(ad.matmul(p.W_4, Q)), ad.matmul(p.W_5, V))
    word_attention = ad.softmax(scores, axis=0)
    context = ad.matmul(Q, word_attention)
    scale = ad.sigmoid(ad.add(ad.matmul(p.W_a_p, context), ad.broadcast_cols(p.b_a_p, n)))
    shift = ad.sigmoid(ad.add(ad.matmul(p.W_eta_p, context), ad.broadcast_cols(p.b_eta_p, n)))
    return _modulate(V, scale, shift)


def knowledge_augment(V: Tensor, K: Tensor, p: KnowledgeModParams) -> Tensor:
    """Blend each capsule with its attended knowledge context.

    Fact attention per capsule: softmax over facts of (W6 K)^T (W7 V);
    the gate sigmoid(W8 V - W9 K_v) balances capsule content against the
    attended knowledge column.
    """
    affinity = ad.matmul(ad.transpose(ad.matmul(p.W_6, K)), ad.matmul(p.W_7, V))
    fact_attention = ad.softmax(affinity, axis=0)
    context = ad.matmul(K, fact_attention)
    gate = ad.sigmoid(ad.sub(ad.matmul(p.W_8, V), ad.matmul(p.W_9, context)))
    keep = ad.affine(gate, -1.0, 1.0)
    return ad.add(ad.mul(gate, context), ad.mul(keep, V))


def dispatch(m: int, V: Tensor, Q: Tensor, K: Tensor | None, params: ModuleParams) -> Tensor:
    """Route capsule matrix V through module m (1-based index)."""
    if m == 1:
        return focal_context(V, params.R1)
    if m == 2:
        return identity_retain(V)
    if m == 3:
        return global_reduction(V, Q, params.R3)
    if m == 4:
        return local_semantic(V, Q, params.R4)
    if m == 5:
        if params.R5 is None or K is None:
            raise ValueError("module 5 requires knowledge mode (K and its parameters)")
        return knowledge_augment(V, K, params.R5)
    raise ValueError(f"module index must be in 1..5, got {m}")
