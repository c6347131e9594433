"""One routing-layer step: gates, dispatch/aggregate, agreements, memory.

The step runs three phases in order, with gates computed from the
pre-update capsule matrices:

1. each module emits M sigmoid gates from its pooled capsules and its
   modulated output is scattered to every module, scaled by those gates;
2. agreement logits accumulate capsule/memory activation rates, and the
   overlying capsules H couple the modules with softmax weights;
3. a two-gate memory update merges H into the persistent capsules U.

Parameters are shared across iterations: one LayerParams serves all T.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import AblationConfig
from .modules import ModuleParams, dispatch


@dataclass
class MemoryParams:
    W_z: Tensor  # candidate from retained memory
    W_h: Tensor  # candidate from overlying capsules
    W_u: Tensor  # update gate
    W_r: Tensor  # reset gate


@dataclass
class LayerParams:
    routers: dict[str, Tensor]  # module id -> M x d gate matrix
    mem: MemoryParams


@dataclass
class LayerState:
    """Per-instance routing state carried across iterations."""

    V: list[Tensor]  # per-module capsule inputs, each d x N
    U: Tensor  # d x N memory
    b: list[Tensor]  # per-module agreement logits, each length N
    H: Tensor  # d x N overlying capsules


@dataclass
class StepTrace:
    """Float snapshots of one iteration (detached from the tape)."""

    G: np.ndarray  # M x M, row = source module, column = destination
    c: np.ndarray  # M x N coupling coefficients
    b: np.ndarray  # M x N agreement logits


def route_gates(V_m: Tensor, W_g: Tensor) -> Tensor:
    """M sigmoid gates from the pooled capsule state of one module."""
    return ad.sigmoid(ad.matvec(W_g, ad.avg_pool_cols(V_m)))


def _gate_vectors(state, module_ids, layer, ablation, gate_rng, dtype):
    """One gate vector per source module, honouring the router ablation."""
    m = len(module_ids)
    if ablation.router_mode == "learned":
        return [route_gates(state.V[i], layer.routers[module_ids[i]]) for i in range(m)]
    if ablation.router_mode == "random":
        return [Tensor(gate_rng.uniform(size=m).astype(dtype)) for _ in range(m)]
    if ablation.router_mode == "none":
        return [Tensor(np.ones(m, dtype=dtype)) for _ in range(m)]
    raise ValueError(f"unknown router mode '{ablation.router_mode}'")


def dispatch_and_aggregate(gates: list[Tensor], outputs: list[Tensor]) -> list[Tensor]:
    """New per-module inputs: V_m = sum over sources of g[src->m] * R_src(V_src)."""
    m = len(outputs)
    new_v = []
    for dest in range(m):
        total = None
        for src in range(m):
            term = ad.smul(outputs[src], ad.pick(gates[src], dest))
            total = term if total is None else ad.add(total, term)
        new_v.append(total)
    return new_v


def gating_agreements(V_list: list[Tensor], U_prev: Tensor, b_prev: list[Tensor]):
    """Accumulate agreement logits and couple modules into overlying capsules.

    b_m grows by the per-capsule activation rate of V_m (.) U_prev, so it is
    non-decreasing across iterations; c_m = softmax(b_m) over capsules.
    """
    b_new = [ad.add(b_prev[i], ad.squash_rate(ad.mul(V_list[i], U_prev))) for i in range(len(V_list))]
    couplings = [ad.softmax(b, axis=0) for b in b_new]
    h = None
    for v, c in zip(V_list, couplings):
        term = ad.diag_scale_cols(v, c)
        h = term if h is None else ad.add(h, term)
    return h, b_new, couplings


def uniform_coupling(V_list: list[Tensor], b_prev: list[Tensor]):
    """Agreements ablation: plain average of the module capsules."""
    h = None
    for v in V_list:
        h = v if h is None else ad.add(h, v)
    h = ad.affine(h, 1.0 / len(V_list))
    n = V_list[0].shape[1]
    uniform = [np.full(n, 1.0 / n, dtype=V_list[0].data.dtype) for _ in V_list]
    return h, b_prev, uniform


def memory_reactivate(H: Tensor, U_prev: Tensor, mem: MemoryParams) -> Tensor:
    """Two-gate update of the persistent capsules from the overlying ones."""
    delta = ad.sub(H, U_prev)
    z_u = ad.sigmoid(ad.matmul(mem.W_u, delta))
    z_r = ad.sigmoid(ad.matmul(mem.W_r, delta))
    candidate = ad.add(ad.matmul(mem.W_z, ad.mul(z_r, U_prev)), ad.matmul(mem.W_h, H))
    keep = ad.affine(z_u, -1.0, 1.0)
    return ad.add(ad.mul(keep, U_prev), ad.mul(z_u, candidate))


def super_layer_step(
    state: LayerState,
    Q: Tensor,
    K: Tensor | None,
    module_ids: tuple[str, ...],
    modules: ModuleParams,
    layer: LayerParams,
    ablation: AblationConfig,
    gate_rng=None,
) -> tuple[LayerState, StepTrace]:
    """Advance the routing state by one iteration and snapshot the gates."""
    m = len(module_ids)
    dtype = state.U.data.dtype
    gates = _gate_vectors(state, module_ids, layer, ablation, gate_rng, dtype)
    outputs = [dispatch(int(mid[1]), state.V[i], Q, K, modules) for i, mid in enumerate(module_ids)]
    new_v = dispatch_and_aggregate(gates, outputs)
    if ablation.agreements_enabled:
        h, b_new, couplings = gating_agreements(new_v, state.U, state.b)
    else:
        h, b_new, couplings = uniform_coupling(new_v, state.b)
    if ablation.memory_enabled:
        u_new = memory_reactivate(h, state.U, layer.mem)
    else:
        u_new = h
    trace = StepTrace(
        G=np.stack([g.data.astype(np.float64, copy=True) for g in gates]),
        c=np.stack([np.asarray(c.data if isinstance(c, Tensor) else c, dtype=np.float64) for c in couplings]),
        b=np.stack([b.data.astype(np.float64, copy=True) for b in b_new]),
    )
    return LayerState(V=new_v, U=u_new, b=b_new, H=h), trace
