"""Full network: iterated routing layer, answer head, loss, route traces.

The network projects an instance, initializes the memory capsules from the
pooled question, iterates the shared routing layer T times, and reads the
answer distribution from the pooled final memory merged with the pooled
question. Gate matrices of every iteration are concatenated into a path
vector characterizing the instance's route.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import AblationConfig, RunConfig
from .encoding import EncodedInstance, EncoderParams, encode_instance
from .layer import LayerParams, LayerState, MemoryParams, StepTrace, super_layer_step
from .modules import (
    FocalParams,
    GlobalModParams,
    KnowledgeModParams,
    LocalModParams,
    ModuleParams,
)


@dataclass
class HeadParams:
    W_y: Tensor  # A x d answer readout
    W_u: Tensor  # d x d memory merge (distinct from the memory gate W_u)
    W_q: Tensor  # d x d question merge


@dataclass
class RouteTrace:
    """Per-iteration routing snapshots plus the concatenated path vector."""

    iterations: list[StepTrace]
    path_vector: np.ndarray  # length M*M*T


class ModelParams:
    """Every learnable tensor, keyed by a canonical dotted name."""

    def __init__(self, config: RunConfig, seed: int = 0, dtype=np.float32):
        config.validate()
        self.config = config
        self.dtype = dtype
        self.module_ids = config.active_modules()
        self._names: list[str] = []
        self._tensors: dict[str, Tensor] = {}
        rng = np.random.default_rng([seed, 0])

        def weight(name, rows, cols):
            data = rng.standard_normal((rows, cols)) / np.sqrt(cols)
            return self._register(name, data)

        def bias(name, size):
            return self._register(name, np.zeros(size))

        d, d_v, d_k, n, a = config.d, config.d_v, config.d_k, config.N, config.A
        m = len(self.module_ids)

        self.enc = EncoderParams(
            W_proj=weight("enc.W_proj", d, d_v),
            W_Qhat=weight("enc.W_Qhat", 1, d),
            W_k=weight("enc.W_k", d, d_k),
        )
        r1 = r3 = r4 = r5 = None
        if "R1" in self.module_ids:
            r1 = FocalParams(
                W_1=weight("R1.W_1", d, d),
                W_2=weight("R1.W_2", d, d),
                W_3=weight("R1.W_3", n, n),
            )
        if "R3" in self.module_ids:
            r3 = GlobalModParams(
                W_a=weight("R3.W_a", d, d),
                W_eta=weight("R3.W_eta", d, d),
                b_a=bias("R3.b_a", d),
                b_eta=bias("R3.b_eta", d),
            )
        if "R4" in self.module_ids:
            r4 = LocalModParams(
                W_4=weight("R4.W_4", d, d),
                W_5=weight("R4.W_5", d, d),
                W_a_p=weight("R4.W_a_p", d, d),
                W_eta_p=weight("R4.W_eta_p", d, d),
                b_a_p=bias("R4.b_a_p", d),
                b_eta_p=bias("R4.b_eta_p", d),
            )
        if "R5" in self.module_ids:
            r5 = KnowledgeModParams(
                W_6=weight("R5.W_6", d, d),
                W_7=weight("R5.W_7", d, d),
                W_8=weight("R5.W_8", d, d),
                W_9=weight("R5.W_9", d, d),
            )
        self.modules = ModuleParams(R1=r1, R3=r3, R4=r4, R5=r5)

        routers = {}
        for mid in self.module_ids:
            routers[mid] = weight(f"layer.W_g.{mid[1]}", m, d)
        # candidate path starts near U* ~= H so the memory update begins as
        # a benign moving average instead of scrambling the capsule content
        self.layer = LayerParams(
            routers=routers,
            mem=MemoryParams(
                W_z=self._register("mem.W_z", 0.1 * rng.standard_normal((d, d)) / np.sqrt(d)),
                W_h=self._register("mem.W_h", np.eye(d) + 0.1 * rng.standard_normal((d, d)) / np.sqrt(d)),
                W_u=weight("mem.W_u", d, d),
                W_r=weight("mem.W_r", d, d),
            ),
        )
        self.head = HeadParams(
            W_y=weight("head.W_y", a, d),
            W_u=weight("head.W_u", d, d),
            W_q=weight("head.W_q", d, d),
        )

    def _register(self, name: str, data: np.ndarray) -> Tensor:
        t = Tensor(data.astype(self.dtype), requires_grad=True)
        self._names.append(name)
        self._tensors[name] = t
        return t

    @property
    def M(self) -> int:
        return len(self.module_ids)

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        return [(name, self._tensors[name]) for name in self._names]

    def tensor(self, name: str) -> Tensor:
        return self._tensors[name]

    def zero_grads(self) -> None:
        for _, t in self.named_tensors():
            t.zero_grad()

    def check_finite(self) -> None:
        for name, t in self.named_tensors():
            if not np.isfinite(t.data).all():
                raise ad.NumericalError(f"parameter {name}", where="update")


def init_model(config: RunConfig, seed: int = 0, dtype=np.float32) -> ModelParams:
    return ModelParams(config, seed=seed, dtype=dtype)


def run_network(
    enc: EncodedInstance,
    model: ModelParams,
    T: int,
    ablation: AblationConfig | None = None,
    gate_rng=None,
) -> tuple[Tensor, RouteTrace]:
    """Iterate the shared routing layer T times from a projected instance.

    The memory starts as the pooled question broadcast over capsule slots,
    agreement logits start at zero, and every module starts from the same
    projected capsules. Returns the final memory and the route trace.
    """
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    ablation = ablation if ablation is not None else AblationConfig()
    if ablation.router_mode == "random" and gate_rng is None:
        gate_rng = np.random.default_rng(np.random.SeedSequence(enc.seed, spawn_key=(777,)))
    d, n = enc.V.shape
    m = model.M
    dtype = enc.V.data.dtype
    state = LayerState(
        V=[enc.V] * m,
        U=ad.broadcast_cols(ad.avg_pool_cols(enc.Q), n),
        b=[Tensor(np.zeros(n, dtype=dtype)) for _ in range(m)],
        H=Tensor(np.zeros((d, n), dtype=dtype)),
    )
    steps: list[StepTrace] = []
    knowledge = enc.K if model.modules.R5 is not None else None
    for _ in range(T):
        state, step = super_layer_step(
            state, enc.Q, knowledge, model.module_ids, model.modules, model.layer, ablation, gate_rng
        )
        steps.append(step)
    path_vector = np.concatenate([s.G.reshape(-1) for s in steps])
    return state.U, RouteTrace(iterations=steps, path_vector=path_vector)


def predict_logits(U_final: Tensor, Q: Tensor, head: HeadParams) -> Tensor:
    """Answer logits from pooled memory merged with the pooled question."""
    merged = ad.add(
        ad.matvec(head.W_u, ad.avg_pool_cols(U_final)),
        ad.matvec(head.W_q, ad.avg_pool_cols(Q)),
    )
    return ad.matvec(head.W_y, merged)


def predict(U_final: Tensor, Q: Tensor, head: HeadParams) -> Tensor:
    """Per-answer probabilities in (0, 1)."""
    return ad.sigmoid(predict_logits(U_final, Q, head))


def bce_loss(logits: Tensor, labels) -> Tensor:
    """Mean binary cross-entropy over answers, from pre-sigmoid logits.

    Numerically equals mean(-(l*log y + (1-l)*log(1-y))) with y = sigmoid
    of the logits, but is evaluated through softplus so saturated logits
    stay finite.
    """
    lab = np.asarray(labels, dtype=logits.data.dtype)
    if lab.shape != logits.shape:
        raise ad.ShapeError(f"bce_loss: labels {lab.shape} vs logits {logits.shape}")
    if (lab < 0).any() or (lab > 1).any():
        raise ValueError("bce_loss: labels must lie in [0, 1]")
    pos = ad.mul(Tensor(lab), ad.softplus(ad.affine(logits, -1.0)))
    neg = ad.mul(Tensor(1.0 - lab), ad.softplus(logits))
    return ad.mean_all(ad.add(pos, neg))


def vqa_accuracy(human_count: int) -> float:
    """min(1, #agreeing humans / 3), the standard soft VQA score."""
    if human_count < 0:
        raise ValueError(f"human_count must be >= 0, got {human_count}")
    return min(1.0, human_count / 3.0)


def discretize_paths(trace: RouteTrace, threshold: float = 0.6) -> np.ndarray:
    """Boolean T x M x M mask of gates strictly above the threshold."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must lie in [0, 1], got {threshold}")
    return np.stack([s.G > threshold for s in trace.iterations])


@dataclass
class ForwardResult:
    loss: Tensor
    logits: np.ndarray
    probs: np.ndarray
    trace: RouteTrace
    rule: str
    label: int


def forward_instance(
    instance,
    model: ModelParams,
    T: int,
    ablation: AblationConfig | None = None,
) -> ForwardResult:
    """Encode, route, and score one raw instance under the current params."""
    enc = encode_instance(instance, model.enc, dtype=model.dtype)
    u_final, trace = run_network(enc, model, T, ablation)
    logits = predict_logits(u_final, enc.Q, model.head)
    loss = bce_loss(logits, enc.labels)
    logits_np = logits.data.astype(np.float64, copy=True)
    with np.errstate(over="ignore"):
        probs = 1.0 / (1.0 + np.exp(-logits_np))
    return ForwardResult(
        loss=loss,
        logits=logits_np,
        probs=probs,
        trace=trace,
        rule=instance.rule,
        label=int(np.argmax(np.asarray(instance.labels))),
    )
