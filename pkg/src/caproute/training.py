"""Training loop: Adam with warmup/decay schedule, metrics, ablation runs.

One optimizer step processes a shuffled mini-batch on a single tape; the
batch-mean loss is backpropagated and every parameter is updated with the
bias-corrected Adam rule. Validation runs after each epoch and the best
checkpoint (by validation accuracy, ties broken by lower loss) is kept.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import NumericalError, Tape
from .checkpoint import save_checkpoint
from .config import AblationConfig, RunConfig
from .network import ModelParams, forward_instance, init_model
from .synthetic import Instance


class TrainingAborted(RuntimeError):
    """Raised when a step produced non-finite values; best checkpoint kept."""


def lr_schedule(
    epoch: int,
    warmup_step: float = 2.5e-5,
    cap: float = 1e-4,
    decay_start: int = 16,
    decay_every: int = 2,
    decay_factor: float = 0.25,
    floor: float = 2.5e-5,
) -> float:
    """Warmup-then-step-decay schedule over 1-based epochs.

    Epochs 1..decay_start ramp as min(warmup_step * epoch, cap); afterwards
    the rate is multiplied by decay_factor once per decay_every epochs,
    never dropping below the floor.
    """
    if epoch < 1:
        raise ValueError(f"epoch must be >= 1, got {epoch}")
    if epoch <= decay_start:
        return min(warmup_step * epoch, cap)
    steps = (epoch - decay_start - 1) // decay_every + 1
    return max(floor, cap * decay_factor**steps)


def config_lr(config: RunConfig, epoch: int) -> float:
    return config.lr_scale * lr_schedule(
        epoch,
        warmup_step=config.lr_warmup_step,
        cap=config.lr_cap,
        decay_start=config.lr_decay_start,
        decay_every=config.lr_decay_every,
        decay_factor=config.lr_decay_factor,
        floor=config.lr_floor,
    )


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    step: int = 0
    moments: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)


def adam_step(model: ModelParams, state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update over every parameter with a gradient."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.step
    bc2 = 1.0 - b2**state.step
    for name, t in model.named_tensors():
        g = t.grad
        if g is None:
            g = np.zeros_like(t.data)
        elif not np.isfinite(g).all():
            raise NumericalError(f"gradient of {name}", where="update")
        if name not in state.moments:
            state.moments[name] = (np.zeros_like(t.data), np.zeros_like(t.data))
        m, v = state.moments[name]
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.moments[name] = (m, v)
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        t.data = t.data - t.data.dtype.type(lr) * update.astype(t.data.dtype)
        t.zero_grad()
    model.check_finite()


def evaluate(
    instances: list[Instance],
    model: ModelParams,
    T: int,
    ablation: AblationConfig | None = None,
) -> dict:
    """Mean loss plus overall and per-rule exact-match accuracy."""
    total_loss = 0.0
    hits = 0
    per_rule_hits: dict[str, list[int]] = {}
    for inst in instances:
        res = forward_instance(inst, model, T, ablation)
        total_loss += float(res.loss.data)
        hit = int(np.argmax(res.probs)) == res.label
        hits += hit
        per_rule_hits.setdefault(res.rule, []).append(int(hit))
    n = max(len(instances), 1)
    return {
        "overall": hits / n,
        "per_rule": {rule: sum(h) / len(h) for rule, h in sorted(per_rule_hits.items())},
        "loss": total_loss / n,
    }


@dataclass
class TrainResult:
    metrics: list[dict]
    best_epoch: int
    best_val_acc: float
    model: ModelParams
    checkpoint_prefix: str | None


def train(
    train_set: list[Instance],
    val_set: list[Instance],
    config: RunConfig,
    ablation: AblationConfig | None = None,
    out_dir: str | None = None,
) -> TrainResult:
    """Run the epoch loop and keep the best-validation parameter snapshot.

    Writes ``metrics.jsonl`` (one JSON object per epoch) and the best
    checkpoint under ``out_dir`` when given. A non-finite loss aborts the
    run, retaining the last good checkpoint, and raises TrainingAborted.
    """
    if ablation is not None:
        config = replace(config, ablation=ablation)
    ablation = config.ablation
    config.validate()
    model = init_model(config, seed=config.seed, dtype=np.float32)
    state = AdamState()
    metrics: list[dict] = []

    best_snapshot = {name: t.data.copy() for name, t in model.named_tensors()}
    best_key = (-1.0, 0.0)  # (val acc, -val loss)
    best_epoch = 0

    def finish(abort_reason: str | None = None):
        for name, t in model.named_tensors():
            t.data = best_snapshot[name]
        prefix = None
        if out_dir is not None:
            os.makedirs(out_dir, exist_ok=True)
            with open(os.path.join(out_dir, "metrics.jsonl"), "w", encoding="utf-8") as fh:
                for entry in metrics:
                    fh.write(json.dumps(entry) + "\n")
            prefix = os.path.join(out_dir, "checkpoint")
            save_checkpoint(prefix, model, ablation=ablation, extra={"best_epoch": best_epoch})
        if abort_reason is not None:
            raise TrainingAborted(abort_reason)
        return TrainResult(
            metrics=metrics,
            best_epoch=best_epoch,
            best_val_acc=max(best_key[0], 0.0),
            model=model,
            checkpoint_prefix=prefix,
        )

    try:
        for epoch in range(1, config.epochs + 1):
            lr = config_lr(config, epoch)
            order = np.random.default_rng([config.seed, 2, epoch]).permutation(len(train_set))
            epoch_loss = 0.0
            for start in range(0, len(order), config.batch):
                batch = [train_set[i] for i in order[start : start + config.batch]]
                with Tape() as tape:
                    total = None
                    for inst in batch:
                        term = forward_instance(inst, model, config.T, ablation).loss
                        total = term if total is None else ad.add(total, term)
                    loss = ad.affine(total, 1.0 / len(batch))
                tape.backward(loss)
                adam_step(model, state, lr)
                epoch_loss += float(loss.data) * len(batch)
            val = evaluate(val_set, model, config.T, ablation)
            entry = {
                "epoch": epoch,
                "lr": lr,
                "train_loss": epoch_loss / max(len(train_set), 1),
                "val_loss": val["loss"],
                "val_acc": val["overall"],
                "per_rule_acc": val["per_rule"],
            }
            metrics.append(entry)
            key = (val["overall"], -val["loss"])
            if key > best_key:
                best_key = key
                best_epoch = epoch
                best_snapshot = {name: t.data.copy() for name, t in model.named_tensors()}
    except NumericalError as exc:
        return finish(abort_reason=str(exc))
    return finish()
