"""Central finite-difference oracle for the reverse-mode gradients.

The checker perturbs every parameter element by +/-h (64-bit), recomputes
the scalar objective without a tape, and compares the resulting slope
against the analytic gradient from one backward pass. Relative error uses
the denominator max(|analytic|, |numeric|, 1e-8).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tape, Tensor


@dataclass
class GradCheckReport:
    """Per-parameter maximum relative error between analytic and FD slopes."""

    per_param: dict[str, float]

    @property
    def max_rel_err(self) -> float:
        return max(self.per_param.values()) if self.per_param else 0.0

    def ok(self, tol: float = 1e-4) -> bool:
        return self.max_rel_err <= tol

    def worst(self) -> tuple[str, float]:
        name = max(self.per_param, key=self.per_param.get)
        return name, self.per_param[name]


def finite_diff_check(
    f,
    named_params: list[tuple[str, Tensor]],
    h: float = 1e-4,
    corrupt: str | None = None,
) -> GradCheckReport:
    """Compare backward() gradients of ``f()`` against central differences.

    Args:
        f: nullary callable returning the scalar loss tensor; it must close
            over ``named_params`` and be deterministic.
        named_params: (name, tensor) pairs; every tensor must be float64 and
            requires_grad so the analytic pass reaches it.
        h: central-difference step.
        corrupt: name of one parameter whose analytic gradient is perturbed
            before comparison (negative-control hook for the CLI tests).

    Raises:
        ValueError: if two probe evaluations of ``f`` disagree (the
            objective is not deterministic) or a parameter is not float64.
    """
    for name, t in named_params:
        if t.data.dtype != np.float64:
            raise ValueError(f"finite_diff_check requires float64 parameters, {name} is {t.data.dtype}")
        t.zero_grad()

    base1 = float(f().data)
    base2 = float(f().data)
    if base1 != base2:
        raise ValueError("objective is not deterministic across probe evaluations")

    with Tape() as tape:
        loss = f()
    tape.backward(loss)

    per_param: dict[str, float] = {}
    for name, t in named_params:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        if corrupt is not None and name == corrupt:
            analytic = analytic + 1.0
        flat = t.data.reshape(-1)
        worst = 0.0
        a_flat = np.asarray(analytic).reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = float(f().data)
            flat[i] = orig - h
            down = float(f().data)
            flat[i] = orig
            numeric = (up - down) / (2.0 * h)
            a = float(a_flat[i])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            if err > worst:
                worst = err
        per_param[name] = worst
        t.zero_grad()
    return GradCheckReport(per_param)
