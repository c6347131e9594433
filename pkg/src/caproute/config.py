"""Run configuration: dimensions, task counts, training knobs, ablations.

Config files are JSON with a flat key set matching the RunConfig field
names (ablation fields carry an ``ablation_`` prefix). Unknown keys are
rejected. Environment variables are never consulted.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields

MODULE_IDS = ("R1", "R2", "R3", "R4", "R5")
ROUTER_MODES = ("learned", "random", "none")


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


@dataclass
class AblationConfig:
    """Switchboard for the mechanism-removal variants."""

    disabled_modules: tuple[str, ...] = ()
    router_mode: str = "learned"
    agreements_enabled: bool = True
    memory_enabled: bool = True

    def is_default(self) -> bool:
        return (
            not self.disabled_modules
            and self.router_mode == "learned"
            and self.agreements_enabled
            and self.memory_enabled
        )

    def to_dict(self) -> dict:
        return {
            "disabled_modules": list(self.disabled_modules),
            "router_mode": self.router_mode,
            "agreements_enabled": self.agreements_enabled,
            "memory_enabled": self.memory_enabled,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AblationConfig":
        return cls(
            disabled_modules=tuple(d.get("disabled_modules", ())),
            router_mode=d.get("router_mode", "learned"),
            agreements_enabled=bool(d.get("agreements_enabled", True)),
            memory_enabled=bool(d.get("memory_enabled", True)),
        )


@dataclass
class RunConfig:
    # feature dimensions
    d_v: int = 64
    d: int = 32
    d_k: int = 24
    N: int = 12
    L: int = 6
    K: int = 8
    A: int = 16
    n_tags: int = 10
    with_knowledge: bool = True
    T: int = 2
    # synthetic task
    train: int = 2000
    val: int = 400
    test: int = 400
    rule_mix: tuple[float, float, float] = (1 / 3, 1 / 3, 1 / 3)
    noise: float = 0.5
    data_seed: int = 7
    # training
    batch: int = 16
    epochs: int = 18
    seed: int = 1
    lr_scale: float = 40.0
    lr_warmup_step: float = 2.5e-5
    lr_cap: float = 1e-4
    lr_decay_start: int = 16
    lr_decay_every: int = 2
    lr_decay_factor: float = 0.25
    lr_floor: float = 2.5e-5
    ablation: AblationConfig = field(default_factory=AblationConfig)

    def active_modules(self) -> tuple[str, ...]:
        base = MODULE_IDS if self.with_knowledge else MODULE_IDS[:4]
        return tuple(m for m in base if m not in self.ablation.disabled_modules)

    @property
    def M(self) -> int:
        return len(self.active_modules())

    def validate(self) -> None:
        for name in ("d_v", "d", "d_k", "N", "L", "K", "A", "n_tags", "T", "batch"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("train", "val", "test", "epochs"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.A < self.n_tags:
            raise ConfigError(f"answer count A={self.A} smaller than tag vocabulary n_tags={self.n_tags}")
        if self.d < 3 + self.n_tags:
            raise ConfigError(
                f"question dimension d={self.d} too small to reserve 3 rule + {self.n_tags} tag directions"
            )
        if self.n_tags < self.K:
            raise ConfigError(f"n_tags={self.n_tags} must cover K={self.K} distinct fact keys")
        if self.N < 4:
            raise ConfigError(f"N={self.N} too small for the contextual rule (need >= 4 capsules)")
        if self.L < 2:
            raise ConfigError(f"L={self.L} too small (rule word + tag word)")
        if len(self.rule_mix) != 3 or any(p < 0 for p in self.rule_mix):
            raise ConfigError("rule_mix must be three non-negative proportions")
        if abs(sum(self.rule_mix) - 1.0) > 1e-9:
            raise ConfigError(f"rule_mix must sum to 1, got {sum(self.rule_mix)}")
        if self.ablation.router_mode not in ROUTER_MODES:
            raise ConfigError(f"router_mode must be one of {ROUTER_MODES}")
        bad = [m for m in self.ablation.disabled_modules if m not in MODULE_IDS]
        if bad:
            raise ConfigError(f"unknown module ids in disabled_modules: {bad}")
        if not self.with_knowledge and "R5" in self.ablation.disabled_modules:
            raise ConfigError("R5 cannot be toggled while with_knowledge is false (it is already absent)")
        if not self.active_modules():
            raise ConfigError("at least one specialized module must stay enabled")

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            if f.name == "ablation":
                continue
            v = getattr(self, f.name)
            out[f.name] = list(v) if isinstance(v, tuple) else v
        ab = self.ablation.to_dict()
        out["ablation_disabled_modules"] = ab["disabled_modules"]
        out["ablation_router_mode"] = ab["router_mode"]
        out["ablation_agreements_enabled"] = ab["agreements_enabled"]
        out["ablation_memory_enabled"] = ab["memory_enabled"]
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)} - {"ablation"}
        cfg = cls()
        ab = {}
        for key, value in raw.items():
            if key.startswith("ablation_"):
                ab[key[len("ablation_"):]] = value
            elif key in known:
                if key == "rule_mix":
                    value = tuple(float(v) for v in value)
                setattr(cfg, key, value)
            else:
                raise ConfigError(f"unknown config key: {key}")
        cfg.ablation = AblationConfig.from_dict(ab)
        return cfg


def load_config(path) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    cfg = RunConfig.from_dict(raw)
    cfg.validate()
    return cfg


def tiny_config() -> RunConfig:
    """Small 64-bit-friendly configuration used by the gradient suite."""
    return RunConfig(
        d_v=12,
        d=8,
        d_k=6,
        N=5,
        L=4,
        K=3,
        A=6,
        n_tags=4,
        T=2,
        train=8,
        val=4,
        test=4,
        batch=4,
        epochs=1,
    )


def parse_ablation_spec(spec: str) -> AblationConfig:
    """Parse a CLI ablation spec like ``router=random,drop=R5,memory=off``."""
    ab = AblationConfig()
    if not spec:
        return ab
    disabled: tuple[str, ...] = ()
    router = "learned"
    agreements = True
    memory = True
    for part in spec.split(","):
        part = part.strip()
        if not part:
            continue
        if "=" not in part:
            raise ConfigError(f"ablation spec item '{part}' is not key=value")
        key, value = part.split("=", 1)
        key, value = key.strip(), value.strip()
        if key == "router":
            if value not in ROUTER_MODES:
                raise ConfigError(f"router must be one of {ROUTER_MODES}, got '{value}'")
            router = value
        elif key == "drop":
            disabled = tuple(v for v in value.split("+") if v)
        elif key == "agreements":
            agreements = _on_off(key, value)
        elif key == "memory":
            memory = _on_off(key, value)
        else:
            raise ConfigError(f"unknown ablation key '{key}'")
    return AblationConfig(
        disabled_modules=disabled,
        router_mode=router,
        agreements_enabled=agreements,
        memory_enabled=memory,
    )


def _on_off(key: str, value: str) -> bool:
    if value in ("on", "true", "1"):
        return True
    if value in ("off", "false", "0"):
        return False
    raise ConfigError(f"{key} must be on/off, got '{value}'")
