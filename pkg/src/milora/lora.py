"""Low-rank experts: one (W_A, W_B) pair per linear module of a layer."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .backbone import MODULES, N_MOD, BackboneConfig, ModuleId, module_shape
from .numcore import OMEGA, Parameter, Tensor


@dataclass
class LoraExpert:
    module_id: ModuleId
    A: Parameter
    B: Parameter

    @property
    def rank(self) -> int:
        return self.A.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.A.shape[0], self.B.shape[1]

    @property
    def param_count(self) -> int:
        d1, d2 = self.shape
        return self.rank * (d1 + d2)

    def macs_per_row(self) -> int:
        """Multiply-accumulates for one input row through (x A) B."""
        return self.param_count


def init_expert(module_id: ModuleId, d1: int, d2: int, r: int,
                rng: np.random.Generator, name: str = "") -> LoraExpert:
    """Gaussian W_A with variance 1/r, zero W_B: the adapted model starts as the base model."""
    if r <= 0:
        raise nc.ConfigError(f"LoRA rank must be positive, got {r}")
    if 2 * r > min(d1, d2):
        raise nc.ConfigError(f"rank {r} too large for a {d1}x{d2} module (need r <= min/2)")
    A = Parameter(rng.normal(0.0, r ** -0.5, (d1, r)), group=OMEGA, name=f"{name}.A")
    B = Parameter(np.zeros((r, d2)), group=OMEGA, name=f"{name}.B")
    return LoraExpert(ModuleId(module_id), A, B)


class LayerExpertSet(list):
    """Exactly one expert per ModuleId, indexed by the ModuleId value."""

    @classmethod
    def create(cls, cfg: BackboneConfig, layer: int, r: int, rng: np.random.Generator) -> LayerExpertSet:
        out = cls()
        for m in MODULES:
            d1, d2 = module_shape(cfg, m)
            out.append(init_expert(m, d1, d2, r, rng, name=f"lora.{layer}.{m.name}"))
        return out

    def parameters(self) -> list[Parameter]:
        return [p for e in self for p in (e.A, e.B)]


def lora_forward(x, W, b, expert: LoraExpert, gate=1.0):
    """``x W + gate * (x W_A) W_B + b``.

    ``gate`` may be a python scalar or a tensor broadcastable against the
    output (per-example gates in a batch). A scalar gate of 0 skips the
    low-rank path entirely.
    """
    x = nc.as_tensor(x)
    if x.shape[-1] != W.shape[0] or W.shape[0] != expert.shape[0] or W.shape[1] != expert.shape[1]:
        raise nc.DimensionError(
            f"LoRA shapes disagree: x {x.shape}, W {W.shape}, expert {expert.shape}")
    out = x @ W
    if not (isinstance(gate, (int, float)) and gate == 0):
        out = out + ((x @ expert.A) @ expert.B) * gate
    if b is not None:
        out = out + b
    return out


def total_lora_params(experts: list[LayerExpertSet]) -> int:
    return sum(e.param_count for layer in experts for e in layer)


def activated_param_count(decision, experts: list[LayerExpertSet], router_params: int = 0) -> int:
    """Parameters touched by one request: the selected experts plus the routers."""
    total = router_params
    for l, entry in enumerate(decision.layers):
        for m in entry.indices:
            total += experts[l][m].param_count
    return total


__all__ = ["LoraExpert", "LayerExpertSet", "init_expert", "lora_forward",
           "activated_param_count", "total_lora_params", "N_MOD"]
