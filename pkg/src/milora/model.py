"""Backbone + per-layer LoRA experts + per-layer routers."""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .backbone import MODULES, N_MOD, Backbone, BackboneConfig, KvCache
from .lora import LayerExpertSet, lora_forward
from .numcore import Parameter, Tensor
from .router import (FixedActivation, GatingMode, LayerRoute, LoraRouter, PoolerKind,
                     RationalActivation, RoutingDecision, fit_gelu_coefficients,
                     gates_from_probs)

ACTIVATIONS = ("rational", "gelu", "relu", "relu_gelu", "gelu_relu")


def stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator per (seed, component name)."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])


@dataclass
class AdapterConfig:
    rank: int = 8
    k: int = 3
    gating: GatingMode = GatingMode.WEIGHTED
    pooler: PoolerKind = PoolerKind.SELF_ATTENTION
    activation: str = "rational"
    rational_m: int = 6
    rational_n: int = 5
    safe_terms: bool = False
    routing: bool = True
    router_init_scale: float = 0.02

    def __post_init__(self):
        self.gating = GatingMode(self.gating)
        self.pooler = PoolerKind(self.pooler)
        if not 1 <= self.k <= N_MOD:
            raise nc.ConfigError(f"k must be in [1, {N_MOD}], got {self.k}")
        if self.activation not in ACTIVATIONS:
            raise nc.ConfigError(f"activation must be one of {ACTIVATIONS}")
        if self.rank <= 0:
            raise nc.ConfigError("rank must be positive")


def _router_activation(cfg: AdapterConfig, layer: int, n_layers: int):
    kind = cfg.activation
    if kind == "rational":
        a, b, _ = fit_gelu_coefficients(cfg.rational_m, cfg.rational_n)
        return RationalActivation(a, b, safe_terms=cfg.safe_terms, name=f"router.{layer}.act")
    if kind in ("relu_gelu", "gelu_relu"):
        shallow, deep = kind.split("_")
        return FixedActivation(shallow if layer < n_layers // 2 else deep)
    return FixedActivation(kind)


class MiLoRAModel:
    def __init__(self, backbone_cfg: BackboneConfig, adapter_cfg: AdapterConfig, seed: int = 0):
        self.cfg = backbone_cfg
        self.acfg = adapter_cfg
        self.seed = seed
        self.backbone = Backbone(backbone_cfg, stream(seed, "backbone"))
        lrng = stream(seed, "lora")
        self.experts = [LayerExpertSet.create(backbone_cfg, l, adapter_cfg.rank, lrng)
                        for l in range(backbone_cfg.n_layers)]
        self.routers: list[LoraRouter] = []
        if adapter_cfg.routing:
            rrng = stream(seed, "router")
            for l in range(backbone_cfg.n_layers):
                self.routers.append(LoraRouter(
                    backbone_cfg.d_model, l, adapter_cfg.pooler,
                    _router_activation(adapter_cfg, l, backbone_cfg.n_layers),
                    rng=rrng, init_scale=adapter_cfg.router_init_scale))

    @property
    def n_layers(self) -> int:
        return self.cfg.n_layers

    @property
    def routing(self) -> bool:
        return bool(self.routers)

    def named_parameters(self) -> list[tuple[str, Parameter]]:
        out = [(f"backbone.{n}", p) for n, p in self.backbone.named_parameters()]
        for l, layer in enumerate(self.experts):
            for e in layer:
                out.append((f"lora.{l}.{e.module_id.name}.A", e.A))
                out.append((f"lora.{l}.{e.module_id.name}.B", e.B))
        for r in self.routers:
            out.append((f"router.{r.layer}.W_r", r.W_r))
            if r.W_sa is not None:
                out.append((f"router.{r.layer}.W_sa", r.W_sa))
            for p in r.activation.parameters():
                out.append((p.name, p))
        return out

    def parameters(self, group: str | None = None, trainable_only: bool = True) -> list[Parameter]:
        ps = [p for _, p in self.named_parameters()]
        if trainable_only:
            ps = [p for p in ps if p.trainable]
        if group is not None:
            ps = [p for p in ps if p.group == group]
        return ps

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    @property
    def router_param_count(self) -> int:
        return sum(r.param_count for r in self.routers)

    # ------------------------------------------------------------ forward

    def forward(self, ids, n_prompt: int | None = None, decision: RoutingDecision | None = None,
                counters=None, per_token: bool = False, cache: KvCache | None = None,
                use_cache: bool = False, adapters: bool = True) -> AdaptedOutput:
        """Adapted forward over ``ids`` (B, T).

        Routing reads the first ``n_prompt`` positions of each layer's input
        (all positions when None). With ``decision`` the routers are skipped
        and the cached selection is applied. ``per_token`` routes from the
        last position only (baseline cost model).
        """
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim == 1:
            ids = ids[None, :]
        if not adapters:
            res = self.backbone.forward(ids, cache=cache, use_cache=use_cache)
            return AdaptedOutput(res.logits, res.hidden, res.cache, [], None)
        hook = _Adapters(self, n_prompt, decision, counters, per_token)
        res = self.backbone.forward(ids, adapter=hook, cache=cache, use_cache=use_cache)
        return AdaptedOutput(res.logits, res.hidden, res.cache, hook.probs, hook.decision())


@dataclass
class AdaptedOutput:
    logits: Tensor
    hidden: list[Tensor]
    cache: KvCache | None
    probs: list[Tensor | None] = field(default_factory=list)
    routing: RoutingDecision | None = None


class _Adapters:
    """Forward hook: routes at each layer entry and applies gated experts."""

    def __init__(self, model: MiLoRAModel, n_prompt, decision, counters, per_token):
        self.model = model
        self.n_prompt = n_prompt
        self.fixed = decision
        self.counters = counters
        self.per_token = per_token
        L = model.n_layers
        self.gates: list[Tensor | None] = [None] * L
        self.masks: list[np.ndarray | None] = [None] * L
        self.probs: list[Tensor | None] = [None] * L

    def begin_layer(self, l: int, H: Tensor) -> None:
        m = self.model
        B = H.shape[0]
        if not m.routing:
            self.masks[l] = np.ones((B, N_MOD), dtype=bool)
            self.gates[l] = Tensor(np.ones((B, N_MOD)))
            return
        if self.fixed is not None and not self.per_token:
            g = np.broadcast_to(self.fixed.gate_vector(l), (B, N_MOD)).copy()
            self.masks[l] = np.zeros((B, N_MOD), dtype=bool)
            self.masks[l][:, list(self.fixed.layers[l].indices)] = True
            self.gates[l] = Tensor(g)
            return
        router = m.routers[l]
        if self.per_token:
            p = router.probs_from_pooled(H[:, -1, :])
        else:
            n_p = H.shape[1] if self.n_prompt is None else self.n_prompt
            p = router.probs(H[:, :n_p, :] if n_p < H.shape[1] else H)
        if self.counters is not None:
            self.counters.router_evals += B
        self.gates[l], self.masks[l] = gates_from_probs(p, m.acfg.k, m.acfg.gating)
        self.probs[l] = p

    def linear(self, l: int, mod, x: Tensor, W: Parameter) -> Tensor:
        active = self.masks[l][:, mod]
        if not active.any():
            return x @ W
        expert = self.model.experts[l][mod]
        B = x.shape[0]
        gate = self.gates[l][:, int(mod)].reshape(B, *([1] * (x.ndim - 1)))
        if self.counters is not None:
            rows = int(active.sum()) * int(np.prod(x.shape[1:-1]))
            d1, r = expert.A.shape
            d2 = expert.B.shape[1]
            self.counters.adapter_macs += rows * (d1 * r + r * d2)
        return lora_forward(x, W, None, expert, gate)

    def decision(self) -> RoutingDecision | None:
        """Decision of batch row 0 (requests are routed one prompt at a time)."""
        if not self.model.routing:
            return None
        if self.fixed is not None and not self.per_token:
            return self.fixed
        layers = []
        for l in range(self.model.n_layers):
            mask = self.masks[l][0]
            idx = tuple(int(i) for i in np.flatnonzero(mask))
            g = self.gates[l].data[0]
            layers.append(LayerRoute(idx, tuple(float(g[i]) for i in idx),
                                     tuple(float(v) for v in self.probs[l].data[0])))
        return RoutingDecision(tuple(layers))


__all__ = ["AdapterConfig", "MiLoRAModel", "AdaptedOutput", "stream", "MODULES"]


def prefill(model: MiLoRAModel, prompt, counters=None,
            decision: RoutingDecision | None = None) -> AdaptedOutput:
    """Process a prompt once, routing every layer from its pooled prompt states.

    Passing ``decision`` skips routing and applies that selection instead.
    """
    prompt = np.asarray(prompt, dtype=np.int64).reshape(1, -1)
    with nc.no_grad():
        return model.forward(prompt, n_prompt=prompt.shape[1], decision=decision,
                             counters=counters, use_cache=True)


def decode_step(model: MiLoRAModel, tokens, cache: KvCache, decision: RoutingDecision | None,
                counters=None) -> AdaptedOutput:
    """Append one position per row to ``cache`` using the cached ``decision``; no router runs."""
    if model.routing and decision is None:
        raise nc.ContractError("decode_step in adapter mode needs a routing decision")
    tokens = np.asarray(tokens, dtype=np.int64).reshape(-1, 1)
    with nc.no_grad():
        return model.forward(tokens, decision=decision, counters=counters, cache=cache)
