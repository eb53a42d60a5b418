"""Tiny LLaMA-style decoder: RMS-norm, rotary attention, gated-SiLU FFN.

Each layer owns seven linear modules (Q, K, V, O, G, U, D). The forward pass
exposes the residual stream entering every layer so routers can read it, and
accepts an adapter hook that may replace any linear module's output.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from . import numcore as nc
from .numcore import Parameter, Tensor


class ModuleId(IntEnum):
    Q = 0
    K = 1
    V = 2
    O = 3
    G = 4
    U = 5
    D = 6


MODULES = tuple(ModuleId)
N_MOD = len(MODULES)


class InputError(ValueError):
    pass


@dataclass
class BackboneConfig:
    vocab_size: int = 64
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    d_ffn: int = 344
    max_seq_len: int = 128
    rope_base: float = 10000.0

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "n_layers", "n_heads", "d_ffn", "max_seq_len"):
            if int(getattr(self, name)) <= 0:
                raise nc.ConfigError(f"{name} must be positive")
        if self.d_model % self.n_heads:
            raise nc.ConfigError("d_model must be divisible by n_heads")
        if (self.d_model // self.n_heads) % 2:
            raise nc.ConfigError("head dimension must be even for rotary embeddings")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


def module_shape(cfg: BackboneConfig, m: ModuleId) -> tuple[int, int]:
    """(d_in, d_out) of linear module ``m``."""
    d, f = cfg.d_model, cfg.d_ffn
    if m in (ModuleId.G, ModuleId.U):
        return d, f
    if m == ModuleId.D:
        return f, d
    return d, d


@dataclass
class TransformerLayer:
    weights: dict[ModuleId, Parameter]
    attn_norm: Parameter
    ffn_norm: Parameter


@dataclass
class KvCache:
    """Per-layer rotated keys and values, shape (B, heads, T, head_dim)."""

    keys: list[np.ndarray | None]
    values: list[np.ndarray | None]
    length: int = 0

    @classmethod
    def empty(cls, n_layers: int) -> KvCache:
        return cls([None] * n_layers, [None] * n_layers, 0)

    def select(self, rows: np.ndarray) -> KvCache:
        """Reorder/duplicate batch rows (used by beam search)."""
        return KvCache([k[rows] for k in self.keys], [v[rows] for v in self.values], self.length)


@dataclass
class ForwardResult:
    logits: Tensor
    hidden: list[Tensor] = field(default_factory=list)
    cache: KvCache | None = None


class Backbone:
    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator):
        self.cfg = cfg
        d, V = cfg.d_model, cfg.vocab_size
        self.embed = Parameter(rng.normal(0.0, 1.0, (V, d)), trainable=False, name="embed")
        self.layers: list[TransformerLayer] = []
        for l in range(cfg.n_layers):
            weights = {}
            for m in MODULES:
                d1, d2 = module_shape(cfg, m)
                weights[m] = Parameter(rng.normal(0.0, d1 ** -0.5, (d1, d2)), trainable=False,
                                       name=f"layers.{l}.{m.name}")
            self.layers.append(TransformerLayer(
                weights,
                Parameter(np.ones(d), trainable=False, name=f"layers.{l}.attn_norm"),
                Parameter(np.ones(d), trainable=False, name=f"layers.{l}.ffn_norm"),
            ))
        self.final_norm = Parameter(np.ones(d), trainable=False, name="final_norm")
        self.lm_head = Parameter(rng.normal(0.0, d ** -0.5, (d, V)), trainable=False, name="lm_head")
        half = cfg.head_dim // 2
        self._inv_freq = cfg.rope_base ** (-np.arange(half) / half)

    def named_parameters(self) -> list[tuple[str, Parameter]]:
        out = [("embed", self.embed)]
        for l, layer in enumerate(self.layers):
            for m in MODULES:
                out.append((f"layers.{l}.{m.name}", layer.weights[m]))
            out.append((f"layers.{l}.attn_norm", layer.attn_norm))
            out.append((f"layers.{l}.ffn_norm", layer.ffn_norm))
        out += [("final_norm", self.final_norm), ("lm_head", self.lm_head)]
        return out

    def set_trainable(self, flag: bool) -> None:
        for _, p in self.named_parameters():
            p.trainable = flag
            p.requires_grad = flag

    def _rope_tables(self, start: int, length: int) -> tuple[np.ndarray, np.ndarray]:
        ang = np.arange(start, start + length)[:, None] * self._inv_freq[None, :]
        ang = np.concatenate([ang, ang], axis=-1)
        return np.cos(ang), np.sin(ang)

    def _check_ids(self, ids: np.ndarray, start: int) -> None:
        if ids.ndim != 2 or ids.shape[1] < 1:
            raise InputError(f"token batch must be (B, T>=1), got {ids.shape}")
        if start + ids.shape[1] > self.cfg.max_seq_len:
            raise InputError(f"sequence length {start + ids.shape[1]} exceeds max_seq_len")
        if ids.min() < 0 or ids.max() >= self.cfg.vocab_size:
            raise InputError(f"token id out of range [0, {self.cfg.vocab_size})")

    def forward(self, ids, adapter=None, cache: KvCache | None = None,
                use_cache: bool = False) -> ForwardResult:
        """Run tokens ``ids`` (B, T) through the stack.

        ``adapter`` (optional) must provide ``begin_layer(l, H)`` which is
        called with the residual stream entering layer ``l``, and
        ``linear(l, m, x, W)`` which returns the module output. With a cache,
        new positions continue after the cached ones.
        """
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim == 1:
            ids = ids[None, :]
        start = cache.length if cache is not None else 0
        self._check_ids(ids, start)
        cfg = self.cfg
        B, T = ids.shape
        nh, hd = cfg.n_heads, cfg.head_dim
        cos, sin = self._rope_tables(start, T)
        total = start + T
        causal = (np.arange(total)[None, :] <= (start + np.arange(T))[:, None])
        new_cache = KvCache.empty(cfg.n_layers) if (use_cache or cache is not None) else None

        def lin(l, m, x):
            W = self.layers[l].weights[m]
            if adapter is None:
                return x @ W
            return adapter.linear(l, m, x, W)

        x = nc.embedding(self.embed, ids)
        hidden = []
        for l, layer in enumerate(self.layers):
            hidden.append(x)
            if adapter is not None:
                adapter.begin_layer(l, x)
            a = nc.rms_norm(x, layer.attn_norm)
            q = lin(l, ModuleId.Q, a)
            k = lin(l, ModuleId.K, a)
            v = lin(l, ModuleId.V, a)
            q = nc.transpose(q.reshape(B, T, nh, hd), (0, 2, 1, 3))
            k = nc.transpose(k.reshape(B, T, nh, hd), (0, 2, 1, 3))
            v = nc.transpose(v.reshape(B, T, nh, hd), (0, 2, 1, 3))
            q = nc.rope(q, cos, sin)
            k = nc.rope(k, cos, sin)
            if cache is not None and cache.length > 0:
                k = nc.concat([Tensor(cache.keys[l]), k], axis=2)
                v = nc.concat([Tensor(cache.values[l]), v], axis=2)
            if new_cache is not None:
                new_cache.keys[l] = k.data
                new_cache.values[l] = v.data
            scores = (q @ nc.transpose(k, (0, 1, 3, 2))) * (hd ** -0.5)
            att = nc.softmax(scores, axis=-1, mask=causal)
            o = nc.transpose(att @ v, (0, 2, 1, 3)).reshape(B, T, cfg.d_model)
            x = x + lin(l, ModuleId.O, o)
            b = nc.rms_norm(x, layer.ffn_norm)
            g = lin(l, ModuleId.G, b)
            u = lin(l, ModuleId.U, b)
            x = x + lin(l, ModuleId.D, nc.silu(g) * u)
        logits = nc.rms_norm(x, self.final_norm) @ self.lm_head
        if new_cache is not None:
            new_cache.length = total
        return ForwardResult(logits, hidden, new_cache)

    def prefill(self, ids, adapter=None) -> ForwardResult:
        return self.forward(ids, adapter=adapter, use_cache=True)

    def decode_step(self, token_ids, cache: KvCache, adapter=None) -> ForwardResult:
        """One new position per batch row, continuing ``cache``."""
        if cache is None or cache.length == 0:
            raise nc.ContractError("decode_step needs a prefilled cache")
        ids = np.asarray(token_ids, dtype=np.int64).reshape(-1, 1)
        return self.forward(ids, adapter=adapter, cache=cache)
