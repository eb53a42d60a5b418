"""Route-once generation, beam search, and exact operation counters.

In prompt-aware mode the routers run once per layer during prefill and the
resulting decision is reused by every decode step and every beam. The
per-token baseline re-routes every layer at every generated position from
that position's own pre-layer state, which is the cost profile of
token-level MoE-LoRA routing.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

from . import numcore as nc
from .lora import activated_param_count
from .model import MiLoRAModel
from .router import RoutingDecision


class Mode(str, Enum):
    PROMPT_AWARE = "prompt-aware"
    PER_TOKEN = "per-token"


@dataclass
class GenerationConfig:
    mode: Mode = Mode.PROMPT_AWARE
    beam_size: int = 3
    max_new_tokens: int = 16
    greedy: bool = False
    eos_id: int | None = None

    def __post_init__(self):
        self.mode = Mode(self.mode)
        if self.beam_size < 1:
            raise nc.ConfigError("beam_size must be >= 1")
        if self.max_new_tokens < 0:
            raise nc.ConfigError("max_new_tokens must be >= 0")

    @property
    def beams(self) -> int:
        return 1 if self.greedy else self.beam_size


@dataclass
class OpCounters:
    router_evals: int = 0
    adapter_macs: int = 0
    activated_params: int = 0
    decode_steps: int = 0
    adapter_positions: int = 0

    def as_dict(self) -> dict:
        return {"router_evals": self.router_evals, "adapter_macs": self.adapter_macs,
                "activated_params": self.activated_params, "decode_steps": self.decode_steps}


@dataclass
class GenerationResult:
    tokens: list[int]
    counters: OpCounters
    decision: RoutingDecision | None
    score: float = 0.0
    step_decisions: list[RoutingDecision] = field(default_factory=list)
    wall_seconds: float = 0.0


class _Session:
    """Per-request state: cache, counters, and the cached routing decision."""

    def __init__(self, model: MiLoRAModel, prompt: Sequence[int], mode: Mode,
                 adapters: bool = True):
        prompt = list(prompt)
        if not prompt:
            raise nc.ContractError("prompt must be non-empty")
        self.model = model
        self.mode = mode
        self.adapters = adapters
        self.counters = OpCounters()
        self.step_decisions: list[RoutingDecision] = []
        per_token = mode is Mode.PER_TOKEN
        with nc.no_grad():
            out = model.forward(np.array([prompt]), n_prompt=len(prompt), counters=self.counters,
                                per_token=per_token, use_cache=True, adapters=adapters)
        if adapters:
            self.counters.adapter_positions += len(prompt)
        self.cache = out.cache
        self.decision = out.routing
        if out.routing is not None:
            self.step_decisions.append(out.routing)
        self.last_logits = out.logits.data[:, -1, :]

    def decode(self, tokens: np.ndarray, rows: np.ndarray) -> np.ndarray:
        self.cache = self.cache.select(rows)
        per_token = self.mode is Mode.PER_TOKEN
        fixed = None if per_token else self.decision
        if self.adapters and self.model.routing and fixed is None and not per_token:
            raise nc.ContractError("decode in adapter mode needs a routing decision")
        with nc.no_grad():
            out = self.model.forward(np.asarray(tokens).reshape(-1, 1), decision=fixed,
                                     counters=self.counters, per_token=per_token,
                                     cache=self.cache, adapters=self.adapters)
        if self.adapters:
            self.counters.adapter_positions += len(tokens)
        if per_token and out.routing is not None:
            self.step_decisions.append(out.routing)
        self.cache = out.cache
        self.last_logits = out.logits.data[:, -1, :]
        return self.last_logits

    def finish(self) -> None:
        if not self.adapters:
            self.counters.activated_params = 0
        elif self.model.routing and self.step_decisions:
            self.counters.activated_params = max(
                activated_param_count(d, self.model.experts, self.model.router_param_count)
                for d in self.step_decisions)
        else:
            self.counters.activated_params = (
                sum(e.param_count for layer in self.model.experts for e in layer))


def _log_softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def beam_search(model: MiLoRAModel, prompt: Sequence[int], beam_size: int, max_new_tokens: int,
                mode: Mode = Mode.PROMPT_AWARE, eos_id: int | None = None,
                adapters: bool = True) -> GenerationResult:
    """Length-normalised beam search; beam_size=1 is greedy decoding.

    Candidate ties are broken by (beam order, token id) so the search is
    deterministic.
    """
    if beam_size < 1:
        raise nc.ConfigError("beam_size must be >= 1")
    t0 = time.perf_counter()
    sess = _Session(model, prompt, Mode(mode), adapters)
    beams: list[tuple[list[int], float]] = [([], 0.0)]
    finished: list[tuple[list[int], float]] = []
    logits = sess.last_logits
    for step in range(max_new_tokens):
        sess.counters.decode_steps += 1
        lp = _log_softmax(logits)
        V = lp.shape[1]
        scores = np.array([s for _, s in beams])[:, None] + lp
        flat = scores.reshape(-1)
        beam_idx = np.repeat(np.arange(len(beams)), V)
        tok_idx = np.tile(np.arange(V), len(beams))
        order = np.lexsort((tok_idx, beam_idx, -flat))
        alive: list[tuple[list[int], float]] = []
        rows = []
        for j in order:
            b, v = int(beam_idx[j]), int(tok_idx[j])
            seq = beams[b][0] + [v]
            if eos_id is not None and v == eos_id:
                finished.append((seq, float(flat[j])))
                if len(finished) >= beam_size:
                    break
                continue
            alive.append((seq, float(flat[j])))
            rows.append(b)
            if len(alive) == beam_size:
                break
        beams = alive
        if not beams or len(finished) >= beam_size:
            break
        if step + 1 < max_new_tokens:
            logits = sess.decode(np.array([s[-1] for s, _ in beams]), np.array(rows))
    sess.finish()
    pool = finished + beams
    if pool:
        best = max(range(len(pool)), key=lambda i: (pool[i][1] / max(len(pool[i][0]), 1), -i))
        tokens, score = pool[best]
    else:
        tokens, score = [], 0.0
    return GenerationResult(list(tokens), sess.counters, sess.decision,
                            score / max(len(tokens), 1), sess.step_decisions,
                            time.perf_counter() - t0)


def generate(prompt: Sequence[int], model: MiLoRAModel, gen: GenerationConfig,
             adapters: bool = True) -> GenerationResult:
    """Decode ``gen.max_new_tokens`` tokens; ``adapters=False`` runs the frozen backbone."""
    return beam_search(model, prompt, gen.beams, gen.max_new_tokens, gen.mode, gen.eos_id,
                       adapters)


def forced_decode(model: MiLoRAModel, prompt: Sequence[int], continuation: Sequence[int],
                  mode: Mode = Mode.PROMPT_AWARE) -> GenerationResult:
    """Feed a fixed continuation through the cache; counters for a known token trace."""
    sess = _Session(model, prompt, Mode(mode))
    for i, tok in enumerate(continuation):
        sess.counters.decode_steps += 1
        if i + 1 < len(continuation):
            sess.decode(np.array([tok]), np.array([0]))
    sess.finish()
    return GenerationResult(list(continuation), sess.counters, sess.decision, 0.0,
                            sess.step_decisions)


def closed_form_adapter_macs(model: MiLoRAModel, decisions: Sequence[RoutingDecision | None],
                             positions: Sequence[int]) -> int:
    """sum over forward calls of positions * sum over selected experts r(d1 + d2)."""
    total = 0
    for dec, n in zip(decisions, positions):
        for l in range(model.n_layers):
            idx = range(len(model.experts[l])) if dec is None else dec.layers[l].indices
            total += n * sum(model.experts[l][m].param_count for m in idx)
    return total


# ---------------------------------------------------------------- reporting

BENCH_HEADER = "mode,k,gating,tokens,router_evals,adapter_macs,activated_params,wall_tps"


@dataclass
class BenchRun:
    mode: Mode
    k: int
    gating: str
    tokens: int
    counters: OpCounters
    wall_seconds: float


def bench_report(runs: Sequence[BenchRun], include_wall: bool = True,
                 router_multiplier: int = 1) -> str:
    """Counter table plus per-metric ratios (prompt-aware / per-token).

    ``router_multiplier`` scales per-token router counts to model several
    routers per layer (one per module); it is 1 unless asked for.
    """
    modes = {r.mode for r in runs}
    if not runs:
        raise nc.ContractError("bench_report needs at least one run")
    lines = [BENCH_HEADER]
    agg: dict[Mode, dict[str, int]] = {}
    for r in runs:
        revals = r.counters.router_evals * (router_multiplier if r.mode is Mode.PER_TOKEN else 1)
        tps = (f"{r.tokens / r.wall_seconds:.3f}" if include_wall and r.wall_seconds > 0 else "-")
        lines.append(f"{r.mode.value},{r.k},{r.gating},{r.tokens},{revals},"
                     f"{r.counters.adapter_macs},{r.counters.activated_params},{tps}")
        a = agg.setdefault(r.mode, {"router_evals": 0, "adapter_macs": 0, "activated_params": 0})
        a["router_evals"] += revals
        a["adapter_macs"] += r.counters.adapter_macs
        a["activated_params"] = max(a["activated_params"], r.counters.activated_params)
    if Mode.PROMPT_AWARE in modes and Mode.PER_TOKEN in modes:
        lines.append("")
        lines.append("metric,prompt_aware,per_token,ratio")
        pa, pt = agg[Mode.PROMPT_AWARE], agg[Mode.PER_TOKEN]
        for key in ("router_evals", "adapter_macs", "activated_params"):
            ratio = pa[key] / pt[key] if pt[key] else float("nan")
            lines.append(f"{key},{pa[key]},{pt[key]},{ratio:.6f}")
    return "\n".join(lines) + "\n"
