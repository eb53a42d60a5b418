"""Training runs, ablation sweeps, and routing reports."""

from __future__ import annotations

import statistics
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .. import numcore as nc
from ..backbone import MODULES, N_MOD
from ..model import MiLoRAModel
from ..numcore import OMEGA, AdamW
from ..router import GatingMode, PoolerKind, select_topk
from ..training import (DatasetSplit, EvalResult, TrainResult, evaluate, iter_batches,
                        lm_cross_entropy, train_loop)
from .checkpoint import build_model
from .config import RunConfig
from .data import make_dataset


@dataclass
class RunOutcome:
    model: MiLoRAModel
    split: DatasetSplit
    result: TrainResult
    dev: EvalResult


def pretrain_backbone(model: MiLoRAModel, split: DatasetSplit, steps: int, lr: float, seed: int) -> None:
    """Briefly train the bare backbone on full sequences, then freeze it again."""
    if steps <= 0:
        return
    bb = model.backbone
    bb.set_trainable(True)
    params = [p for _, p in bb.named_parameters()]
    opt = AdamW(params, OMEGA, lr)
    rng = np.random.default_rng([seed, 3])
    batches: list = []
    for _ in range(steps):
        if not batches:
            batches = iter_batches(split.train, 16, rng)
        b = batches.pop()
        for p in params:
            p.zero_grad()
        out = model.forward(b.inputs, adapters=False)
        loss = lm_cross_entropy(out.logits, b.targets, np.ones_like(b.mask))
        nc.backward(loss)
        opt.step()
    bb.set_trainable(False)


def run_training(cfg: RunConfig) -> RunOutcome:
    split = make_dataset(cfg.task, seed=cfg.seed)
    model = build_model(cfg)
    pretrain_backbone(model, split, cfg.pretrain_steps, 1e-3, cfg.seed)
    train_cfg = replace(cfg.train, seed=cfg.seed)
    result = train_loop(model, split, train_cfg)
    return RunOutcome(model, split, result, evaluate(model, split.dev))


# ---------------------------------------------------------------- ablations

ABLATION_PRESETS = ("variants", "k-sweep", "lambda-sweep", "rank-sweep")
K7_TOLERANCE = 1e-3
ABLATION_HEADER = ("preset,cell,seeds,median_dev_acc,acc_mad,median_dev_ppl,"
                   "median_lb_loss,max_argmax_share")


def ablation_cells(preset: str, base: RunConfig) -> list[tuple[str, RunConfig]]:
    a = base.adapter
    cells: list[tuple[str, RunConfig]] = []

    def with_adapter(**kw):
        return replace(base, adapter=replace(a, **kw))

    if preset == "variants":
        cells = [
            ("milora", base),
            ("milora-1-mean-pool", with_adapter(pooler=PoolerKind.MEAN)),
            ("milora-2-last-token-pool", with_adapter(pooler=PoolerKind.LAST)),
            ("milora-3-gelu", with_adapter(activation="gelu")),
            ("milora-4-relu-then-gelu", with_adapter(activation="relu_gelu")),
            ("milora-5-gelu-then-relu", with_adapter(activation="gelu_relu")),
        ]
    elif preset == "k-sweep":
        cells = [(f"k={k}", with_adapter(k=k)) for k in range(1, N_MOD + 1)]
        cells.append(("k=7-binary", with_adapter(k=N_MOD, gating=GatingMode.BINARY)))
        cells.append(("vanilla-lora", with_adapter(routing=False)))
    elif preset == "lambda-sweep":
        cells = [(f"lambda={lam:g}", replace(base, train=replace(base.train, lambda_lb=lam)))
                 for lam in (0.0, 1e-3, 1e-2, 1e-1, 1.0)]
    elif preset == "rank-sweep":
        cells = [(f"r={r}", with_adapter(rank=r)) for r in (2, 4, 8, 16, 32)]
    else:
        raise nc.ConfigError(f"unknown ablation preset {preset!r}; choose from {ABLATION_PRESETS}")
    return cells


@dataclass
class CellResult:
    cell: str
    accs: list[float]
    ppls: list[float]
    lbs: list[float]
    argmax_share: float

    def row(self, preset: str) -> str:
        acc = statistics.median(self.accs)
        mad = statistics.median(abs(x - acc) for x in self.accs)
        return (f"{preset},{self.cell},{len(self.accs)},{acc:.10g},{mad:.10g},"
                f"{statistics.median(self.ppls):.10g},{statistics.median(self.lbs):.10g},"
                f"{self.argmax_share:.10g}")


def run_cell(cell: str, cfg: RunConfig, seeds: Sequence[int]) -> CellResult:
    accs, ppls, lbs, share = [], [], [], 0.0
    for s in seeds:
        out = run_training(replace(cfg, seed=s))
        accs.append(out.dev.accuracy)
        ppls.append(out.dev.ppl)
        lbs.append(out.dev.lb)
        if out.model.routing:
            share = max(share, float(out.dev.argmax_share.max()))
    return CellResult(cell, accs, ppls, lbs, share)


def run_ablation(preset: str, base: RunConfig, seeds: Sequence[int] = (0, 1, 2, 3, 4)) -> str:
    """One row per cell: medians over ``seeds`` (cells run in a fixed order)."""
    lines = [ABLATION_HEADER]
    for cell, cfg in ablation_cells(preset, base):
        lines.append(run_cell(cell, cfg, seeds).row(preset))
    if preset == "k-sweep":
        # The routers of k=7-binary never change the output, but the load-balance
        # gradient still reaches the experts through the routing input.
        lines.append(f"# k=7-binary vs vanilla-lora: exact when lambda_lb=0, "
                     f"else median_dev_ppl within rel {K7_TOLERANCE:g}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- routing reports

def route_prompts(model: MiLoRAModel, prompts: Sequence[Sequence[int]]):
    """Yield (prompt index, per-layer probability rows) for each prompt, in order."""
    with nc.no_grad():
        for i, prompt in enumerate(prompts):
            out = model.forward(np.array([list(prompt)]), n_prompt=len(prompt))
            yield i, [P.data[0] for P in out.probs]


def route_dump(model: MiLoRAModel, prompts: Sequence[Sequence[int]]) -> str:
    if not model.routing:
        raise nc.ContractError("route-dump needs a model with routers")
    lines = ["prompt,layer,expert,probability,selected"]
    k = model.acfg.k
    for i, probs in route_prompts(model, prompts):
        for l, p in enumerate(probs):
            sel = set(select_topk(p[None, :], k)[0].tolist())
            for m in range(N_MOD):
                lines.append(f"{i},{l},{MODULES[m].name},{p[m]:.17g},{int(m in sel)}")
    return "\n".join(lines) + "\n"


def expert_distribution(model: MiLoRAModel, prompts: Sequence[Sequence[int]]) -> np.ndarray:
    """(L, N_mod) fraction of prompts that activate each expert; rows sum to k."""
    if not model.routing:
        raise nc.ContractError("expert distribution needs a model with routers")
    counts = np.zeros((model.n_layers, N_MOD))
    n = 0
    for _, probs in route_prompts(model, prompts):
        n += 1
        for l, p in enumerate(probs):
            counts[l, select_topk(p[None, :], model.acfg.k)[0]] += 1
    if n == 0:
        raise nc.ContractError("no prompts to route")
    return counts / n


def emit_expert_distribution(model: MiLoRAModel, prompts: Sequence[Sequence[int]]) -> str:
    freq = expert_distribution(model, prompts)
    lines = ["layer,module,frequency"]
    for l in range(freq.shape[0]):
        for m in range(N_MOD):
            lines.append(f"{l},{MODULES[m].name},{freq[l, m]:.10g}")
    return "\n".join(lines) + "\n"
