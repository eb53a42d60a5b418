"""Losses, Omega/Theta partitioned optimisation and the early-stopping loop."""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numcore as nc
from .backbone import N_MOD
from .model import MiLoRAModel
from .numcore import OMEGA, THETA, AdamW, Tensor
from .router import load_balance_stats, select_topk

log = logging.getLogger(__name__)

Example = tuple[tuple[int, ...], tuple[int, ...]]


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr_omega: float = 1e-4
    lr_theta: float = 1e-6
    lambda_lb: float = 1e-2
    batch_size: int = 16
    max_epochs: int = 10
    max_steps: int = 0
    eval_every: int = 200
    patience: int = 10
    weight_decay: float = 0.0
    warmup_frac: float = 0.06
    schedule: str = "linear"
    bilevel: bool = True
    lb_in_theta_step: bool = True
    target_dev_acc: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.lambda_lb < 0:
            raise nc.ConfigError("lambda_lb must be >= 0")
        if self.patience < 1:
            raise nc.ConfigError("patience must be >= 1")
        if self.lr_omega <= 0 or self.lr_theta <= 0:
            raise nc.ConfigError("learning rates must be positive")
        if self.batch_size < 1 or self.eval_every < 1:
            raise nc.ConfigError("batch_size and eval_every must be >= 1")
        if self.schedule not in ("linear", "constant"):
            raise nc.ConfigError(f"unknown schedule {self.schedule!r}")


@dataclass
class DatasetSplit:
    train: list[Example]
    dev: list[Example]
    tags_train: list[str] = field(default_factory=list)
    tags_dev: list[str] = field(default_factory=list)


@dataclass
class Batch:
    inputs: np.ndarray      # (B, T)
    targets: np.ndarray     # (B, T)
    mask: np.ndarray        # (B, T) True on response positions
    n_prompt: int

    def __len__(self) -> int:
        return self.inputs.shape[0]


def make_batch(examples: Sequence[Example]) -> Batch:
    """Teacher-forcing batch; all examples must share prompt and target lengths."""
    if not examples:
        raise nc.ContractError("empty batch")
    n_p, n_t = len(examples[0][0]), len(examples[0][1])
    if any(len(p) != n_p or len(t) != n_t for p, t in examples):
        raise nc.ContractError("batch examples must share prompt/target lengths")
    if n_p < 1 or n_t < 1:
        raise nc.ContractError("prompt and target must be non-empty")
    seq = np.array([list(p) + list(t) for p, t in examples], dtype=np.int64)
    mask = np.zeros((len(examples), n_p + n_t - 1), dtype=bool)
    mask[:, n_p - 1:] = True
    return Batch(seq[:, :-1], seq[:, 1:], mask, n_p)


def iter_batches(examples: Sequence[Example], batch_size: int,
                 rng: np.random.Generator | None = None) -> list[Batch]:
    """Shape-bucketed batches; shuffled when ``rng`` is given, else in order."""
    buckets: dict[tuple[int, int], list[int]] = {}
    for i, (p, t) in enumerate(examples):
        buckets.setdefault((len(p), len(t)), []).append(i)
    chunks = []
    for key in sorted(buckets):
        idx = np.array(buckets[key])
        if rng is not None:
            idx = idx[rng.permutation(len(idx))]
        for s in range(0, len(idx), batch_size):
            chunks.append(idx[s:s + batch_size])
    if rng is not None:
        chunks = [chunks[i] for i in rng.permutation(len(chunks))]
    return [make_batch([examples[i] for i in c]) for c in chunks]


# ---------------------------------------------------------------- losses

def lm_cross_entropy(logits, targets: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean negative log-likelihood over positions where ``mask`` is True."""
    logits = nc.as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    if logits.shape[:-1] != targets.shape or targets.shape != mask.shape:
        raise nc.DimensionError(f"logits {logits.shape} / targets {targets.shape} / mask {mask.shape}")
    n = int(mask.sum())
    if n == 0:
        raise nc.ContractError("cross entropy over a fully masked batch")
    lp = nc.log_softmax(logits, axis=-1)
    pos = np.nonzero(mask)
    picked = lp[pos + (targets[pos],)]
    return picked.sum() * (-1.0 / n)


def layer_load_balance(P) -> Tensor:
    f, p_hat = load_balance_stats(P)
    return (p_hat * f).sum() * float(P.shape[-1])


def load_balance_loss(probs: Sequence) -> Tensor:
    """Mean over layers of N_mod * sum_i f_i * p_hat_i."""
    probs = [p for p in probs if p is not None]
    if not probs:
        return Tensor(0.0)
    total = layer_load_balance(probs[0])
    for P in probs[1:]:
        total = total + layer_load_balance(P)
    return total * (1.0 / len(probs))


def total_loss(ce, lb, lambda_lb: float) -> Tensor:
    if lambda_lb == 0:
        return nc.as_tensor(ce)
    return nc.as_tensor(ce) + nc.as_tensor(lb) * lambda_lb


def batch_losses(model: MiLoRAModel, batch: Batch, lambda_lb: float, use_lb: bool = True):
    out = model.forward(batch.inputs, n_prompt=batch.n_prompt)
    ce = lm_cross_entropy(out.logits, batch.targets, batch.mask)
    lb = load_balance_loss(out.probs)
    return total_loss(ce, lb, lambda_lb if use_lb else 0.0), ce, lb, out


# ---------------------------------------------------------------- optimisation

class BilevelOptimizer:
    """Alternating first-order updates: Omega on train, Theta on validation."""

    def __init__(self, model: MiLoRAModel, cfg: TrainConfig):
        self.model = model
        self.cfg = cfg
        self.omega = AdamW(model.parameters(OMEGA), OMEGA, cfg.lr_omega, cfg.weight_decay)
        self.theta = AdamW(model.parameters(THETA), THETA, cfg.lr_theta, cfg.weight_decay)

    def omega_step(self, batch: Batch, lr_scale: float = 1.0) -> dict:
        """Inner update: total loss on a training batch, Omega moves, Theta is held."""
        if len(batch) == 0:
            raise nc.ContractError("empty training batch")
        cfg = self.cfg
        self.model.zero_grad()
        total, ce, lb, _ = batch_losses(self.model, batch, cfg.lambda_lb)
        _check(total, "train")
        nc.backward(total)
        if self.omega.params:
            self.omega.step(cfg.lr_omega * lr_scale)
        if not cfg.bilevel and self.theta.params:
            self.theta.step(cfg.lr_theta * lr_scale)
        return {"total": total.item(), "ce": ce.item(), "lb": lb.item()}

    def theta_step(self, batch: Batch | None, lr_scale: float = 1.0) -> None:
        """Outer update: loss on a validation batch, Theta moves, Omega is held."""
        if not self.theta.params:
            return
        if batch is None or len(batch) == 0:
            raise nc.ContractError("bi-level step needs a validation batch")
        cfg = self.cfg
        self.model.zero_grad()
        vtotal, _, _, _ = batch_losses(self.model, batch, cfg.lambda_lb,
                                       use_lb=cfg.lb_in_theta_step)
        _check(vtotal, "validation")
        nc.backward(vtotal)
        self.theta.step(cfg.lr_theta * lr_scale)

    def step(self, train_batch: Batch, val_batch: Batch | None, lr_scale: float = 1.0) -> dict:
        stats = self.omega_step(train_batch, lr_scale)
        if self.cfg.bilevel:
            self.theta_step(val_batch, lr_scale)
        return stats


def bilevel_step(model: MiLoRAModel, opt: BilevelOptimizer, train_batch: Batch,
                 val_batch: Batch | None) -> dict:
    return opt.step(train_batch, val_batch)


def _check(loss: Tensor, where: str) -> None:
    if not math.isfinite(loss.item()):
        raise TrainingDiverged(f"{where} loss became {loss.item()}")


# ---------------------------------------------------------------- evaluation

@dataclass
class EvalResult:
    ppl: float
    accuracy: float
    lb: float
    histogram: np.ndarray      # (L, N_mod) selection counts
    argmax_share: np.ndarray   # (L, N_mod) fraction of prompts whose argmax is each expert

    @property
    def hist_hash(self) -> str:
        return hashlib.sha256(self.histogram.astype(np.int64).tobytes()).hexdigest()[:12]


def evaluate(model: MiLoRAModel, examples: Sequence[Example], batch_size: int = 64) -> EvalResult:
    L = model.n_layers
    hist = np.zeros((L, N_MOD), dtype=np.int64)
    argmax = np.zeros((L, N_MOD), dtype=np.int64)
    nll = 0.0
    correct = 0
    count = 0
    lb_sum = 0.0
    n_batches = 0
    with nc.no_grad():
        for batch in iter_batches(examples, batch_size):
            out = model.forward(batch.inputs, n_prompt=batch.n_prompt)
            lp = nc.log_softmax(out.logits).data
            pos = np.nonzero(batch.mask)
            nll -= lp[pos + (batch.targets[pos],)].sum()
            correct += int((lp.argmax(-1)[pos] == batch.targets[pos]).sum())
            count += len(pos[0])
            if model.routing:
                for l, P in enumerate(out.probs):
                    idx = select_topk(P.data, model.acfg.k)
                    np.add.at(hist[l], idx.reshape(-1), 1)
                    argmax[l] += np.bincount(P.data.argmax(-1), minlength=N_MOD)
                lb_sum += load_balance_loss(out.probs).item()
            n_batches += 1
    n_prompts = max(len(examples), 1)
    return EvalResult(math.exp(nll / count), correct / count, lb_sum / max(n_batches, 1),
                      hist, argmax / n_prompts)


# ---------------------------------------------------------------- loop

LOG_HEADER = "step,train_loss,dev_ppl,lb_loss,hist_hash,dev_acc"


@dataclass
class TrainResult:
    best_step: int
    best_ppl: float
    best_state: dict[str, np.ndarray]
    log_rows: list[dict]
    stop_reason: str
    steps: int

    def log_text(self) -> str:
        lines = [LOG_HEADER]
        for r in self.log_rows:
            lines.append(f"{r['step']},{r['train_loss']:.10g},{r['dev_ppl']:.10g},"
                         f"{r['lb_loss']:.10g},{r['hist_hash']},{r['dev_acc']:.10g}")
        return "\n".join(lines) + "\n"


def _snapshot(model: MiLoRAModel) -> dict[str, np.ndarray]:
    return {n: p.data.copy() for n, p in model.named_parameters() if p.trainable}


def restore(model: MiLoRAModel, state: dict[str, np.ndarray]) -> None:
    for n, p in model.named_parameters():
        if n in state:
            p.data[...] = state[n]


def _lr_scale(cfg: TrainConfig, step: int, total: int) -> float:
    if cfg.schedule == "constant":
        return 1.0
    warm = int(round(cfg.warmup_frac * total))
    if warm > 0 and step < warm:
        return (step + 1) / warm
    return max(0.0, (total - step) / max(total - warm, 1))


def train_loop(model: MiLoRAModel, splits: DatasetSplit, cfg: TrainConfig) -> TrainResult:
    """Train until ``patience`` evaluations pass without a lower dev perplexity.

    The model is left holding the best-perplexity parameters.
    """
    if not splits.train or (cfg.bilevel and not splits.dev):
        raise nc.ContractError("training needs non-empty train and dev splits")
    rng = np.random.default_rng([cfg.seed, 7])
    opt = BilevelOptimizer(model, cfg)
    steps_per_epoch = len(iter_batches(splits.train, cfg.batch_size))
    total_steps = cfg.max_steps or cfg.max_epochs * steps_per_epoch
    best = (math.inf, 0, _snapshot(model))
    rows: list[dict] = []
    bad = 0
    losses: list[float] = []
    step = 0
    reason = "max_steps"
    train_iter: list[Batch] = []
    val_iter: list[Batch] = []
    while step < total_steps:
        if not train_iter:
            train_iter = iter_batches(splits.train, cfg.batch_size, rng)
        if not val_iter and splits.dev:
            val_iter = iter_batches(splits.dev, cfg.batch_size, rng)
        try:
            stats = opt.step(train_iter.pop(), val_iter.pop() if val_iter else None,
                             _lr_scale(cfg, step, total_steps))
        except FloatingPointError as exc:
            raise TrainingDiverged(f"step {step}: {exc}; recent losses {losses[-5:]}") from exc
        losses.append(stats["total"])
        step += 1
        if step % cfg.eval_every == 0 or step == total_steps:
            ev = evaluate(model, splits.dev)
            row = {"step": step, "train_loss": float(np.mean(losses[-cfg.eval_every:])),
                   "dev_ppl": ev.ppl, "lb_loss": ev.lb, "hist_hash": ev.hist_hash,
                   "dev_acc": ev.accuracy}
            rows.append(row)
            log.info("step %d loss %.4f dev_ppl %.4f dev_acc %.4f", step, row["train_loss"],
                     ev.ppl, ev.accuracy)
            if not math.isfinite(ev.ppl):
                raise TrainingDiverged(f"dev perplexity became {ev.ppl} at step {step}")
            if ev.ppl < best[0]:
                best = (ev.ppl, step, _snapshot(model))
                bad = 0
            else:
                bad += 1
            if cfg.target_dev_acc and ev.accuracy >= cfg.target_dev_acc:
                reason = "target_accuracy"
                break
            if bad >= cfg.patience:
                reason = "patience"
                break
    restore(model, best[2])
    return TrainResult(best[1], best[0], best[2], rows, reason, step)
