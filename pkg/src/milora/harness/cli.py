"""Command-line entry point: train, init, generate, bench, ablate, route-dump."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from .. import numcore as nc
from ..backbone import InputError
from ..inference import BenchRun, GenerationConfig, Mode, bench_report, generate
from .checkpoint import CheckpointError, build_model, load_checkpoint, save_checkpoint
from .config import PRESETS, RunConfig, TaskSpec, preset
from .data import make_dataset
from .experiments import (ABLATION_PRESETS, emit_expert_distribution, route_dump, run_ablation,
                          run_training)

OUTPUT_ENV = "MILORA_OUTPUT_DIR"
log = logging.getLogger("milora")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _load_config(spec: str) -> RunConfig:
    path = Path(spec)
    if path.exists():
        try:
            return RunConfig.load(path)
        except nc.ConfigError as exc:
            raise UsageError(f"{path}: {exc}") from exc
    if spec in PRESETS:
        return preset(spec)
    raise UsageError(f"config {spec!r} is neither a file nor a preset ({', '.join(PRESETS)})")


def _out_dir(cfg: RunConfig, override: str | None) -> Path:
    return Path(override or os.environ.get(OUTPUT_ENV) or cfg.output_dir)


def _tokens(text: str) -> list[int]:
    try:
        return [int(t) for t in text.replace(",", " ").split()]
    except ValueError as exc:
        raise UsageError(f"prompt must be integer token ids: {text!r}") from exc


def _dataset_prompts(spec: str, cfg: RunConfig, n: int | None) -> list[tuple[int, ...]]:
    """``spec`` is 'dev', 'train', a task kind, or 'charlm:<path>'."""
    if spec in ("dev", "train"):
        split = make_dataset(cfg.task, seed=cfg.seed)
        examples = split.dev if spec == "dev" else split.train
    else:
        kind, _, path = spec.partition(":")
        try:
            task = replace(cfg.task, kind=kind, path=path or cfg.task.path)
        except nc.ConfigError as exc:
            raise UsageError(str(exc)) from exc
        examples = make_dataset(task, n=n or task.n_examples, seed=cfg.seed).dev
    prompts = [p for p, _ in examples]
    return prompts[:n] if n else prompts


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    if args.steps is not None:
        cfg = replace(cfg, train=replace(cfg.train, max_steps=args.steps))
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    out = _out_dir(cfg, args.out)
    out.mkdir(parents=True, exist_ok=True)
    outcome = run_training(cfg)
    save_checkpoint(out / "checkpoint", outcome.model, cfg)
    (out / "train_log.csv").write_text(outcome.result.log_text())
    cfg.save(out / "config.txt")
    print(f"trained {outcome.result.steps} steps ({outcome.result.stop_reason}); "
          f"dev_acc={outcome.dev.accuracy:.4f} dev_ppl={outcome.dev.ppl:.4f}; wrote {out}")
    return 0


def cmd_init(args) -> int:
    cfg = _load_config(args.config)
    out = _out_dir(cfg, args.out)
    save_checkpoint(out / "checkpoint", build_model(cfg), cfg)
    print(f"wrote fresh checkpoint to {out / 'checkpoint'}")
    return 0


def cmd_generate(args) -> int:
    model, cfg = load_checkpoint(args.checkpoint)
    gen = GenerationConfig(mode=Mode(args.mode), beam_size=args.beam_size,
                           max_new_tokens=args.max_new_tokens, greedy=args.greedy)
    res = generate(_tokens(args.prompt), model, gen, adapters=not args.no_adapters)
    print(" ".join(str(t) for t in res.tokens))
    c = res.counters
    print(f"# router_evals={c.router_evals} adapter_macs={c.adapter_macs} "
          f"activated_params={c.activated_params} decode_steps={c.decode_steps}")
    return 0


def cmd_bench(args) -> int:
    model, cfg = load_checkpoint(args.checkpoint)
    modes = [Mode(m.strip()) for m in args.modes.split(",") if m.strip()]
    prompts = ([_tokens(args.prompt)] if args.prompt
               else _dataset_prompts("dev", cfg, args.n_prompts))
    runs = []
    for mode in modes:
        for prompt in prompts:
            gen = GenerationConfig(mode=mode, beam_size=args.beam_size, max_new_tokens=args.tokens)
            res = generate(prompt, model, gen)
            runs.append(BenchRun(mode, cfg.adapter.k, cfg.adapter.gating.value, len(res.tokens),
                                 res.counters, res.wall_seconds))
    text = bench_report(runs, include_wall=not args.no_wall, router_multiplier=args.router_multiplier)
    _emit(text, args.output)
    return 0


def cmd_ablate(args) -> int:
    if args.preset not in ABLATION_PRESETS:
        raise UsageError(f"unknown ablation preset {args.preset!r}; choose from {ABLATION_PRESETS}")
    base = _load_config(args.config)
    if args.steps is not None:
        base = replace(base, train=replace(base.train, max_steps=args.steps))
    seeds = list(range(args.seeds))
    text = run_ablation(args.preset, base, seeds)
    _emit(text, args.output)
    return 0


def cmd_route_dump(args) -> int:
    model, cfg = load_checkpoint(args.checkpoint)
    prompts = _dataset_prompts(args.dataset, cfg, args.n)
    text = (emit_expert_distribution(model, prompts) if args.distribution
            else route_dump(model, prompts))
    _emit(text, args.output)
    return 0


def _emit(text: str, output: str | None) -> None:
    if output:
        Path(output).parent.mkdir(parents=True, exist_ok=True)
        Path(output).write_text(text)
    else:
        sys.stdout.write(text)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="milora", description="Prompt-aware mixture of LoRA experts (desk scale).")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train adapters from a config file or preset")
    t.add_argument("config")
    t.add_argument("--out")
    t.add_argument("--steps", type=int)
    t.add_argument("--seed", type=int)
    t.set_defaults(fn=cmd_train)

    i = sub.add_parser("init", help="write an untrained checkpoint")
    i.add_argument("config")
    i.add_argument("--out")
    i.set_defaults(fn=cmd_init)

    g = sub.add_parser("generate", help="generate a continuation")
    g.add_argument("checkpoint")
    g.add_argument("--prompt", required=True)
    g.add_argument("--max-new-tokens", type=int, default=8)
    g.add_argument("--beam-size", type=int, default=3)
    g.add_argument("--greedy", action="store_true")
    g.add_argument("--mode", choices=[m.value for m in Mode], default=Mode.PROMPT_AWARE.value)
    g.add_argument("--no-adapters", action="store_true", help="frozen backbone only")
    g.set_defaults(fn=cmd_generate)

    b = sub.add_parser("bench", help="counter table for routing modes")
    b.add_argument("checkpoint")
    b.add_argument("--modes", default="prompt-aware,per-token")
    b.add_argument("--tokens", type=int, default=32)
    b.add_argument("--beam-size", type=int, default=1)
    b.add_argument("--prompt")
    b.add_argument("--n-prompts", type=int, default=4)
    b.add_argument("--router-multiplier", type=int, default=1)
    b.add_argument("--no-wall", action="store_true", help="omit wall-clock tokens/sec")
    b.add_argument("--output")
    b.set_defaults(fn=cmd_bench)

    a = sub.add_parser("ablate", help="run an ablation preset")
    a.add_argument("preset")
    a.add_argument("--config", default="copy")
    a.add_argument("--seeds", type=int, default=5)
    a.add_argument("--steps", type=int)
    a.add_argument("--output")
    a.set_defaults(fn=cmd_ablate)

    r = sub.add_parser("route-dump", help="per-prompt routing decisions")
    r.add_argument("checkpoint")
    r.add_argument("dataset", help="dev | train | copy | reverse | modular | charlm:<path>")
    r.add_argument("--n", type=int)
    r.add_argument("--distribution", action="store_true", help="per-layer expert frequencies")
    r.add_argument("--output")
    r.set_defaults(fn=cmd_route_dump)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"milora: usage error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except UsageError as exc:
        print(f"milora: usage error: {exc}", file=sys.stderr)
        return 2
    except (nc.ConfigError, CheckpointError, InputError, nc.ContractError) as exc:
        print(f"milora: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
