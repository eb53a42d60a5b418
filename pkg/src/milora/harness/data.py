"""Deterministic toy datasets (copy, reverse, modular arithmetic, char LM, mixtures)."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from ..backbone import InputError
from ..training import DatasetSplit, Example
from .config import TaskSpec

PLUS, EQUALS = 10, 11   # token ids for modular-arithmetic operators; digits are 0-9


def _digits(n: int) -> tuple[int, ...]:
    return tuple(int(c) for c in str(n))


class _Sampler:
    def __init__(self, spec: TaskSpec, rng: np.random.Generator):
        self.spec = spec
        self.rng = rng
        self._windows: list[Example] | None = None

    def copy(self) -> Example:
        s = tuple(int(t) for t in self.rng.integers(0, self.spec.vocab, self.spec.length))
        return s, s

    def reverse(self) -> Example:
        s, _ = self.copy()
        return s, s[::-1]

    def modular(self) -> Example:
        p = self.spec.modulus
        a, b = (int(v) for v in self.rng.integers(0, p, 2))
        return _digits(a) + (PLUS,) + _digits(b) + (EQUALS,), _digits((a + b) % p)

    def charlm(self) -> Example:
        if self._windows is None:
            path = Path(self.spec.path)
            try:
                data = path.read_bytes()
            except OSError as exc:
                raise InputError(f"cannot read corpus {path}: {exc}") from exc
            w, pl = self.spec.window, self.spec.prompt_len
            if not 0 < pl < w or len(data) < w:
                raise InputError(f"corpus {path} too short for window {w}")
            toks = np.frombuffer(data, dtype=np.uint8).astype(int)
            if toks.max() >= self.spec.vocab:
                raise InputError(f"corpus byte values exceed vocab {self.spec.vocab}")
            self._windows = [(tuple(toks[i:i + pl].tolist()), tuple(toks[i + pl:i + w].tolist()))
                             for i in range(len(toks) - w + 1)]
        return self._windows[int(self.rng.integers(len(self._windows)))]

    def draw(self, kind: str) -> Example:
        return getattr(self, kind)()


def make_dataset(spec: TaskSpec, n: int | None = None, seed: int = 0) -> DatasetSplit:
    """Sample ``n`` distinct examples and split them 90/10 into train/dev.

    Mixtures draw the component task per example with the given weights and
    record it as a tag. Sampling is deterministic in ``seed``.
    """
    n = spec.n_examples if n is None else n
    if n < 2:
        raise InputError("dataset needs n >= 2")
    rng = np.random.default_rng([seed, 11])
    sampler = _Sampler(spec, rng)
    if spec.kind == "mix":
        names, weights = zip(*spec.mix_weights())
    else:
        names, weights = (spec.kind,), (1.0,)
    cum = np.cumsum(weights)
    seen: set[Example] = set()
    examples: list[Example] = []
    tags: list[str] = []
    attempts = 0
    while len(examples) < n:
        attempts += 1
        if attempts > 50 * n + 1000:
            raise InputError(f"could only draw {len(examples)} distinct examples of {n}")
        kind = names[int(np.searchsorted(cum, rng.random() * cum[-1], side="right"))] \
            if len(names) > 1 else names[0]
        ex = sampler.draw(kind)
        if ex in seen:
            continue
        seen.add(ex)
        examples.append(ex)
        tags.append(kind)
    n_train = max(1, int(round(0.9 * n)))
    n_train = min(n_train, n - 1)
    return DatasetSplit(examples[:n_train], examples[n_train:], tags[:n_train], tags[n_train:])
