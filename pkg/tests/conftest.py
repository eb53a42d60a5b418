import numpy as np
import pytest

from milora.backbone import BackboneConfig
from milora.model import AdapterConfig, MiLoRAModel


def small_backbone(**kw):
    base = dict(vocab_size=13, d_model=16, n_layers=4, n_heads=2, d_ffn=24, max_seq_len=64)
    base.update(kw)
    return BackboneConfig(**base)


def randomize_adapters(model, seed=0, scale=0.3):
    """Give W_B (and router weights) non-trivial values so adapters matter."""
    rng = np.random.default_rng(seed)
    for layer in model.experts:
        for e in layer:
            e.B.data[...] = rng.normal(0.0, scale, e.B.shape)
    for r in model.routers:
        r.W_r.data[...] = rng.normal(0.0, 1.0, r.W_r.shape)
        if r.W_sa is not None:
            r.W_sa.data[...] = rng.normal(0.0, 0.5, r.W_sa.shape)
    return model


@pytest.fixture
def tiny_model():
    return randomize_adapters(MiLoRAModel(small_backbone(), AdapterConfig(rank=2, k=3), seed=3))


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
