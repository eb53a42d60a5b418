import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from milora import numcore as nc
from milora.backbone import N_MOD, Backbone, InputError, ModuleId, module_shape
from milora.inference import OpCounters
from milora.model import AdapterConfig, MiLoRAModel, decode_step, prefill

from conftest import randomize_adapters, small_backbone


def test_module_layout():
    cfg = small_backbone()
    assert N_MOD == 7 and [m.name for m in ModuleId] == list("QKVOGUD")
    assert module_shape(cfg, ModuleId.Q) == (16, 16)
    assert module_shape(cfg, ModuleId.G) == (16, 24)
    assert module_shape(cfg, ModuleId.D) == (24, 16)


def test_single_token_first_hidden_is_embedding():
    bb = Backbone(small_backbone(), np.random.default_rng(0))
    with nc.no_grad():
        res = bb.forward(np.array([[5]]))
    assert np.array_equal(res.hidden[0].data[0, 0], bb.embed.data[5])


def test_causality():
    bb = Backbone(small_backbone(), np.random.default_rng(1))
    ids = np.array([[1, 4, 2, 8, 5, 7]])
    edited = ids.copy()
    edited[0, 4:] = [0, 12]
    with nc.no_grad():
        a = bb.forward(ids).logits.data
        b = bb.forward(edited).logits.data
    assert np.abs(a[0, :4] - b[0, :4]).max() < 1e-12
    assert np.abs(a[0, 4:] - b[0, 4:]).max() > 1e-6


def test_prefill_equals_incremental_decode(tiny_model):
    ids = [3, 1, 4, 1, 5, 9, 2, 6]
    with nc.no_grad():
        full = tiny_model.forward(np.array([ids]), n_prompt=3)
    dec = full.routing
    out = prefill(tiny_model, ids[:1], decision=dec)
    cache = out.cache
    rows = [out.logits.data[0, -1]]
    for t in ids[1:]:
        o = decode_step(tiny_model, [t], cache, dec)
        cache = o.cache
        rows.append(o.logits.data[0, -1])
    with nc.no_grad():
        ref = tiny_model.forward(np.array([ids]), decision=dec).logits.data[0]
    assert np.abs(np.array(rows) - ref).max() < 1e-10


@settings(max_examples=15, deadline=None)
@given(st.lists(st.integers(0, 12), min_size=1, max_size=10),
       st.lists(st.integers(0, 12), min_size=1, max_size=16))
def test_cached_decode_matches_recompute(prompt, continuation):
    model = randomize_adapters(MiLoRAModel(small_backbone(), AdapterConfig(rank=2, k=3), seed=5))
    out = prefill(model, prompt)
    dec, cache = out.routing, out.cache
    seq = list(prompt)
    for t in continuation:
        o = decode_step(model, [t], cache, dec)
        cache = o.cache
        seq.append(t)
        with nc.no_grad():
            ref = model.forward(np.array([seq]), decision=dec).logits.data[0, -1]
        assert np.abs(o.logits.data[0, -1] - ref).max() < 1e-10
    assert cache.length == len(seq)


def test_no_adapters_equals_frozen_backbone():
    model = MiLoRAModel(small_backbone(), AdapterConfig(rank=2, k=3, routing=False), seed=2)
    ids = np.array([[2, 7, 1, 8]])
    with nc.no_grad():
        a = model.forward(ids, adapters=False).logits.data
        b = model.backbone.forward(ids).logits.data
    assert np.array_equal(a, b)


def test_zero_lora_b_equals_base(tiny_model):
    for layer in tiny_model.experts:
        for e in layer:
            e.B.data[...] = 0.0
    ids = np.array([[2, 7, 1, 8, 2, 8]])
    with nc.no_grad():
        adapted = tiny_model.forward(ids, n_prompt=4).logits.data
        base = tiny_model.backbone.forward(ids).logits.data
    assert np.abs(adapted - base).max() <= 1e-12


def test_decode_step_never_routes(tiny_model):
    out = prefill(tiny_model, [1, 2, 3])
    counters = OpCounters()
    decode_step(tiny_model, [4], out.cache, out.routing, counters=counters)
    assert counters.router_evals == 0
    assert counters.adapter_macs > 0


def test_decode_step_requires_decision(tiny_model):
    out = prefill(tiny_model, [1, 2, 3])
    with pytest.raises(nc.ContractError):
        decode_step(tiny_model, [4], out.cache, None)


def test_token_out_of_range():
    bb = Backbone(small_backbone(), np.random.default_rng(0))
    with pytest.raises(InputError):
        bb.forward(np.array([[1, 13]]))
    with pytest.raises(InputError):
        bb.forward(np.zeros((1, 65), dtype=int))


def test_bad_config():
    with pytest.raises(nc.ConfigError):
        small_backbone(d_model=18, n_heads=4)
