import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from milora import numcore as nc
from milora.backbone import N_MOD, InputError
from milora.numcore import OMEGA, THETA, Parameter, Tensor
from milora.router import (GELU_GRID, FixedActivation, GatingMode, LoraRouter, PoolerKind,
                           RationalActivation, _fit_cached, fit_gelu_coefficients, fit_gelu_init,
                           load_balance_stats, pool, rational_eval, route, select_topk)

from _fd import analytic_grads, numeric_grad, rel_error

# Max |Ra - GeLU| on the [-3, 3] step-0.01 grid reached by an independent
# Levenberg-Marquardt fit (scipy.optimize.least_squares, method="lm",
# tolerances 1e-15) started from the linearised Pade solution.
GELU_FIT_ORACLE_RESIDUAL = 1.1118926797504258e-04


# ---------------------------------------------------------------- pooling

@pytest.mark.parametrize("kind", list(PoolerKind))
def test_constant_sequence_pools_to_itself(kind):
    v = np.array([0.5, -1.0, 2.0])
    H = Tensor(np.tile(v, (4, 1)))
    W_sa = Parameter(np.random.default_rng(0).normal(size=(3, 1)))
    out = pool(H, kind, W_sa).data
    assert out.shape == (1, 3)
    assert np.abs(out[0] - v).max() < 1e-12


def test_self_attention_with_zero_weights_is_mean():
    H = Tensor(np.random.default_rng(1).normal(size=(2, 5, 4)))
    sa = pool(H, PoolerKind.SELF_ATTENTION, Parameter(np.zeros((4, 1)))).data
    assert np.abs(sa - pool(H, PoolerKind.MEAN).data).max() < 1e-12


def test_max_pool_hand_case():
    assert pool(Tensor([[1.0, 4.0], [3.0, 2.0]]), PoolerKind.MAX).data.tolist() == [[3.0, 4.0]]


def test_last_token_pool():
    H = np.arange(12.0).reshape(3, 4)
    assert pool(Tensor(H), PoolerKind.LAST).data.tolist() == [H[-1].tolist()]


def test_self_attention_pool_formula():
    rng = np.random.default_rng(2)
    H, w = rng.normal(size=(5, 3)), rng.normal(size=(3, 1))
    u = H @ w
    a = np.exp(u - u.max()) / np.exp(u - u.max()).sum()
    assert np.abs(pool(Tensor(H), PoolerKind.SELF_ATTENTION, Parameter(w)).data - a.T @ H).max() < 1e-12


def test_empty_sequence_is_rejected():
    with pytest.raises(InputError):
        pool(Tensor(np.zeros((0, 3))), PoolerKind.MEAN)


# ---------------------------------------------------------------- rational activation

def test_identity_coefficients():
    act = RationalActivation([0, 1, 0, 0, 0, 0, 0], np.zeros(5))
    x = np.linspace(-5, 5, 1001)
    assert np.abs(rational_eval(act, Tensor(x)).data - x).max() <= 1e-15


@pytest.mark.parametrize("safe", [False, True])
def test_value_at_zero_is_a0(safe):
    rng = np.random.default_rng(3)
    act = RationalActivation(rng.normal(size=7), rng.normal(size=5), safe_terms=safe)
    assert rational_eval(act, Tensor([0.0])).data[0] == act.a.data[0]


def test_rational_formula_and_positive_denominator():
    rng = np.random.default_rng(4)
    a, b = rng.normal(size=7), rng.normal(size=5)
    x = np.linspace(-4, 4, 81)
    num = sum(a[j] * x ** j for j in range(7))
    q = sum(b[i - 1] * x ** i for i in range(1, 6))
    got = rational_eval(RationalActivation(a, b), Tensor(x)).data
    assert np.abs(got - num / (1 + np.abs(q))).max() < 1e-9
    safe = rational_eval(RationalActivation(a, b, safe_terms=True), Tensor(x)).data
    den = 1 + sum(np.abs(b[i - 1] * x ** i) for i in range(1, 6))
    assert np.abs(safe - num / den).max() < 1e-9


def test_gelu_fit_quality():
    a, b, resid = fit_gelu_coefficients(6, 5)
    act = RationalActivation(a, b)
    err = np.abs(rational_eval(act, Tensor(GELU_GRID)).data - nc.gelu_np(GELU_GRID)).max()
    assert err == pytest.approx(resid, rel=1e-9)
    assert err <= 2 * GELU_FIT_ORACLE_RESIDUAL
    assert abs(rational_eval(act, Tensor([0.0])).data[0]) <= resid


def test_gelu_fit_is_deterministic():
    a1, b1, _ = _fit_cached.__wrapped__(6, 5, 500)
    a2, b2, _ = _fit_cached.__wrapped__(6, 5, 500)
    assert a1 == a2 and b1 == b2


def test_gelu_init_groups():
    act = fit_gelu_init()
    assert act.a.group == THETA and act.b.group == THETA
    assert act.orders == (6, 5)


@pytest.mark.parametrize("safe", [False, True])
def test_rational_gradients(safe):
    rng = np.random.default_rng(5)
    act = RationalActivation(rng.normal(size=7) * 0.3, rng.normal(size=5) * 0.3, safe_terms=safe)
    x = Parameter(rng.normal(size=(3, 4)) * 1.5)
    w = rng.normal(size=(3, 4))
    f = lambda: (rational_eval(act, x) * w).sum()
    params = [x, act.a, act.b]
    for p, g in zip(params, analytic_grads(f, params)):
        assert rel_error(g, numeric_grad(f, p)) < 1e-5


# ---------------------------------------------------------------- routing

def _router(d=6, seed=0, pooler=PoolerKind.SELF_ATTENTION, activation=None):
    return LoraRouter(d, 0, pooler, activation, rng=np.random.default_rng(seed), init_scale=1.0)


def test_router_groups():
    r = _router()
    assert r.W_r.group == OMEGA and r.W_sa.group == OMEGA
    assert {p.group for p in r.activation.parameters()} == {THETA}


def test_zero_router_weights_give_uniform_and_tie_break():
    r = _router()
    r.W_r.data[...] = 0.0
    entry, p = route(r, np.ones((1, 6)), 3, GatingMode.WEIGHTED)
    assert np.abs(p - 1 / 7).max() < 1e-15
    assert entry.indices == (0, 1, 2)
    assert np.allclose(entry.gates, 1 / 3)


@pytest.mark.parametrize("mode", list(GatingMode))
def test_k1_favouring_q(mode):
    r = _router(activation=FixedActivation("identity"))
    r.W_r.data[...] = 0.0
    r.W_r.data[:, 0] = 1.0
    entry, _ = route(r, np.ones((1, 6)), 1, mode)
    assert entry.indices == (0,) and entry.gates == (1.0,)


def test_binary_gates_are_one():
    entry, _ = route(_router(seed=1), np.ones((1, 6)), 4, GatingMode.BINARY)
    assert entry.gates == (1.0,) * 4


def test_topk_matches_sort_oracle():
    r = _router(seed=2)
    rng = np.random.default_rng(9)
    for _ in range(50):
        h = rng.normal(size=(1, 6))
        k = int(rng.integers(1, 8))
        entry, p = route(r, h, k, GatingMode.WEIGHTED)
        oracle = sorted(sorted(range(N_MOD), key=lambda i: (-p[i], i))[:k])
        assert list(entry.indices) == oracle
        assert abs(p.sum() - 1) < 1e-12
        assert abs(sum(entry.gates) - 1) < 1e-12
        assert all(g >= 0 for g in entry.gates)


def test_k_out_of_range():
    with pytest.raises(nc.ConfigError):
        route(_router(), np.ones((1, 6)), 0, GatingMode.WEIGHTED)
    with pytest.raises(nc.ConfigError):
        route(_router(), np.ones((1, 6)), 8, GatingMode.WEIGHTED)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-20, 20), min_size=7, max_size=7), st.floats(-100, 100),
       st.integers(1, 7))
def test_topk_invariant_to_shift_and_monotone_maps(logits, c, k):
    z = np.array(logits)
    p = nc.softmax(Tensor(z)).data
    base = set(select_topk(p[None], k)[0].tolist())
    assert set(select_topk(nc.softmax(Tensor(z + c)).data[None], k)[0].tolist()) == base \
        or _has_ties(p, k)
    assert set(select_topk(z[None], k)[0].tolist()) == base or _has_ties(p, k)
    assert set(select_topk(np.arctan(z)[None] * 3 + 1, k)[0].tolist()) == base or _has_ties(p, k)


def _has_ties(p, k):
    s = np.sort(p)[::-1]
    return k < len(p) and np.isclose(s[k - 1], s[k], rtol=1e-12, atol=0)


def test_routing_is_deterministic():
    r = _router(seed=4)
    h = np.random.default_rng(0).normal(size=(1, 6))
    assert route(r, h, 3, GatingMode.WEIGHTED) [0] == route(r, h, 3, GatingMode.WEIGHTED)[0]


# ---------------------------------------------------------------- load-balancing statistics

def test_stats_uniform_batch():
    f, p_hat = load_balance_stats(Tensor(np.full((5, 7), 1 / 7)))
    assert f.tolist() == [1, 0, 0, 0, 0, 0, 0]
    assert np.abs(p_hat.data - 1 / 7).max() < 1e-15


def test_stats_hand_case():
    f, p_hat = load_balance_stats(Tensor([[0.7, 0.3], [0.6, 0.4]]))
    assert f.tolist() == [1.0, 0.0]
    assert np.abs(p_hat.data - [0.65, 0.35]).max() < 1e-15


def test_stats_random_batch_direct_formula():
    rng = np.random.default_rng(6)
    P = rng.dirichlet(np.ones(7), size=12)
    f, p_hat = load_balance_stats(Tensor(P))
    f_ref = np.zeros(7)
    for row in P:
        best = max(range(7), key=lambda i: (row[i], -i))
        f_ref[best] += 1 / 12
    assert np.abs(f - f_ref).max() < 1e-15
    assert np.abs(p_hat.data - P.sum(0) / 12).max() < 1e-15


def test_stats_gradient_only_through_p_hat():
    P = Parameter(np.random.default_rng(7).dirichlet(np.ones(7), size=4))
    f, p_hat = load_balance_stats(P)
    nc.backward((p_hat * f).sum())
    assert np.allclose(P.grad, np.tile(f / 4, (4, 1)))
