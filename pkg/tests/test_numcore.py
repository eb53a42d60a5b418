import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from milora import numcore as nc
from milora.numcore import OMEGA, THETA, AdamW, Parameter, Tensor

from _fd import analytic_grads, numeric_grad, rel_error


def naive_matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def test_matmul_hand_case():
    out = nc.matmul(Tensor([[1, 2], [3, 4]]), Tensor([[5], [6]]))
    assert out.data.tolist() == [[17.0], [39.0]]


def test_matmul_identity():
    a = np.random.default_rng(1).normal(size=(3, 3))
    assert np.array_equal((Tensor(a) @ Tensor(np.eye(3))).data, a)


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(2)
    a, b = rng.normal(size=(4, 4)), rng.normal(size=(4, 4))
    assert np.abs(nc.matmul(Tensor(a), Tensor(b)).data - naive_matmul(a, b)).max() < 1e-12


def test_matmul_shape_mismatch():
    with pytest.raises(nc.DimensionError):
        nc.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_softmax_cases():
    assert np.allclose(nc.softmax(Tensor([2.0, 2.0, 2.0, 2.0])).data, 0.25, atol=1e-15)
    out = nc.softmax(Tensor([0.0, np.log(2.0)])).data
    assert np.abs(out - [1 / 3, 2 / 3]).max() < 1e-15


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.integers(1, 9), elements=st.floats(-30, 30)),
       st.floats(-50, 50))
def test_softmax_sums_to_one_and_shift_invariant(x, c):
    p = nc.softmax(Tensor(x)).data
    assert abs(p.sum() - 1.0) < 1e-12
    assert np.all(p >= 0)
    assert np.abs(nc.softmax(Tensor(x + c)).data - p).max() < 1e-12


def test_backward_square_sum():
    x = Parameter(np.array([1.0, -2.0, 3.5]))
    nc.backward((x * x).sum())
    assert np.array_equal(x.grad, 2 * x.data)


def test_backward_accumulates_until_zeroed():
    x = Parameter(np.array([1.0, 2.0]))
    nc.backward((x * x).sum())
    nc.backward((x * x).sum())
    assert np.array_equal(x.grad, 4 * x.data)
    x.zero_grad()
    assert not x.grad.any()


def test_constant_operand_gets_no_grad():
    x = Parameter(np.array([1.0, 2.0]))
    c = Tensor(np.array([3.0, 4.0]))
    nc.backward((x * c).sum())
    assert c.grad is None
    assert np.array_equal(x.grad, c.data)


def test_backward_requires_scalar():
    x = Parameter(np.ones(3))
    with pytest.raises(nc.ContractError):
        nc.backward(x * 2.0)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_is_an_error():
    with pytest.raises(FloatingPointError):
        nc.log(Tensor([0.0]))


def _ops(rng):
    """(name, builder(params) -> scalar, param shapes) for each differentiable op."""
    w = rng.normal(size=(3, 4))
    idx = np.array([[0, 2], [1, 1]])
    return [
        ("add_broadcast", lambda a, b: ((a + b) * w).sum(), [(3, 4), (4,)]),
        ("sub", lambda a, b: ((a - b) * w).sum(), [(3, 4), (3, 1)]),
        ("mul", lambda a, b: ((a * b) * w).sum(), [(3, 4), (1, 4)]),
        ("div", lambda a, b: ((a / (nc.exp(b) + 1.0)) * w).sum(), [(3, 4), (3, 4)]),
        ("matmul", lambda a, b: ((a @ b) * rng_fixed(rng, (3, 2))).sum(), [(3, 4), (4, 2)]),
        ("batched_matmul", lambda a, b: (a @ b).sum(), [(2, 3, 4), (4, 5)]),
        ("exp_log", lambda a: (nc.log(nc.exp(a) + 2.0) * w).sum(), [(3, 4)]),
        ("sqrt", lambda a: (nc.sqrt(a * a + 1.0) * w).sum(), [(3, 4)]),
        ("abs", lambda a: (nc.tabs(a) * w).sum(), [(3, 4)]),
        ("sigmoid", lambda a: (nc.sigmoid(a) * w).sum(), [(3, 4)]),
        ("silu", lambda a: (nc.silu(a) * w).sum(), [(3, 4)]),
        ("gelu", lambda a: (nc.gelu(a) * w).sum(), [(3, 4)]),
        ("relu", lambda a: (nc.relu(a) * w).sum(), [(3, 4)]),
        ("softmax", lambda a: (nc.softmax(a, axis=-1) * w).sum(), [(3, 4)]),
        ("softmax_axis0", lambda a: (nc.softmax(a, axis=0) * w).sum(), [(3, 4)]),
        ("log_softmax", lambda a: (nc.log_softmax(a) * w).sum(), [(3, 4)]),
        ("rms_norm", lambda a, g: (nc.rms_norm(a, g) * w).sum(), [(3, 4), (4,)]),
        ("transpose", lambda a: (nc.transpose(a) @ w).sum(), [(3, 4)]),
        ("reshape", lambda a: (a.reshape(4, 3) * w.reshape(4, 3)).sum(), [(3, 4)]),
        ("getitem", lambda a: (a[idx[0], idx[1]] * 3.0).sum() + a[1:, :2].sum(), [(3, 4)]),
        ("concat", lambda a, b: (nc.concat([a, b], axis=0) * rng_fixed(rng, (5, 4))).sum(),
         [(3, 4), (2, 4)]),
        ("mean", lambda a: (a.mean(axis=0) * w[0]).sum(), [(3, 4)]),
        ("max", lambda a: (nc.tmax(a, axis=0) * w[0]).sum(), [(3, 4)]),
        ("rope", lambda a: (nc.rope(a, np.cos(w), np.sin(w)) * w).sum(), [(3, 4)]),
        ("embedding", lambda a: (nc.embedding(a, np.array([[0, 2], [2, 1]])) * 1.5).sum()
         + (nc.embedding(a, np.array([1])) * w[0]).sum(), [(3, 4)]),
    ]


_FIXED = {}


def rng_fixed(rng, shape):
    if shape not in _FIXED:
        _FIXED[shape] = np.random.default_rng(99).normal(size=shape)
    return _FIXED[shape]


@pytest.mark.parametrize("name", [o[0] for o in _ops(np.random.default_rng(0))])
def test_op_gradients_match_finite_differences(name):
    rng = np.random.default_rng(0)
    op = {o[0]: o for o in _ops(rng)}[name]
    _, fn, shapes = op
    for trial in range(10):
        prng = np.random.default_rng(100 + trial)
        params = [Parameter(prng.normal(size=s)) for s in shapes]
        f = lambda: fn(*params)
        grads = analytic_grads(f, params)
        for p, g in zip(params, grads):
            assert rel_error(g, numeric_grad(f, p)) < 1e-5, name


def test_backward_visits_each_node_once():
    x = Parameter(np.array([2.0]))
    y = x * x
    z = y + y   # y reached twice
    nc.backward(z.sum())
    assert np.array_equal(x.grad, [8.0])


def test_deep_graph_no_recursion_limit():
    x = Parameter(np.array([1.0]))
    y = x
    for _ in range(5000):
        y = y * 1.0
    nc.backward(y.sum())
    assert x.grad[0] == 1.0


# ---------------------------------------------------------------- AdamW

def test_adamw_zero_grad_no_decay_is_noop():
    p = Parameter(np.array([1.0, -2.0]))
    opt = AdamW([p], OMEGA, lr=0.1)
    opt.step()
    assert np.array_equal(p.data, [1.0, -2.0])


def test_adamw_descends_on_square():
    w = Parameter(np.array([1.0]))
    opt = AdamW([w], OMEGA, lr=0.1)
    nc.backward((w * w).sum())
    opt.step()
    assert w.data[0] ** 2 < 1.0


def reference_adamw(w, grads, lr, wd, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t, g in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh = m / (1 - b1 ** t)
        vh = v / (1 - b2 ** t)
        w = w * (1 - lr * wd) - lr * mh / (np.sqrt(vh) + eps)
    return w


def test_adamw_matches_scalar_recurrence():
    p = Parameter(np.array([0.7]))
    opt = AdamW([p], OMEGA, lr=0.05, weight_decay=0.1)
    grads = []
    for _ in range(3):
        p.zero_grad()
        nc.backward((p * p * p).sum())
        grads.append(float(p.grad[0]))
        opt.step()
    assert abs(p.data[0] - reference_adamw(0.7, grads, 0.05, 0.1)) < 1e-15


def test_adamw_first_step_is_lr_times_sign():
    p = Parameter(np.array([0.3]))
    opt = AdamW([p], OMEGA, lr=0.01)
    p.grad = np.array([5.0])
    opt.step()
    assert abs(p.data[0] - reference_adamw(0.3, [5.0], 0.01, 0.0)) < 1e-15


def test_adamw_rejects_nonpositive_lr():
    with pytest.raises(nc.ConfigError):
        AdamW([], OMEGA, lr=0.0)


def test_adamw_group_isolation():
    a = Parameter(np.ones(3), group=OMEGA)
    b = Parameter(np.ones(3), group=THETA)
    nc.backward((a * b).sum())
    before_b = b.data.copy()
    AdamW([a, b], OMEGA, lr=0.1).step()
    assert np.array_equal(b.data, before_b) and not np.array_equal(a.data, np.ones(3))
    before_a = a.data.copy()
    AdamW([a, b], THETA, lr=0.1).step()
    assert np.array_equal(a.data, before_a)
    # grads are left untouched by the step
    assert np.array_equal(b.grad, np.ones(3))


def test_parameter_group_is_fixed():
    p = Parameter(np.ones(2), group=THETA)
    with pytest.raises(AttributeError):
        p.group = OMEGA
    with pytest.raises(nc.ConfigError):
        Parameter(np.ones(2), group="gamma")


def test_no_grad_is_per_thread():
    import threading
    entered, release = threading.Barrier(2), threading.Event()

    def hold():
        with nc.no_grad():
            entered.wait()
            release.wait()

    t = threading.Thread(target=hold)
    t.start()
    entered.wait()
    assert nc.grad_enabled()
    release.set()
    t.join()
    x = Parameter(np.ones(3))
    (x * x).sum().backward()
    assert np.allclose(x.grad, 2.0)


def test_no_grad_restores_after_exception():
    with pytest.raises(KeyError):
        with nc.no_grad():
            assert not nc.grad_enabled()
            raise KeyError
    assert nc.grad_enabled()
