"""Prompt-aware LoRA router: pool, rational activation, linear, softmax, top-k."""

from __future__ import annotations

import functools
from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import numcore as nc
from .backbone import N_MOD, InputError
from .numcore import OMEGA, THETA, Parameter, Tensor


class PoolerKind(str, Enum):
    LAST = "last"
    MEAN = "mean"
    MAX = "max"
    SELF_ATTENTION = "self_attention"


class GatingMode(str, Enum):
    BINARY = "binary"
    WEIGHTED = "weighted"


class FitError(RuntimeError):
    pass


# ---------------------------------------------------------------- rational activation

class RationalActivation:
    """Ra(x) = P(x) / (1 + |Q(x)|), P of order m, Q of order n without constant term.

    ``safe_terms=True`` switches the denominator to 1 + sum_i |b_i x^i|.
    """

    def __init__(self, a, b, safe_terms: bool = False, name: str = "act"):
        self.a = Parameter(np.asarray(a, dtype=np.float64).copy(), group=THETA, name=f"{name}.a")
        self.b = Parameter(np.asarray(b, dtype=np.float64).copy(), group=THETA, name=f"{name}.b")
        self.safe_terms = safe_terms

    @property
    def orders(self) -> tuple[int, int]:
        return self.a.shape[0] - 1, self.b.shape[0]

    def parameters(self) -> list[Parameter]:
        return [self.a, self.b]

    def __call__(self, x):
        return rational_eval(self, x)


def rational_eval(act: RationalActivation, x) -> Tensor:
    x = nc.as_tensor(x)
    m, n = act.orders
    num = act.a[m]
    for j in range(m - 1, -1, -1):
        num = num * x + act.a[j]
    if act.safe_terms:
        den = 1.0
        xp = x
        for i in range(n):
            den = den + nc.tabs(act.b[i] * xp)
            if i + 1 < n:
                xp = xp * x
    else:
        q = act.b[n - 1]
        for i in range(n - 2, -1, -1):
            q = q * x + act.b[i]
        den = 1.0 + nc.tabs(q * x)
    return num / den


def rational_np(a: np.ndarray, b: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Plain numpy evaluation (|sum| denominator)."""
    num = np.polynomial.polynomial.polyval(x, a)
    q = np.polynomial.polynomial.polyval(x, np.concatenate([[0.0], b]))
    return num / (1.0 + np.abs(q))


GELU_GRID = np.round(np.arange(-300, 301) * 0.01, 10)


def _residual_and_jac(theta: np.ndarray, m: int, x: np.ndarray, y: np.ndarray):
    a, b = theta[: m + 1], theta[m + 1:]
    vx = np.vander(x, m + 1, increasing=True)
    P = vx @ a
    n = b.shape[0]
    vq = np.vander(x, n + 1, increasing=True)[:, 1:]
    Q = vq @ b
    D = 1.0 + np.abs(Q)
    r = P / D - y
    J = np.empty((x.shape[0], theta.shape[0]))
    J[:, : m + 1] = vx / D[:, None]
    J[:, m + 1:] = (-(P / (D * D)) * np.sign(Q))[:, None] * vq
    return r, J


@functools.lru_cache(maxsize=8)
def _fit_cached(m: int, n: int, max_iter: int) -> tuple[tuple[float, ...], tuple[float, ...], float]:
    x = GELU_GRID
    y = nc.gelu_np(x)
    # Linearised start: P(x) - y Q(x) = y, assuming Q >= 0 on the grid.
    vx = np.vander(x, m + 1, increasing=True)
    vq = np.vander(x, n + 1, increasing=True)[:, 1:]
    lin = np.linalg.lstsq(np.hstack([vx, -y[:, None] * vq]), y, rcond=None)[0]
    theta = lin
    r, J = _residual_and_jac(theta, m, x, y)
    cost = float(r @ r)
    damping = 1e-3
    for _ in range(max_iter):
        JtJ = J.T @ J
        g = J.T @ r
        step = np.linalg.solve(JtJ + damping * np.diag(np.diag(JtJ) + 1e-12), -g)
        cand = theta + step
        r2, J2 = _residual_and_jac(cand, m, x, y)
        c2 = float(r2 @ r2)
        if np.isfinite(c2) and c2 < cost:
            improvement = cost - c2
            theta, r, J, cost = cand, r2, J2, c2
            damping = max(damping / 3.0, 1e-12)
            if improvement < 1e-16 * max(cost, 1e-30):
                break
        else:
            damping *= 4.0
            if damping > 1e12:
                break
    if not np.all(np.isfinite(theta)):
        raise FitError(f"GeLU fit diverged (cost={cost}, damping={damping})")
    resid = float(np.max(np.abs(rational_np(theta[: m + 1], theta[m + 1:], x) - y)))
    return tuple(theta[: m + 1]), tuple(theta[m + 1:]), resid


def fit_gelu_coefficients(m: int = 6, n: int = 5, max_iter: int = 500):
    """Damped least-squares (Levenberg-Marquardt) fit of Ra to GeLU on [-3, 3].

    Returns ``(a, b, max_abs_residual)``; the result is deterministic.
    """
    if m < 1 or n < 1:
        raise nc.ConfigError("rational orders must be >= 1")
    a, b, resid = _fit_cached(m, n, max_iter)
    if not np.isfinite(resid) or resid > 0.1:
        raise FitError(f"GeLU fit did not converge: max residual {resid:.3g} (m={m}, n={n})")
    return np.array(a), np.array(b), resid


def fit_gelu_init(m: int = 6, n: int = 5, name: str = "act") -> RationalActivation:
    a, b, _ = fit_gelu_coefficients(m, n)
    return RationalActivation(a, b, name=name)


class FixedActivation:
    """Non-learnable router activation (GeLU / ReLU / identity ablations)."""

    def __init__(self, kind: str):
        if kind not in ("gelu", "relu", "identity"):
            raise nc.ConfigError(f"unknown activation {kind!r}")
        self.kind = kind

    def parameters(self) -> list[Parameter]:
        return []

    def __call__(self, x):
        if self.kind == "gelu":
            return nc.gelu(x)
        if self.kind == "relu":
            return nc.relu(x)
        return nc.as_tensor(x)


# ---------------------------------------------------------------- pooling

def pool(H, kind: PoolerKind, W_sa: Parameter | None = None) -> Tensor:
    """Reduce prompt states (n_p, d) or (B, n_p, d) to (1, d) or (B, d)."""
    H = nc.as_tensor(H)
    if H.ndim == 2:
        H = H.reshape(1, *H.shape)
    if H.shape[1] < 1:
        raise InputError("cannot pool an empty sequence")
    kind = PoolerKind(kind)
    if kind is PoolerKind.LAST:
        out = H[:, -1, :]
    elif kind is PoolerKind.MEAN:
        out = nc.mean(H, axis=1)
    elif kind is PoolerKind.MAX:
        out = nc.tmax(H, axis=1)
    else:
        if W_sa is None:
            raise nc.ConfigError("self-attention pooling needs W_sa")
        A = nc.softmax(H @ W_sa, axis=1)              # (B, n_p, 1)
        out = (nc.transpose(A, (0, 2, 1)) @ H).reshape(H.shape[0], H.shape[2])
    return out


# ---------------------------------------------------------------- routing

@dataclass(frozen=True)
class LayerRoute:
    indices: tuple[int, ...]
    gates: tuple[float, ...]
    probs: tuple[float, ...]


@dataclass(frozen=True)
class RoutingDecision:
    layers: tuple[LayerRoute, ...]

    def gate_vector(self, l: int) -> np.ndarray:
        g = np.zeros(N_MOD)
        entry = self.layers[l]
        g[list(entry.indices)] = entry.gates
        return g


def select_topk(p: np.ndarray, k: int) -> np.ndarray:
    """Row-wise top-k indices (sorted ascending); ties go to the lower index."""
    if not 1 <= k <= p.shape[-1]:
        raise nc.ConfigError(f"k must be in [1, {p.shape[-1]}], got {k}")
    order = np.argsort(-p, axis=-1, kind="stable")[..., :k]
    return np.sort(order, axis=-1)


def gates_from_probs(p: Tensor, k: int, mode: GatingMode) -> tuple[Tensor, np.ndarray]:
    """Dense (B, N_mod) gate tensor and the boolean selection mask."""
    idx = select_topk(p.data, k)
    mask = np.zeros(p.shape, dtype=bool)
    np.put_along_axis(mask, idx, True, axis=-1)
    if GatingMode(mode) is GatingMode.BINARY:
        return Tensor(mask.astype(np.float64)), mask
    sel = p * mask.astype(np.float64)
    return sel / sel.sum(axis=-1, keepdims=True), mask


class LoraRouter:
    def __init__(self, d_model: int, layer: int, pooler: PoolerKind = PoolerKind.SELF_ATTENTION,
                 activation=None, rng: np.random.Generator | None = None,
                 init_scale: float = 0.02):
        self.layer = layer
        self.pooler = PoolerKind(pooler)
        rng = rng if rng is not None else np.random.default_rng(0)
        w = rng.normal(0.0, init_scale, (d_model, N_MOD)) if init_scale > 0 else np.zeros((d_model, N_MOD))
        self.W_r = Parameter(w, group=OMEGA, name=f"router.{layer}.W_r")
        self.W_sa = (Parameter(np.zeros((d_model, 1)), group=OMEGA, name=f"router.{layer}.W_sa")
                     if self.pooler is PoolerKind.SELF_ATTENTION else None)
        self.activation = activation if activation is not None else fit_gelu_init(name=f"router.{layer}.act")

    def parameters(self) -> list[Parameter]:
        ps = [self.W_r] + ([self.W_sa] if self.W_sa is not None else [])
        return ps + self.activation.parameters()

    @property
    def param_count(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def probs_from_pooled(self, h) -> Tensor:
        return nc.softmax(self.activation(h) @ self.W_r, axis=-1)

    def probs(self, H) -> Tensor:
        """Router distribution p^l for prompt states H (B, n_p, d) -> (B, N_mod)."""
        return self.probs_from_pooled(pool(H, self.pooler, self.W_sa))


def route(router: LoraRouter, h, k: int, mode: GatingMode) -> tuple[LayerRoute, np.ndarray]:
    """Route a single pooled vector h (1, d)."""
    if not 1 <= k <= N_MOD:
        raise nc.ConfigError(f"k must be in [1, {N_MOD}], got {k}")
    h = nc.as_tensor(h)
    if h.ndim == 1:
        h = h.reshape(1, -1)
    with nc.no_grad():
        p = router.probs_from_pooled(h)
        gates, mask = gates_from_probs(p, k, mode)
    idx = tuple(int(i) for i in np.flatnonzero(mask[0]))
    entry = LayerRoute(idx, tuple(float(gates.data[0, i]) for i in idx), tuple(p.data[0].tolist()))
    return entry, p.data[0].copy()


def load_balance_stats(P) -> tuple[np.ndarray, Tensor]:
    """(f, p_hat) for a batch of router distributions P (N_B, N_mod).

    f counts hard argmax assignments (ties to the lowest index) and is a
    constant; p_hat is the batch-mean probability and keeps the graph.
    """
    P = nc.as_tensor(P)
    if P.ndim != 2 or P.shape[0] < 1:
        raise InputError("load-balance stats need a non-empty (N_B, N_mod) batch")
    top = np.argmax(P.data, axis=-1)
    f = np.bincount(top, minlength=P.shape[1]) / P.shape[0]
    return f, nc.mean(P, axis=0)
