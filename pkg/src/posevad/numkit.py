"""Small dense numeric kernel: LSTM cell, activations, Adam, gradient checking.

Everything works on float64 numpy arrays. Recurrent ops are batched along the
leading axis: ``x`` is ``(batch, input_dim)``, ``h`` and ``c`` are
``(batch, hidden_dim)``.
"""

from __future__ import annotations

from collections.abc import Callable, Collection, Mapping
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

GATES = ("i", "f", "g", "o")


class DimensionError(ValueError):
    """Array shapes do not agree with what an operation expects."""


class UsageError(RuntimeError):
    """An operation was called out of order or with unusable input."""


def sigmoid(x: np.ndarray) -> np.ndarray:
    return expit(x)


def softmax_row(v: np.ndarray) -> np.ndarray:
    """Max-subtracted softmax of a single score vector."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise DimensionError("softmax_row needs a non-empty 1-D vector")
    e = np.exp(v - v.max())
    return e / e.sum()


def softmax_rows(a: np.ndarray) -> np.ndarray:
    """Row-wise softmax over the last axis."""
    a = np.asarray(a, dtype=np.float64)
    if a.shape[-1] == 0:
        raise DimensionError("softmax over an empty axis")
    e = np.exp(a - a.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows_backward(p: np.ndarray, dp: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the logits given the softmax output ``p`` and upstream ``dp``."""
    return p * (dp - (dp * p).sum(axis=-1, keepdims=True))


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape if shape is not None else (fan_in, fan_out))


# --------------------------------------------------------------------------- LSTM


@dataclass
class LstmParams:
    """Gate weights stacked in (i, f, g, o) order along the output axis.

    ``W`` maps inputs ``(input_dim, 4*hidden)``, ``U`` maps the previous hidden
    state ``(hidden, 4*hidden)``, ``b`` is ``(4*hidden,)``.
    """

    W: np.ndarray
    U: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=np.float64)
        self.U = np.asarray(self.U, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        h4 = self.b.shape[0]
        if h4 % 4 or self.W.shape[1] != h4 or self.U.shape != (h4 // 4, h4):
            raise DimensionError(
                f"inconsistent LSTM shapes W{self.W.shape} U{self.U.shape} b{self.b.shape}"
            )

    @property
    def input_dim(self) -> int:
        return self.W.shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.U.shape[0]

    def gate(self, name: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Return views ``(W_name, U_name, b_name)`` for one gate."""
        k = GATES.index(name)
        H = self.hidden_dim
        sl = slice(k * H, (k + 1) * H)
        return self.W[:, sl], self.U[:, sl], self.b[sl]

    @classmethod
    def init(cls, rng: np.random.Generator, input_dim: int, hidden_dim: int,
             forget_bias: float = 1.0) -> LstmParams:
        W = np.concatenate(
            [xavier_uniform(rng, input_dim, hidden_dim) for _ in GATES], axis=1)
        U = np.concatenate(
            [xavier_uniform(rng, hidden_dim, hidden_dim) for _ in GATES], axis=1)
        b = np.zeros(4 * hidden_dim)
        b[hidden_dim:2 * hidden_dim] = forget_bias
        return cls(W, U, b)

    @classmethod
    def zeros(cls, input_dim: int, hidden_dim: int) -> LstmParams:
        return cls(np.zeros((input_dim, 4 * hidden_dim)),
                   np.zeros((hidden_dim, 4 * hidden_dim)),
                   np.zeros(4 * hidden_dim))

    def as_dict(self, prefix: str) -> dict[str, np.ndarray]:
        return {f"{prefix}.W": self.W, f"{prefix}.U": self.U, f"{prefix}.b": self.b}

    @classmethod
    def from_dict(cls, d: Mapping[str, np.ndarray], prefix: str) -> LstmParams:
        return cls(d[f"{prefix}.W"], d[f"{prefix}.U"], d[f"{prefix}.b"])


@dataclass
class LstmCache:
    x: np.ndarray
    h_prev: np.ndarray
    c_prev: np.ndarray
    i: np.ndarray
    f: np.ndarray
    g: np.ndarray
    o: np.ndarray
    tanh_c: np.ndarray
    params: LstmParams


def lstm_cell_forward(x, h, c, p: LstmParams):
    """One step of the gated recurrence.

    Returns ``(h_new, c_new, cache)``; the cache feeds :func:`lstm_cell_backward`.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    h = np.atleast_2d(np.asarray(h, dtype=np.float64))
    c = np.atleast_2d(np.asarray(c, dtype=np.float64))
    H = p.hidden_dim
    if x.shape[1] != p.input_dim or h.shape[1] != H or c.shape != h.shape or x.shape[0] != h.shape[0]:
        raise DimensionError(
            f"lstm step got x{x.shape} h{h.shape} c{c.shape} for params "
            f"({p.input_dim}->{H})"
        )
    z = x @ p.W + h @ p.U + p.b
    i = sigmoid(z[:, :H])
    f = sigmoid(z[:, H:2 * H])
    g = np.tanh(z[:, 2 * H:3 * H])
    o = sigmoid(z[:, 3 * H:])
    c_new = f * c + i * g
    tanh_c = np.tanh(c_new)
    h_new = o * tanh_c
    return h_new, c_new, LstmCache(x, h, c, i, f, g, o, tanh_c, p)


def lstm_cell_backward(cache: LstmCache | None, dh, dc):
    """Backprop one LSTM step.

    ``dh``/``dc`` are the gradients flowing into ``h_new``/``c_new``. Returns
    ``(grads, dx, dh_prev, dc_prev)`` with ``grads`` keyed ``W``, ``U``, ``b``.
    """
    if cache is None:
        raise UsageError("lstm_cell_backward needs the cache of a forward call")
    dh = np.asarray(dh, dtype=np.float64)
    dc = np.asarray(dc, dtype=np.float64)
    dz, dc_prev = _gate_grads(cache, dh, dc)
    p = cache.params
    grads = {"W": cache.x.T @ dz, "U": cache.h_prev.T @ dz, "b": dz.sum(axis=0)}
    dx = dz @ p.W.T
    dh_prev = dz @ p.U.T
    return grads, dx, dh_prev, dc_prev


def lstm_sequence_forward(xs: np.ndarray, p: LstmParams, h0=None, c0=None):
    """Run a cell over ``xs`` of shape ``(T, batch, input_dim)``.

    Returns hidden states ``(T, batch, hidden)``, the final cell state and the
    per-step caches. Equivalent to repeated :func:`lstm_cell_forward` (up to
    rounding), with the input projection done for all steps at once.
    """
    T, B, I = xs.shape
    H = p.hidden_dim
    if I != p.input_dim:
        raise DimensionError(f"sequence input dim {I} does not match params ({p.input_dim})")
    h = np.zeros((B, H)) if h0 is None else h0
    c = np.zeros((B, H)) if c0 is None else c0
    zx = xs @ p.W + p.b
    hs = np.empty((T, B, H))
    caches = []
    for t in range(T):
        z = zx[t] + h @ p.U
        i = expit(z[:, :H])
        f = expit(z[:, H:2 * H])
        g = np.tanh(z[:, 2 * H:3 * H])
        o = expit(z[:, 3 * H:])
        c_new = f * c + i * g
        tanh_c = np.tanh(c_new)
        caches.append(LstmCache(xs[t], h, c, i, f, g, o, tanh_c, p))
        h = o * tanh_c
        c = c_new
        hs[t] = h
    return hs, c, caches


def _gate_grads(cache: LstmCache, dh, dc):
    do = dh * cache.tanh_c
    dc_total = dc + dh * cache.o * (1.0 - cache.tanh_c ** 2)
    dz = np.concatenate([
        dc_total * cache.g * cache.i * (1.0 - cache.i),
        dc_total * cache.c_prev * cache.f * (1.0 - cache.f),
        dc_total * cache.i * (1.0 - cache.g ** 2),
        do * cache.o * (1.0 - cache.o),
    ], axis=1)
    return dz, dc_total * cache.f


def lstm_sequence_backward(caches, dhs: np.ndarray, dh_last=None, dc_last=None):
    """Backprop through :func:`lstm_sequence_forward`.

    ``dhs`` holds gradients on every emitted hidden state; ``dh_last``/``dc_last``
    are extra gradients on the final state. Returns ``(grads, dxs, dh0, dc0)``.
    """
    p = caches[0].params
    T = len(caches)
    B = dhs.shape[1]
    H = p.hidden_dim
    dzs = np.empty((T, B, 4 * H))
    dh_next = np.zeros((B, H)) if dh_last is None else dh_last
    dc_next = np.zeros((B, H)) if dc_last is None else dc_last
    for t in range(T - 1, -1, -1):
        dz, dc_next = _gate_grads(caches[t], dhs[t] + dh_next, dc_next)
        dzs[t] = dz
        dh_next = dz @ p.U.T
    xs = np.stack([c.x for c in caches])
    hp = np.stack([c.h_prev for c in caches])
    grads = {
        "W": xs.reshape(T * B, -1).T @ dzs.reshape(T * B, -1),
        "U": hp.reshape(T * B, -1).T @ dzs.reshape(T * B, -1),
        "b": dzs.sum(axis=(0, 1)),
    }
    dxs = dzs @ p.W.T
    return grads, dxs, dh_next, dc_next


# --------------------------------------------------------------------------- Adam


@dataclass(frozen=True)
class AdamState:
    lr: float = 0.004
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Mapping[str, np.ndarray] = field(default_factory=dict)
    v: Mapping[str, np.ndarray] = field(default_factory=dict)


def clip_by_global_norm(grads: Mapping[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if not np.isfinite(total) or total <= max_norm:
        return dict(grads)
    scale = max_norm / total
    return {k: g * scale for k, g in grads.items()}


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
              state: AdamState, frozen: Collection[str] = ()):
    """Bias-corrected Adam update.

    Returns ``(new_params, new_state)``; inputs are left untouched. Keys listed
    in ``frozen`` are copied through and never get moment buffers.
    """
    t = state.step + 1
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    new_params, m, v = {}, dict(state.m), dict(state.v)
    for k, p in params.items():
        if k in frozen:
            new_params[k] = p
            continue
        if k not in grads:
            raise DimensionError(f"no gradient for parameter {k!r}")
        g = grads[k]
        if g.shape != p.shape:
            raise DimensionError(f"gradient for {k!r} has shape {g.shape}, parameter {p.shape}")
        m_k = state.beta1 * m.get(k, np.zeros_like(p)) + (1.0 - state.beta1) * g
        v_k = state.beta2 * v.get(k, np.zeros_like(p)) + (1.0 - state.beta2) * (g * g)
        m[k], v[k] = m_k, v_k
        new_params[k] = p - state.lr * (m_k / bc1) / (np.sqrt(v_k / bc2) + state.eps)
    new_state = AdamState(state.lr, state.beta1, state.beta2, state.eps, t, m, v)
    return new_params, new_state


# --------------------------------------------------------------------------- grad check


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_param: str | None
    worst_index: tuple | None
    n_checked: int

    def passed(self, tol: float) -> bool:
        return self.max_rel_error < tol


def grad_check(loss_fn: Callable[[dict[str, np.ndarray]], tuple[float, dict[str, np.ndarray]]],
               params: Mapping[str, np.ndarray], step: float = 1e-5,
               floor: float = 1e-8, max_entries: int | None = None,
               rng: np.random.Generator | None = None, tol: float = 1e-4) -> GradCheckReport:
    """Compare analytic gradients against central differences.

    ``loss_fn(params)`` must return ``(loss, grads)``. Relative error per entry is
    ``|a - n| / max(|a|, |n|, floor, noise / tol)`` where ``noise`` estimates the
    rounding error of the difference quotient, ``16 * eps * |loss| / step``. A
    gradient entry far below that resolution is thus judged by its absolute
    error against the noise, so it cannot fail ``tol`` on rounding alone. With
    ``max_entries`` set, at most that many entries per parameter are probed
    (chosen with ``rng``).
    """
    params = {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}
    _, analytic = loss_fn(params)
    eps = np.finfo(np.float64).eps
    worst, worst_key, worst_idx, n = 0.0, None, None, 0
    for k, p in params.items():
        flat_idx = np.arange(p.size)
        if max_entries is not None and p.size > max_entries:
            flat_idx = (rng or np.random.default_rng(0)).choice(p.size, max_entries, replace=False)
        for fi in flat_idx:
            idx = np.unravel_index(fi, p.shape)
            orig = p[idx]
            p[idx] = orig + step
            lp, _ = loss_fn(params)
            p[idx] = orig - step
            lm, _ = loss_fn(params)
            p[idx] = orig
            num = (lp - lm) / (2.0 * step)
            noise = 16.0 * eps * max(abs(lp), abs(lm)) / step
            a = analytic[k][idx]
            err = abs(a - num) / max(abs(a), abs(num), floor, noise / tol)
            n += 1
            if err > worst:
                worst, worst_key, worst_idx = err, k, tuple(int(i) for i in idx)
    return GradCheckReport(float(worst), worst_key, worst_idx, n)
