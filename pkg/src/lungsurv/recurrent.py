"""Recurrent cells for irregularly sampled scan sequences.

Three cells share one gate layout (input, forget, candidate, output stacked
along the first weight axis):

* ``LstmCell`` ignores inter-scan gaps entirely.
* ``TalstmCell`` decays the short-term component of the carry state by
  1/log(e + dt) before the gates see it.
* ``TlstmCell`` feeds the scaled gap additively into every gate
  pre-activation through a learned per-unit weight.

Gaps are given in days and divided by ``time_scale`` (default: one Julian
year) inside the cell. With their extra parameters at zero, both time-aware
cells reduce exactly to the plain LSTM; tests pin that identity.

``unroll``/``unroll_backward`` run a whole sequence with per-step caches, so
gradients are exact truncated-nowhere BPTT.
"""
from __future__ import annotations

import numpy as np

from .errors import ConfigurationError, StateError
from .diffcore import Layer, Param, _ensure_batched

#: seconds in a Julian year / seconds in a day
DEFAULT_TIME_SCALE = 365.25


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _orthogonal(rng: np.random.Generator, rows: int, cols: int, dtype=np.float64):
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return q[:rows, :cols].astype(dtype)


class LstmCell(Layer):
    """Vanilla LSTM step: gates (i, f, g, o), c' = f*c + i*g, h' = o*tanh(c')."""

    def __init__(self, input_dim: int, hidden_dim: int, rng: np.random.Generator | None = None,
                 time_scale: float = DEFAULT_TIME_SCALE, dtype=np.float64, name: str = "lstm"):
        if input_dim < 1 or hidden_dim < 1:
            raise ConfigurationError("lstm dims must be positive")
        if time_scale <= 0:
            raise ConfigurationError(f"time_scale must be > 0, got {time_scale}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        self.time_scale = time_scale
        H = hidden_dim
        scale = 1.0 / np.sqrt(input_dim)
        self.w_x = Param(f"{name}.w_x",
                         (rng.standard_normal((4 * H, input_dim)) * scale).astype(dtype))
        u = np.concatenate([_orthogonal(rng, H, H, dtype) for _ in range(4)], axis=0)
        self.w_h = Param(f"{name}.w_h", u)
        self.b = Param(f"{name}.b", np.zeros(4 * H, dtype=dtype))

    def params(self):
        return [self.w_x, self.w_h, self.b]

    # hooks the time-aware subclasses override
    def _adjust_carry(self, c, dt_scaled):
        return c, None

    def _adjust_carry_backward(self, dc_adj, adj_cache):
        return dc_adj

    def _gate_extra(self, dt_scaled):
        return 0.0

    def _gate_extra_backward(self, da, dt_scaled):
        pass

    def step(self, x, h, c, dt=0.0):
        """One recurrence step. Returns (h', c', cache)."""
        x, unb = _ensure_batched(x, 1)
        h, _ = _ensure_batched(h, 1)
        c, _ = _ensure_batched(c, 1)
        if x.shape[1] != self.input_dim:
            raise ConfigurationError(
                f"cell input has width {x.shape[1]}, expected {self.input_dim}")
        dt_scaled = np.asarray(dt, dtype=x.dtype) / self.time_scale
        dt_scaled = np.broadcast_to(np.atleast_1d(dt_scaled), (x.shape[0],))
        if np.any(dt_scaled < 0):
            raise ConfigurationError("negative inter-scan gap")

        c_in, adj_cache = self._adjust_carry(c, dt_scaled)
        a = x @ self.w_x.value.T + h @ self.w_h.value.T + self.b.value \
            + self._gate_extra(dt_scaled)
        H = self.hidden_dim
        i = _sigmoid(a[:, :H])
        f = _sigmoid(a[:, H:2 * H])
        g = np.tanh(a[:, 2 * H:3 * H])
        o = _sigmoid(a[:, 3 * H:])
        c_new = f * c_in + i * g
        tanh_c = np.tanh(c_new)
        h_new = o * tanh_c
        cache = (x, h, c_in, adj_cache, dt_scaled, i, f, g, o, tanh_c, unb)
        if unb:
            return h_new[0], c_new[0], cache
        return h_new, c_new, cache

    def step_backward(self, cache, dh, dc=None):
        """Adjoint of ``step``; accumulates parameter grads.

        Returns (dx, dh_prev, dc_prev) in the same batched/unbatched form the
        step consumed.
        """
        if cache is None:
            raise StateError("step_backward needs the cache from step")
        x, h, c_in, adj_cache, dt_scaled, i, f, g, o, tanh_c, unb = cache
        dh, _ = _ensure_batched(dh, 1)
        if dc is None:
            dc = np.zeros_like(dh)
        else:
            dc, _ = _ensure_batched(dc, 1)

        do = dh * tanh_c
        dc_total = dc + dh * o * (1.0 - tanh_c ** 2)
        df = dc_total * c_in
        dc_in = dc_total * f
        di = dc_total * g
        dg = dc_total * i

        da = np.concatenate([
            di * i * (1.0 - i),
            df * f * (1.0 - f),
            dg * (1.0 - g ** 2),
            do * o * (1.0 - o),
        ], axis=1)
        self.w_x.grad += da.T @ x
        self.w_h.grad += da.T @ h
        self.b.grad += da.sum(axis=0)
        self._gate_extra_backward(da, dt_scaled)

        dx = da @ self.w_x.value
        dh_prev = da @ self.w_h.value
        dc_prev = self._adjust_carry_backward(dc_in, adj_cache)
        if unb:
            return dx[0], dh_prev[0], dc_prev[0]
        return dx, dh_prev, dc_prev


class TalstmCell(LstmCell):
    """Time-aware LSTM: decays the short-term part of the carry state.

    c_short = tanh(W_d c + b_d); the adjusted carry is
    (c - c_short) + c_short / log(e + dt_scaled). A zero decay sub-network
    leaves the carry untouched.
    """

    def __init__(self, input_dim: int, hidden_dim: int, rng: np.random.Generator | None = None,
                 time_scale: float = DEFAULT_TIME_SCALE, dtype=np.float64, name: str = "talstm"):
        super().__init__(input_dim, hidden_dim, rng, time_scale, dtype, name)
        H = hidden_dim
        self.w_d = Param(f"{name}.w_d", np.zeros((H, H), dtype=dtype))
        self.b_d = Param(f"{name}.b_d", np.zeros(H, dtype=dtype))

    def params(self):
        return super().params() + [self.w_d, self.b_d]

    def _adjust_carry(self, c, dt_scaled):
        c_short = np.tanh(c @ self.w_d.value.T + self.b_d.value)
        decay = 1.0 / np.log(np.e + dt_scaled)
        c_adj = (c - c_short) + c_short * decay[:, None]
        return c_adj, (c, c_short, decay)

    def _adjust_carry_backward(self, dc_adj, adj_cache):
        c, c_short, decay = adj_cache
        dc = dc_adj.copy()
        dc_short = dc_adj * (decay[:, None] - 1.0)
        daux = dc_short * (1.0 - c_short ** 2)
        self.w_d.grad += daux.T @ c
        self.b_d.grad += daux.sum(axis=0)
        dc += daux @ self.w_d.value
        return dc


class TlstmCell(LstmCell):
    """Time-modulated LSTM: adds w_t * dt_scaled to all gate pre-activations."""

    def __init__(self, input_dim: int, hidden_dim: int, rng: np.random.Generator | None = None,
                 time_scale: float = DEFAULT_TIME_SCALE, dtype=np.float64, name: str = "tlstm"):
        super().__init__(input_dim, hidden_dim, rng, time_scale, dtype, name)
        self.w_t = Param(f"{name}.w_t", np.zeros(4 * hidden_dim, dtype=dtype))

    def params(self):
        return super().params() + [self.w_t]

    def _gate_extra(self, dt_scaled):
        return dt_scaled[:, None] * self.w_t.value

    def _gate_extra_backward(self, da, dt_scaled):
        self.w_t.grad += dt_scaled @ da


def unroll(cell: LstmCell, xs, dts=None, h0=None, c0=None):
    """Run ``cell`` over a sequence.

    ``xs``: (T, input_dim) or (T, B, input_dim). ``dts``: per-step gaps in
    days, (T,) or (T, B); the first entry is the gap since the previous scan
    and is conventionally 0. Returns (hs, (h_T, c_T), caches) where hs stacks
    every step's hidden state.
    """
    xs = np.asarray(xs)
    if xs.ndim == 2:
        batched = False
        T, B = xs.shape[0], 1
    elif xs.ndim == 3:
        batched = True
        T, B = xs.shape[0], xs.shape[1]
    else:
        raise ConfigurationError(f"unroll expects (T, D) or (T, B, D), got {xs.shape}")
    if T < 1:
        raise ConfigurationError("empty sequence")
    if dts is None:
        dts = np.zeros((T, B))
    else:
        dts = np.asarray(dts, dtype=np.float64)
        if dts.shape[0] != T:
            raise ConfigurationError(f"dts has {dts.shape[0]} steps, inputs have {T}")
        dts = dts.reshape(T, -1) * np.ones((T, B))
    H = cell.hidden_dim
    dtype = cell.w_x.value.dtype
    h = np.zeros((B, H), dtype=dtype) if h0 is None else np.array(h0, dtype=dtype).reshape(B, H)
    c = np.zeros((B, H), dtype=dtype) if c0 is None else np.array(c0, dtype=dtype).reshape(B, H)
    hs = np.empty((T, B, H), dtype=dtype)
    caches = []
    for t in range(T):
        x_t = xs[t] if batched else xs[t][None]
        h, c, cache = cell.step(x_t, h, c, dts[t])
        hs[t] = h
        caches.append(cache)
    if not batched:
        return hs[:, 0], (h[0], c[0]), caches
    return hs, (h, c), caches


def unroll_backward(cell: LstmCell, caches, dhs=None, dh_last=None, dc_last=None):
    """BPTT over cached steps. Accumulates cell parameter grads.

    ``dhs`` gives a gradient for every step's hidden output; ``dh_last`` /
    ``dc_last`` seed only the final state. Returns (dxs, dh0, dc0).
    """
    T = len(caches)
    if T == 0:
        raise StateError("nothing cached to backpropagate through")
    x0, h0, *_ = caches[0]
    B = x0.shape[0]
    H = cell.hidden_dim
    dtype = cell.w_x.value.dtype
    batched = dhs is not None and np.asarray(dhs).ndim == 3
    if dhs is None and dh_last is None:
        raise ConfigurationError("need dhs or dh_last")
    if dhs is not None:
        dhs = np.asarray(dhs)
        batched = dhs.ndim == 3
        dhs = dhs.reshape(T, B, H)
    if dh_last is not None:
        dh_last = np.asarray(dh_last)
        batched = batched or dh_last.ndim == 2
    dh = np.zeros((B, H), dtype=dtype)
    dc = np.zeros((B, H), dtype=dtype)
    if dh_last is not None:
        dh += dh_last.reshape(B, H)
    if dc_last is not None:
        dc += np.asarray(dc_last).reshape(B, H)
    dxs = np.empty((T, B, x0.shape[1]), dtype=dtype)
    for t in range(T - 1, -1, -1):
        if dhs is not None:
            dh = dh + dhs[t]
        dx, dh, dc = cell.step_backward(caches[t], dh, dc)
        dx, _ = _ensure_batched(dx, 1)
        dh, _ = _ensure_batched(dh, 1)
        dc, _ = _ensure_batched(dc, 1)
        dxs[t] = dx
    if not batched:
        return dxs[:, 0], dh[0], dc[0]
    return dxs, dh, dc
